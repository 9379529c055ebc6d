"""Numbered acceptance criteria, one test (or small group) per criterion.

Each test carries an ``acceptance`` marker; ``conftest.py`` prints a
PASS/FAIL line per criterion at the end of the run.
"""
import json
import shutil
import statistics
import time

import numpy as np
import pytest
import torch

from banet.boundary import boundary_mask, extract_boundary
from banet.cli import cmd_ensemble, cmd_evaluate, cmd_infer, cmd_preprocess, cmd_train
from banet.config import RunConfig
from banet.infer import WindowPlan, blend_weights, sliding_window_predict, window_origins
from banet.losses import (LossConfig, cross_entropy, deep_supervised_loss, ds_weights,
                          joint_scale_loss, soft_dice, to_one_hot)
from banet.metrics import dsc, hausdorff
from banet.model import BANet, ModelConfig, build_model, enhance, output_shapes
from banet.phantom import PhantomSpec, generate_cohort, write_dataset
from banet.preprocess import AugmentSpec, PreprocessConfig, normalize_intensity
from banet.train import TrainConfig, fit, lr_schedule
from banet.volume import LabelVolume, Volume, load_volume
from oracles import boundary_scan, ce_loop, dice_loop, dsc_sets, hausdorff_pairs

acceptance = pytest.mark.acceptance


class Timer:
    def __init__(self, limit_s):
        self.limit = limit_s

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed <= self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


# ---------------------------------------------------------------------------
# 1. architecture shapes
# ---------------------------------------------------------------------------

@acceptance(1, "architecture shape suite")
def test_01_architecture_shapes():
    with Timer(60):
        cfg = ModelConfig()
        assert cfg.widths == (32, 64, 128, 256, 320)
        with torch.device("meta"):
            meta = BANet(cfg)
            feats = meta.encode(torch.empty(2, 1, 112, 128, 128))
            out = meta(torch.empty(2, 1, 112, 128, 128))
        assert tuple(feats[-1].shape) == (2, 320, 7, 8, 8)
        assert [f.shape[1] for f in feats] == [32, 64, 128, 256, 320]
        strides = [8, 4, 2, 1]
        expected = [tuple(s // k for s in (112, 128, 128)) for k in strides]
        assert expected == output_shapes(cfg, (112, 128, 128))
        assert len(out.boundary_probs) == len(out.seg_probs) == 4
        assert [tuple(p.shape) for p in out.boundary_probs] == [(2, 2) + s for s in expected]
        assert [tuple(p.shape) for p in out.seg_probs] == [(2, 5) + s for s in expected]

        # one real full-size forward at batch 1
        model = build_model(cfg, 0)
        with torch.no_grad():
            real = model(torch.randn(1, 1, 112, 128, 128))
        assert [tuple(p.shape[2:]) for p in real.seg_probs] == expected
        assert all(torch.isfinite(p).all() for p in real.seg_probs + real.boundary_probs)


# ---------------------------------------------------------------------------
# 2. gradient check
# ---------------------------------------------------------------------------

@acceptance(2, "finite-difference gradient check")
def test_02_gradient_check():
    with Timer(300):
        cfg = ModelConfig(num_stages=3, base_filters=4)
        model = build_model(cfg, 0).double()
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.normal(size=(1, 1, 8, 16, 16)))
        shapes = output_shapes(cfg, (8, 16, 16))
        seg_t = [torch.tensor(rng.integers(0, 5, (1,) + s)) for s in shapes]
        bnd_t = [torch.tensor(rng.integers(0, 2, (1,) + s)) for s in shapes]

        # record the sign pattern of every LeakyReLU input during a forward pass
        signs = []
        for m in model.modules():
            if isinstance(m, torch.nn.LeakyReLU):
                m.register_forward_hook(lambda mod, inp, out: signs.append(inp[0] > 0))

        def loss():
            signs.clear()
            out = model(x)
            return deep_supervised_loss(out.seg_probs, out.boundary_probs, seg_t, bnd_t).total

        def central(flat, idx, h):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss().item()
                up_signs = list(signs)
                flat[idx] = orig - h
                down = loss().item()
                flat[idx] = orig
            crosses_kink = any(not torch.equal(a, b) for a, b in zip(up_signs, signs))
            return (up - down) / (2 * h), crosses_kink

        model.zero_grad()
        loss().backward()
        worst, probes, shrunk = 0.0, 0, 0
        for name, p in model.named_parameters():
            grad = p.grad.detach().clone().view(-1)
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(10, flat.numel()), replace=False):
                # start at h = 1e-4; a stencil that straddles a LeakyReLU kink is not a
                # valid central difference, so shrink it until no activation changes sign
                h = 1e-4
                numeric, crosses = central(flat, idx, h)
                while crosses and h > 1e-8:
                    h /= 10
                    numeric, crosses = central(flat, idx, h)
                assert not crosses, f"{name}[{idx}]: kink inside every stencil"
                shrunk += h < 1e-4
                analytic = grad[idx].item()
                # floor keeps parameters without influence (bias before a norm) well defined
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, rel)
                probes += 1
                assert rel <= 1e-3, f"{name}[{idx}]: analytic {analytic} vs numeric {numeric} (h={h})"
        print(f"{probes} probes, worst relative error {worst:.2e}, {shrunk} needed a step below 1e-4")


# ---------------------------------------------------------------------------
# 3. boundary enhancement
# ---------------------------------------------------------------------------

@acceptance(3, "boundary enhancement identity, doubling and ablation")
def test_03_enhancement():
    with Timer(60):
        f = torch.randn(2, 6, 4, 8, 8, dtype=torch.float64)
        assert torch.equal(enhance(f, torch.zeros(2, 1, 4, 8, 8, dtype=torch.float64)), f)
        assert torch.equal(enhance(f, torch.ones(2, 1, 4, 8, 8, dtype=torch.float64)), 2 * f)
        model = build_model(ModelConfig(num_stages=3, base_filters=4), 1)
        for seed in range(3):
            x = torch.randn(1, 1, 8, 16, 16, generator=torch.Generator().manual_seed(seed))
            with torch.no_grad():
                a = model(x, mode="infer")
                b = model(x, mode="infer", ablate_attention=True)
            assert not torch.equal(a, b)


# ---------------------------------------------------------------------------
# 4. loss oracles
# ---------------------------------------------------------------------------

def _rand_case(rng):
    c, v = int(rng.integers(2, 6)), int(rng.integers(2, 30))
    logits = rng.normal(size=(c, v))
    p = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    y = np.eye(c)[rng.integers(0, c, v)].T
    return p, y


@acceptance(4, "loss oracle suite")
def test_04_loss_oracles():
    with Timer(120):
        rng = np.random.default_rng(4)
        t = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
        for _ in range(100):
            p, y = _rand_case(rng)
            for classes in ("foreground", "all"):
                assert abs(float(soft_dice(t(p), t(y), 1e-5, classes)) - dice_loop(p, y, 1e-5, classes)) <= 1e-6
            for red in ("sum", "mean"):
                assert abs(float(cross_entropy(t(p), t(y), red)) - ce_loop(p, y, red)) <= 1e-6
            joint = float(joint_scale_loss(t(p), t(y)))
            assert abs(joint - (dice_loop(p, y, 1e-5) + ce_loop(p, y))) <= 1e-6

        # cross_entropy sum mode equals the two-term binary form at C = 2
        for _ in range(100):
            p, y = _rand_case(np.random.default_rng(rng.integers(1 << 30)))
            p2 = np.stack([1 - p[1], p[1]])
            y2 = np.stack([1 - y[1], y[1]])
            expected = -sum(yy * np.log(pp) + (1 - yy) * np.log(1 - pp) for pp, yy in zip(p2[1], y2[1]))
            assert abs(float(cross_entropy(t(p2), t(y2), "sum")) - expected) <= 1e-6

        # deep supervision recombination
        for _ in range(100):
            n = int(rng.integers(1, 4))
            seg, bnd, ys, yb = [], [], [], []
            for i in range(n):
                s = 2 ** (i + 1)
                seg.append(torch.softmax(t(rng.normal(size=(1, 3, s, s, s))), 1))
                bnd.append(torch.softmax(t(rng.normal(size=(1, 2, s, s, s))), 1))
                ys.append(torch.tensor(rng.integers(0, 3, (1, s, s, s))))
                yb.append(torch.tensor(rng.integers(0, 2, (1, s, s, s))))
            rep = deep_supervised_loss(seg, bnd, ys, yb)
            w = ds_weights(n + 1)
            manual = 0.0
            for wi, ps, pb, a, b in zip(w, seg, bnd, ys, yb):
                ps_f = ps[0].reshape(3, -1).numpy()
                pb_f = pb[0].reshape(2, -1).numpy()
                ya = to_one_hot(a, 3, torch.float64)[0].reshape(3, -1).numpy()
                yb_f = to_one_hot(b, 2, torch.float64)[0].reshape(2, -1).numpy()
                manual += wi * (dice_loop(ps_f, ya, 1e-5) + ce_loop(ps_f, ya)
                                + dice_loop(pb_f, yb_f, 1e-5) + ce_loop(pb_f, yb_f))
            assert abs(float(rep.total) - manual) <= 1e-6

        # hand value for two voxels, p = (0.8, 0.2), y = (1, 0)
        p = t([[0.2, 0.8], [0.8, 0.2]])
        y = t([[0.0, 1.0], [1.0, 0.0]])
        hand = float(joint_scale_loss(p, y, LossConfig(ce_reduction="sum")))
        assert round(hand, 5) == 0.64630


# ---------------------------------------------------------------------------
# 5. boundary extraction
# ---------------------------------------------------------------------------

@acceptance(5, "boundary extraction vs neighbour scan")
def test_05_boundary_extraction():
    with Timer(60):
        rng = np.random.default_rng(5)
        for k in range(100):
            if k % 2:
                vol = rng.integers(0, 5, (16, 16, 16))
            else:
                vol = np.kron(rng.integers(0, 5, (4, 4, 4)), np.ones((4, 4, 4), dtype=int))
            for conn in (6, 26):
                assert np.array_equal(boundary_mask(vol, conn), boundary_scan(vol, conn))
        cube = np.zeros((8, 8, 8), np.uint8)
        cube[2:5, 2:5, 2:5] = 1
        assert int(extract_boundary(LabelVolume(cube, (1, 1, 1), 5), 6).data.sum()) == 26


# ---------------------------------------------------------------------------
# 6. metrics
# ---------------------------------------------------------------------------

@acceptance(6, "DSC and Hausdorff vs brute-force oracles")
def test_06_metrics():
    with Timer(120):
        rng = np.random.default_rng(6)
        for _ in range(100):
            shape = tuple(int(s) for s in rng.integers(1, 21, 3))
            density = rng.uniform(0.02, 0.5)
            a = (rng.random(shape) < density).astype(np.uint8)
            b = (rng.random(shape) < density).astype(np.uint8)
            spacing = tuple(rng.uniform(0.5, 3.0, 3)) if rng.random() < 0.5 else (1.0, 1.0, 1.0)
            assert abs(dsc(a, b, 1) - dsc_sets(a, b)) <= 1e-9
            ref = hausdorff_pairs(a, b, spacing)
            got = hausdorff(a, b, 1, spacing)
            assert got == ref or abs(got - ref) <= 1e-9
        a = np.zeros((1, 5, 5), np.uint8)
        b = np.zeros((1, 5, 5), np.uint8)
        a[0, 0, 0] = 1
        b[0, 3, 4] = 1
        assert hausdorff(a, b, 1) == 5.0


# ---------------------------------------------------------------------------
# 7 and 8. deep-supervision weights and schedule
# ---------------------------------------------------------------------------

@acceptance(7, "deep-supervision weights")
def test_07_ds_weights():
    w = ds_weights(5)
    assert w == [1 / 15, 2 / 15, 4 / 15, 8 / 15]
    assert sum(w) == 1.0
    assert all(a < b for a, b in zip(w, w[1:]))


@acceptance(8, "polynomial learning-rate schedule")
def test_08_schedule():
    T = 1000
    assert lr_schedule(0, 0.01, T) == 0.01
    assert lr_schedule(T, 0.01, T) == 0.0
    assert abs(lr_schedule(T / 2, 0.01, T) - 0.01 * 0.5 ** 0.9) <= 1e-12


# ---------------------------------------------------------------------------
# 9. sliding window
# ---------------------------------------------------------------------------

@acceptance(9, "sliding-window inference")
def test_09_sliding_window():
    with Timer(180):
        model = build_model(ModelConfig(num_stages=3, base_filters=4), 9).eval()
        rng = np.random.default_rng(9)
        data = rng.normal(size=(8, 16, 16)).astype(np.float32)
        out = sliding_window_predict(model, Volume(data, (1, 1, 1)), WindowPlan((8, 16, 16)))
        with torch.no_grad():
            direct = model(torch.from_numpy(data)[None, None], mode="infer")[0].numpy()
        assert np.array_equal(out.data, direct)

        for shape, blend in [((20, 30, 17), "gaussian"), ((9, 40, 16), "uniform")]:
            plan = WindowPlan((8, 16, 16), blend=blend)
            cover = np.zeros(shape)
            for org in window_origins(shape, plan):
                cover[tuple(slice(o, o + p) for o, p in zip(org, plan.patch_shape))] += blend_weights(plan)
            assert np.all(cover > 0)

        # constant input: every window sees the same patch prediction f, so under uniform
        # blending each voxel must equal the mean of f over the windows covering it
        patch = (8, 16, 16)
        plan = WindowPlan(patch, blend="uniform")
        shape = (20, 24, 16)
        const = np.full(shape, 0.5, np.float32)
        got = sliding_window_predict(model, Volume(const, (1, 1, 1)), plan).data
        with torch.no_grad():
            f = model(torch.full((1, 1) + patch, 0.5), mode="infer")[0].double().numpy()
        origins = window_origins(shape, plan)
        for idx in np.ndindex(*shape):
            rel = [tuple(v - o for v, o in zip(idx, org)) for org in origins
                   if all(o <= v < o + p for v, o, p in zip(idx, org, patch))]
            ref = np.mean([f[(slice(None),) + r] for r in rel], axis=0)
            assert np.allclose(got[(slice(None),) + idx], ref, atol=1e-6)


# ---------------------------------------------------------------------------
# 10. phantom end-to-end
# ---------------------------------------------------------------------------

E2E_CONFIG = {
    "preprocess": {"patch_shape": [32, 32, 32]},
    "augment": {"seed": 0},
    "model": {"num_stages": 4, "base_filters": 8},
    "train": {"max_epochs": 10, "iterations_per_epoch": 50, "batch_size": 2, "lr0": 0.02,
              "momentum": 0.9, "num_folds": 4, "val_every": 10},
}
E2E_SEEDS = (0, 1, 2)


@acceptance(10, "phantom end-to-end DSC")
@pytest.mark.slow
def test_10_phantom_end_to_end(tmp_path, monkeypatch):
    monkeypatch.setenv("BANET_CACHE_ROOT", str(tmp_path / "cache"))
    torch.set_num_threads(1)
    with Timer(20 * 60):
        cfg = RunConfig.from_dict(E2E_CONFIG)
        dataset = write_dataset(generate_cohort(8, PhantomSpec(), seed=100), tmp_path / "dataset")
        cmd_preprocess(cfg, dataset)
        scores = []
        for seed in E2E_SEEDS:
            seeded = RunConfig.from_dict({**E2E_CONFIG, "train": {**E2E_CONFIG["train"], "seed": seed}})
            run_dir = tmp_path / f"run{seed}"
            cmd_train(seeded, 0, dataset, run_dir)
            held_out = json.loads((run_dir / "folds.json").read_text())["assignment"]
            held_out = sorted(c for c, f in held_out.items() if f == 0)
            assert len(held_out) == 2
            test_dir = tmp_path / f"test{seed}"
            for sub in ("images", "labels"):
                (test_dir / sub).mkdir(parents=True)
                for cid in held_out:
                    for suffix in (".raw", ".raw.json"):
                        shutil.copy(dataset / sub / f"{cid}{suffix}", test_dir / sub)
            pred = cmd_infer(run_dir / "checkpoints" / "last.pt", test_dir, tmp_path / f"pred{seed}")
            summary = cmd_evaluate(pred, test_dir, tmp_path / f"eval{seed}")
            scores.append(summary["average_dsc"])
        median = statistics.median(scores)
        print(f"held-out mean foreground DSC per seed {scores}, median {median:.4f}")
        assert median >= 0.80, f"median DSC {median:.4f} < 0.80 (per seed {scores})"


# ---------------------------------------------------------------------------
# 11. ensemble
# ---------------------------------------------------------------------------

TINY = {
    "preprocess": {"patch_shape": [16, 16, 16]},
    "model": {"num_stages": 3, "base_filters": 4},
    "train": {"max_epochs": 1, "iterations_per_epoch": 2, "batch_size": 1, "num_folds": 2},
    "phantom": {"shape": [32, 32, 32], "kidney_axes_lo": [5, 6, 5], "kidney_axes_hi": [6, 8, 6],
                "tumor_radius": [2.5, 3.5]},
}


@acceptance(11, "ensemble self-consistency and commutativity")
def test_11_ensemble(tmp_path, monkeypatch):
    monkeypatch.setenv("BANET_CACHE_ROOT", str(tmp_path / "cache"))
    cfg = RunConfig.from_dict(TINY)
    dataset = write_dataset(generate_cohort(2, cfg.phantom, seed=1), tmp_path / "ds")
    cmd_preprocess(cfg, dataset)
    ckpts = []
    for seed in (0, 1):
        seeded = RunConfig.from_dict({**TINY, "train": {**TINY["train"], "seed": seed}})
        ckpts.append(cmd_train(seeded, 0, dataset, tmp_path / f"run{seed}"))
    a = cmd_infer(ckpts[0], dataset, tmp_path / "a", save_probabilities=True)
    b = cmd_infer(ckpts[1], dataset, tmp_path / "b", save_probabilities=True)
    aa = cmd_ensemble(a, a, tmp_path / "aa")
    ab = cmd_ensemble(a, b, tmp_path / "ab")
    ba = cmd_ensemble(b, a, tmp_path / "ba")
    for path in sorted((a / "labels").glob("*.raw")):
        single = load_volume(path, num_classes=5)
        assert load_volume(aa / "labels" / path.name, num_classes=5) == single
        assert load_volume(aa / "probabilities" / path.name) == load_volume(a / "probabilities" / path.name)
        assert load_volume(ab / "labels" / path.name, num_classes=5) == \
            load_volume(ba / "labels" / path.name, num_classes=5)
        assert load_volume(ab / "probabilities" / path.name) == load_volume(ba / "probabilities" / path.name)


# ---------------------------------------------------------------------------
# 12. determinism
# ---------------------------------------------------------------------------

@acceptance(12, "deterministic first five training steps")
def test_12_determinism(tmp_path):
    torch.use_deterministic_algorithms(True)
    try:
        raw = generate_cohort(3, PhantomSpec(shape=(32, 32, 32), kidney_axes_lo=(5, 6, 5),
                                             kidney_axes_hi=(6, 8, 6), tumor_radius=(2.5, 3.5)), seed=2)
        pre = PreprocessConfig(patch_shape=(16, 16, 16), norm_mean=1150.0, norm_std=100.0)
        cases = [(i, normalize_intensity(im, pre), lb) for i, im, lb in raw]
        traces = []
        for run in ("a", "b"):
            fit(cases, [], tmp_path / run, TrainConfig(max_epochs=1, iterations_per_epoch=5, seed=11),
                ModelConfig(num_stages=3, base_filters=4), LossConfig(), pre, AugmentSpec.training_default(11))
            lines = (tmp_path / run / "log.csv").read_text().splitlines()[1:]
            traces.append([line.split(",")[3] for line in lines])
        assert len(traces[0]) == 5
        assert traces[0] == traces[1]
    finally:
        torch.use_deterministic_algorithms(False)

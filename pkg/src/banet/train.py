"""
SGD training with polynomial learning-rate decay and deep supervision of
both decoders, plus k-fold splitting, checkpointing and CSV logging.

Run directory layout::

    run_dir/
      config.json          full configuration of the run
      log.csv              one row per optimisation step
      sampler_audit.csv    case ids drawn for every step
      checkpoints/last.pt  end of the most recent epoch
      checkpoints/best.pt  best mean foreground validation DSC
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .boundary import build_boundary_pyramid, build_label_pyramid
from .infer import WindowPlan, postprocess_components, sliding_window_predict
from .losses import LossConfig, LossReport, deep_supervised_loss
from .metrics import dsc
from .model import BANet, ModelConfig, build_model
from .preprocess import AugmentSpec, PreprocessConfig, augment, sample_patch
from .volume import LabelVolume, Volume, argmax_labels

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    max_epochs: int = 1000
    iterations_per_epoch: int = 250
    batch_size: int = 2
    momentum: float = 0.99
    nesterov: bool = False
    weight_decay: float = 3e-5
    grad_clip: float | None = 12.0
    poly_exponent: float = 0.9
    seed: int = 0
    fold_index: int = 0
    num_folds: int = 4
    val_every: int = 1
    boundary_connectivity: int = 6

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.max_epochs < 1 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, iterations_per_epoch and batch_size must be >= 1")
        if not 0 <= self.fold_index < self.num_folds:
            raise ValueError(f"fold_index {self.fold_index} outside [0, {self.num_folds})")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(t: float, lr0: float = 0.01, max_epochs: int = 1000, exponent: float = 0.9) -> float:
    """lr0 * (1 - t / T) ** exponent for epoch t in [0, T]."""
    if t < 0 or t > max_epochs:
        raise ValueError(f"epoch {t} outside [0, {max_epochs}]")
    return lr0 * (1.0 - t / max_epochs) ** exponent


class FoldSplit:
    """Assignment of case ids to ``k`` cross-validation folds."""

    def __init__(self, assignment: dict[str, int], k: int):
        self.assignment = dict(assignment)
        self.k = k

    def val_ids(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignment.items() if f != fold)

    def sizes(self) -> list[int]:
        return [sum(1 for f in self.assignment.values() if f == k) for k in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "assignment": self.assignment}


def make_folds(case_ids: Sequence[str], k: int = 4, seed: int = 0) -> FoldSplit:
    """Seeded shuffle followed by round-robin assignment."""
    ids = sorted(set(case_ids))
    if len(ids) != len(case_ids):
        raise ValueError("duplicate case ids")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit({ids[j]: pos % k for pos, j in enumerate(order)}, k)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# batches and steps
# ---------------------------------------------------------------------------

def make_batch(cases: Sequence[tuple[str, Volume, LabelVolume]], pre_cfg: PreprocessConfig,
               aug: AugmentSpec | None, num_scales: int, seed: int, batch_size: int,
               connectivity: int = 6, dtype=torch.float32) -> dict:
    """Sample, augment and build target pyramids for one batch."""
    rng = np.random.default_rng(seed)
    images, seg_levels, bnd_levels, ids = [], [], [], []
    for b in range(batch_size):
        case_id, img, lab = cases[int(rng.integers(len(cases)))]
        sub = derive_seed(seed, b)
        pimg, plab = sample_patch(img, lab, pre_cfg, sub)
        if aug is not None:
            pimg, plab = augment(pimg, plab, aug, seed=derive_seed(sub, 1))
        images.append(pimg.data)
        seg_levels.append([lv.data for lv in build_label_pyramid(plab, num_scales)])
        bnd_levels.append([lv.data for lv in build_boundary_pyramid(plab, num_scales, connectivity)])
        ids.append(case_id)
    image = torch.from_numpy(np.stack(images)[:, None].astype(np.float32)).to(dtype)
    seg = [torch.from_numpy(np.stack([s[i] for s in seg_levels]).astype(np.int64)) for i in range(num_scales)]
    bnd = [torch.from_numpy(np.stack([s[i] for s in bnd_levels]).astype(np.int64)) for i in range(num_scales)]
    return {"image": image, "seg": seg, "boundary": bnd, "case_ids": ids}


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                           nesterov=cfg.nesterov, weight_decay=cfg.weight_decay)


def compute_loss(model: BANet, batch: dict, loss_cfg: LossConfig) -> LossReport:
    out = model(batch["image"], mode="train")
    return deep_supervised_loss(out.seg_probs, out.boundary_probs, batch["seg"],
                                batch["boundary"], loss_cfg)


def train_step(model: BANet, optimizer: torch.optim.Optimizer, batch: dict, loss_cfg: LossConfig,
               lr: float | None = None, grad_clip: float | None = 12.0,
               dump_dir: os.PathLike | None = None) -> LossReport:
    """One SGD update against the deep-supervised loss. Mutates ``model``."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    report = compute_loss(model, batch, loss_cfg)
    if not torch.isfinite(report.total):
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / "nonfinite_state.pt"
            torch.save({"state_dict": model.state_dict(), "batch": batch,
                        "seg": report.seg, "boundary": report.boundary}, dump)
        raise NonFiniteLossError(f"loss is {float(report.total.detach())} (seg {report.seg}, "
                                 f"boundary {report.boundary}); state dumped to {dump}")
    report.total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    report.total = report.total.detach()
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: os.PathLike, model: BANet, config: dict, epoch: int,
                    optimizer=None, best_metric: float | None = None) -> None:
    config = dict(config, model=model.config.to_dict())
    payload = {
        "state_dict": model.state_dict(),
        "config": config,
        "config_hash": config_hash(config),
        "epoch": epoch,
        "best_metric": best_metric,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    tmp = Path(path).with_suffix(".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: os.PathLike) -> tuple[BANet, dict]:
    """Rebuild the model stored at ``path``; refuses on a config hash mismatch."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if config_hash(payload["config"]) != payload.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch, refusing to load")
    model = BANet(ModelConfig(**payload["config"]["model"]))
    model.load_state_dict(payload["state_dict"])
    dtype = next(iter(payload["state_dict"].values())).dtype
    return model.to(dtype), payload


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def validate(model: BANet, cases, patch_shape, num_classes: int) -> dict[int, float]:
    """Mean DSC per foreground class over ``cases`` after postprocessing."""
    plan = WindowPlan(patch_shape)
    scores = {c: [] for c in range(1, num_classes)}
    for _, img, lab in cases:
        pred = postprocess_components(argmax_labels(sliding_window_predict(model, img, plan)))
        for c in scores:
            scores[c].append(dsc(pred, lab, c))
    return {c: float(np.mean(v)) for c, v in scores.items()}


def _log_fields(num_scales: int, num_classes: int) -> list[str]:
    fields = ["epoch", "step", "lr", "loss"]
    fields += [f"seg_{i}" for i in range(1, num_scales + 1)]
    fields += [f"bnd_{i}" for i in range(1, num_scales + 1)]
    fields += [f"val_dsc_{c}" for c in range(1, num_classes)] + ["val_mean_dsc"]
    return fields


def fit(train_cases, val_cases, run_dir: os.PathLike, cfg: TrainConfig,
        model_cfg: ModelConfig, loss_cfg: LossConfig, pre_cfg: PreprocessConfig,
        aug: AugmentSpec | None = None, resume: bool = False,
        extra_config: dict | None = None) -> Path:
    """Train for ``cfg.max_epochs`` epochs of ``cfg.iterations_per_epoch`` steps.

    ``train_cases`` and ``val_cases`` are lists of (case_id, normalised
    image, labels). Returns the path of the best checkpoint.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    model_cfg.check_patch(pre_cfg.patch_shape)
    train_ids = {c[0] for c in train_cases}
    val_ids = {c[0] for c in val_cases}
    if train_ids & val_ids:
        raise ValueError(f"cases in both train and validation: {sorted(train_ids & val_ids)}")

    config = {"train": cfg.to_dict(), "loss": asdict(loss_cfg), "preprocess": pre_cfg.to_dict(),
              "augment": aug.to_dict() if aug else None, **(extra_config or {})}
    (run_dir / "config.json").write_text(json.dumps(dict(config, model=model_cfg.to_dict()), indent=2))

    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg, cfg.seed)
    optimizer = make_optimizer(model, cfg)
    start_epoch, best = 0, -math.inf
    last_path, best_path = ckpt_dir / "last.pt", ckpt_dir / "best.pt"
    if resume and last_path.is_file():
        model, payload = load_checkpoint(last_path)
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"]
        best = payload["best_metric"] if payload["best_metric"] is not None else -math.inf
        log.info("resumed from %s at epoch %d", last_path, start_epoch)

    num_scales = model_cfg.num_stages - 1
    fields = _log_fields(num_scales, model_cfg.num_classes)
    log_path = run_dir / "log.csv"
    audit_path = run_dir / "sampler_audit.csv"
    new_log = not (resume and log_path.is_file())
    with open(log_path, "w" if new_log else "a", newline="") as lf, \
            open(audit_path, "w" if new_log else "a", newline="") as af:
        writer = csv.DictWriter(lf, fieldnames=fields)
        audit = csv.writer(af)
        if new_log:
            writer.writeheader()
            audit.writerow(["epoch", "step", "case_ids"])
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = lr_schedule(epoch, cfg.lr0, cfg.max_epochs, cfg.poly_exponent)
            rows = []
            for step in range(cfg.iterations_per_epoch):
                batch = make_batch(train_cases, pre_cfg, aug, num_scales,
                                   derive_seed(cfg.seed, epoch, step), cfg.batch_size,
                                   cfg.boundary_connectivity)
                if set(batch["case_ids"]) & val_ids:
                    raise RuntimeError("validation case drawn by the training sampler")
                audit.writerow([epoch, step, ";".join(batch["case_ids"])])
                report = train_step(model, optimizer, batch, loss_cfg, lr=lr,
                                    grad_clip=cfg.grad_clip, dump_dir=run_dir)
                rows.append({"epoch": epoch, "step": step, "lr": lr, **report.row()})

            last_epoch = epoch + 1 == cfg.max_epochs
            if val_cases and ((epoch + 1) % cfg.val_every == 0 or last_epoch):
                scores = validate(model, val_cases, pre_cfg.patch_shape, model_cfg.num_classes)
                mean = float(np.mean(list(scores.values())))
                rows[-1].update({f"val_dsc_{c}": v for c, v in scores.items()})
                rows[-1]["val_mean_dsc"] = mean
                if mean > best:
                    best = mean
                    save_checkpoint(best_path, model, config, epoch + 1, best_metric=best)
                log.info("epoch %d  loss %.4f  val dsc %.4f", epoch, rows[-1]["loss"], mean)
            writer.writerows(rows)
            lf.flush()
            af.flush()
            save_checkpoint(last_path, model, config, epoch + 1, optimizer, best_metric=best)
            if not val_cases:
                save_checkpoint(best_path, model, config, epoch + 1)
    return best_path if best_path.is_file() else last_path

"""
Command line entry point::

    banet phantom    --out DIR [--n 8]
    banet preprocess --dataset DIR
    banet train      --dataset DIR --run-dir DIR [--fold K] [--resume]
    banet infer      --checkpoint FILE --input DIR --output DIR [--no-postproc] [--save-probs]
    banet evaluate   --pred DIR --gt DIR --out DIR [--units voxel|mm]
    banet ensemble   --probs-a DIR --probs-b DIR --output DIR [--no-postproc]

Every command accepts ``--config FILE`` and ``--seed N``. Flags override the
config file, which overrides built-in defaults. Failures exit non-zero and
print a JSON object with ``error`` and ``message`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, cache_root, load_config, save_config
from .infer import WindowPlan, ensemble_average, postprocess_components, sliding_window_predict
from .metrics import CLASS_NAMES, aggregate, evaluate_case
from .phantom import generate_cohort, write_dataset
from .preprocess import PreprocessConfig, compute_norm_stats, normalize_intensity, resample, resample_array
from .train import fit, load_checkpoint, make_folds
from .volume import (NIFTI_SUFFIXES, RAW_SUFFIX, LabelVolume, ProbabilityVolume, Volume,
                     argmax_labels, load_volume, save_volume)

log = logging.getLogger("banet")


class DatasetLayoutError(ValueError):
    pass


def _case_id(path: Path) -> str | None:
    name = path.name
    for ext in (RAW_SUFFIX,) + NIFTI_SUFFIXES:
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return None


def list_cases(directory: Path) -> dict[str, Path]:
    """Map case id to volume file for every supported volume in ``directory``."""
    if not directory.is_dir():
        raise DatasetLayoutError(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        cid = _case_id(p)
        if cid is not None and p.is_file():
            if cid in out:
                raise DatasetLayoutError(f"case {cid} present in more than one format")
            out[cid] = p
    return out


def _sub(directory: Path, name: str) -> Path:
    """``directory/name`` when that exists, else ``directory`` itself."""
    directory = Path(directory)
    return directory / name if (directory / name).is_dir() else directory


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

@dataclass
class PreprocessResult:
    cache_dir: Path
    hit: bool
    cases: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def preprocess_hash(cfg: RunConfig, dataset_dir: Path) -> str:
    pre = cfg.preprocess.to_dict()
    # patch shape and sampling only matter for training
    pre.pop("patch_shape")
    pre.pop("foreground_prob")
    blob = json.dumps({"preprocess": pre, "dataset": str(Path(dataset_dir).resolve())}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def cache_dir_for(cfg: RunConfig, dataset_dir: Path) -> Path:
    dataset_dir = Path(dataset_dir)
    return cache_root() / f"{dataset_dir.resolve().name}-{preprocess_hash(cfg, dataset_dir)[:16]}"


def cmd_preprocess(cfg: RunConfig, dataset_dir) -> PreprocessResult:
    """Resample and normalise every case of ``dataset_dir`` into the cache."""
    dataset_dir = Path(dataset_dir)
    images_dir, labels_dir = dataset_dir / "images", dataset_dir / "labels"
    if not images_dir.is_dir() or not labels_dir.is_dir():
        raise DatasetLayoutError(f"{dataset_dir} must contain images/ and labels/")
    digest = preprocess_hash(cfg, dataset_dir)
    out = cache_dir_for(cfg, dataset_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("hash") == digest:
            log.info("cache hit: %s", out)
            return PreprocessResult(out, True, manifest["cases"], manifest["errors"])

    images, labels = list_cases(images_dir), list_cases(labels_dir)
    errors = {cid: "no label file" for cid in images if cid not in labels}
    pre = cfg.preprocess
    loaded = {}
    for cid in images:
        if cid in errors:
            continue
        try:
            img = load_volume(images[cid])
            lab = load_volume(labels[cid], num_classes=cfg.model.num_classes)
            if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
                raise ValueError("unexpected volume kinds")
            if img.shape != lab.shape:
                raise ValueError(f"image {img.shape} vs labels {lab.shape}")
            loaded[cid] = (resample(img, pre.target_spacing), resample(lab, pre.target_spacing),
                           img.spacing, img.shape)
        except Exception as exc:  # reported per case; the run continues
            errors[cid] = f"{type(exc).__name__}: {exc}"
            log.warning("skipping %s: %s", cid, exc)
    if not loaded:
        raise DatasetLayoutError(f"no readable cases in {dataset_dir}")

    if pre.per_volume_norm:
        mean = std = None
    elif pre.norm_mean is not None and pre.norm_std is not None:
        mean, std = pre.norm_mean, pre.norm_std
    else:
        mean, std = compute_norm_stats([v[0] for v in loaded.values()],
                                       [v[1] for v in loaded.values()], pre)
    norm_cfg = dataclasses.replace(pre, norm_mean=mean, norm_std=std)

    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    originals = {}
    for cid, (img, lab, spacing, shape) in loaded.items():
        save_volume(normalize_intensity(img, norm_cfg), out / "images" / f"{cid}{RAW_SUFFIX}")
        save_volume(lab, out / "labels" / f"{cid}{RAW_SUFFIX}")
        originals[cid] = {"spacing": list(spacing), "shape": list(shape)}
    manifest = {"hash": digest, "preprocess": norm_cfg.to_dict(), "cases": sorted(loaded),
                "errors": errors, "originals": originals, "dataset": str(dataset_dir.resolve())}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return PreprocessResult(out, False, sorted(loaded), errors)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def load_cache(cache_dir: Path, num_classes: int):
    manifest = json.loads((cache_dir / "manifest.json").read_text())
    cases = []
    for cid in manifest["cases"]:
        img = load_volume(cache_dir / "images" / f"{cid}{RAW_SUFFIX}")
        lab = load_volume(cache_dir / "labels" / f"{cid}{RAW_SUFFIX}", num_classes=num_classes)
        cases.append((cid, img, lab))
    return manifest, cases


def cmd_train(cfg: RunConfig, fold: int, dataset_dir=None, run_dir=None, resume=False) -> Path:
    dataset_dir = dataset_dir or cfg.dataset_dir
    run_dir = run_dir or cfg.run_dir
    if not dataset_dir or not run_dir:
        raise ConfigError("dataset_dir and run_dir are required")
    dataset_dir, run_dir = Path(dataset_dir), Path(run_dir)
    cache = cache_dir_for(cfg, dataset_dir)
    if not (cache / "manifest.json").is_file():
        raise FileNotFoundError(f"no preprocessed cache at {cache}; run `banet preprocess` first")
    manifest, cases = load_cache(cache, cfg.model.num_classes)
    train_cfg = dataclasses.replace(cfg.train, fold_index=fold)
    split = make_folds([c[0] for c in cases], train_cfg.num_folds, train_cfg.seed)
    val_ids = set(split.val_ids(fold))
    train_cases = [c for c in cases if c[0] not in val_ids]
    val_cases = [c for c in cases if c[0] in val_ids]
    pre = PreprocessConfig(**manifest["preprocess"])
    pre.patch_shape = cfg.preprocess.patch_shape
    pre.foreground_prob = cfg.preprocess.foreground_prob
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "run_config.json")
    (run_dir / "folds.json").write_text(json.dumps(split.to_dict(), indent=2))
    extra = {"infer": cfg.to_dict()["infer"], "folds": split.to_dict(), "fold": fold,
             "schema_version": cfg.schema_version}
    return fit(train_cases, val_cases, run_dir, train_cfg, cfg.model, cfg.loss, pre,
               cfg.augment, resume=resume, extra_config=extra)


# ---------------------------------------------------------------------------
# infer / ensemble
# ---------------------------------------------------------------------------

def _restore_shape(probs: np.ndarray, shape) -> np.ndarray:
    if probs.shape[1:] == tuple(shape):
        return probs
    out = np.stack([resample_array(ch, shape, 1) for ch in probs])
    out = np.clip(out, 0, None)
    return (out / out.sum(axis=0, keepdims=True)).astype(np.float32)


def _finish(probs: ProbabilityVolume, postprocess: bool, policy="largest_per_class",
            connectivity=26) -> LabelVolume:
    labels = argmax_labels(probs)
    if postprocess:
        labels = postprocess_components(labels, policy, connectivity)
    return labels


def cmd_infer(checkpoint, input_dir, output_dir, postprocess=True, save_probabilities=False) -> Path:
    """Predict every image in ``input_dir`` (or its ``images/`` subdir).

    Writes ``output_dir/labels/<id>.raw`` and, when requested,
    ``output_dir/probabilities/<id>.raw``.
    """
    model, payload = load_checkpoint(checkpoint)
    config = payload["config"]
    pre = PreprocessConfig(**config["preprocess"])
    infer_cfg = config.get("infer") or {}
    plan = WindowPlan(pre.patch_shape, infer_cfg.get("step_fraction", 0.5),
                      infer_cfg.get("blend", "gaussian"), infer_cfg.get("sigma_scale", 1 / 8))
    policy = infer_cfg.get("postprocess_policy", "largest_per_class")
    connectivity = infer_cfg.get("postprocess_connectivity", 26)
    output_dir = Path(output_dir)
    (output_dir / "labels").mkdir(parents=True, exist_ok=True)
    if save_probabilities:
        (output_dir / "probabilities").mkdir(parents=True, exist_ok=True)
    cases = list_cases(_sub(Path(input_dir), "images"))
    if not cases:
        raise DatasetLayoutError(f"no volumes found in {input_dir}")
    for cid, path in cases.items():
        img = load_volume(path)
        if not isinstance(img, Volume):
            raise DatasetLayoutError(f"{path.name} is not an intensity volume")
        x = normalize_intensity(resample(img, pre.target_spacing), pre)
        probs = sliding_window_predict(model, x, plan)
        probs = ProbabilityVolume(_restore_shape(probs.data, img.shape), img.spacing)
        if save_probabilities:
            save_volume(probs, output_dir / "probabilities" / f"{cid}{RAW_SUFFIX}")
        labels = _finish(probs, postprocess, policy, connectivity)
        save_volume(labels, output_dir / "labels" / f"{cid}{RAW_SUFFIX}")
    return output_dir


def cmd_ensemble(probs_a, probs_b, output_dir, postprocess=True) -> Path:
    dir_a, dir_b = _sub(Path(probs_a), "probabilities"), _sub(Path(probs_b), "probabilities")
    cases_a, cases_b = list_cases(dir_a), list_cases(dir_b)
    if set(cases_a) != set(cases_b):
        missing = sorted(set(cases_a) ^ set(cases_b))
        raise DatasetLayoutError(f"probability files missing for cases: {missing}")
    if not cases_a:
        raise DatasetLayoutError(f"no probability files in {dir_a}")
    output_dir = Path(output_dir)
    (output_dir / "labels").mkdir(parents=True, exist_ok=True)
    (output_dir / "probabilities").mkdir(parents=True, exist_ok=True)
    for cid in cases_a:
        pa, pb = load_volume(cases_a[cid]), load_volume(cases_b[cid])
        if not isinstance(pa, ProbabilityVolume) or not isinstance(pb, ProbabilityVolume):
            raise DatasetLayoutError(f"{cid}: expected probability volumes")
        merged = ensemble_average(pa, pb)
        save_volume(merged, output_dir / "probabilities" / f"{cid}{RAW_SUFFIX}")
        save_volume(_finish(merged, postprocess), output_dir / "labels" / f"{cid}{RAW_SUFFIX}")
    return output_dir


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(pred_dir, gt_dir, out_dir, units="voxel", num_classes=5) -> dict:
    """Write ``metrics.csv`` (one row per case) and ``summary.json``."""
    if units not in ("voxel", "mm"):
        raise ValueError("units must be 'voxel' or 'mm'")
    preds = list_cases(_sub(Path(pred_dir), "labels"))
    gts = list_cases(_sub(Path(gt_dir), "labels"))
    if set(preds) != set(gts):
        raise DatasetLayoutError(
            f"unmatched case ids: only in predictions {sorted(set(preds) - set(gts))}, "
            f"only in ground truth {sorted(set(gts) - set(preds))}")
    rows = []
    for cid in sorted(preds):
        pred = load_volume(preds[cid], num_classes=num_classes)
        gt = load_volume(gts[cid], num_classes=num_classes)
        spacing = gt.spacing if units == "mm" else (1.0, 1.0, 1.0)
        rows.append({"case_id": cid, **evaluate_case(pred, gt, spacing,
                                                     classes=range(1, num_classes)).row()})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary = aggregate([{k: v for k, v in r.items() if k != "case_id"} for r in rows])
    summary["units"] = units
    summary["classes"] = {str(c): CLASS_NAMES.get(c, f"class{c}") for c in range(1, num_classes)}
    (out_dir / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2))
    return summary


def _json_safe(d):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="override train.seed / phantom seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="banet", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--format", choices=["raw", "nifti"], default="raw")

    p = sub.add_parser("preprocess", parents=[common], help="resample and normalise into the cache")
    p.add_argument("--dataset", type=Path)

    p = sub.add_parser("train", parents=[common], help="train one cross-validation fold")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("infer", parents=[common], help="predict whole volumes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--no-postproc", action="store_true")
    p.add_argument("--save-probs", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="DSC and Hausdorff per case")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--units", choices=["voxel", "mm"], default="voxel")

    p = sub.add_parser("ensemble", parents=[common], help="average two probability sets")
    p.add_argument("--probs-a", type=Path, required=True)
    p.add_argument("--probs-b", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--no-postproc", action="store_true")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["train"] = {"seed": args.seed}
        overrides["phantom"] = {"seed": args.seed}
    return load_config(args.config, overrides)


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = _config_from_args(args)
    if args.command == "phantom":
        ext = RAW_SUFFIX if args.format == "raw" else ".nii.gz"
        cases = generate_cohort(args.n, cfg.phantom, cfg.phantom.seed)
        return {"dataset": str(write_dataset(cases, args.out, ext)), "cases": [c[0] for c in cases]}
    if args.command == "preprocess":
        res = cmd_preprocess(cfg, args.dataset or cfg.dataset_dir)
        return {"cache_dir": str(res.cache_dir), "hit": res.hit, "cases": res.cases, "errors": res.errors}
    if args.command == "train":
        ckpt = cmd_train(cfg, args.fold, args.dataset, args.run_dir, args.resume)
        return {"checkpoint": str(ckpt)}
    if args.command == "infer":
        out = cmd_infer(args.checkpoint, args.input, args.output, not args.no_postproc, args.save_probs)
        return {"output": str(out)}
    if args.command == "evaluate":
        return _json_safe(cmd_evaluate(args.pred, args.gt, args.out, args.units, cfg.model.num_classes))
    if args.command == "ensemble":
        return {"output": str(cmd_ensemble(args.probs_a, args.probs_b, args.output, not args.no_postproc))}
    raise AssertionError(args.command)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

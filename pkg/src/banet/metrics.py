"""Dice similarity and Hausdorff distance, per case and aggregated."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .boundary import boundary_mask

CLASS_NAMES = {1: "kidney", 2: "tumor", 3: "artery", 4: "vein"}
INF = math.inf


def _masks(pred, gt, class_id):
    p = np.asarray(getattr(pred, "data", pred)) == class_id
    g = np.asarray(getattr(gt, "data", gt)) == class_id
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return p, g


def dsc(pred, gt, class_id: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _masks(pred, gt, class_id)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distances from every ``src`` voxel to the nearest ``dst`` voxel."""
    # exact Euclidean transform of the complement gives distance to dst
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def hausdorff(pred, gt, class_id: int, spacing=(1.0, 1.0, 1.0), percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance between the 6-connected boundary voxel
    sets of ``pred == class_id`` and ``gt == class_id``.

    Distances are between voxel centres scaled by ``spacing``. Returns 0.0
    when both masks are empty and ``inf`` when exactly one is. With
    ``percentile < 100`` the percentile of the pooled directed distances is
    returned instead of the maximum (HD95 at 95).
    """
    a, b = _masks(pred, gt, class_id)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return INF
    ba = boundary_mask(a.astype(np.uint8), 6)
    bb = boundary_mask(b.astype(np.uint8), 6)
    d_ab = _directed(ba, bb, spacing)
    d_ba = _directed(bb, ba, spacing)
    if percentile >= 100:
        return float(max(d_ab.max(), d_ba.max()))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), percentile))


@dataclass
class CaseMetrics:
    dsc: dict[int, float] = field(default_factory=dict)
    hd: dict[int, float] = field(default_factory=dict)
    empty_pred: dict[int, bool] = field(default_factory=dict)
    empty_gt: dict[int, bool] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.dsc.values())))

    @property
    def mean_hd(self) -> float:
        finite = [v for v in self.hd.values() if math.isfinite(v)]
        return float(np.mean(finite)) if finite else INF

    @property
    def hd_excluded(self) -> int:
        """Classes left out of ``mean_hd`` because exactly one mask was empty."""
        return sum(not math.isfinite(v) for v in self.hd.values())

    def row(self, names=CLASS_NAMES) -> dict:
        out = {}
        for c in self.dsc:
            name = names.get(c, f"class{c}")
            out[f"{name}_dsc"] = self.dsc[c]
            out[f"{name}_hd"] = self.hd[c]
        out["average_dsc"] = self.mean_dsc
        out["average_hd"] = self.mean_hd
        out["hd_excluded"] = self.hd_excluded
        return out


def evaluate_case(pred, gt, spacing=(1.0, 1.0, 1.0), classes: Sequence[int] = (1, 2, 3, 4),
                  percentile: float = 100.0) -> CaseMetrics:
    m = CaseMetrics()
    for c in classes:
        a, b = _masks(pred, gt, c)
        m.dsc[c] = dsc(pred, gt, c)
        m.hd[c] = hausdorff(pred, gt, c, spacing, percentile)
        m.empty_pred[c] = not a.any()
        m.empty_gt[c] = not b.any()
    return m


def aggregate(rows: Sequence[dict]) -> dict:
    """Column-wise mean over per-case rows, ignoring non-finite HD values."""
    if not rows:
        raise ValueError("nothing to aggregate")
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if math.isfinite(r[key])]
        if key == "hd_excluded":
            out[key] = int(sum(r[key] for r in rows))
        else:
            out[key] = float(np.mean(vals)) if vals else INF
    out["num_cases"] = len(rows)
    return out


def aggregate_folds(fold_reports: Sequence[dict]) -> dict:
    """Average of per-fold aggregates (each fold weighted equally)."""
    if not fold_reports:
        raise ValueError("no fold reports")
    keys = [k for k in fold_reports[0] if k not in ("num_cases", "hd_excluded")]
    out = {k: float(np.mean([f[k] for f in fold_reports])) for k in keys}
    out["num_folds"] = len(fold_reports)
    return out

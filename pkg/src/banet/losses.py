"""
Joint soft-Dice + cross-entropy loss per decoder scale and its deep-supervised
combination over both decoders.

Tensors are probability stacks of shape (B, C, *spatial) or (C, *spatial);
targets are the matching one-hot stacks. The voxel count V used by the Dice
smoothing term is the number of voxels reduced over (batch included).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

CLAMP = 1e-7


def ds_weights(num_stages: int) -> list[float]:
    """Deep-supervision weights for the N-1 decoder outputs, coarse to fine.

    Weight of output i (1-based) is proportional to 2^(i-1), normalised to 1.
    """
    if num_stages < 2:
        raise ValueError("num_stages must be >= 2")
    raw = [2.0 ** i for i in range(num_stages - 1)]
    total = sum(raw)
    return [w / total for w in raw]


@dataclass
class LossConfig:
    epsilon: float = 1e-5
    ce_reduction: str = "mean"        # "mean" over voxels, or "sum" over voxels
    dice_classes: str = "foreground"  # "foreground" or "all"
    ds_weights: list[float] | None = None  # None -> ds_weights(num_stages)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.ce_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown ce_reduction {self.ce_reduction!r}")
        if self.dice_classes not in ("foreground", "all"):
            raise ValueError(f"unknown dice_classes {self.dice_classes!r}")
        if self.ds_weights is not None:
            w = [float(x) for x in self.ds_weights]
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError("ds_weights must be non-negative and sum to 1")
            self.ds_weights = w

    def weights_for(self, num_scales: int) -> list[float]:
        if self.ds_weights is None:
            return ds_weights(num_scales + 1)
        if len(self.ds_weights) != num_scales:
            raise ValueError(f"{len(self.ds_weights)} ds_weights for {num_scales} scales")
        return self.ds_weights


@dataclass
class LossReport:
    """Total loss (a graph-attached tensor) plus detached per-scale terms."""

    total: torch.Tensor
    seg: list[float] = field(default_factory=list)
    boundary: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    def row(self) -> dict:
        out = {"loss": float(self.total)}
        for i, (s, b) in enumerate(zip(self.seg, self.boundary), start=1):
            out[f"seg_{i}"] = s
            out[f"bnd_{i}"] = b
        return out


def _class_dim(p: torch.Tensor) -> tuple[int, tuple[int, ...]]:
    if p.dim() < 2:
        raise ValueError("need at least (C, V) shaped tensors")
    cdim = 1 if p.dim() >= 5 else 0
    return cdim, tuple(d for d in range(p.dim()) if d != cdim)


def soft_dice(p: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-5,
              classes: str = "foreground") -> torch.Tensor:
    """1 - 2 sum(p*y) / (sum(p + y) + V*eps), averaged over the chosen classes.

    Inputs shaped (B, C, D, H, W) use channel dim 1; anything with fewer than
    five dims is treated as (C, ...).
    """
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    cdim, reduce = _class_dim(p)
    y = y.to(p.dtype)
    voxels = p.numel() // p.shape[cdim]
    inter = (p * y).sum(dim=reduce)
    denom = p.sum(dim=reduce) + y.sum(dim=reduce) + voxels * epsilon
    per_class = 1 - 2 * inter / denom
    if classes == "foreground":
        if per_class.numel() < 2:
            raise ValueError("foreground dice needs at least 2 channels")
        per_class = per_class[1:]
    return per_class.mean()


def cross_entropy(p: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Multi-class NLL  -sum_c y_c log p_c  with p clamped to [1e-7, 1 - 1e-7].

    ``reduction="sum"`` sums over all voxels; ``"mean"`` divides by the voxel
    count. With two channels this is the binary form
    -(y log p + (1 - y) log(1 - p)) on the foreground channel.
    """
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    cdim, _ = _class_dim(p)
    nll = -(y.to(p.dtype) * torch.log(p.clamp(CLAMP, 1 - CLAMP))).sum()
    if reduction == "sum":
        return nll
    if reduction == "mean":
        return nll / (p.numel() // p.shape[cdim])
    raise ValueError(f"unknown reduction {reduction!r}")


def joint_scale_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return (soft_dice(p, y, cfg.epsilon, cfg.dice_classes)
            + cross_entropy(p, y, cfg.ce_reduction))


def to_one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, C, D, H, W) one-hot."""
    return F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(dtype)


def deep_supervised_loss(seg_probs: Sequence[torch.Tensor], boundary_probs: Sequence[torch.Tensor],
                         seg_targets: Sequence[torch.Tensor], boundary_targets: Sequence[torch.Tensor],
                         cfg: LossConfig | None = None) -> LossReport:
    """Weighted sum over scales of (segmentation loss + boundary loss).

    Probabilities and targets are ordered coarse to fine. Targets may be
    integer label maps (B, D, H, W) or one-hot stacks matching the outputs.
    """
    cfg = cfg or LossConfig()
    n = len(seg_probs)
    if not (len(boundary_probs) == len(seg_targets) == len(boundary_targets) == n):
        raise ValueError("outputs and target pyramids have different scale counts")
    weights = cfg.weights_for(n)
    total = seg_probs[0].new_zeros(())
    report = LossReport(total, weights=list(weights))
    for w, ps, pb, ys, yb in zip(weights, seg_probs, boundary_probs, seg_targets, boundary_targets):
        if ys.dim() == ps.dim() - 1:
            ys = to_one_hot(ys, ps.shape[1], ps.dtype)
        if yb.dim() == pb.dim() - 1:
            yb = to_one_hot(yb, pb.shape[1], pb.dtype)
        ls = joint_scale_loss(ps, ys, cfg)
        lb = joint_scale_loss(pb, yb, cfg)
        total = total + w * (ls + lb)
        report.seg.append(float(ls.detach()))
        report.boundary.append(float(lb.detach()))
    report.total = total
    return report

"""Sliding-window prediction, connected-component cleanup and two-model averaging."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .volume import LabelVolume, ProbabilityVolume


@dataclass
class WindowPlan:
    patch_shape: tuple[int, int, int]
    step_fraction: float = 0.5
    blend: str = "gaussian"     # or "uniform"
    sigma_scale: float = 1.0 / 8

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must be in (0, 1]")
        if self.blend not in ("gaussian", "uniform"):
            raise ValueError(f"unknown blend mode {self.blend!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d


def window_origins(volume_shape: Sequence[int], plan: WindowPlan) -> list[tuple[int, int, int]]:
    """Evenly spaced origins; first and last windows touch the volume edges.

    ``volume_shape`` must be at least ``plan.patch_shape`` on every axis.
    """
    per_axis = []
    for size, patch in zip(volume_shape, plan.patch_shape):
        if size < patch:
            raise ValueError(f"volume {tuple(volume_shape)} smaller than patch {plan.patch_shape}")
        step = patch * plan.step_fraction
        n = int(math.ceil((size - patch) / step)) + 1
        if n == 1:
            per_axis.append([0])
        else:
            actual = (size - patch) / (n - 1)
            per_axis.append([int(round(actual * k)) for k in range(n)])
    return list(itertools.product(*per_axis))


def blend_weights(plan: WindowPlan) -> np.ndarray:
    shape = plan.patch_shape
    if plan.blend == "uniform":
        return np.ones(shape, dtype=np.float32)
    center = [(s - 1) / 2.0 for s in shape]
    axes = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    expo = sum(((a - c) / (s * plan.sigma_scale)) ** 2 for a, c, s in zip(axes, center, shape))
    w = np.exp(-0.5 * expo)
    w /= w.max()
    # keep edges strictly positive so every voxel receives weight
    w = np.maximum(w, w[w > 0].min())
    return w.astype(np.float32)


@torch.no_grad()
def _predict_window(model, patch: np.ndarray) -> np.ndarray:
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(patch)).to(dtype=param.dtype, device=param.device)
    return model(x[None, None], mode="infer")[0].cpu().numpy()


def sliding_window_predict(model, v, plan: WindowPlan) -> ProbabilityVolume:
    """Predict class probabilities for a whole normalised volume.

    Volumes smaller than the patch are reflect-padded and cropped back.
    """
    data = np.asarray(getattr(v, "data", v), dtype=np.float32)
    spacing = getattr(v, "spacing", (1.0, 1.0, 1.0))
    model.eval()
    shape = data.shape
    pads = [(0, max(0, p - s)) for s, p in zip(shape, plan.patch_shape)]
    padded = np.pad(data, pads, mode="reflect") if any(p for _, p in pads) else data
    origins = window_origins(padded.shape, plan)
    crop = tuple(slice(0, s) for s in shape)

    if len(origins) == 1:
        # one window: its softmax output needs no blending
        probs = _predict_window(model, padded)
        return ProbabilityVolume(np.ascontiguousarray(probs[(slice(None),) + crop]), spacing)

    weights = blend_weights(plan)
    acc = None
    norm = np.zeros(padded.shape, dtype=np.float64)
    for origin in origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, plan.patch_shape))
        probs = _predict_window(model, padded[sl])
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded.shape, dtype=np.float64)
        acc[(slice(None),) + sl] += probs * weights
        norm[sl] += weights
    if not np.all(norm > 0):
        raise RuntimeError("window plan left voxels uncovered")
    acc /= norm
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityVolume(np.ascontiguousarray(acc[(slice(None),) + crop], dtype=np.float32), spacing)


def _largest_component(mask: np.ndarray, structure) -> np.ndarray:
    comps, n = ndimage.label(mask, structure=structure)
    if n <= 1:
        return mask
    sizes = np.bincount(comps.ravel())[1:]
    # argmax picks the first (lowest label id) among equal-sized components
    return comps == (int(np.argmax(sizes)) + 1)


def postprocess_components(labels: LabelVolume, policy: str = "largest_per_class",
                           connectivity: int = 26) -> LabelVolume:
    """Drop all but the largest connected component.

    ``largest_per_class`` applies this to every foreground class separately;
    ``largest_foreground`` keeps the largest component of the union of all
    foreground classes. Removed voxels become background.
    """
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    data = labels.data.copy()
    if policy == "largest_per_class":
        for c in range(1, labels.num_classes):
            mask = data == c
            if mask.any():
                data[mask & ~_largest_component(mask, structure)] = 0
    elif policy == "largest_foreground":
        mask = data > 0
        if mask.any():
            data[mask & ~_largest_component(mask, structure)] = 0
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return LabelVolume(data, labels.spacing, labels.num_classes)


def ensemble_average(p1: ProbabilityVolume, p2: ProbabilityVolume) -> ProbabilityVolume:
    if p1.data.shape != p2.data.shape:
        raise ValueError(f"shape mismatch {p1.data.shape} vs {p2.data.shape}")
    return ProbabilityVolume((p1.data + p2.data) / 2, p1.spacing)

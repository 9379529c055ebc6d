"""Boundary ground truth derived from label maps, one map per supervision scale."""
from __future__ import annotations

import itertools

import numpy as np

from .preprocess import downsample_labels
from .volume import LabelVolume


def neighbor_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    if connectivity == 6:
        return [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    if connectivity == 26:
        return [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def boundary_mask(labels: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Foreground voxels with at least one neighbour carrying a different label.

    Voxels outside the array count as background.
    """
    labels = np.asarray(labels)
    padded = np.pad(labels, 1, mode="constant", constant_values=0)
    d, h, w = labels.shape
    out = np.zeros(labels.shape, dtype=bool)
    for dz, dy, dx in neighbor_offsets(connectivity):
        shifted = padded[1 + dz:1 + dz + d, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        out |= shifted != labels
    out &= labels != 0
    return out


def extract_boundary(labels: LabelVolume, connectivity: int = 6) -> LabelVolume:
    """Binary boundary volume (values 0/1, ``num_classes=2``)."""
    mask = boundary_mask(labels.data, connectivity)
    return LabelVolume(mask.astype(np.uint8), labels.spacing, 2)


def pad_to_multiple(labels: LabelVolume, divisor: int) -> LabelVolume:
    pads = [(0, (-s) % divisor) for s in labels.shape]
    if not any(p for _, p in pads):
        return labels
    return LabelVolume(np.pad(labels.data, pads), labels.spacing, labels.num_classes)


def build_label_pyramid(labels: LabelVolume, num_scales: int) -> list[LabelVolume]:
    """Nearest-neighbour decimated labels, coarse to fine.

    Scale i (1-based) is decimated by 2^(num_scales - i); the finest scale is
    the input itself. Shapes not divisible by 2^(num_scales-1) are padded
    with background first.
    """
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    labels = pad_to_multiple(labels, 2 ** (num_scales - 1))
    return [downsample_labels(labels, (2 ** (num_scales - i),) * 3) for i in range(1, num_scales + 1)]


def build_boundary_pyramid(labels: LabelVolume, num_scales: int,
                           connectivity: int = 6) -> list[LabelVolume]:
    """Boundary targets per scale: labels are decimated first, then the
    boundary is extracted, so every level stays one voxel thin."""
    return [extract_boundary(level, connectivity) for level in build_label_pyramid(labels, num_scales)]


"""
Spacing resampling, intensity normalisation, patch sampling, label
decimation and training-time augmentation.

Every randomised function takes an explicit integer seed and is a pure
function of its inputs and that seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume import LabelVolume, Spacing, Volume


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (3.0, 0.6, 0.6)
    clip_lo: float = 918.0
    clip_hi: float = 1396.0
    norm_mean: float | None = None
    norm_std: float | None = None
    per_volume_norm: bool = False
    patch_shape: tuple[int, int, int] = (112, 128, 128)
    foreground_prob: float = 0.5

    def __post_init__(self):
        self.target_spacing = tuple(Spacing.of(self.target_spacing))
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        if self.norm_std is not None and not self.norm_std > 0:
            raise ValueError("norm_std must be positive")
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise ValueError(f"bad patch_shape {self.patch_shape}")
        if not 0.0 <= self.foreground_prob <= 1.0:
            raise ValueError("foreground_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_spacing"] = list(self.target_spacing)
        d["patch_shape"] = list(self.patch_shape)
        return d

    def pad_value(self) -> float:
        """Normalised value of ``clip_lo``; used to pad images."""
        if self.norm_mean is None or self.norm_std is None:
            return 0.0
        return (self.clip_lo - self.norm_mean) / self.norm_std


@dataclass
class AugmentSpec:
    """Augmentation switches and ranges. Defaults are desk-scale choices."""

    seed: int = 0
    crop: bool = False
    crop_max_shift: float = 0.1            # fraction of each axis
    rotation: bool = False
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scaling: bool = False
    scale_range: tuple[float, float] = (0.85, 1.25)
    flip: bool = False
    flip_axes: tuple[int, ...] = (0, 1, 2)
    flip_prob: float = 0.5
    noise: bool = False
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    elastic: bool = False
    elastic_alpha: tuple[float, float] = (0.0, 2.0)  # displacement std in voxels
    elastic_sigma: float = 8.0                       # control-point spacing in voxels
    prob: float = 0.2                                # per-sample probability of each
                                                     # geometric/noise transform

    def __post_init__(self):
        for name in ("rotation_deg", "scale_range", "noise_sigma", "elastic_alpha"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))
        self.flip_axes = tuple(int(a) for a in self.flip_axes)
        if self.scaling and self.scale_range[0] <= 0:
            raise ValueError("scale factors must be positive")
        if self.elastic and self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")
        if self.crop and not 0 < self.crop_max_shift < 1:
            raise ValueError("crop_max_shift must be in (0, 1)")
        if not 0 <= self.prob <= 1:
            raise ValueError("prob must be in [0, 1]")

    @classmethod
    def training_default(cls, seed: int = 0) -> "AugmentSpec":
        return cls(seed=seed, crop=True, rotation=True, scaling=True, flip=True,
                   noise=True, elastic=True)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# resampling and normalisation
# ---------------------------------------------------------------------------

def resampled_shape(shape, spacing, target) -> tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))


def resample_array(data: np.ndarray, out_shape: Sequence[int], order: int) -> np.ndarray:
    """Voxel-centre aligned resampling of a 3D array to ``out_shape``."""
    in_shape = data.shape
    if tuple(out_shape) == tuple(in_shape):
        return data.copy()
    scale = [i / o for i, o in zip(in_shape, out_shape)]
    # output voxel centre o maps to input coordinate (o + 0.5) * scale - 0.5
    offset = [0.5 * s - 0.5 for s in scale]
    src = data if order == 0 else data.astype(np.float64 if data.dtype == np.float64 else np.float32)
    out = ndimage.affine_transform(src, np.diag(scale), offset=offset, output_shape=tuple(out_shape),
                                   order=order, mode="nearest", prefilter=False)
    return out.astype(data.dtype, copy=False) if order == 0 else out


def resample(v, target):
    """Resample a :class:`Volume` (trilinear) or :class:`LabelVolume`
    (nearest neighbour) to ``target`` spacing."""
    target = Spacing.of(target)
    out_shape = resampled_shape(v.shape, v.spacing, target)
    if isinstance(v, LabelVolume):
        return LabelVolume(resample_array(v.data, out_shape, 0), target, v.num_classes)
    return Volume(resample_array(v.data, out_shape, 1), target)


def compute_norm_stats(images: Sequence[Volume], labels: Sequence[LabelVolume] | None,
                       cfg: PreprocessConfig) -> tuple[float, float]:
    """Mean/std of clipped intensities over foreground voxels (all voxels when
    no labels are given)."""
    count, total, total_sq = 0, 0.0, 0.0
    for k, img in enumerate(images):
        vals = np.clip(img.data.astype(np.float64), cfg.clip_lo, cfg.clip_hi)
        if labels is not None:
            vals = vals[labels[k].data > 0]
        count += vals.size
        total += vals.sum()
        total_sq += np.square(vals).sum()
    if count == 0:
        raise ValueError("no voxels to compute normalisation statistics from")
    mean = total / count
    std = math.sqrt(max(total_sq / count - mean * mean, 0.0))
    if std <= 0:
        raise ValueError("intensity standard deviation is zero")
    return mean, std


def normalize_intensity(v: Volume, cfg: PreprocessConfig) -> Volume:
    """Clip to [clip_lo, clip_hi], subtract the mean, divide by the std."""
    clipped = np.clip(v.data.astype(np.float64), cfg.clip_lo, cfg.clip_hi)
    if cfg.per_volume_norm:
        mean, std = float(clipped.mean()), float(clipped.std())
    else:
        if cfg.norm_mean is None or cfg.norm_std is None:
            raise ValueError("normalisation statistics not set; compute them or set per_volume_norm")
        mean, std = cfg.norm_mean, cfg.norm_std
    if not std > 0:
        raise ValueError(f"norm_std must be positive, got {std}")
    out = ((clipped - mean) / std).astype(np.float32)
    return Volume(out, v.spacing)


# ---------------------------------------------------------------------------
# patches and label decimation
# ---------------------------------------------------------------------------

def _pad_to(data: np.ndarray, shape, value) -> np.ndarray:
    pads = [(0, max(0, p - s)) for s, p in zip(data.shape, shape)]
    if not any(p for _, p in pads):
        return data
    # split padding evenly around the volume
    pads = [((p[1]) // 2, p[1] - p[1] // 2) for p in pads]
    return np.pad(data, pads, mode="constant", constant_values=value)


def sample_patch(v: Volume, l: LabelVolume, cfg: PreprocessConfig, rng_seed: int
                 ) -> tuple[Volume, LabelVolume]:
    """Crop an aligned image/label patch of ``cfg.patch_shape``.

    With probability ``cfg.foreground_prob`` the crop is centred on a random
    voxel of a randomly chosen foreground class present in ``l``; otherwise
    the crop origin is uniform. Volumes smaller than the patch are padded.
    """
    if v.shape != l.shape:
        raise ValueError(f"image {v.shape} and labels {l.shape} differ in shape")
    rng = np.random.default_rng(rng_seed)
    patch = cfg.patch_shape
    img = _pad_to(v.data, patch, cfg.pad_value())
    lab = _pad_to(l.data, patch, 0)
    limits = [s - p for s, p in zip(img.shape, patch)]

    origin = None
    if rng.random() < cfg.foreground_prob:
        classes = np.unique(lab)
        classes = classes[classes > 0]
        if classes.size:
            cls = rng.choice(classes)
            coords = np.argwhere(lab == cls)
            center = coords[rng.integers(len(coords))]
            origin = [int(np.clip(c - p // 2, 0, lim)) for c, p, lim in zip(center, patch, limits)]
    if origin is None:
        origin = [int(rng.integers(lim + 1)) for lim in limits]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return (Volume(img[sl].copy(), v.spacing),
            LabelVolume(lab[sl].copy(), l.spacing, l.num_classes))


def downsample_labels(l: LabelVolume, factor_per_axis) -> LabelVolume:
    """Keep the voxel at ``index * factor`` on each axis."""
    factors = tuple(int(f) for f in factor_per_axis)
    if len(factors) != 3 or min(factors) < 1:
        raise ValueError(f"factors must be 3 positive integers, got {factor_per_axis}")
    data = l.data[::factors[0], ::factors[1], ::factors[2]].copy()
    spacing = tuple(s * f for s, f in zip(l.spacing, factors))
    return LabelVolume(data, spacing, l.num_classes)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _elastic_field(shape, spec: AugmentSpec, rng) -> np.ndarray:
    alpha = rng.uniform(*spec.elastic_alpha)
    coarse = tuple(max(2, int(math.ceil(s / spec.elastic_sigma)) + 1) for s in shape)
    fields = []
    for _ in range(3):
        grid = rng.standard_normal(coarse) * alpha
        zoomed = ndimage.zoom(grid, [s / c for s, c in zip(shape, coarse)], order=1,
                              mode="nearest", grid_mode=False)
        fields.append(zoomed[: shape[0], : shape[1], : shape[2]])
    return np.stack(fields)


def augment(img: Volume, lab: LabelVolume, spec: AugmentSpec, seed: int | None = None
            ) -> tuple[Volume, LabelVolume]:
    """Apply the enabled random transforms.

    Geometric transforms are composed into one coordinate map and applied to
    both volumes (trilinear for the image, nearest for labels, background
    outside). Noise touches the image only. ``seed`` overrides ``spec.seed``.
    """
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and labels {lab.shape} differ in shape")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    x = img.data
    y = lab.data
    shape = np.array(x.shape)

    matrix = np.eye(3)
    shift = np.zeros(3)
    displacement = None
    if spec.rotation and rng.random() < spec.prob:
        angles = rng.uniform(*spec.rotation_deg, size=3)
        matrix = Rotation.from_euler("xyz", angles, degrees=True).as_matrix() @ matrix
    if spec.scaling and rng.random() < spec.prob:
        matrix = matrix / rng.uniform(*spec.scale_range)
    if spec.crop and rng.random() < spec.prob:
        max_shift = np.floor(shape * spec.crop_max_shift)
        shift = np.array([rng.integers(-m, m + 1) for m in max_shift.astype(int)], dtype=float)
    if spec.elastic and rng.random() < spec.prob:
        displacement = _elastic_field(tuple(shape), spec, rng)

    if not np.array_equal(matrix, np.eye(3)) or shift.any() or displacement is not None:
        center = (shape - 1) / 2.0
        grid = np.indices(tuple(shape), dtype=np.float64).reshape(3, -1) - center[:, None]
        coords = matrix @ grid + (center + shift)[:, None]
        if displacement is not None:
            coords += displacement.reshape(3, -1)
        coords = coords.reshape((3, *shape))
        x = ndimage.map_coordinates(x.astype(np.float32), coords, order=1, mode="nearest",
                                    prefilter=False)
        y = ndimage.map_coordinates(y, coords, order=0, mode="constant", cval=0)

    if spec.flip:
        for axis in spec.flip_axes:
            if rng.random() < spec.flip_prob:
                x = np.flip(x, axis)
                y = np.flip(y, axis)
    if spec.noise and rng.random() < spec.prob:
        sigma = rng.uniform(*spec.noise_sigma)
        x = x + rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)

    return (Volume(np.ascontiguousarray(x), img.spacing),
            LabelVolume(np.ascontiguousarray(y), lab.spacing, lab.num_classes))

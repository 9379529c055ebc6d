"""
Synthetic kidney scenes: an ellipsoidal kidney, a spherical tumour sitting on
its surface, and an artery and vein drawn as tubes around smoothed random
polylines that start at the kidney and leave through the volume edge.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Spacing, Volume, save_volume

BACKGROUND, KIDNEY, TUMOR, ARTERY, VEIN = range(5)
# later entries overwrite earlier ones: tumour > artery > vein > kidney
PAINT_ORDER = (KIDNEY, VEIN, ARTERY, TUMOR)


class PhantomGeometryError(ValueError):
    pass


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 0.6, 0.6)
    seed: int = 0
    # geometry, in voxels
    kidney_axes_lo: tuple[float, float, float] = (10.0, 12.0, 8.0)
    kidney_axes_hi: tuple[float, float, float] = (13.0, 16.0, 11.0)
    tumor_radius: tuple[float, float] = (3.0, 7.0)
    artery_radius: tuple[float, float] = (1.6, 2.2)
    vein_radius: tuple[float, float] = (2.2, 3.0)
    tube_waypoints: int = 4
    # intensities, inside the default clip window
    intensity: dict = field(default_factory=lambda: {
        BACKGROUND: 960.0, KIDNEY: 1160.0, TUMOR: 1060.0, ARTERY: 1340.0, VEIN: 1250.0})
    noise_sigma: float = 15.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(Spacing.of(self.spacing))
        self.intensity = {int(k): float(v) for k, v in self.intensity.items()}
        for name in ("tumor_radius", "artery_radius", "vein_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name}: need 0 < lo <= hi, got ({lo}, {hi})")
        if any(not 0 < lo <= hi for lo, hi in zip(self.kidney_axes_lo, self.kidney_axes_hi)):
            raise ValueError("kidney axes ranges invalid")
        if sorted(self.intensity) != list(range(5)):
            raise ValueError("intensity needs levels for classes 0..4")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipsoid(grid, center, axes):
    return sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)) <= 1.0


def _polyline_mask(shape, polyline: np.ndarray, radius: float) -> np.ndarray:
    """Voxels whose centre lies within ``radius`` of the polyline (K, 3)."""
    mask = np.zeros(shape, dtype=bool)
    upper = np.array(shape) - 1
    for a, b in zip(polyline[:-1], polyline[1:]):
        lo = np.clip(np.floor(np.minimum(a, b) - radius), 0, upper).astype(int)
        hi = np.clip(np.ceil(np.maximum(a, b) + radius), 0, upper).astype(int)
        box = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
        pts = np.indices(tuple(hi - lo + 1)).reshape(3, -1).T + lo
        ab = b - a
        t = np.clip(((pts - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        mask[box] |= (d <= radius).reshape(tuple(hi - lo + 1))
    return mask


def _smooth_polyline(waypoints: np.ndarray, samples: int = 64) -> np.ndarray:
    # densify, then average neighbours a few times (endpoints fixed)
    t = np.linspace(0, len(waypoints) - 1, samples)
    dense = np.stack([np.interp(t, np.arange(len(waypoints)), waypoints[:, k]) for k in range(3)], 1)
    for _ in range(4):
        dense[1:-1] = (dense[:-2] + dense[1:-1] + dense[2:]) / 3.0
    return dense


def _tube(shape, rng, start, end_axis, radius, n_waypoints, margin):
    shape_arr = np.array(shape, dtype=float)
    end = rng.uniform(margin, shape_arr - 1 - margin)
    end[end_axis] = 0.0 if rng.random() < 0.5 else shape_arr[end_axis] - 1
    inner = [start + (end - start) * (k + 1) / (n_waypoints + 1)
             + rng.normal(0, 3.0, size=3) for k in range(n_waypoints)]
    waypoints = np.clip(np.vstack([start, *inner, end]), 0, shape_arr - 1)
    return _polyline_mask(shape, _smooth_polyline(waypoints), radius)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Render one case. Raises :class:`PhantomGeometryError` when a
    structure does not fit or a class ends up missing."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    grid = np.indices(shape, dtype=float)
    shape_arr = np.array(shape, dtype=float)

    axes = rng.uniform(spec.kidney_axes_lo, spec.kidney_axes_hi)
    violated = []
    if np.any(2 * axes + 4 > shape_arr):
        violated.append(f"kidney semi-axes {np.round(axes, 2).tolist()} do not fit in {shape}")
    tumor_r = rng.uniform(*spec.tumor_radius)
    if violated:
        raise PhantomGeometryError("; ".join(violated))
    lo = axes + 2
    hi = shape_arr - 3 - axes
    center = rng.uniform(lo, np.maximum(lo, hi))
    kidney = _ellipsoid(grid, center, axes)

    # tumour centred on a random point of the kidney surface
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    surface = center + direction * axes
    tumor = sum((g - c) ** 2 for g, c in zip(grid, surface)) <= tumor_r ** 2

    # vessels leave from a point just inside the kidney, on the side facing the volume centre
    hilum_dir = (shape_arr - 1) / 2 - center
    hilum_dir = hilum_dir / max(np.linalg.norm(hilum_dir), 1e-6)
    hilum = center + 0.6 * hilum_dir * axes
    art_r = rng.uniform(*spec.artery_radius)
    vein_r = rng.uniform(*spec.vein_radius)
    artery = _tube(shape, rng, hilum + rng.normal(0, 1.0, 3), int(rng.integers(3)), art_r,
                   spec.tube_waypoints, margin=4)
    vein = _tube(shape, rng, hilum + rng.normal(0, 1.0, 3), int(rng.integers(3)), vein_r,
                 spec.tube_waypoints, margin=4)

    masks = {KIDNEY: kidney, TUMOR: tumor, ARTERY: artery, VEIN: vein}
    labels = np.zeros(shape, dtype=np.uint8)
    for cls in PAINT_ORDER:
        labels[masks[cls]] = cls

    missing = [c for c in (KIDNEY, TUMOR, ARTERY, VEIN) if not np.any(labels == c)]
    if missing:
        violated.append(f"classes {missing} absent after painting")
    if not (np.any(tumor & kidney) and np.any(tumor & ~kidney)):
        violated.append("tumour does not straddle the kidney surface")
    if violated:
        raise PhantomGeometryError("; ".join(violated))

    levels = np.array([spec.intensity[c] for c in range(5)], dtype=np.float32)
    image = levels[labels]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=shape).astype(np.float32)
    return Volume(image, spec.spacing), LabelVolume(labels, spec.spacing, 5)


def cohort_specs(n: int, base: PhantomSpec, seed: int) -> list[PhantomSpec]:
    """Per-case specs with jittered seed and a stratified tumour radius so
    the cohort spans the whole configured tumour size range."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = base.tumor_radius
    strata = rng.permutation(n)
    specs = []
    for k in range(n):
        u = (strata[k] + rng.random()) / n
        r = lo + (hi - lo) * u
        specs.append(dataclasses.replace(base, seed=int(rng.integers(2 ** 31)), tumor_radius=(r, r)))
    return specs


def generate_cohort(n: int, base: PhantomSpec | None = None, seed: int = 0,
                    max_attempts: int = 20) -> list[tuple[str, Volume, LabelVolume]]:
    """``n`` cases as (case_id, image, labels). A case whose random geometry
    violates a constraint is redrawn with a derived seed."""
    base = base or PhantomSpec()
    cases = []
    for k, spec in enumerate(cohort_specs(n, base, seed)):
        for attempt in range(max_attempts):
            try:
                s = spec if attempt == 0 else dataclasses.replace(spec, seed=spec.seed + 7919 * attempt)
                img, lab = generate_phantom(s)
                break
            except PhantomGeometryError:
                if attempt == max_attempts - 1:
                    raise
        cases.append((f"case_{k:05d}", img, lab))
    return cases


def write_dataset(cases, root: os.PathLike, ext: str = ".raw") -> Path:
    """Write cases into ``root/images/<id><ext>`` and ``root/labels/<id><ext>``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for case_id, img, lab in cases:
        save_volume(img, root / "images" / f"{case_id}{ext}")
        save_volume(lab, root / "labels" / f"{case_id}{ext}")
    return root

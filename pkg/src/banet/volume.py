"""
Volumetric data containers, label/probability conversions and file I/O.

All arrays use the axis order (D, H, W) = (slice, row, column) and the
spacing tuple follows the same order.

Two on-disk formats are supported, chosen by file extension:

* ``.nii`` / ``.nii.gz`` -- NIfTI-1 via nibabel. Arrays are transposed to
  nibabel's (x, y, z) = (W, H, D) order on write and back on read.
* ``.raw`` -- a little-endian C-ordered array dump with a JSON sidecar at
  ``<path>.json`` (see ``README.md`` for the byte layout).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

RAW_SUFFIX = ".raw"
NIFTI_SUFFIXES = (".nii", ".nii.gz")
PROB_SUM_TOL = 1e-5


class VolumeFormatError(ValueError):
    """Raised for malformed headers, unsupported formats or invalid content."""


class Spacing(NamedTuple):
    """Physical voxel edge lengths in millimetres, ordered (dz, dy, dx)."""

    dz: float
    dy: float
    dx: float

    @classmethod
    def of(cls, values) -> "Spacing":
        values = tuple(float(v) for v in values)
        if len(values) != 3:
            raise ValueError(f"spacing needs 3 values, got {len(values)}")
        if not all(math.isfinite(v) and v > 0 for v in values):
            raise ValueError(f"spacing must be positive and finite, got {values}")
        return cls(*values)


def _as_spacing(spacing) -> Spacing:
    return spacing if isinstance(spacing, Spacing) else Spacing.of(spacing)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D intensity grid with physical spacing."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """A 3D integer label grid over ``num_classes`` classes (0 = background)."""

    data: np.ndarray
    spacing: Spacing
    num_classes: int = 5

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise VolumeFormatError(f"labels must have an integer dtype, got {data.dtype}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        bad = data[(data < 0) | (data >= self.num_classes)]
        if bad.size:
            raise VolumeFormatError(
                f"label value {int(bad.flat[0])} outside [0, {self.num_classes - 1}]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.num_classes == other.num_classes
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-voxel class probabilities, shape (C, D, H, W), channels summing to 1."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"probability data must be 4D (C, D, H, W), got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            raise VolumeFormatError(f"probabilities need float32/float64, got {data.dtype}")
        if not np.all(np.abs(data.sum(axis=0, dtype=np.float64) - 1.0) <= PROB_SUM_TOL):
            raise VolumeFormatError("probability channels do not sum to 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return (type(other) is type(self) and self.spacing == other.spacing
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


AnyVolume = Union[Volume, LabelVolume, ProbabilityVolume]


def one_hot(labels: LabelVolume) -> ProbabilityVolume:
    """Expand labels to a (C, D, H, W) float32 indicator stack."""
    classes = np.arange(labels.num_classes).reshape(-1, 1, 1, 1)
    data = (labels.data[None] == classes).astype(np.float32)
    return ProbabilityVolume(data, labels.spacing)


def argmax_labels(probs: ProbabilityVolume) -> LabelVolume:
    # np.argmax returns the first maximal index, i.e. ties go to the lower class.
    data = np.argmax(probs.data, axis=0).astype(np.uint8 if probs.num_classes <= 256 else np.int32)
    return LabelVolume(data, probs.spacing, probs.num_classes)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _volume_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(RAW_SUFFIX):
        return "raw"
    if name.endswith(NIFTI_SUFFIXES):
        return "nifti"
    raise VolumeFormatError(f"unsupported volume format: {path.name}")


def sidecar_path(path: os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_volume(vol: AnyVolume, path: os.PathLike) -> None:
    """Write ``vol`` to ``path``; existing files are replaced."""
    path = Path(path)
    fmt = _volume_format(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"destination directory does not exist: {path.parent}")
    if fmt == "raw":
        _save_raw(vol, path)
    else:
        _save_nifti(vol, path)


def load_volume(path: os.PathLike, num_classes: int | None = None) -> AnyVolume:
    """Read a volume written by :func:`save_volume` or any NIfTI-1 file.

    For raw files the sidecar records the kind of volume. NIfTI files carry no
    such tag: a 4D file is read as probabilities, and a 3D file is read as
    labels when ``num_classes`` is given, otherwise as intensities.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    fmt = _volume_format(path)
    if fmt == "raw":
        return _load_raw(path, num_classes)
    return _load_nifti(path, num_classes)


def _kind(vol: AnyVolume) -> str:
    if isinstance(vol, LabelVolume):
        return "labels"
    if isinstance(vol, ProbabilityVolume):
        return "probabilities"
    return "volume"


def _save_raw(vol: AnyVolume, path: Path) -> None:
    data = np.ascontiguousarray(vol.data)
    dtype = data.dtype.newbyteorder("<")
    header = {
        "format_version": 1,
        "kind": _kind(vol),
        "shape": list(data.shape),
        "dtype": dtype.str,
        "spacing": list(vol.spacing),
        "num_classes": vol.num_classes if not isinstance(vol, Volume) else None,
    }
    path.write_bytes(data.astype(dtype, copy=False).tobytes(order="C"))
    sidecar_path(path).write_text(json.dumps(header, indent=2))


def _load_raw(path: Path, num_classes: int | None) -> AnyVolume:
    side = sidecar_path(path)
    if not side.is_file():
        raise VolumeFormatError(f"missing sidecar header {side.name}")
    try:
        header = json.loads(side.read_text())
        shape = tuple(int(s) for s in header["shape"])
        dtype = np.dtype(header["dtype"])
        spacing = Spacing.of(header["spacing"])
        kind = header.get("kind", "volume")
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {side.name}: {exc}") from exc
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path.name}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape)
    data = data.astype(dtype.newbyteorder("="), copy=True)
    if kind == "labels":
        n = num_classes if num_classes is not None else header.get("num_classes")
        if n is None:
            raise VolumeFormatError(f"{side.name}: label file without num_classes")
        return LabelVolume(data, spacing, int(n))
    if kind == "probabilities":
        return ProbabilityVolume(data, spacing)
    if kind != "volume":
        raise VolumeFormatError(f"{side.name}: unknown kind {kind!r}")
    if num_classes is not None:
        return LabelVolume(data, spacing, num_classes)
    return Volume(data, spacing)


def _save_nifti(vol: AnyVolume, path: Path) -> None:
    import nibabel as nib

    data = vol.data
    if isinstance(vol, ProbabilityVolume):
        arr = np.transpose(data, (3, 2, 1, 0))  # (W, H, D, C)
    else:
        arr = np.transpose(data, (2, 1, 0))
    dz, dy, dx = vol.spacing
    affine = np.diag([dx, dy, dz, 1.0])
    img = nib.Nifti1Image(np.ascontiguousarray(arr), affine)
    img.header.set_data_dtype(arr.dtype)
    img.header.set_zooms((dx, dy, dz) + ((1.0,) if arr.ndim == 4 else ()))
    nib.save(img, str(path))


def _load_nifti(path: Path, num_classes: int | None) -> AnyVolume:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        arr = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except Exception as exc:  # nibabel raises a variety of types for bad headers
        raise VolumeFormatError(f"cannot read NIfTI file {path.name}: {exc}") from exc
    if arr.ndim not in (3, 4):
        raise VolumeFormatError(f"{path.name}: expected 3D or 4D data, got {arr.ndim}D")
    # pixdim is float32 on disk; recover the shortest decimal that maps to it
    spacing = Spacing.of(float(str(np.float32(z))) for z in (zooms[2], zooms[1], zooms[0]))
    if arr.ndim == 4:
        return ProbabilityVolume(np.ascontiguousarray(np.transpose(arr, (3, 2, 1, 0))), spacing)
    data = np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))
    if num_classes is not None:
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.mod(data, 1) == 0):
                raise VolumeFormatError(f"{path.name}: non-integer label values")
            data = data.astype(np.int16)
        return LabelVolume(data, spacing, num_classes)
    return Volume(data, spacing)

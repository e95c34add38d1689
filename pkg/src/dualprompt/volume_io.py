"""Volume representation, on-disk format and the preprocessing pipeline.

Arrays are indexed ``data[x, y, z]``. On disk every volume (or mask) is a pair
of files sharing a stem: a UTF-8 JSON sidecar ``<stem>.json`` and a raw
little-endian float32 payload ``<stem>.raw`` written in x-fastest order.

Percentiles for MR/PET clipping use linear interpolation between order
statistics (the inclusive convention, numpy's ``method="linear"``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "FormatError",
    "Modality",
    "Volume",
    "Mask",
    "resample_isotropic",
    "resample_mask",
    "clip_intensities",
    "znormalize",
    "preprocess",
    "save_volume",
    "load_volume",
    "save_mask",
    "load_mask",
]

PathLike = Union[str, Path]

CT_WINDOW = (-990.0, 500.0)
PERCENTILE_WINDOW = (2.0, 98.0)
DEFAULT_SPACING = (1.5, 1.5, 1.5)

_FORMAT_NAME = "dualprompt-volume"
_FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file on disk does not follow the volume format."""


class Modality(str, Enum):
    CT = "ct"
    MR = "mr"
    PET = "pet"

    @classmethod
    def parse(cls, value: Union[str, "Modality"]) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown modality {value!r}; expected one of ct, mr, pet") from None

    def __str__(self) -> str:
        return self.value


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = DEFAULT_SPACING
    modality: Modality = Modality.CT
    region: str = ""
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with all dims >= 1, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        self.modality = Modality.parse(self.modality)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, data: np.ndarray, spacing=None) -> "Volume":
        return Volume(data, self.spacing if spacing is None else spacing, self.modality, self.region, self.id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.modality == other.modality
            and self.region == other.region
            and self.id == other.id
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class Mask:
    data: np.ndarray
    organ: str = ""
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = self.data.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.organ == other.organ and self.id == other.id and np.array_equal(self.data, other.data)


def _check_spacing(spacing: Sequence[float], name: str) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"{name} must be 3 positive reals, got {spacing}")
    return spacing


def _target_shape(shape, spacing, target):
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))


def _sample_grid(shape, spacing, target):
    """Source coordinates of output voxel centres (centre-aligned, clamped to the input)."""
    new_shape = _target_shape(shape, spacing, target)
    axes = []
    for n_in, n_out, s, t in zip(shape, new_shape, spacing, target):
        coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (t / s) - 0.5
        axes.append(np.clip(coords, 0.0, n_in - 1))
    return new_shape, np.meshgrid(*axes, indexing="ij")


def resample_isotropic(v: Volume, target_spacing: Sequence[float] = DEFAULT_SPACING) -> Volume:
    """Trilinear resampling of ``v`` onto a grid with ``target_spacing``.

    Output dims are ``round(n * spacing / target)`` per axis (minimum 1).
    Resampling to the current spacing returns the data unchanged.
    """
    target = _check_spacing(target_spacing, "target_spacing")
    spacing = _check_spacing(v.spacing, "spacing")
    if target == spacing:
        return v.replace(v.data.copy(), target)
    _, grid = _sample_grid(v.shape, spacing, target)
    # float64 interpolation then a single rounding keeps constants exact
    out = ndimage.map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")
    return v.replace(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float32), target)


def resample_mask(m: Mask, spacing: Sequence[float], target_spacing: Sequence[float] = DEFAULT_SPACING) -> Mask:
    """Nearest-neighbour counterpart of :func:`resample_isotropic` for binary masks."""
    target = _check_spacing(target_spacing, "target_spacing")
    spacing = _check_spacing(spacing, "spacing")
    if target == spacing:
        return Mask(m.data.copy(), m.organ, m.id)
    _, grid = _sample_grid(m.shape, spacing, target)
    out = ndimage.map_coordinates(m.data, grid, order=0, mode="nearest")
    return Mask(out.astype(np.uint8), m.organ, m.id)


def clip_intensities(v: Volume) -> Volume:
    """Modality-specific clipping: CT to [-990, 500] HU, MR/PET to the 2nd/98th percentiles."""
    data = v.data
    if v.modality is Modality.CT:
        lo, hi = CT_WINDOW
    else:
        lo, hi = np.percentile(data.astype(np.float64), PERCENTILE_WINDOW, method="linear")
    out = np.clip(data, lo, hi).astype(data.dtype, copy=False)
    return v.replace(out)


def znormalize(v: Volume, eps: float = 1e-8) -> Volume:
    """Zero-mean, unit-variance rescale over all voxels; zero-variance volumes map to zeros."""
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if not np.isfinite(std) or std < eps:
        return v.replace(np.zeros(v.shape, dtype=np.float32))
    return v.replace(((x - mean) / std).astype(np.float32))


def preprocess(v: Volume, target_spacing: Sequence[float] = DEFAULT_SPACING) -> Volume:
    """Resample, clip and z-normalize (in that order)."""
    return znormalize(clip_intensities(resample_isotropic(v, target_spacing)))


# -- file format -------------------------------------------------------------


def _stem(path: PathLike) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def _write(path: PathLike, data: np.ndarray, header: dict) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = stem.with_name(stem.name + ".raw")
    header = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        **header,
        "dims": [int(n) for n in data.shape],
        "dtype": "float32",
        "payload": raw.name,
    }
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    raw.write_bytes(payload)
    stem.with_name(stem.name + ".json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    return stem


def _read(path: PathLike, kind: str) -> Tuple[dict, np.ndarray]:
    stem = _stem(path)
    sidecar = stem.with_name(stem.name + ".json")
    try:
        header = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar}: malformed header ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != _FORMAT_NAME:
        raise FormatError(f"{sidecar}: not a {_FORMAT_NAME} header")
    if header.get("kind", "volume") != kind:
        raise FormatError(f"{sidecar}: expected kind {kind!r}, found {header.get('kind')!r}")
    if header.get("dtype") != "float32":
        raise FormatError(f"{sidecar}: unsupported dtype {header.get('dtype')!r}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n >= 1 for n in dims)):
        raise FormatError(f"{sidecar}: dims must be three positive integers, got {dims!r}")
    raw = sidecar.with_name(header.get("payload", stem.name + ".raw"))
    payload = raw.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"{raw}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return header, np.ascontiguousarray(data, dtype=np.float32)


def save_volume(v: Volume, path: PathLike) -> Path:
    return _write(
        path,
        v.data,
        {
            "kind": "volume",
            "spacing": list(v.spacing),
            "modality": v.modality.value,
            "region": v.region,
            "id": v.id,
        },
    )


def load_volume(path: PathLike) -> Volume:
    header, data = _read(path, "volume")
    modality = header.get("modality")
    if modality not in {m.value for m in Modality}:
        raise FormatError(f"{path}: unknown modality {modality!r}")
    spacing = header.get("spacing")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"{path}: spacing must be a list of three numbers")
    try:
        return Volume(data, tuple(spacing), Modality(modality), str(header.get("region", "")), str(header.get("id", "")))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_mask(m: Mask, path: PathLike) -> Path:
    return _write(path, m.data.astype(np.float32), {"kind": "mask", "organ": m.organ, "id": m.id})


def load_mask(path: PathLike) -> Mask:
    header, data = _read(path, "mask")
    try:
        return Mask(data, str(header.get("organ", "")), str(header.get("id", "")))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc

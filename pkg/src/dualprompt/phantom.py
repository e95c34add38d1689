"""Deterministic multi-modality phantoms with organ masks and survival labels.

Each (subject, region) pair is one anatomy: a set of jittered ellipsoids and
cuboids placed at region-specific canonical locations, rendered co-registered
in every requested modality. Organs are painted in template order onto a
label map, so masks are disjoint by construction.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import (
    DEFAULT_SPACING,
    Mask,
    Modality,
    Volume,
    clip_intensities,
    save_mask,
    save_volume,
    znormalize,
)

__all__ = [
    "OrganTemplate",
    "ORGAN_LIBRARY",
    "LESION_ORGANS",
    "PhantomSpec",
    "PhantomCase",
    "ellipsoid_mask",
    "cuboid_mask",
    "generate_case",
    "generate_dataset",
    "split_counts",
    "survival_records",
    "learnability_margins",
]


@dataclass(frozen=True)
class OrganTemplate:
    shape: str  # "ellipsoid" or "cuboid"
    center: Tuple[float, float, float]  # fraction of volume dims
    radii: Tuple[float, float, float]  # semi-axes / half-widths, fraction of dims
    ct: float  # HU plateau
    mr: float  # arbitrary units plateau
    pet: float  # SUV-like uptake


# CT background is 40 HU soft tissue; MR 100; PET 0.3 (near zero).
BACKGROUND = {Modality.CT: 40.0, Modality.MR: 100.0, Modality.PET: 0.3}

ORGAN_LIBRARY: Dict[str, Dict[str, OrganTemplate]] = {
    "abdomen": {
        "liver": OrganTemplate("ellipsoid", (0.31, 0.42, 0.50), (0.19, 0.17, 0.20), 480.0, 900.0, 2.5),
        "spleen": OrganTemplate("ellipsoid", (0.75, 0.38, 0.52), (0.10, 0.12, 0.13), -600.0, 500.0, 4.0),
        "left_kidney": OrganTemplate("ellipsoid", (0.72, 0.74, 0.40), (0.09, 0.09, 0.14), -400.0, 650.0, 3.0),
        "pancreas": OrganTemplate("cuboid", (0.46, 0.72, 0.64), (0.14, 0.06, 0.07), 350.0, 350.0, 9.0),
    },
    "thorax": {
        "right_lung": OrganTemplate("ellipsoid", (0.27, 0.45, 0.50), (0.13, 0.21, 0.25), -850.0, 600.0, 1.5),
        "left_lung": OrganTemplate("ellipsoid", (0.73, 0.45, 0.50), (0.13, 0.21, 0.25), -650.0, 800.0, 2.5),
        "heart": OrganTemplate("ellipsoid", (0.50, 0.38, 0.42), (0.085, 0.10, 0.11), 450.0, 350.0, 9.0),
        "spinal_cord": OrganTemplate("cuboid", (0.50, 0.82, 0.50), (0.06, 0.06, 0.40), 420.0, 450.0, 3.5),
    },
}

# Hot PET organ standing in for a tumour; its volume drives planted survival risk.
LESION_ORGANS = {"abdomen": "pancreas", "thorax": "heart"}

CENTER_JITTER = 0.03
SIZE_JITTER = (0.85, 1.15)
LESION_SIZE_JITTER = (0.65, 1.35)
CT_NOISE = 20.0
MR_NOISE = 0.03
PET_NOISE = 0.08
PROBE_MARGIN = 1.0
SPLIT_FRACTIONS = (0.75, 0.05)


def _default_regions() -> Dict[str, List[str]]:
    return {region: list(organs) for region, organs in ORGAN_LIBRARY.items()}


@dataclass
class PhantomSpec:
    regions: Dict[str, List[str]] = field(default_factory=_default_regions)
    modalities: Tuple[str, ...] = ("ct", "mr", "pet")
    volume_dims: Tuple[int, int, int] = (32, 32, 32)
    n_subjects: int = 24
    seed: int = 0
    spacing: Tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        self.modalities = tuple(Modality.parse(m).value for m in self.modalities)
        self.volume_dims = tuple(int(n) for n in self.volume_dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.regions = {r: list(o) for r, o in self.regions.items()}
        if not self.regions:
            raise ValueError("at least one region is required")
        for region, organs in self.regions.items():
            if region not in ORGAN_LIBRARY:
                raise ValueError(f"unknown region {region!r}; known: {sorted(ORGAN_LIBRARY)}")
            if len(set(organs)) != len(organs) or not organs:
                raise ValueError(f"organs of region {region!r} must be non-empty and unique")
            unknown = set(organs) - set(ORGAN_LIBRARY[region])
            if unknown:
                raise ValueError(f"unknown organs {sorted(unknown)} for region {region!r}")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if len(self.volume_dims) != 3 or min(self.volume_dims) < 16:
            raise ValueError("volume_dims must be three ints >= 16")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["volume_dims"] = list(self.volume_dims)
        d["spacing"] = list(self.spacing)
        return d


@dataclass
class PhantomCase:
    volumes: Dict[str, Volume]
    masks: Dict[str, Mask]
    subject_id: str
    region: str
    lesion_fraction: float = 0.0


def _grid(dims):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")


def ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    """Voxels whose centres lie inside the ellipsoid (voxel units)."""
    x, y, z = _grid(dims)
    (cx, cy, cz), (a, b, c) = center, semi_axes
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0


def cuboid_mask(dims, center, half_widths) -> np.ndarray:
    x, y, z = _grid(dims)
    return (
        (np.abs(x - center[0]) <= half_widths[0])
        & (np.abs(y - center[1]) <= half_widths[1])
        & (np.abs(z - center[2]) <= half_widths[2])
    )


def _case_rng(seed: int, region: str, subject_index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(region.encode()), int(subject_index), int(salt)])


def _subject_id(subject_index: int) -> str:
    return f"s{subject_index:04d}"


def _anatomy(spec: PhantomSpec, region: str, subject_index: int) -> Dict[str, np.ndarray]:
    rng = _case_rng(spec.seed, region, subject_index)
    dims = np.asarray(spec.volume_dims, dtype=np.float64)
    label = np.zeros(spec.volume_dims, dtype=np.int16)
    organs = spec.regions[region]
    lesion = LESION_ORGANS.get(region)
    # draw jitter for every library organ so anatomy does not depend on the organ subset
    shapes = {}
    for name, tpl in ORGAN_LIBRARY[region].items():
        center = (np.asarray(tpl.center) + rng.uniform(-CENTER_JITTER, CENTER_JITTER, 3)) * dims - 0.5
        lo, hi = LESION_SIZE_JITTER if name == lesion else SIZE_JITTER
        radii = np.asarray(tpl.radii) * rng.uniform(lo, hi) * rng.uniform(0.95, 1.05, 3) * dims
        shapes[name] = (tpl.shape, center, np.maximum(radii, 1.0))
    for k, name in enumerate(organs, start=1):
        shape, center, radii = shapes[name]
        region_mask = ellipsoid_mask(spec.volume_dims, center, radii) if shape == "ellipsoid" else cuboid_mask(
            spec.volume_dims, center, radii
        )
        label[region_mask & (label == 0)] = k
    return {name: (label == k) for k, name in enumerate(organs, start=1)}


def _bias_field(dims, rng) -> np.ndarray:
    x, y, z = [g / (n - 1) - 0.5 for g, n in zip(_grid(dims), dims)]
    coef = rng.uniform(-0.25, 0.25, 3)
    return 1.0 + coef[0] * x + coef[1] * y + coef[2] * z + rng.uniform(-0.2, 0.2) * x * y


def _render(spec: PhantomSpec, region: str, subject_index: int, masks, modality: Modality) -> np.ndarray:
    rng = _case_rng(spec.seed, region, subject_index, salt=1 + list(Modality).index(modality))
    img = np.full(spec.volume_dims, BACKGROUND[modality], dtype=np.float64)
    for name, m in masks.items():
        img[m] = getattr(ORGAN_LIBRARY[region][name], modality.value)
    if modality is Modality.CT:
        img += rng.normal(0.0, CT_NOISE, img.shape)
    elif modality is Modality.MR:
        img = ndimage.gaussian_filter(img, 0.6) * _bias_field(spec.volume_dims, rng)
        img *= 1.0 + rng.normal(0.0, MR_NOISE, img.shape)
    else:
        img = ndimage.gaussian_filter(img, 0.8)
        img = np.maximum(img + rng.normal(0.0, PET_NOISE, img.shape) * np.sqrt(img + 0.1), 0.0)
    return img.astype(np.float32)


def learnability_margins(volume: Volume, masks: Dict[str, Mask]) -> Dict[str, float]:
    """|mean(organ) - mean(background)| after clipping and z-normalization, per organ."""
    norm = znormalize(clip_intensities(volume)).data
    background = np.ones(norm.shape, dtype=bool)
    for m in masks.values():
        background &= m.data == 0
    bg = norm[background].mean()
    return {
        organ: float(abs(norm[m.data.astype(bool)].mean() - bg)) if m.data.any() else float("inf")
        for organ, m in masks.items()
    }


def generate_case(spec: PhantomSpec, region: str, subject_index: int, check: bool = True) -> PhantomCase:
    """Render one subject's anatomy for ``region`` in every modality of ``spec``."""
    if region not in spec.regions:
        raise ValueError(f"unknown region {region!r}; spec has {sorted(spec.regions)}")
    sid = _subject_id(subject_index)
    organ_masks = _anatomy(spec, region, subject_index)
    case_id = f"{sid}_{region}"
    masks = {name: Mask(m.astype(np.uint8), name, f"{case_id}_{name}") for name, m in organ_masks.items()}
    volumes = {}
    for mod in spec.modalities:
        modality = Modality(mod)
        data = _render(spec, region, subject_index, organ_masks, modality)
        vol = Volume(data, spec.spacing, modality, region, f"{case_id}_{mod}")
        if check:
            margins = learnability_margins(vol, masks)
            weak = {k: round(v, 3) for k, v in margins.items() if v < PROBE_MARGIN}
            if weak:
                raise AssertionError(f"{vol.id}: organs below learnability margin: {weak}")
        volumes[mod] = vol
    lesion = LESION_ORGANS.get(region)
    n_vox = float(np.prod(spec.volume_dims))
    frac = float(organ_masks[lesion].sum()) / n_vox if lesion in organ_masks else 0.0
    return PhantomCase(volumes, masks, sid, region, frac)


def split_counts(n_subjects: int) -> Tuple[int, int, int]:
    """(train, val, test) subject counts: floor for train and val, remainder to test."""
    n_train = max(1, int(np.floor(SPLIT_FRACTIONS[0] * n_subjects)))
    n_val = min(int(np.floor(SPLIT_FRACTIONS[1] * n_subjects)), n_subjects - n_train)
    return n_train, n_val, n_subjects - n_train - n_val


def _assign_splits(spec: PhantomSpec) -> Dict[str, str]:
    order = np.random.default_rng([int(spec.seed), 0x5EED]).permutation(spec.n_subjects)
    n_train, n_val, _ = split_counts(spec.n_subjects)
    splits = {}
    for rank, idx in enumerate(order):
        splits[_subject_id(int(idx))] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return splits


# -- survival labels ---------------------------------------------------------

LESION_WEIGHT = 1.5
EHR_WEIGHTS = {"age": 0.3, "smoking": 0.25, "alcohol": 0.15}
RISK_NOISE = 0.3
CENSOR_RATE = 0.2
BASE_HAZARD = 0.1


def survival_records(spec: PhantomSpec, lesion_fractions: Dict[str, float]) -> List[dict]:
    """Planted-risk survival labels, one record per subject.

    log-hazard = 1.5 * z(lesion fraction) + 0.3 * z(age) + 0.25 * smoking
    + 0.15 * alcohol + N(0, 0.3^2); times are exponential with rate
    0.1 * exp(log-hazard); each subject is independently censored with
    probability 0.2 at a uniform fraction of its event time.
    """
    rng = np.random.default_rng([int(spec.seed), 0x5A1])
    sids = sorted(lesion_fractions)
    frac = np.array([lesion_fractions[s] for s in sids])
    n = len(sids)
    age = rng.integers(35, 85, n)
    sex = rng.choice(["male", "female"], n)
    weight = np.round(rng.normal(78.0, 12.0, n)).clip(45, 130).astype(int)
    smoking = rng.random(n) < 0.4
    alcohol = rng.random(n) < 0.35

    def z(a):
        a = np.asarray(a, dtype=np.float64)
        return (a - a.mean()) / (a.std() + 1e-12)

    log_hazard = (
        LESION_WEIGHT * z(frac)
        + EHR_WEIGHTS["age"] * z(age)
        + EHR_WEIGHTS["smoking"] * smoking
        + EHR_WEIGHTS["alcohol"] * alcohol
        + rng.normal(0.0, RISK_NOISE, n)
    )
    event_time = rng.exponential(1.0 / (BASE_HAZARD * np.exp(log_hazard)))
    censored = rng.random(n) < CENSOR_RATE
    time = np.where(censored, event_time * rng.uniform(0.05, 1.0, n), event_time)
    region = next(iter(spec.regions))
    return [
        {
            "subject_id": s,
            "time": float(max(time[i], 1e-6)),
            "event": int(not censored[i]),
            "age": int(age[i]),
            "sex": str(sex[i]),
            "weight": int(weight[i]),
            "smoking": bool(smoking[i]),
            "alcohol": bool(alcohol[i]),
            "region": region,
            "lesion_fraction": float(frac[i]),
            "log_hazard": float(log_hazard[i]),
        }
        for i, s in enumerate(sids)
    ]


def generate_dataset(spec: PhantomSpec, out_dir) -> dict:
    """Write every case, a manifest and survival labels under ``out_dir``.

    Returns the manifest dict (also written to ``out_dir/manifest.json``).
    """
    out_dir = Path(out_dir)
    splits = _assign_splits(spec)
    entries = []
    lesion_fractions = {}
    prognosis_region = next(iter(spec.regions))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for idx in range(spec.n_subjects):
            for region in spec.regions:
                case = generate_case(spec, region, idx)
                if region == prognosis_region:
                    lesion_fractions[case.subject_id] = case.lesion_fraction
                mask_files = {}
                for organ, m in case.masks.items():
                    rel = Path("masks") / m.id
                    save_mask(m, out_dir / rel)
                    mask_files[organ] = str(rel) + ".json"
                for mod, vol in case.volumes.items():
                    rel = Path("volumes") / vol.id
                    save_volume(vol, out_dir / rel)
                    entries.append(
                        {
                            "subject_id": case.subject_id,
                            "region": region,
                            "modality": mod,
                            "organs": list(case.masks),
                            "split": splits[case.subject_id],
                            "volume": str(rel) + ".json",
                            "masks": mask_files,
                        }
                    )
        records = survival_records(spec, lesion_fractions)
        manifest = {
            "format": "dualprompt-manifest",
            "version": 1,
            "spec": spec.to_dict(),
            "lesion_organs": {r: LESION_ORGANS[r] for r in spec.regions if r in LESION_ORGANS},
            "splits": {s: sorted(k for k, v in splits.items() if v == s) for s in ("train", "val", "test")},
            "survival": "survival.json",
            "cases": entries,
        }
        (out_dir / "survival.json").write_text(json.dumps({"records": records}, indent=2), encoding="utf-8")
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return manifest

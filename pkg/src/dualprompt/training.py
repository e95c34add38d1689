"""Sampling, augmentation, cosine schedule and the training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .head import head_forward
from .inference import segment_many
from .metrics import dice_score, seg_loss
from .model import DualPromptModel, save_checkpoint
from .text import make_prompt
from .volume_io import Mask, Volume, load_mask, load_volume, preprocess, resample_mask

__all__ = [
    "TrainConfig",
    "TrainSample",
    "Case",
    "CaseSet",
    "load_cases",
    "sample_batch",
    "augment",
    "rotate_scale",
    "adjust_gamma",
    "lr_at",
    "evaluate",
    "train",
    "batch_loss",
    "TrainingDiverged",
    "ConfigurationError",
]

log = logging.getLogger(__name__)

AUGMENTATIONS = ("rotation", "scaling", "brightness", "contrast", "gamma")


class TrainingDiverged(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 60
    batch_size: int = 2
    lr_init: float = 2e-3
    weight_decay: float = 1e-5
    betas: Sequence[float] = (0.9, 0.999)
    patch_size: Sequence[int] = (32, 32, 32)
    seed: int = 0
    fg_prob: float = 2.0 / 3.0
    augment_prob: float = 0.5
    augmentations: Dict[str, bool] = field(default_factory=lambda: {k: True for k in AUGMENTATIONS})
    # also supervise every other organ of the sampled case on the same crop
    all_organs: bool = True

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.betas = tuple(float(b) for b in self.betas)
        if min(self.epochs, self.steps_per_epoch, self.batch_size) < 1:
            raise ConfigurationError("epochs, steps_per_epoch and batch_size must be positive")
        if not self.lr_init > 0:
            raise ConfigurationError("lr_init must be positive")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown:
            raise ConfigurationError(f"unknown augmentations {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["betas"] = list(self.betas)
        return d


@dataclass
class Case:
    """One preprocessed volume with its organ masks."""

    volume: Volume
    masks: Dict[str, Mask]
    subject_id: str
    split: str

    @property
    def region(self) -> str:
        return self.volume.region

    @property
    def modality(self) -> str:
        return self.volume.modality.value


@dataclass
class CaseSet:
    cases: List[Case]
    regions: Dict[str, List[str]]
    modalities: List[str]
    root: Optional[Path] = None

    def split(self, name: str) -> List[Case]:
        return [c for c in self.cases if c.split == name]


def load_cases(manifest_path, splits: Sequence[str] = ("train", "val", "test")) -> CaseSet:
    """Load and preprocess every manifest entry in ``splits``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    spec = manifest["spec"]
    cases = []
    for entry in manifest["cases"]:
        if entry["split"] not in splits:
            continue
        raw = load_volume(root / entry["volume"])
        vol = preprocess(raw)
        masks = {}
        for organ, rel in entry["masks"].items():
            m = load_mask(root / rel)
            if m.shape != raw.shape:
                raise ValueError(f"{rel}: mask shape {m.shape} != volume shape {raw.shape}")
            masks[organ] = resample_mask(m, raw.spacing, vol.spacing)
        cases.append(Case(vol, masks, entry["subject_id"], entry["split"]))
    return CaseSet(cases, {r: list(o) for r, o in spec["regions"].items()}, list(spec["modalities"]), root)


@dataclass
class TrainSample:
    patch: np.ndarray
    mask: np.ndarray
    modality: str
    region: str
    organ: str
    t1_text: str
    t2_text: str
    aux_masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def targets(self):
        """(organ, target prompt, mask) for the sampled organ first, then any auxiliary organs."""
        yield self.organ, self.t2_text, self.mask
        for organ, mask in self.aux_masks.items():
            yield organ, make_prompt(self.modality, organ, "target"), mask

    def replace(self, patch: np.ndarray, mask: np.ndarray, aux_masks: Dict[str, np.ndarray]) -> "TrainSample":
        return TrainSample(
            patch, mask, self.modality, self.region, self.organ, self.t1_text, self.t2_text, aux_masks
        )


def _crop_origin(shape, patch, rng, fg_voxels: Optional[np.ndarray]):
    origin = []
    for axis, (n, p) in enumerate(zip(shape, patch)):
        hi = max(n - p, 0)
        if fg_voxels is None:
            origin.append(int(rng.integers(0, hi + 1)))
        else:
            c = int(fg_voxels[axis])
            lo_o, hi_o = max(0, c - p + 1), min(c, hi)
            origin.append(int(rng.integers(lo_o, hi_o + 1)))
    return origin


def _crop(data: np.ndarray, origin, patch) -> np.ndarray:
    out = np.zeros(patch, dtype=data.dtype)
    src = tuple(slice(o, min(o + p, n)) for o, p, n in zip(origin, patch, data.shape))
    out[tuple(slice(0, s.stop - s.start) for s in src)] = data[src]
    return out


def sample_batch(
    cases: Sequence[Case], rng: np.random.Generator, batch_size: int, patch_size, fg_prob=2 / 3, all_organs=False
):
    """Uniform case, then uniform organ of its region, then a (foreground-biased) crop.

    With ``all_organs`` the other organs of the case are cropped at the same
    origin into ``aux_masks``; the random stream is unchanged.
    """
    if not cases:
        raise ConfigurationError("no training cases")
    batch = []
    for _ in range(batch_size):
        case = cases[int(rng.integers(len(cases)))]
        organs = list(case.masks)
        if not organs:
            raise ConfigurationError(f"case {case.volume.id} has no organs")
        organ = organs[int(rng.integers(len(organs)))]
        mask = case.masks[organ].data
        fg = None
        if rng.random() < fg_prob and mask.any():
            idx = np.argwhere(mask)
            fg = idx[int(rng.integers(len(idx)))]
        origin = _crop_origin(case.volume.shape, patch_size, rng, fg)
        batch.append(
            TrainSample(
                _crop(case.volume.data, origin, patch_size),
                _crop(mask, origin, patch_size),
                case.modality,
                case.region,
                organ,
                make_prompt(case.modality, case.region, "context"),
                make_prompt(case.modality, organ, "target"),
                {o: _crop(m.data, origin, patch_size) for o, m in case.masks.items() if o != organ} if all_organs else {},
            )
        )
    return batch


def rotate_scale(vol: np.ndarray, mask: np.ndarray, axis: int = 0, angle_deg: float = 0.0, scale: float = 1.0):
    """Rotate about ``axis`` and isotropically scale around the patch centre."""
    if angle_deg == 0.0 and scale == 1.0:
        return vol.copy(), mask.copy()
    matrix, offset = _affine(vol.shape, axis, angle_deg, scale)
    v = ndimage.affine_transform(vol.astype(np.float64), matrix, offset, order=1, mode="nearest")
    return v.astype(vol.dtype), _warp_mask(mask, matrix, offset)


def _affine(shape, axis: int, angle_deg: float, scale: float):
    rotvec = np.zeros(3)
    rotvec[axis] = np.deg2rad(angle_deg)
    # output->input mapping: inverse rotation, inverse scale
    matrix = Rotation.from_rotvec(rotvec).as_matrix().T / scale
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return matrix, centre - matrix @ centre


def _warp_mask(mask: np.ndarray, matrix, offset) -> np.ndarray:
    m = ndimage.affine_transform(mask.astype(np.uint8), matrix, offset, order=0, mode="constant", cval=0)
    return m.astype(mask.dtype)


def adjust_gamma(vol: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma on min-max rescaled intensities, mapped back to the original range."""
    if gamma == 1.0:
        return vol.copy()
    lo, hi = float(vol.min()), float(vol.max())
    if hi - lo < 1e-12:
        return vol.copy()
    x = (vol.astype(np.float64) - lo) / (hi - lo)
    return (x**gamma * (hi - lo) + lo).astype(vol.dtype)


def augment(sample: TrainSample, rng: np.random.Generator, toggles: Optional[Dict[str, bool]] = None, p=0.5):
    """Apply each enabled transform independently with probability ``p``."""
    toggles = {k: True for k in AUGMENTATIONS} if toggles is None else toggles
    vol, mask = sample.patch, sample.mask
    # always draw every random number so the stream does not depend on toggles
    draws = {k: rng.random() for k in AUGMENTATIONS}
    axis = int(rng.integers(3))
    angle = float(rng.uniform(-15.0, 15.0))
    scale = float(rng.uniform(0.9, 1.1))
    shift = float(rng.uniform(-0.1, 0.1))
    contrast = float(rng.uniform(0.9, 1.1))
    gamma = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
    on = {k: toggles.get(k, False) and draws[k] < p for k in AUGMENTATIONS}
    aux = dict(sample.aux_masks)
    if on["rotation"] or on["scaling"]:
        geo = (axis, angle if on["rotation"] else 0.0, scale if on["scaling"] else 1.0)
        matrix, offset = _affine(vol.shape, *geo)
        aux = {o: _warp_mask(m, matrix, offset) for o, m in aux.items()}
        vol, mask = rotate_scale(vol, mask, *geo)
    if on["brightness"]:
        vol = vol + np.float32(shift)
    if on["contrast"]:
        mean = vol.mean(dtype=np.float64)
        vol = ((vol - mean) * contrast + mean).astype(np.float32)
    if on["gamma"]:
        vol = adjust_gamma(vol, gamma)
    return sample.replace(vol.astype(np.float32), mask, aux)


def lr_at(step: int, total_steps: int, lr_init: float = 2e-3) -> float:
    """Cosine decay from ``lr_init`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr_init
    step = min(max(step, 0), total_steps)
    return 0.5 * lr_init * (1.0 + math.cos(math.pi * step / total_steps))


def evaluate(model: DualPromptModel, cases: Sequence[Case]) -> Dict[str, float]:
    """Per-organ mean DSC with correct prompts; ``"mean"`` is the macro average over organs."""
    per_organ: Dict[str, List[float]] = {}
    for case in cases:
        organs = list(case.masks)
        t1 = make_prompt(case.modality, case.region, "context")
        t2s = [make_prompt(case.modality, o, "target") for o in organs]
        for organ, (mask, _) in zip(organs, segment_many(case.volume, t1, t2s, model)):
            per_organ.setdefault(organ, []).append(dice_score(mask, case.masks[organ]))
    report = {organ: float(np.mean(v)) for organ, v in per_organ.items()}
    report["mean"] = float(np.mean(list(report.values()))) if report else float("nan")
    return report


def batch_loss(model: DualPromptModel, samples: Sequence[TrainSample]) -> torch.Tensor:
    """Segmentation loss over every (sample, target) pair, sharing one backbone pass per sample."""
    x = torch.from_numpy(np.stack([s.patch for s in samples])[:, None]).to(model.dtype)
    dec, f_dense = model.features(x, [s.modality for s in samples], [s.t1_text for s in samples])
    idx, t2s, masks = [], [], []
    for i, s in enumerate(samples):
        for _, t2, m in s.targets():
            idx.append(i)
            t2s.append(t2)
            masks.append(m)
    sel = torch.tensor(idx)
    _, theta = model.head_params(t2s, f_dense[sel])
    probs = head_forward(dec[sel], theta)
    y = torch.from_numpy(np.stack(masks).astype(np.float32)).to(model.dtype)
    return seg_loss(probs, y)


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_val_dsc: float
    best_state: dict
    checkpoint: Optional[Path] = None


def train(
    model: DualPromptModel,
    data: CaseSet,
    cfg: TrainConfig,
    out_dir=None,
    val_cases: Optional[Sequence[Case]] = None,
) -> TrainResult:
    """Optimize ``model`` on the train split, keeping the best-validation weights.

    The model is left holding the best weights. When ``out_dir`` is given the
    best checkpoint is written to ``model.ckpt`` and per-epoch history to
    ``history.jsonl``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_cases = data.split("train")
    val_cases = list(val_cases) if val_cases is not None else (data.split("val") or train_cases[:4])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr_init, betas=cfg.betas, weight_decay=cfg.weight_decay)
    total = cfg.epochs * cfg.steps_per_epoch
    history = []
    best = (-1.0, 0, copy.deepcopy(model.state_dict()))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_path = out_dir / "history.jsonl"
        hist_path.write_text("")
    step = 0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            lr = lr_at(step, total, cfg.lr_init)
            for group in opt.param_groups:
                group["lr"] = lr
            samples = sample_batch(train_cases, rng, cfg.batch_size, cfg.patch_size, cfg.fg_prob, cfg.all_organs)
            samples = [augment(s, rng, cfg.augmentations, cfg.augment_prob) for s in samples]
            loss = batch_loss(model, samples)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:.3e}, loss={loss.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        val = evaluate(model, val_cases)["mean"]
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_dsc": val, "lr": lr_at(step, total, cfg.lr_init)}
        history.append(row)
        log.info("epoch %d loss %.4f val_dsc %.4f (%.0fs)", epoch, row["loss"], val, time.time() - t0)
        if out_dir is not None:
            with open(hist_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if val > best[0]:
            best = (val, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(
            model, out_dir / "model.ckpt", {"val_dsc": best[0], "epoch": best[1], "train_config": cfg.to_dict()}
        )
    return TrainResult(history, best[1], best[0], best[2], ckpt)

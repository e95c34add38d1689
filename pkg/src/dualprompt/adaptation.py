"""LoRA on the text-conditioning layers, the prognosis head and late fusion.

The scalar risk reported by :class:`PrognosisHead` is the expected number of
time bins *after* the predicted one, ``sum_b (B - 1 - b) * p_b``: earlier
predicted events give larger risks, and uniform bins give ``(B - 1) / 2``.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import deephit_loss, discretize_times, make_time_bins
from .model import DualPromptModel, parameter_checksum, read_checkpoint, write_checkpoint
from .text import serialize_ehr
from .volume_io import FormatError, Volume

__all__ = [
    "LoRALinear",
    "PrognosisHead",
    "PrognosisConfig",
    "default_lora_targets",
    "apply_lora",
    "remove_lora",
    "attach_prognosis_head",
    "parameter_report",
    "predict_risk",
    "finetune_prognosis",
    "late_fusion",
    "save_adapters",
    "load_adapters",
]

log = logging.getLogger(__name__)


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * B A x`` with the base layer frozen and B zero-initialized."""

    def __init__(self, base: nn.Linear, r: int = 4, alpha: float = 8.0, generator: Optional[torch.Generator] = None):
        super().__init__()
        if r < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.r = r
        self.alpha = float(alpha)
        self.scaling = self.alpha / r
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        a = torch.randn(r, base.in_features, generator=generator, dtype=torch.float64) / math.sqrt(base.in_features)
        self.lora_A = nn.Parameter(a.to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)


class PrognosisHead(nn.Module):
    """Pooled bottleneck -> hidden -> time-bin probabilities.

    Pooled features are standardized per channel with cohort statistics
    (identity until :meth:`fit_standardizer` is called).
    """

    def __init__(self, in_channels: int, n_bins: int = 8, hidden: int = 64):
        super().__init__()
        self.n_bins = n_bins
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, n_bins)
        self.register_buffer("edges", torch.zeros(max(n_bins - 1, 0), dtype=torch.float64))
        self.register_buffer("feat_mean", torch.zeros(in_channels))
        self.register_buffer("feat_std", torch.ones(in_channels))

    @staticmethod
    def pool(f_dense: torch.Tensor) -> torch.Tensor:
        return f_dense.mean(dim=tuple(range(2, f_dense.dim())))

    @torch.no_grad()
    def fit_standardizer(self, pooled: torch.Tensor, eps: float = 1e-6):
        self.feat_mean.copy_(pooled.mean(dim=0))
        self.feat_std.copy_(pooled.std(dim=0, unbiased=False) + eps)

    def forward(self, f_dense: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Bin probabilities (N, B) and scalar risks (N,) from a bottleneck map."""
        pooled = (self.pool(f_dense) - self.feat_mean) / self.feat_std
        pmf = torch.softmax(self.fc2(F.relu(self.fc1(pooled))), dim=1)
        weights = torch.arange(self.n_bins - 1, -1, -1, dtype=pmf.dtype)
        return pmf, pmf @ weights


def default_lora_targets(model: DualPromptModel) -> List[str]:
    """Every linear layer of the FiLM generator."""
    return [f"film_gen.{name}" for name, m in model.film_gen.named_modules() if isinstance(m, nn.Linear)]


def _set_submodule(model: nn.Module, name: str, module: nn.Module):
    parent_name, _, child = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, child, module)


def parameter_report(model: nn.Module) -> Dict[str, Union[int, float]]:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return {"trainable": trainable, "total": total, "fraction": trainable / total if total else 0.0}


def apply_lora(
    model: DualPromptModel,
    layer_names: Optional[Sequence[str]] = None,
    r: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
) -> Dict:
    """Wrap the named linear layers with LoRA adapters and freeze everything else.

    Returns a report with trainable/total parameter counts. A prognosis head
    attached afterwards stays trainable.
    """
    layer_names = list(layer_names) if layer_names is not None else default_lora_targets(model)
    modules = dict(model.named_modules())
    for name in layer_names:
        if name not in modules:
            raise ValueError(f"unknown layer {name!r}")
        if not isinstance(modules[name], nn.Linear):
            raise ValueError(f"layer {name!r} is {type(modules[name]).__name__}, not a linear map")
    model.base_checksum = parameter_checksum(model)
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for name in layer_names:
        _set_submodule(model, name, LoRALinear(modules[name], r, alpha, gen))
    model.lora_config = {"layers": layer_names, "r": r, "alpha": alpha, "seed": seed}
    report = parameter_report(model)
    report["layers"] = layer_names
    return report


def remove_lora(model: DualPromptModel) -> DualPromptModel:
    """Swap every adapter back for its base layer (adapters are discarded)."""
    for name, m in list(model.named_modules()):
        if isinstance(m, LoRALinear):
            _set_submodule(model, name, m.base)
    for p in model.parameters():
        p.requires_grad_(True)
    model.__dict__.pop("lora_config", None)
    return model


def attach_prognosis_head(model: DualPromptModel, n_bins: int = 8, hidden: int = 64, seed: int = 0) -> PrognosisHead:
    torch.manual_seed(seed)
    head = PrognosisHead(model.cfg.backbone.bottleneck_channels, n_bins, hidden).to(model.dtype)
    model.prognosis = head
    return head


def _pad_for_backbone(data: np.ndarray, factor: int) -> np.ndarray:
    target = [int(math.ceil(n / factor) * factor) for n in data.shape]
    if list(data.shape) == target:
        return data
    out = np.zeros(target, dtype=data.dtype)
    out[tuple(slice(0, n) for n in data.shape)] = data
    return out


def _bottleneck(model: DualPromptModel, volumes: Sequence[Volume], prompts: Sequence[str]) -> torch.Tensor:
    factor = 2 ** (model.cfg.backbone.levels - 1)
    x = torch.from_numpy(np.stack([_pad_for_backbone(v.data.astype(np.float32), factor) for v in volumes])[:, None])
    return model.features(x.to(model.dtype), [v.modality for v in volumes], list(prompts))[1]


def _prognosis_forward(model: DualPromptModel, volumes: Sequence[Volume], prompts: Sequence[str]):
    return model.prognosis(_bottleneck(model, volumes, prompts))


@dataclass
class RiskPrediction:
    risk: float
    bin_probs: np.ndarray
    prompt: str


@torch.no_grad()
def predict_risk(volume: Volume, ehr: Mapping, model: DualPromptModel) -> RiskPrediction:
    """Risk score for a preprocessed volume; the context prompt is the serialized EHR."""
    if getattr(model, "prognosis", None) is None:
        raise ValueError("model has no prognosis head; call attach_prognosis_head first")
    prompt = serialize_ehr(ehr, volume.modality.value)
    was_training = model.training
    model.eval()
    try:
        pmf, risk = _prognosis_forward(model, [volume], [prompt])
    finally:
        model.train(was_training)
    return RiskPrediction(float(risk[0]), pmf[0].double().numpy(), prompt)


@dataclass
class PrognosisConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    adapter_lr: Optional[float] = 2e-4  # LoRA learning rate; None uses lr
    weight_decay: float = 1e-5
    n_bins: int = 8
    rank_weight: float = 0.1
    lora_rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def finetune_prognosis(
    model: DualPromptModel,
    volumes: Sequence[Volume],
    records: Sequence[Mapping],
    cfg: PrognosisConfig = PrognosisConfig(),
) -> List[float]:
    """Fit adapters and the prognosis head with the DeepHit objective; returns per-epoch loss."""
    if getattr(model, "prognosis", None) is None:
        raise ValueError("attach a prognosis head before fine-tuning")
    if len(volumes) != len(records) or not volumes:
        raise ValueError("need one record per volume and at least one subject")
    times = np.array([r["time"] for r in records], dtype=np.float64)
    events = np.array([r["event"] for r in records], dtype=np.int64)
    edges = make_time_bins(times, cfg.n_bins)
    model.prognosis.edges = torch.from_numpy(edges)
    bins = discretize_times(times, edges)
    prompts = [serialize_ehr(r, v.modality.value) for v, r in zip(volumes, records)]
    with torch.no_grad():
        pooled = [
            model.prognosis.pool(_bottleneck(model, volumes[i : i + cfg.batch_size], prompts[i : i + cfg.batch_size]))
            for i in range(0, len(volumes), cfg.batch_size)
        ]
    model.prognosis.fit_standardizer(torch.cat(pooled))
    head = [p for p in model.prognosis.parameters() if p.requires_grad]
    head_ids = {id(p) for p in head}
    adapters = [p for p in model.parameters() if p.requires_grad and id(p) not in head_ids]
    groups = [{"params": head}]
    if adapters:
        groups.append({"params": adapters, "lr": cfg.lr if cfg.adapter_lr is None else cfg.adapter_lr})
    opt = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(volumes))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            pmf, _ = _prognosis_forward(model, [volumes[j] for j in idx], [prompts[j] for j in idx])
            loss = deephit_loss(
                pmf,
                torch.from_numpy(bins[idx]),
                torch.from_numpy(events[idx]),
                torch.from_numpy(times[idx]),
                rank_weight=cfg.rank_weight,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("prognosis epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history


def late_fusion(outputs: Sequence):
    """Average probability maps voxelwise or risk scores as scalars.

    Inputs are sorted along the ensemble axis before summing, so the result
    does not depend on input order.
    """
    outputs = list(outputs)
    if not outputs:
        raise ValueError("late fusion needs at least one input")
    if all(np.ndim(o) == 0 for o in outputs):
        return math.fsum(float(o) for o in outputs) / len(outputs)
    arrays = [np.asarray(o, dtype=np.float64) for o in outputs]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError(f"cannot fuse outputs of shapes {[a.shape for a in arrays]}")
    if len(arrays) == 1:
        return arrays[0].copy()
    return np.sort(np.stack(arrays), axis=0).sum(axis=0) / len(arrays)


# -- adapter checkpoints -----------------------------------------------------


def _adapter_tensors(model: DualPromptModel):
    return [
        (name, t)
        for name, t in model.state_dict().items()
        if ".lora_" in name or name.startswith("prognosis.")
    ]


def save_adapters(model: DualPromptModel, path) -> None:
    """Write adapters + prognosis head, tagged with the base model's checksum."""
    if not hasattr(model, "lora_config"):
        raise ValueError("model has no LoRA adapters")
    head = getattr(model, "prognosis", None)
    header = {
        "format": "dualprompt-adapter",
        "base_checksum": model.base_checksum,
        "lora": model.lora_config,
        "prognosis": None if head is None else {"n_bins": head.n_bins, "hidden": head.fc1.out_features},
    }
    write_checkpoint(path, _adapter_tensors(model), header)


def load_adapters(model: DualPromptModel, path) -> DualPromptModel:
    """Apply adapters from ``path`` to a base model; refuses mismatched bases."""
    header, tensors = read_checkpoint(path)
    if header.get("format") != "dualprompt-adapter":
        raise FormatError(f"{path}: not an adapter checkpoint")
    checksum = parameter_checksum(model)
    if checksum != header["base_checksum"]:
        raise FormatError(f"{path}: adapters were trained on a different base model")
    lora = header["lora"]
    apply_lora(model, lora["layers"], lora["r"], lora["alpha"], lora["seed"])
    if header.get("prognosis"):
        attach_prognosis_head(model, header["prognosis"]["n_bins"], header["prognosis"]["hidden"])
    state = model.state_dict()
    for name, t in tensors.items():
        if name not in state or tuple(state[name].shape) != tuple(t.shape):
            raise FormatError(f"{path}: unexpected adapter tensor {name}")
        state[name] = t.to(state[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model

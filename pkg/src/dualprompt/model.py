"""The dual-prompt segmentation model and its checkpoint format.

Checkpoint layout (single file)::

    b"DPCK" | uint64 LE header length | UTF-8 JSON header | payload

The header records the format version, the model config and the name and
shape of every parameter; the payload is each parameter as little-endian
float32, concatenated in header order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, FiLMGenerator, FiLMParams
from .head import HeadParams, PredMLP, head_forward
from .text import TextEncoder
from .volume_io import FormatError

__all__ = [
    "ModelConfig",
    "DualPromptModel",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "write_checkpoint",
    "parameter_checksum",
]

CKPT_MAGIC = b"DPCK"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_hidden: int = 8
    d_pred: int = 128
    vocab_size: int = 4096
    encoder_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        backbone = BackboneConfig(**d.pop("backbone", {}))
        return cls(backbone=backbone, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["patch_size"] = list(self.backbone.patch_size)
        d["backbone"]["modalities"] = list(self.backbone.modalities)
        return d


class DualPromptModel(nn.Module):
    """Context prompt drives FiLM in the backbone; target prompt parameterizes the head.

    The text encoder is held outside the module's parameters, so optimizers
    built from ``model.parameters()`` can never touch it.
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, encoder=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        bcfg = self.cfg.backbone
        self.encoder = encoder or TextEncoder(self.cfg.vocab_size, bcfg.text_dim, self.cfg.encoder_seed)
        if self.encoder.dim != bcfg.text_dim:
            raise ValueError(f"encoder dim {self.encoder.dim} != backbone text_dim {bcfg.text_dim}")
        self.film_gen = FiLMGenerator(bcfg)
        self.backbone = Backbone(bcfg)
        self.pred_mlp = PredMLP(
            bcfg.text_dim, bcfg.bottleneck_channels, bcfg.decoder_channels, self.cfg.head_hidden, self.cfg.d_pred
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def embed(self, texts: Union[str, Sequence[str]]) -> torch.Tensor:
        if isinstance(texts, str):
            texts = [texts]
        vecs = np.stack([self.encoder.encode(t).vector for t in texts])
        return torch.from_numpy(vecs).to(self.dtype)

    def film_params(self, t1: Union[str, Sequence[str]]) -> FiLMParams:
        return self.film_gen(self.embed(t1))

    def features(self, x: torch.Tensor, modality, t1, use_film: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        """Decoder features and bottleneck map for a batch of patches."""
        t1 = [t1] * x.shape[0] if isinstance(t1, str) else list(t1)
        params = self.film_params(t1) if use_film else None
        return self.backbone(x, modality, params)

    def head_params(self, t2, f_dense: torch.Tensor) -> Tuple[torch.Tensor, HeadParams]:
        t2 = [t2] * f_dense.shape[0] if isinstance(t2, str) else list(t2)
        return self.pred_mlp(self.embed(t2), f_dense)

    def forward(self, x: torch.Tensor, modality, t1, t2) -> torch.Tensor:
        """Probability maps (B, *spatial) for patches x of shape (B, 1, *spatial)."""
        dec, f_dense = self.features(x, modality, t1)
        _, theta = self.head_params(t2, f_dense)
        return head_forward(dec, theta)


# -- checkpoints -------------------------------------------------------------


def _named_tensors(module: nn.Module) -> List[Tuple[str, torch.Tensor]]:
    return [(name, t) for name, t in module.state_dict().items() if t.is_floating_point()]


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in _named_tensors(module):
        h.update(name.encode())
        h.update(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


def write_checkpoint(path, tensors: Sequence[Tuple[str, torch.Tensor]], header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["version"] = CKPT_VERSION
    header["params"] = [{"name": n, "shape": list(t.shape)} for n, t in tensors]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    if header.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    offset = 12 + n
    tensors = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise FormatError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, tensors


def save_checkpoint(model: DualPromptModel, path, extra: Optional[dict] = None) -> Path:
    header = {"format": "dualprompt-checkpoint", "config": model.cfg.to_dict(), "extra": extra or {}}
    return write_checkpoint(path, _named_tensors(model), header)


def load_checkpoint(path) -> Tuple[DualPromptModel, dict]:
    """Rebuild a model from disk; returns ``(model, extra)``."""
    header, tensors = read_checkpoint(path)
    if header.get("format") != "dualprompt-checkpoint":
        raise FormatError(f"{path}: not a model checkpoint")
    model = DualPromptModel(ModelConfig.from_dict(header["config"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:5]}")
    for name, t in tensors.items():
        if name not in state:
            raise FormatError(f"{path}: unexpected parameter {name}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise FormatError(f"{path}: shape mismatch for {name}")
    model.load_state_dict(tensors)
    model.eval()
    return model, header.get("extra", {})

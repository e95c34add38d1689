"""Target-conditioned dynamic prediction head.

The flattened kernel vector produced per request is laid out as::

    w1 (C_dec x H, row-major) | b1 (H) | w2 (H x H) | b2 (H) | w3 (H x 1) | b3 (1)

and applied as three pointwise convolutions with ReLU after the first two
layers and a logistic output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = ["HeadParams", "head_param_count", "unflatten_head_params", "head_forward", "PredMLP"]


def head_param_count(c_dec: int, hidden: int) -> int:
    return c_dec * hidden + hidden + hidden * hidden + hidden + hidden + 1


@dataclass
class HeadParams:
    """Per-sample kernels; every field carries a leading batch dimension."""

    w1: torch.Tensor  # (B, C_dec, H)
    b1: torch.Tensor  # (B, H)
    w2: torch.Tensor  # (B, H, H)
    b2: torch.Tensor  # (B, H)
    w3: torch.Tensor  # (B, H, 1)
    b3: torch.Tensor  # (B, 1)

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    def flatten(self) -> torch.Tensor:
        parts = [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
        return torch.cat([p.reshape(p.shape[0], -1) for p in parts], dim=1)


def unflatten_head_params(flat: torch.Tensor, c_dec: int, hidden: int) -> HeadParams:
    if flat.dim() == 1:
        flat = flat.unsqueeze(0)
    expected = head_param_count(c_dec, hidden)
    if flat.shape[-1] != expected:
        raise ValueError(f"expected {expected} head parameters for C_dec={c_dec}, H={hidden}, got {flat.shape[-1]}")
    sizes = [c_dec * hidden, hidden, hidden * hidden, hidden, hidden, 1]
    w1, b1, w2, b2, w3, b3 = torch.split(flat, sizes, dim=1)
    n = flat.shape[0]
    return HeadParams(
        w1.reshape(n, c_dec, hidden),
        b1,
        w2.reshape(n, hidden, hidden),
        b2,
        w3.reshape(n, hidden, 1),
        b3,
    )


def _pointwise(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # x: (B, Cin, *S), w: (B, Cin, Cout), b: (B, Cout)
    y = torch.einsum("bi...,bio->bo...", x, w)
    return y + b.reshape(b.shape + (1,) * (x.dim() - 2))


def head_forward(f: torch.Tensor, theta: HeadParams) -> torch.Tensor:
    """Probability map of shape (B, *spatial) from decoder features (B, C_dec, *spatial)."""
    if f.dim() < 3 or f.shape[1] != theta.in_channels:
        raise ValueError(
            f"decoder features with shape {tuple(f.shape)} do not match head expecting "
            f"{theta.in_channels} channels"
        )
    if f.shape[0] != theta.w1.shape[0]:
        raise ValueError("head parameters and features disagree on batch size")
    h = F.relu(_pointwise(f, theta.w1, theta.b1))
    h = F.relu(_pointwise(h, theta.w2, theta.b2))
    return torch.sigmoid(_pointwise(h, theta.w3, theta.b3)).squeeze(1)


class PredMLP(nn.Module):
    """Fuses the target embedding with pooled bottleneck features and emits head kernels."""

    def __init__(self, text_dim: int, bottleneck_channels: int, c_dec: int, hidden: int = 8, d_pred: int = 128):
        super().__init__()
        self.c_dec = c_dec
        self.hidden = hidden
        self.fc1 = nn.Linear(text_dim + bottleneck_channels, d_pred)
        self.fc2 = nn.Linear(d_pred, d_pred)
        self.proj = nn.Linear(d_pred, head_param_count(c_dec, hidden))

    def forward(self, e_t2: torch.Tensor, f_dense: torch.Tensor) -> Tuple[torch.Tensor, HeadParams]:
        pooled = f_dense.mean(dim=tuple(range(2, f_dense.dim())))
        e_pred = F.relu(self.fc2(F.relu(self.fc1(torch.cat([e_t2, pooled], dim=1)))))
        return e_pred, unflatten_head_params(self.proj(e_pred), self.c_dec, self.hidden)

"""Context-modulated 3D U-Net: modality stems, FiLM generator and Down/Up blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .volume_io import Modality

__all__ = ["BackboneConfig", "FiLMParams", "film", "FiLMGenerator", "Backbone"]

# block name -> (gamma, beta), each of shape (B, C)
FiLMParams = Dict[str, Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class BackboneConfig:
    levels: int = 3
    base_channels: int = 8
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    norm_groups: int = 4
    text_dim: int = 64
    film_hidden: int = 128
    residual_gamma: bool = True
    modalities: Tuple[str, ...] = ("ct", "mr", "pet")

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.modalities = tuple(Modality.parse(m).value for m in self.modalities)
        if self.levels < 1 or self.base_channels < 1 or self.norm_groups < 1:
            raise ValueError("levels, base_channels and norm_groups must be positive")
        factor = 2 ** (self.levels - 1)
        if len(self.patch_size) != 3 or any(p < 1 or p % factor for p in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be divisible by 2^(levels-1) = {factor}")

    @property
    def down_widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * 2**j for j in range(self.levels))

    @property
    def up_widths(self) -> Tuple[int, ...]:
        return tuple(reversed(self.down_widths[:-1]))

    @property
    def block_widths(self) -> Dict[str, int]:
        widths = {f"down{j}": w for j, w in enumerate(self.down_widths)}
        widths.update({f"up{k}": w for k, w in enumerate(self.up_widths)})
        return widths

    @property
    def decoder_channels(self) -> int:
        return self.base_channels

    @property
    def bottleneck_channels(self) -> int:
        return self.down_widths[-1]


def film(f: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation ``gamma * f + beta``.

    ``f`` is ``(C, *spatial)`` with 1D ``gamma``/``beta``, or ``(B, C, *spatial)``
    with ``(B, C)`` ``gamma``/``beta``.
    """
    gamma = torch.as_tensor(gamma, dtype=f.dtype)
    beta = torch.as_tensor(beta, dtype=f.dtype)
    if gamma.shape != beta.shape:
        raise ValueError(f"gamma {tuple(gamma.shape)} and beta {tuple(beta.shape)} differ in shape")
    channel_dim = 0 if gamma.dim() == 1 else 1
    if gamma.dim() not in (1, 2) or f.dim() <= channel_dim or gamma.shape[-1] != f.shape[channel_dim]:
        raise ValueError(
            f"FiLM parameters of length {gamma.shape[-1] if gamma.dim() else 0} do not match "
            f"feature map with shape {tuple(f.shape)}"
        )
    if gamma.dim() == 2 and gamma.shape[0] != f.shape[0]:
        raise ValueError("FiLM batch size does not match feature map batch size")
    view = gamma.shape + (1,) * (f.dim() - gamma.dim())
    return gamma.reshape(view) * f + beta.reshape(view)


class FiLMGenerator(nn.Module):
    """Shared trunk on the context embedding plus one linear projection per block."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.residual_gamma = cfg.residual_gamma
        self.trunk = nn.Linear(cfg.text_dim, cfg.film_hidden)
        self.heads = nn.ModuleDict({name: nn.Linear(cfg.film_hidden, 2 * w) for name, w in cfg.block_widths.items()})

    def zero_projections(self):
        with torch.no_grad():
            for head in self.heads.values():
                head.weight.zero_()
                head.bias.zero_()

    def forward(self, e_t1: torch.Tensor) -> FiLMParams:
        h = F.relu(self.trunk(e_t1))
        params = {}
        for name, head in self.heads.items():
            gamma_hat, beta = head(h).chunk(2, dim=-1)
            gamma = 1.0 + gamma_hat if self.residual_gamma else gamma_hat
            params[name] = (gamma, beta)
        return params


def _groups(n_groups: int, channels: int) -> int:
    return math.gcd(n_groups, channels)


class ConvBlock(nn.Module):
    """conv-norm-relu, conv-norm-[FiLM]-relu."""

    def __init__(self, in_ch: int, out_ch: int, n_groups: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(n_groups, out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(n_groups, out_ch), out_ch)

    def forward(self, x, params: Optional[Tuple[torch.Tensor, torch.Tensor]] = None):
        x = F.relu(self.norm1(self.conv1(x)))
        x = self.norm2(self.conv2(x))
        if params is not None:
            x = film(x, *params)
        return F.relu(x)


class Stem(nn.Sequential):
    def __init__(self, width: int):
        super().__init__(
            nn.Conv3d(1, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv3d(width, width, 3, padding=1),
            nn.ReLU(),
        )


class Backbone(nn.Module):
    """Encoder/decoder returning full-resolution decoder features and the bottleneck map."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.down_widths
        self.stems = nn.ModuleDict({m: Stem(widths[0]) for m in cfg.modalities})
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for j, w in enumerate(widths):
            in_ch = widths[0] if j == 0 else widths[j - 1]
            self.down.append(ConvBlock(in_ch, w, cfg.norm_groups))
            if j < len(widths) - 1:
                self.downsample.append(nn.Conv3d(w, w, 3, stride=2, padding=1))
        self.up = nn.ModuleList()
        in_ch = widths[-1]
        for k, w in enumerate(cfg.up_widths):
            self.up.append(ConvBlock(in_ch + w, w, cfg.norm_groups))
            in_ch = w

    def _stem(self, x: torch.Tensor, modality: Union[str, Sequence[str]]) -> torch.Tensor:
        if isinstance(modality, (str, Modality)):
            modality = [modality] * x.shape[0]
        modality = [Modality.parse(m).value for m in modality]
        if len(modality) != x.shape[0]:
            raise ValueError("one modality per batch element is required")
        unknown = set(modality) - set(self.stems)
        if unknown:
            raise ValueError(f"no input stem for modality {sorted(unknown)}")
        if len(set(modality)) == 1:
            return self.stems[modality[0]](x)
        out = None
        for m in sorted(set(modality)):
            idx = torch.tensor([i for i, mi in enumerate(modality) if mi == m])
            y = self.stems[m](x[idx])
            if out is None:
                out = x.new_zeros((x.shape[0],) + y.shape[1:])
            out = out.index_copy(0, idx, y)
        return out

    def forward(
        self,
        x: torch.Tensor,
        modality: Union[str, Sequence[str]],
        params: Optional[FiLMParams] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (B, 1, D, H, W), got {tuple(x.shape)}")
        factor = 2 ** (self.cfg.levels - 1)
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")
        h = self._stem(x, modality)
        skips = []
        for j, block in enumerate(self.down):
            h = block(h, None if params is None else params[f"down{j}"])
            if j < len(self.downsample):
                skips.append(h)
                h = self.downsample[j](h)
        f_dense = h
        for k, block in enumerate(self.up):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1), None if params is None else params[f"up{k}"])
        return h, f_dense

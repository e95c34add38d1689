"""Segmentation/survival objectives and the DSC and concordance metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "UndefinedMetricError",
    "SurvivalRecord",
    "dice_score",
    "soft_dice_loss",
    "bce_loss",
    "seg_loss",
    "make_time_bins",
    "discretize_times",
    "deephit_nll",
    "deephit_rank",
    "deephit_loss",
    "concordance_index",
]

PROB_EPS = 1e-7


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. no comparable pairs)."""


@dataclass
class SurvivalRecord:
    subject_id: str
    time: float
    event: int
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


def dice_score(pred, gt) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(getattr(pred, "data", pred)).astype(bool)
    b = np.asarray(getattr(gt, "data", gt)).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _flat(p: torch.Tensor, gt: torch.Tensor):
    if p.shape != gt.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(gt.shape)} differ in shape")
    if p.dim() <= 3:
        return p.reshape(1, -1), gt.reshape(1, -1).to(p.dtype)
    return p.reshape(p.shape[0], -1), gt.reshape(gt.shape[0], -1).to(p.dtype)


def soft_dice_loss(p: torch.Tensor, gt: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - soft Dice, averaged over the batch (a 3D input counts as one sample)."""
    p, gt = _flat(p, gt)
    inter = (p * gt).sum(dim=1)
    dice = (2.0 * inter + smooth) / (p.sum(dim=1) + gt.sum(dim=1) + smooth)
    return (1.0 - dice).mean()


def bce_loss(p: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    p, gt = _flat(p, gt)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def seg_loss(p: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Soft-Dice loss plus voxelwise binary cross-entropy, equally weighted."""
    return soft_dice_loss(p, gt) + bce_loss(p, gt)


# -- survival ----------------------------------------------------------------


def make_time_bins(times: Sequence[float], n_bins: int = 8) -> np.ndarray:
    """Interior edges of ``n_bins`` equal-frequency bins (length ``n_bins - 1``)."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("cannot build time bins from an empty cohort")
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    return np.quantile(times, qs)


def discretize_times(times: Sequence[float], edges: np.ndarray) -> np.ndarray:
    """Bin index of each time; bin b covers [edges[b-1], edges[b])."""
    return np.searchsorted(np.asarray(edges), np.asarray(times, dtype=np.float64), side="right")


def _check_pmf(pmf: torch.Tensor, bins: torch.Tensor, events: torch.Tensor):
    if pmf.dim() != 2 or pmf.shape[0] == 0:
        raise ValueError("deephit loss needs a non-empty (N, B) batch of bin probabilities")
    if bins.shape[0] != pmf.shape[0] or events.shape[0] != pmf.shape[0]:
        raise ValueError("bins/events length must equal batch size")


def deephit_nll(pmf: torch.Tensor, bins: torch.Tensor, events: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of discrete-time outcomes.

    Events contribute the mass of their bin; censored subjects the mass at or
    after their censoring bin (the event cannot precede censoring).
    """
    _check_pmf(pmf, bins, events)
    bins = bins.long()
    events = events.to(pmf.dtype)
    p_event = pmf.gather(1, bins[:, None]).squeeze(1)
    cum_before = torch.cumsum(pmf, dim=1) - pmf
    p_survive = 1.0 - cum_before.gather(1, bins[:, None]).squeeze(1)
    lik = events * p_event + (1.0 - events) * p_survive
    return -torch.log(lik.clamp_min(PROB_EPS)).mean()


def deephit_rank(
    pmf: torch.Tensor,
    bins: torch.Tensor,
    events: torch.Tensor,
    times: Optional[torch.Tensor] = None,
    sigma: float = 0.1,
) -> torch.Tensor:
    """Mean logistic penalty over comparable pairs whose cumulative incidence is misordered.

    A pair (i, j) is comparable when subject i had an event strictly before
    subject j's time; the penalty is softplus(-(F_i(t_i) - F_j(t_i)) / sigma).
    """
    _check_pmf(pmf, bins, events)
    bins = bins.long()
    order = (times if times is not None else bins).to(torch.float64)
    cif = torch.cumsum(pmf, dim=1)
    cif_at = cif[:, bins]  # cif_at[j, i] = F_j(t_i)
    own = torch.diagonal(cif_at)
    comparable = (order[:, None] < order[None, :]) & (events.bool()[:, None])
    if not comparable.any():
        return pmf.sum() * 0.0
    margin = own[:, None] - cif_at.T  # [i, j] = F_i(t_i) - F_j(t_i)
    return F.softplus(-margin / sigma)[comparable].mean()


def deephit_loss(
    pmf: torch.Tensor,
    bins: torch.Tensor,
    events: torch.Tensor,
    times: Optional[torch.Tensor] = None,
    rank_weight: float = 0.1,
    sigma: float = 0.1,
) -> torch.Tensor:
    return deephit_nll(pmf, bins, events) + rank_weight * deephit_rank(pmf, bins, events, times, sigma)


def concordance_index(risks: Sequence[float], times: Sequence[float], events: Sequence[int]) -> float:
    """Harrell's C: over pairs with time_i < time_j and event_i = 1, the fraction with risk_i > risk_j.

    Tied risks count one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if not (r.shape == t.shape == e.shape) or r.ndim != 1:
        raise ValueError("risks, times and events must be 1D sequences of equal length")
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n = int(comparable.sum())
    if n == 0:
        raise UndefinedMetricError("concordance index undefined: no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = (diff > 0).astype(np.float64) + 0.5 * (diff == 0)
    return float(score[comparable].sum() / n)

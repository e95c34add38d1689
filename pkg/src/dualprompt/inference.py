"""Sliding-window prompted segmentation."""
from __future__ import annotations

import itertools
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch

from .head import head_forward
from .model import DualPromptModel
from .volume_io import Mask, Modality, Volume

__all__ = ["window_starts", "sliding_window_probs", "segment", "segment_many", "THRESHOLD"]

THRESHOLD = 0.5


def window_starts(size: int, patch: int, stride: int) -> List[int]:
    """Window origins along one axis; the last window is flush with the end."""
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _pad_to(data: np.ndarray, patch: Sequence[int]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    shape = data.shape
    padded_shape = tuple(max(n, p) for n, p in zip(shape, patch))
    if padded_shape == shape:
        return data, shape
    out = np.zeros(padded_shape, dtype=data.dtype)
    out[tuple(slice(0, n) for n in shape)] = data
    return out, shape


@torch.no_grad()
def sliding_window_probs(
    model: DualPromptModel,
    data: np.ndarray,
    modality: Union[str, Modality],
    t1: str,
    t2s: Sequence[str],
    patch_size: Sequence[int] = None,
    window_batch: int = 4,
) -> List[np.ndarray]:
    """Probability maps for each target prompt in ``t2s``.

    Windows overlap by half a patch; overlapping predictions are averaged with
    uniform weights. Volumes smaller than the patch are zero-padded and the
    result cropped back.
    """
    patch = tuple(patch_size or model.cfg.backbone.patch_size)
    padded, orig_shape = _pad_to(np.asarray(data, dtype=np.float32), patch)
    starts = [window_starts(n, p, max(1, p // 2)) for n, p in zip(padded.shape, patch)]
    origins = list(itertools.product(*starts))
    acc = [np.zeros(padded.shape, dtype=np.float64) for _ in t2s]
    count = np.zeros(padded.shape, dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(origins), window_batch):
            chunk = origins[i : i + window_batch]
            slices = [tuple(slice(o, o + p) for o, p in zip(org, patch)) for org in chunk]
            x = torch.from_numpy(np.stack([padded[s] for s in slices])[:, None]).to(model.dtype)
            dec, f_dense = model.features(x, modality, t1)
            for k, t2 in enumerate(t2s):
                _, theta = model.head_params(t2, f_dense)
                probs = head_forward(dec, theta).double().numpy()
                for s, p in zip(slices, probs):
                    acc[k][s] += p
            for s in slices:
                count[s] += 1.0
    finally:
        model.train(was_training)
    crop = tuple(slice(0, n) for n in orig_shape)
    return [(a / count)[crop] for a in acc]


def segment_many(
    volume: Volume, t1: str, t2s: Sequence[str], model: DualPromptModel, threshold: float = THRESHOLD
) -> List[Tuple[Mask, np.ndarray]]:
    """Segment several targets under one context prompt, sharing backbone passes."""
    probs = sliding_window_probs(model, volume.data, volume.modality, t1, t2s)
    return [(Mask((p >= threshold).astype(np.uint8), t2, volume.id), p) for t2, p in zip(t2s, probs)]


def segment(
    volume: Volume, t1: str, t2: str, model: DualPromptModel, threshold: float = THRESHOLD
) -> Tuple[Mask, np.ndarray]:
    """Binary mask and probability map for one (context, target) prompt pair.

    ``volume`` is expected to be preprocessed already.
    """
    return segment_many(volume, t1, [t2], model, threshold)[0]

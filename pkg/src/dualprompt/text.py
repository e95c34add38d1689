"""Prompt grammar, frozen text encoder and EHR serialization.

Prompt templates::

    context: "a {modality_name} of {region}"
    target:  "a {modality_name} of {organ}"

with modality names "computed tomography", "magnetic resonance" and
"positron emission tomography". Underscores in region/organ tokens render as
spaces ("left_kidney" -> "left kidney").

The encoder is a hashed bag of tokens: text is lowercased and split on any
character outside ``[a-z0-9]``; each token is hashed with 64-bit FNV-1a,
reduced modulo the vocabulary size, and the matching rows of a fixed-seed
Gaussian table are averaged and L2-normalized.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Union

import numpy as np

from .volume_io import Modality

__all__ = [
    "MODALITY_NAMES",
    "PromptPair",
    "PromptEmbedding",
    "TextEncoder",
    "fnv1a_64",
    "tokenize",
    "make_prompt",
    "serialize_ehr",
]

MODALITY_NAMES = {
    Modality.CT: "computed tomography",
    Modality.MR: "magnetic resonance",
    Modality.PET: "positron emission tomography",
}

EHR_FIELDS = ("sex", "age", "modality", "region", "weight", "smoking", "alcohol")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def _render_token(token: str) -> str:
    return token.replace("_", " ").strip().lower()


def make_prompt(modality: Union[str, Modality], region_or_organ: str, kind: str = "context") -> str:
    """Build a context (T1) or target (T2) prompt from template fields."""
    if kind not in ("context", "target"):
        raise ValueError(f"kind must be 'context' or 'target', got {kind!r}")
    token = _render_token(region_or_organ)
    if not token:
        raise ValueError("region/organ token must be non-empty")
    return f"a {MODALITY_NAMES[Modality.parse(modality)]} of {token}"


@dataclass(frozen=True)
class PromptPair:
    t1_text: str
    t2_text: str

    def __post_init__(self):
        for name in ("t1_text", "t2_text"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"{name} must be a non-empty string")
            object.__setattr__(self, name, value.strip().lower())


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    source_text: str


class TextEncoder:
    """Frozen hashed-bag-of-tokens embedder.

    The table is never exposed as a trainable parameter; ``frozen`` exists so
    that an injected pretrained encoder can advertise the same contract.
    Any object with ``dim`` and ``encode(text) -> PromptEmbedding`` can stand
    in for this class.
    """

    def __init__(self, vocab_size: int = 4096, dim: int = 64, seed: int = 0):
        if vocab_size < 1 or dim < 1:
            raise ValueError("vocab_size and dim must be positive")
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.seed = int(seed)
        self.frozen = True
        rng = np.random.default_rng(self.seed)
        table = rng.standard_normal((self.vocab_size, self.dim)).astype(np.float32)
        table.setflags(write=False)
        self._table = table
        self._cache: Dict[str, PromptEmbedding] = {}

    @property
    def table(self) -> np.ndarray:
        return self._table

    def token_index(self, token: str) -> int:
        return fnv1a_64(token.encode("utf-8")) % self.vocab_size

    def encode(self, text: str) -> PromptEmbedding:
        if not isinstance(text, str) or not text.strip():
            raise ValueError("cannot encode empty text")
        canonical = text.strip().lower()
        hit = self._cache.get(canonical)
        if hit is not None:
            return hit
        tokens = tokenize(canonical)
        if not tokens:
            raise ValueError(f"text {text!r} contains no tokens")
        rows = self._table[[self.token_index(t) for t in tokens]].astype(np.float64)
        vec = rows.mean(axis=0)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise ValueError(f"text {text!r} embeds to the zero vector")
        out = (vec / norm).astype(np.float32)
        out.setflags(write=False)
        emb = PromptEmbedding(out, canonical)
        self._cache[canonical] = emb
        return emb


def _habits(smoking: bool, alcohol: bool) -> str:
    habits = []
    if smoking:
        habits.append("smoking")
    if alcohol:
        habits.append("alcohol consumption")
    if not habits:
        return "no smoking or alcohol history"
    return "a history of " + " and ".join(habits)


def _fmt_number(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else f"{x:g}"


def serialize_ehr(record: Mapping, modality: Optional[Union[str, Modality]] = None) -> str:
    """Fill the prognosis prompt template from an EHR record.

    ``modality`` overrides the record's own field (a subject imaged with CT and
    PET gets one prompt per modality).
    """
    record = dict(record)
    if modality is not None:
        record["modality"] = modality
    for name in EHR_FIELDS:
        if record.get(name) is None or (isinstance(record[name], str) and not record[name].strip()):
            raise ValueError(f"missing required EHR field: {name}")
    mod = record["modality"]
    mod = mod.value if isinstance(mod, Modality) else str(mod)
    text = (
        f"predict the risk score of a {record['sex']} patient, {_fmt_number(record['age'])} years old, "
        f"with {mod} imaging of the {_render_token(str(record['region']))}, "
        f"a weight of {_fmt_number(record['weight'])} kilograms, and "
        f"{_habits(bool(record['smoking']), bool(record['alcohol']))}"
    )
    return text.lower()

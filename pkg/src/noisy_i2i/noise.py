"""Label-noise models: transition matrices and label corruption."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, InvalidSpecError


class NoiseKind(str, Enum):
    NONE = "none"
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"
    PER_ATTRIBUTE_FLIP = "per_attribute_flip"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.NONE
    rate: float = 0.0
    num_domains: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidSpecError(f"noise rate must lie in [0, 1], got {self.rate}")
        if self.num_domains < 2:
            raise InvalidSpecError(f"need at least 2 domains, got {self.num_domains}")
        if self.kind is NoiseKind.NONE and self.rate != 0.0:
            raise InvalidSpecError("noise kind 'none' requires rate 0")

    def transition_matrix(self) -> TransitionMatrix:
        if self.kind is NoiseKind.SYMMETRIC:
            return build_symmetric(self.num_domains, self.rate)
        if self.kind is NoiseKind.ASYMMETRIC:
            return build_asymmetric(self.num_domains, self.rate)
        if self.kind is NoiseKind.NONE:
            return TransitionMatrix(np.eye(self.num_domains))
        raise InvalidSpecError("per-attribute flips have no transition matrix")


class TransitionMatrix:
    """Row-stochastic matrix with ``entries[i, j] = p(noisy=j | clean=i)``."""

    def __init__(self, entries):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise InvalidSpecError(f"transition matrix must be square, got {entries.shape}")
        if entries.shape[0] < 2:
            raise InvalidSpecError("transition matrix needs at least 2 classes")
        if np.any(entries < 0) or np.any(entries > 1):
            raise InvalidSpecError("transition matrix entries must lie in [0, 1]")
        if not np.allclose(entries.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise InvalidSpecError("transition matrix rows must sum to 1")
        entries.setflags(write=False)
        self.entries = entries

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, TransitionMatrix) and np.array_equal(self.entries, other.entries)

    def __repr__(self):
        return f"TransitionMatrix({self.entries.tolist()})"


def _check_args(c: int, mu: float) -> None:
    if c < 2:
        raise InvalidSpecError(f"need at least 2 domains, got {c}")
    if not 0.0 <= mu <= 1.0:
        raise InvalidSpecError(f"noise rate must lie in [0, 1], got {mu}")


def build_symmetric(c: int, mu: float) -> TransitionMatrix:
    """Flip to each of the other ``c - 1`` classes uniformly with total probability ``mu``."""
    _check_args(c, mu)
    t = np.full((c, c), mu / (c - 1))
    np.fill_diagonal(t, 1.0 - mu)
    return TransitionMatrix(t)


def build_asymmetric(c: int, mu: float) -> TransitionMatrix:
    """Flip class ``i`` to ``(i + 1) mod c`` with probability ``mu``."""
    _check_args(c, mu)
    t = np.eye(c) * (1.0 - mu)
    idx = np.arange(c)
    t[idx, (idx + 1) % c] += mu
    return TransitionMatrix(t)


def corrupt(labels: Sequence[int], T: TransitionMatrix, rng: np.random.Generator) -> np.ndarray:
    """Draw each noisy label independently from row ``T[label]``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= T.num_classes):
        raise InvalidInputError(f"labels must lie in [0, {T.num_classes})")
    labels = labels.astype(np.int64)
    # inverse-CDF sampling: one uniform per label keeps the draw count fixed
    cdf = np.cumsum(T.entries, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(labels.shape[0])
    noisy = (u[:, None] >= cdf[labels]).sum(axis=1)
    return noisy.astype(np.int64)


def corrupt_multilabel(labels, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Flip every binary attribute independently with probability ``mu``."""
    if not 0.0 <= mu <= 1.0:
        raise InvalidSpecError(f"noise rate must lie in [0, 1], got {mu}")
    try:
        arr = np.array(labels, dtype=np.int64)
    except ValueError as exc:
        raise InvalidInputError("attribute vectors must all have the same length") from exc
    if arr.ndim != 2:
        raise InvalidInputError("attribute vectors must all have the same length")
    if np.any((arr != 0) & (arr != 1)):
        raise InvalidInputError("attribute vectors must be binary")
    flips = rng.random(arr.shape) < mu
    return np.where(flips, 1 - arr, arr)


def apply_noise(labels, spec: NoiseSpec, seed: int) -> np.ndarray:
    """Corrupt a label set once, deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    if spec.kind is NoiseKind.PER_ATTRIBUTE_FLIP:
        return corrupt_multilabel(labels, spec.rate, rng)
    return corrupt(labels, spec.transition_matrix(), rng)


def save_sidecar(path: str | Path, sample_ids: Sequence[str], clean, noisy) -> None:
    """Write ``{sample_id: {"clean": ..., "noisy": ...}}`` as JSON."""
    if not (len(sample_ids) == len(clean) == len(noisy)):
        raise InvalidInputError("sample_ids, clean and noisy must have equal length")

    def plain(v):
        return np.asarray(v).tolist()

    record = {sid: {"clean": plain(c), "noisy": plain(n)} for sid, c, n in zip(sample_ids, clean, noisy)}
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True))


def load_sidecar(path: str | Path) -> Mapping[str, dict]:
    return json.loads(Path(path).read_text())

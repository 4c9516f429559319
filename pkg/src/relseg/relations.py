"""Binary mask logic: Possible/Consensus relations, Dice and the confidence score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, UsageError, ValidationError

DEFAULT_THRESHOLD = 0.5


def as_mask(bits) -> np.ndarray:
    """Coerce to a 2-d boolean array (the in-memory BinaryMask)."""
    mask = np.asarray(bits, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise DimensionError(f"a mask must be a non-empty H x W array, got shape {mask.shape}")
    return mask


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask dimensions differ: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class RelationPair:
    possible: np.ndarray
    consensus: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, RelationPair):
            return NotImplemented
        return (np.array_equal(self.possible, other.possible)
                and np.array_equal(self.consensus, other.consensus))

    def is_nested(self) -> bool:
        return bool(np.all(self.possible | ~self.consensus))


def make_relations(s1, s2) -> RelationPair:
    s1, s2 = as_mask(s1), as_mask(s2)
    _check_same(s1, s2)
    return RelationPair(possible=s1 | s2, consensus=s1 & s2)


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks agree perfectly (1.0)."""
    a, b = as_mask(a), as_mask(b)
    _check_same(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def confidence(pred: RelationPair) -> float:
    """Agreement between predicted Possible and Consensus maps, in [0, 1].

    Predicted heads are independent, so the pair need not be nested.
    """
    return dice(pred.possible, pred.consensus)


def binarize(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Set a pixel iff its probability is strictly above ``threshold``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"probability map must be 2-d, got shape {p.shape}")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ValidationError("probability map has values outside [0, 1]")
    return p > threshold


def aggregate_mc(masks: Sequence) -> RelationPair:
    """n-ary union and intersection of sampled masks."""
    if len(masks) == 0:
        raise UsageError("aggregate_mc needs at least one mask")
    ms = [as_mask(m) for m in masks]
    for m in ms[1:]:
        _check_same(ms[0], m)
    stack = np.stack(ms)
    return RelationPair(possible=np.logical_or.reduce(stack), consensus=np.logical_and.reduce(stack))

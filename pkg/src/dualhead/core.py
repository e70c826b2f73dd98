"""Shared domain types and elementary probability utilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Clamp applied inside every log so that degenerate probabilities never
# produce -inf. Kept identical across all loss terms.
PROB_FLOOR = 1e-12

# Simplex membership tolerance for probability vectors.
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class LabelSpace:
    """The label set {0, ..., num_classes - 1}."""

    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")

    def contains(self, label: int) -> bool:
        return 0 <= int(label) < self.num_classes


@dataclass(frozen=True)
class Example:
    """One dataset record.

    ``clean_label`` is evaluation-only ground truth; training code must never
    read it.
    """

    index: int
    features: np.ndarray
    noisy_label: int
    clean_label: Optional[int] = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"negative example index {self.index}")


@dataclass(frozen=True)
class WeightTable:
    """Per-sample training weights in [0, 1], indexed by Example.index.

    The table is replaced wholesale at epoch boundaries; instances are
    immutable and safe to share.
    """

    weights: np.ndarray = field()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-D array")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError(
                f"weights outside [0, 1]: min={w.min()}, max={w.max()}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def ones(cls, n: int) -> "WeightTable":
        return cls(np.ones(n, dtype=np.float64))

    def __len__(self) -> int:
        return self.weights.size

    def gather(self, indices: np.ndarray) -> np.ndarray:
        return self.weights[indices]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite logits")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    """Indicator vector with a 1 at ``label``."""
    label = int(label)
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range [0, {num_classes})")
    v = np.zeros(num_classes, dtype=np.float64)
    v[label] = 1.0
    return v


def validate_probabilities(p: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Check that ``p`` is a simplex point; returns it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be non-empty and 1-D")
    if not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite")
    if p.min() < -tol or p.max() > 1.0 + tol:
        raise ValueError("probabilities outside [0, 1]")
    s = p.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"probabilities sum to {s}, not 1")
    return p

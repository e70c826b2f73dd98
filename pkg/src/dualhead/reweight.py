"""Dynamic sample reweighting: corrected labels, complementary-label draws,
dataset-global weight normalization, and noise-ratio estimation.

All inputs here are plain numpy arrays collected from a full-dataset
inference pass of the averaged model; nothing in this module touches
autograd state.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import WeightTable


def corrected_label(p_pos: np.ndarray, p_neg: np.ndarray) -> int:
    """Argmax of the element-wise sum of the two heads' probabilities.

    Ties break toward the lowest class index.
    """
    p_pos = np.asarray(p_pos, dtype=np.float64)
    p_neg = np.asarray(p_neg, dtype=np.float64)
    if p_pos.shape != p_neg.shape:
        raise ValueError(f"shape mismatch: {p_pos.shape} vs {p_neg.shape}")
    return int(np.argmax(p_pos + p_neg))


def corrected_labels(pos_probs: np.ndarray, neg_probs: np.ndarray) -> np.ndarray:
    """Batched ``corrected_label`` over [n, c] probability arrays."""
    pos_probs = np.asarray(pos_probs, dtype=np.float64)
    neg_probs = np.asarray(neg_probs, dtype=np.float64)
    if pos_probs.shape != neg_probs.shape:
        raise ValueError(
            f"shape mismatch: {pos_probs.shape} vs {neg_probs.shape}")
    return np.argmax(pos_probs + neg_probs, axis=1).astype(np.int64)


def sample_complementary(noisy_label: int, corrected: Optional[int],
                         num_classes: int, rng: np.random.Generator) -> int:
    """Uniform draw of a label excluded from {noisy, corrected}.

    During warm-up ``corrected`` is None and only the noisy label is
    excluded. When the exclusion set exhausts the label space (only possible
    for two classes with corrected != noisy), fall back to excluding just the
    noisy label.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    noisy_label = int(noisy_label)
    excluded = {noisy_label}
    if corrected is not None:
        excluded.add(int(corrected))
    candidates = [k for k in range(num_classes) if k not in excluded]
    if not candidates:
        candidates = [k for k in range(num_classes) if k != noisy_label]
    if len(candidates) == 1:
        return candidates[0]
    return int(candidates[rng.integers(len(candidates))])


def update_weights(neg_probs_on_noisy_label: np.ndarray) -> WeightTable:
    """Min-max normalize the negative head's probabilities on the given
    labels over the whole dataset: the most-suspect sample gets weight 0,
    the most-trusted weight 1. Degenerate (constant) input maps to all 1."""
    p = np.asarray(neg_probs_on_noisy_label, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities outside [0, 1]")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return WeightTable.ones(p.size)
    return WeightTable((p - lo) / (hi - lo))


def estimate_noise_ratio(neg_probs_on_noisy_label: np.ndarray,
                         threshold: float) -> float:
    """Fraction of samples whose probability on the given label falls
    strictly below the threshold."""
    p = np.asarray(neg_probs_on_noisy_label, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities outside [0, 1]")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return float(np.mean(p < threshold))


def sop_weight_from_ratio(noise_ratio: float) -> float:
    """Scale the over-parameterization term as 50 * r^2 of the estimated
    noise ratio."""
    if not 0.0 <= noise_ratio <= 1.0:
        raise ValueError(f"noise ratio out of [0, 1]: {noise_ratio}")
    return 50.0 * noise_ratio * noise_ratio


def write_weight_dump(path, indices: np.ndarray, weights: np.ndarray,
                      neg_probs: np.ndarray, corrected: np.ndarray) -> None:
    """One text row per sample: index,weight,neg_prob_on_noisy_label,corrected_label."""
    with open(path, "w") as f:
        f.write("index,weight,neg_prob_on_noisy_label,corrected_label\n")
        for i, w, p, c in zip(indices, weights, neg_probs, corrected):
            f.write(f"{int(i)},{w:.10g},{p:.10g},{int(c)}\n")

"""Label-noise detection: threshold split of the negative head's
probabilities, precision/recall/F1 against ground truth, and threshold
sweeps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean, with the 0/0 convention mapped to 0."""
    denom = precision + recall
    if denom <= 0.0:
        return 0.0
    return 2.0 * precision * recall / denom


def _check_probs(neg_probs: np.ndarray) -> np.ndarray:
    p = np.asarray(neg_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probabilities outside [0, 1]")
    return p


def classify_noise(neg_probs_on_noisy_label: np.ndarray,
                   threshold: float) -> np.ndarray:
    """Flag a sample as noisy iff its probability is strictly below the
    threshold (boundary values count as clean)."""
    p = _check_probs(neg_probs_on_noisy_label)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return p < threshold


def precision_recall_f1(predicted: np.ndarray, truth: np.ndarray) -> DetectionMetrics:
    """Detection metrics of a predicted noise mask against the true one
    (truth is noisy iff the given label differs from the clean one).
    Undefined 0/0 ratios map to 0."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"length mismatch: {predicted.shape} vs {truth.shape}")
    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    tn = int(np.sum(~predicted & ~truth))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return DetectionMetrics(
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


def threshold_sweep(neg_probs: np.ndarray, truth: np.ndarray,
                    h_grid: Sequence[float],
                    out_path: Optional[str] = None) -> list[tuple[float, DetectionMetrics]]:
    """Detection metrics at every threshold of a strictly increasing grid.

    When ``out_path`` is given, also writes "h,precision,recall,f1" rows for
    plotting.
    """
    grid = [float(h) for h in h_grid]
    if not grid:
        raise ValueError("empty threshold grid")
    if any(not 0.0 < h < 1.0 for h in grid):
        raise ValueError("thresholds must lie in (0, 1)")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly increasing")
    rows = [(h, precision_recall_f1(classify_noise(neg_probs, h), truth))
            for h in grid]
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write("h,precision,recall,f1\n")
            for h, m in rows:
                f.write(f"{h:.10g},{m.precision:.10g},{m.recall:.10g},{m.f1:.10g}\n")
    return rows


def ranking_auc(noise_scores: np.ndarray, truth: np.ndarray) -> float:
    """AUC of ranking samples by a noisiness score (higher = more suspect)
    against the true noise mask."""
    truth = np.asarray(truth, dtype=bool)
    if truth.all() or not truth.any():
        raise ValueError("truth mask needs both clean and noisy samples")
    return float(roc_auc_score(truth.astype(int), np.asarray(noise_scores)))

"""Loss terms for two-head training: positive, negative, distillation, and
the pluggable regularizers folded into the positive-head objective.

Every function accepts either a single probability vector ``[c]`` or a batch
``[n, c]`` and returns a scalar / per-sample tensor accordingly. All logs are
floor-clamped (see ``core.PROB_FLOOR``) so no input produces -inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .core import PROB_FLOOR


@dataclass
class LossWeights:
    """Coefficients for the composite objective.

    ``sop`` is recomputed at every weight refresh from the estimated noise
    ratio (see ``reweight.sop_weight_from_ratio``); the rest are static.
    """

    distill_kl: float = 0.1        # KL pull of shallow heads toward the deep head
    distill_feature: float = 1e-6  # feature-matching L2 of shallow heads
    sop: float = 0.0               # over-parameterized noise-model residual
    consistency: float = 0.9       # agreement between two augmented views
    class_balance: float = 0.1     # batch-mean prediction vs uniform

    def __post_init__(self):
        for name in ("distill_kl", "distill_feature", "sop", "consistency",
                     "class_balance"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() == 0:
        return
    lo, hi = int(labels.min()), int(labels.max())
    if lo < 0 or hi >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes}): {lo if lo < 0 else hi}")


def _gather_class(probs: torch.Tensor, labels) -> torch.Tensor:
    """Pick probs[..., label] for a vector or a batch of vectors."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device)
    if probs.dim() == 1:
        _check_labels(labels.reshape(1), probs.shape[-1])
        return probs[labels]
    _check_labels(labels, probs.shape[-1])
    return probs.gather(1, labels.view(-1, 1)).squeeze(1)


def _clamped_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=PROB_FLOOR))


def cross_entropy(probs: torch.Tensor, labels) -> torch.Tensor:
    """-log p at the given label."""
    return -_clamped_log(_gather_class(probs, labels))


def negative_loss(probs: torch.Tensor, complementary_labels) -> torch.Tensor:
    """-log(1 - p) at the complementary label."""
    return -_clamped_log(1.0 - _gather_class(probs, complementary_labels))


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """sum_k p_k log(p_k / q_k), non-negative, zero iff p == q."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return (p * (_clamped_log(p) - _clamped_log(q))).sum(dim=-1)


def feature_l2(feat: torch.Tensor, teacher_feat: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance to the (gradient-detached) teacher feature."""
    if feat.shape != teacher_feat.shape:
        raise ValueError(
            f"shape mismatch: {tuple(feat.shape)} vs {tuple(teacher_feat.shape)}")
    d = feat - teacher_feat.detach()
    if d.dim() <= 1:
        return (d * d).sum()
    return (d * d).flatten(1).sum(dim=1)


def self_distillation_terms(
    shallow_probs: Sequence[torch.Tensor],
    labels,
    teacher_probs: torch.Tensor,
    shallow_feats: Sequence[torch.Tensor],
    teacher_feat: torch.Tensor,
):
    """Per-sample (ce, kl, l2) sums over the shallow heads, teacher detached.

    Split out so the training loop can weight the ce part per sample while
    leaving kl/l2 unweighted.
    """
    if len(shallow_probs) != len(shallow_feats):
        raise ValueError("shallow probs/features length mismatch")
    batched = teacher_probs.dim() > 1
    n = teacher_probs.shape[0] if batched else ()
    zero = teacher_probs.new_zeros(n) if batched else teacher_probs.new_zeros(())
    ce_sum, kl_sum, l2_sum = zero, zero.clone(), zero.clone()
    teacher_p = teacher_probs.detach()
    for p_j, f_j in zip(shallow_probs, shallow_feats):
        ce_sum = ce_sum + cross_entropy(p_j, labels)
        kl_sum = kl_sum + kl_divergence(p_j, teacher_p)
        l2_sum = l2_sum + feature_l2(f_j, teacher_feat)
    return ce_sum, kl_sum, l2_sum


def self_distillation_loss(
    shallow_probs: Sequence[torch.Tensor],
    labels,
    teacher_probs: torch.Tensor,
    shallow_feats: Sequence[torch.Tensor],
    teacher_feat: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """sum_j CE(p_j, label) + a * sum_j KL(p_j, teacher) + l * sum_j |F_j - F|^2."""
    ce, kl, l2 = self_distillation_terms(
        shallow_probs, labels, teacher_probs, shallow_feats, teacher_feat)
    return ce + weights.distill_kl * kl + weights.distill_feature * l2


def positive_loss(probs: torch.Tensor, labels, regularizers: dict,
                  weights: LossWeights) -> torch.Tensor:
    """CE plus the weighted pluggable regularizer terms.

    ``regularizers`` holds precomputed non-negative values under the keys
    ``sop``, ``consistency`` and ``class_balance``.
    """
    loss = cross_entropy(probs, labels)
    loss = loss + weights.sop * regularizers.get("sop", 0.0)
    loss = loss + weights.consistency * regularizers.get("consistency", 0.0)
    loss = loss + weights.class_balance * regularizers.get("class_balance", 0.0)
    return loss


def total_loss(l_pl, l_nl, l_sd):
    """Plain sum of the three top-level components, no rescaling."""
    parts = []
    for name, v in (("positive", l_pl), ("negative", l_nl), ("distill", l_sd)):
        t = torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite {name} loss component")
        parts.append(v)
    return parts[0] + parts[1] + parts[2]


def weighted_mean(values: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """sum_i w_i * v_i / n. The denominator is the batch size, not sum(w),
    so down-weighting a sample genuinely shrinks the total."""
    if values.shape != weights.shape:
        raise ValueError(
            f"length mismatch: {tuple(values.shape)} vs {tuple(weights.shape)}")
    if weights.numel() and (weights.min() < 0 or weights.max() > 1):
        raise ValueError("weights must lie in [0, 1]")
    return (values * weights).sum() / values.shape[-1]


def sop_residual_loss(probs: torch.Tensor, slack_pos: torch.Tensor,
                      slack_neg: torch.Tensor, labels_onehot: torch.Tensor) -> torch.Tensor:
    """Sparse over-parameterized noise-model residual, per sample:

    || p + u^2 * y - v^2 * (1 - y) - y ||^2

    with u the slack on the given-label coordinate and v on all others.
    """
    if probs.shape != labels_onehot.shape:
        raise ValueError("probs/onehot shape mismatch")
    residual = probs + slack_pos.pow(2) * labels_onehot \
        - slack_neg.pow(2) * (1.0 - labels_onehot) - labels_onehot
    return (residual * residual).sum(dim=-1)


def consistency_loss(probs_a: torch.Tensor, probs_b: torch.Tensor) -> torch.Tensor:
    """KL between predictions on two augmented views of the same sample."""
    return kl_divergence(probs_a, probs_b)


def class_balance_loss(probs_batch: torch.Tensor) -> torch.Tensor:
    """KL between the batch-mean prediction and the uniform distribution."""
    if probs_batch.dim() != 2:
        raise ValueError("expected a [n, c] batch of probability vectors")
    mean_p = probs_batch.mean(dim=0)
    uniform = torch.full_like(mean_p, 1.0 / mean_p.shape[0])
    return kl_divergence(mean_p, uniform)


class NoiseSlack(torch.nn.Module):
    """Per-sample learned slack variables for the over-parameterized noise
    model. Values are kept in [-1, 1] (so their squares stay in [0, 1]) by
    projecting after each optimizer step."""

    def __init__(self, num_samples: int, num_classes: int,
                 init_scale: float = 1e-3, generator: torch.Generator | None = None):
        super().__init__()
        shape = (num_samples, num_classes)
        # zero init is a stationary point of the residual; start with tiny noise
        u = (torch.rand(shape, generator=generator) * 2 - 1) * init_scale
        v = (torch.rand(shape, generator=generator) * 2 - 1) * init_scale
        self.slack_pos = torch.nn.Parameter(u)
        self.slack_neg = torch.nn.Parameter(v)

    def forward(self, indices: torch.Tensor, probs: torch.Tensor,
                labels_onehot: torch.Tensor) -> torch.Tensor:
        return sop_residual_loss(
            probs, self.slack_pos[indices], self.slack_neg[indices], labels_onehot)

    @torch.no_grad()
    def project_(self) -> None:
        self.slack_pos.clamp_(-1.0, 1.0)
        self.slack_neg.clamp_(-1.0, 1.0)

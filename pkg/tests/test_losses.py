import math

import numpy as np
import pytest
import torch

from dualhead import losses
from dualhead.losses import (LossWeights, NoiseSlack, class_balance_loss,
                             consistency_loss, cross_entropy, feature_l2,
                             kl_divergence, negative_loss, positive_loss,
                             self_distillation_loss, sop_residual_loss,
                             total_loss, weighted_mean)


def vec(*vals):
    return torch.tensor(vals, dtype=torch.float64)


def test_cross_entropy_uniform():
    assert float(cross_entropy(vec(0.25, 0.25, 0.25, 0.25), 0)) == pytest.approx(
        math.log(4), abs=1e-6)


def test_cross_entropy_one_hot_is_zero():
    assert float(cross_entropy(vec(0.0, 1.0, 0.0), 1)) == pytest.approx(0.0)


def test_cross_entropy_hand_value():
    assert float(cross_entropy(vec(0.7, 0.2, 0.1), 1)) == pytest.approx(
        1.609438, abs=1e-6)


def test_cross_entropy_invalid_label():
    with pytest.raises(ValueError):
        cross_entropy(vec(0.5, 0.5), 2)
    with pytest.raises(ValueError):
        cross_entropy(vec(0.5, 0.5), -1)


def test_cross_entropy_batched():
    out = cross_entropy(torch.tensor([[0.25, 0.75], [0.5, 0.5]], dtype=torch.float64),
                        torch.tensor([1, 0]))
    assert out.shape == (2,)
    assert float(out[0]) == pytest.approx(-math.log(0.75))
    assert float(out[1]) == pytest.approx(math.log(2))


def test_negative_loss_half():
    assert float(negative_loss(vec(0.5, 0.5), 0)) == pytest.approx(
        0.693147, abs=1e-6)


def test_negative_loss_zero_probability():
    assert float(negative_loss(vec(0.0, 1.0), 0)) == pytest.approx(0.0)


def test_negative_loss_high_probability():
    assert float(negative_loss(vec(0.9, 0.05, 0.05), 0)) == pytest.approx(
        2.302585, abs=1e-6)


def test_negative_loss_invalid_label():
    with pytest.raises(ValueError):
        negative_loss(vec(0.5, 0.5), 5)


def test_kl_identity_is_zero():
    p = vec(0.3, 0.7)
    assert float(kl_divergence(p, p)) == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_values():
    assert float(kl_divergence(vec(1.0, 0.0), vec(0.5, 0.5))) == pytest.approx(
        0.693147, abs=1e-6)
    assert float(kl_divergence(vec(0.5, 0.5), vec(0.25, 0.75))) == pytest.approx(
        0.143841, abs=1e-6)


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_divergence(vec(0.5, 0.5), vec(0.2, 0.3, 0.5))


def test_kl_non_negative_property():
    rng = np.random.default_rng(7)
    for _ in range(200):
        c = int(rng.integers(2, 6))
        p = torch.tensor(rng.dirichlet(np.ones(c)))
        q = torch.tensor(rng.dirichlet(np.ones(c)))
        kl = float(kl_divergence(p, q))
        assert kl >= -1e-12
        if not torch.allclose(p, q, atol=1e-9):
            assert kl > 0.0
        assert float(kl_divergence(p, p)) == pytest.approx(0.0, abs=1e-9)


def test_feature_l2_values():
    assert float(feature_l2(vec(1.0, 2.0), vec(1.0, 2.0))) == 0.0
    assert float(feature_l2(vec(1.0, 2.0), vec(0.0, 0.0))) == pytest.approx(5.0)
    assert float(feature_l2(vec(0.0, 0.0), vec(3.0, 4.0))) == pytest.approx(25.0)


def test_feature_l2_shape_mismatch():
    with pytest.raises(ValueError):
        feature_l2(vec(1.0, 2.0), vec(1.0, 2.0, 3.0))


def test_feature_l2_teacher_detached():
    student = vec(1.0, 2.0).requires_grad_(True)
    teacher = vec(0.0, 0.0).requires_grad_(True)
    feature_l2(student, teacher).backward()
    assert teacher.grad is None
    assert student.grad is not None


def test_self_distillation_empty_is_zero():
    lw = LossWeights()
    out = self_distillation_loss([], 0, vec(0.5, 0.5), [], vec(1.0, 1.0), lw)
    assert float(out) == 0.0


def test_self_distillation_all_matched_is_zero():
    lw = LossWeights()
    teacher_p = vec(0.0, 1.0)
    feat = vec(0.5, 0.5)
    out = self_distillation_loss([teacher_p], 1, teacher_p, [feat], feat, lw)
    assert float(out) == pytest.approx(0.0, abs=1e-9)


def test_self_distillation_ce_term_only():
    lw = LossWeights(distill_kl=0.1, distill_feature=1e-6)
    p1 = vec(0.5, 0.5)
    feat = vec(1.0, 2.0)
    out = self_distillation_loss([p1], 0, p1, [feat], feat, lw)
    assert float(out) == pytest.approx(0.693147, abs=1e-6)


def test_self_distillation_length_mismatch():
    with pytest.raises(ValueError):
        losses.self_distillation_terms(
            [vec(0.5, 0.5)], 0, vec(0.5, 0.5), [], vec(1.0))


def test_self_distillation_teacher_detached():
    lw = LossWeights()
    teacher_logits = vec(0.3, 0.7).requires_grad_(True)
    teacher_p = torch.softmax(teacher_logits, dim=-1)
    student_p = torch.softmax(vec(0.1, 0.2).requires_grad_(True), dim=-1)
    out = self_distillation_loss([student_p], 1, teacher_p,
                                 [vec(1.0, 1.0)], vec(0.0, 0.0), lw)
    out.backward()
    assert teacher_logits.grad is None


def test_positive_loss_reduces_to_cross_entropy():
    lw = LossWeights(sop=8.0)
    p = vec(0.7, 0.2, 0.1)
    reg = {"sop": 0.0, "consistency": 0.0, "class_balance": 0.0}
    assert float(positive_loss(p, 1, reg, lw)) == pytest.approx(
        float(cross_entropy(p, 1)))


def test_positive_loss_linear_combination():
    # CE = 1 exactly when p_label = 1/e
    p_label = math.exp(-1.0)
    p = vec(p_label, 1.0 - p_label)
    lw = LossWeights(sop=8.0, consistency=0.9, class_balance=0.1)
    reg = {"sop": 0.5, "consistency": 0.2, "class_balance": 0.1}
    assert float(positive_loss(p, 0, reg, lw)) == pytest.approx(5.19, abs=1e-6)


def test_positive_loss_degenerate_weights():
    lw = LossWeights(sop=0.0, consistency=0.0, class_balance=0.0)
    p = vec(0.6, 0.4)
    reg = {"sop": 3.0, "consistency": 2.0, "class_balance": 1.0}
    assert float(positive_loss(p, 0, reg, lw)) == pytest.approx(
        float(cross_entropy(p, 0)))


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(consistency=-0.1)
    with pytest.raises(ValueError):
        LossWeights(sop=-1.0)


def test_total_loss_values():
    assert float(total_loss(0.0, 0.0, 0.0)) == 0.0
    assert float(total_loss(5.19, 0.693147, 0.0)) == pytest.approx(
        5.883147, abs=1e-6)


def test_total_loss_commutative():
    a, b, c = 1.25, 0.5, 2.0
    assert float(total_loss(a, b, c)) == pytest.approx(float(total_loss(b, a, c)))


def test_total_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        total_loss(float("nan"), 0.0, 0.0)
    with pytest.raises(ValueError):
        total_loss(0.0, float("inf"), 0.0)


def test_weighted_mean_identity_and_suppression():
    v = vec(1.0, 2.0, 3.0)
    assert float(weighted_mean(v, torch.ones_like(v))) == pytest.approx(2.0)
    assert float(weighted_mean(v, torch.zeros_like(v))) == 0.0


def test_weighted_mean_hand_value():
    out = weighted_mean(vec(1.0, 3.0), vec(1.0, 0.5))
    assert float(out) == pytest.approx(1.25)


def test_weighted_mean_errors():
    with pytest.raises(ValueError):
        weighted_mean(vec(1.0, 2.0), vec(1.0))
    with pytest.raises(ValueError):
        weighted_mean(vec(1.0), vec(1.5))


def test_cross_entropy_monotone_decreasing_in_label_prob():
    rng = np.random.default_rng(11)
    for _ in range(100):
        p1 = rng.uniform(0.05, 0.45)
        p2 = rng.uniform(p1 + 0.05, 0.95)
        lo = float(cross_entropy(vec(p2, 1 - p2), 0))
        hi = float(cross_entropy(vec(p1, 1 - p1), 0))
        assert lo < hi


def test_negative_loss_monotone_increasing_in_comp_prob():
    rng = np.random.default_rng(12)
    for _ in range(100):
        p1 = rng.uniform(0.05, 0.45)
        p2 = rng.uniform(p1 + 0.05, 0.95)
        assert float(negative_loss(vec(p1, 1 - p1), 0)) < \
            float(negative_loss(vec(p2, 1 - p2), 0))


def _fd_grad(fn, x, eps=1e-5):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def _check_grad(fn, x, tol=1e-4):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    numeric = _fd_grad(fn, x.detach().clone())
    denom = max(float(numeric.norm()), 1e-8)
    assert float((analytic - numeric).norm()) / denom < tol


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    for _ in range(10):
        c = int(rng.integers(2, 6))
        logits = torch.tensor(rng.normal(size=c))
        label = int(rng.integers(c))
        _check_grad(lambda z: cross_entropy(torch.softmax(z, -1), label), logits)
        _check_grad(lambda z: negative_loss(torch.softmax(z, -1), label), logits)
        q = torch.tensor(rng.dirichlet(np.ones(c)))
        _check_grad(lambda z: kl_divergence(torch.softmax(z, -1), q), logits)
        feat = torch.tensor(rng.normal(size=4))
        target = torch.tensor(rng.normal(size=4))
        _check_grad(lambda f: feature_l2(f, target), feat)


def test_sop_residual_zero_slack_is_squared_error():
    p = vec(0.2, 0.8)
    onehot = vec(1.0, 0.0)
    zeros = torch.zeros_like(p)
    expected = float(((p - onehot) ** 2).sum())
    assert float(sop_residual_loss(p, zeros, zeros, onehot)) == pytest.approx(expected)


def test_sop_residual_slack_absorbs_noise():
    # perfect slack reconstruction drives the residual to zero
    p = vec(0.0, 1.0)
    onehot = vec(1.0, 0.0)  # given label is 0, model puts mass on 1
    u = vec(1.0, 0.0)   # u^2*y adds the missing mass on the label
    v = vec(0.0, 1.0)   # v^2*(1-y) removes the extra mass elsewhere
    assert float(sop_residual_loss(p, u, v, onehot)) == pytest.approx(0.0)


def test_consistency_loss_is_kl():
    a, b = vec(0.4, 0.6), vec(0.3, 0.7)
    assert float(consistency_loss(a, b)) == pytest.approx(float(kl_divergence(a, b)))


def test_class_balance_loss():
    uniform_batch = torch.tensor([[0.2, 0.8], [0.8, 0.2]], dtype=torch.float64)
    assert float(class_balance_loss(uniform_batch)) == pytest.approx(0.0, abs=1e-12)
    skewed = torch.tensor([[0.9, 0.1], [0.8, 0.2]], dtype=torch.float64)
    assert float(class_balance_loss(skewed)) > 0.0
    with pytest.raises(ValueError):
        class_balance_loss(vec(0.5, 0.5))


def test_noise_slack_init_and_projection():
    gen = torch.Generator().manual_seed(3)
    slack = NoiseSlack(10, 4, generator=gen)
    assert slack.slack_pos.shape == (10, 4)
    assert float(slack.slack_pos.detach().abs().max()) <= 1e-3
    with torch.no_grad():
        slack.slack_pos += 5.0
    slack.project_()
    assert float(slack.slack_pos.detach().max()) <= 1.0
    assert float(slack.slack_neg.detach().min()) >= -1.0


def test_noise_slack_forward_gathers_rows():
    gen = torch.Generator().manual_seed(4)
    slack = NoiseSlack(6, 3, generator=gen)
    with torch.no_grad():
        slack.slack_pos.zero_()
        slack.slack_neg.zero_()
    probs = torch.tensor([[0.5, 0.3, 0.2]], dtype=torch.float32)
    onehot = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float32)
    out = slack(torch.tensor([2]), probs, onehot).detach()
    expected = 0.5 ** 2 + 0.7 ** 2 + 0.2 ** 2
    assert float(out) == pytest.approx(expected, abs=1e-6)

import math

import numpy as np
import pytest
import torch

from csdkit.losses import (
    LossConfig,
    build_loss,
    class_weights_from_frequency,
    cost_sensitive_penalty,
    focal_loss,
    smooth_labels,
    weighted_smoothed_ce,
)
from csdkit.types import ValidationError


def test_class_weights_uniform_gives_ones():
    w = class_weights_from_frequency((1 / 3, 1 / 3, 1 / 3))
    np.testing.assert_allclose(w, [1.0, 1.0, 1.0], atol=1e-12)


def test_class_weights_simple_fractions():
    # inverse frequencies (2, 4, 4) normalise to (0.6, 1.2, 1.2)
    w = class_weights_from_frequency((0.5, 0.25, 0.25))
    np.testing.assert_allclose(w, [0.6, 1.2, 1.2], atol=1e-12)


def test_class_weights_realistic_mix():
    f = np.array([0.305, 0.582, 0.113])
    w = class_weights_from_frequency(f)
    # independent oracle: element-wise closed form
    inv = 1.0 / f
    np.testing.assert_allclose(w, inv / inv.sum() * 3, rtol=1e-15)
    assert abs(w.mean() - 1.0) < 1e-12  # normalisation invariant
    assert w[2] > w[0] > w[1]  # rarest class weighted heaviest


def test_class_weights_rejects_zero_frequency():
    with pytest.raises(ValidationError):
        class_weights_from_frequency((0.5, 0.5, 0.0))


def test_smooth_labels_rows():
    rows = smooth_labels(torch.tensor([0, 2]), epsilon=0.3)
    np.testing.assert_allclose(rows[0], [0.8, 0.1, 0.1], atol=1e-12)
    np.testing.assert_allclose(rows[1], [0.1, 0.1, 0.8], atol=1e-12)
    assert torch.allclose(rows.sum(dim=1), torch.ones(2, dtype=torch.float64))


def test_smooth_labels_zero_eps_is_one_hot():
    rows = smooth_labels(torch.tensor([1]), epsilon=0.0)
    np.testing.assert_allclose(rows[0], [0.0, 1.0, 0.0], atol=1e-15)


def test_uniform_logits_give_ln3():
    logits = torch.zeros(11, 3, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1])
    loss = weighted_smoothed_ce(logits, labels)
    assert abs(float(loss) - math.log(3.0)) < 1e-12
    # weights don't move it: a weighted mean of a constant is the constant
    loss_w = weighted_smoothed_ce(
        logits, labels, torch.tensor([0.2, 1.0, 3.0], dtype=torch.float64)
    )
    assert abs(float(loss_w) - math.log(3.0)) < 1e-12


def test_focal_gamma_zero_equals_plain_ce():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(40, 3, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (40,), generator=g)
    focal = focal_loss(logits, labels, gamma=0.0)
    plain = weighted_smoothed_ce(logits, labels, None, 0.0)
    assert abs(float(focal) - float(plain)) < 1e-12


def test_shift_invariance_all_losses():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(25, 3, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (25,), generator=g)
    shift = torch.randn(25, 1, generator=g, dtype=torch.float64) * 50
    cost = torch.tensor([[0.0, 1, 2], [1, 0, 1], [3, 1, 0]], dtype=torch.float64)
    w = torch.tensor([0.7, 0.4, 1.9], dtype=torch.float64)
    pairs = [
        (weighted_smoothed_ce(logits, labels, w, 0.1),
         weighted_smoothed_ce(logits + shift, labels, w, 0.1)),
        (focal_loss(logits, labels, 2.0), focal_loss(logits + shift, labels, 2.0)),
        (cost_sensitive_penalty(logits, labels, cost),
         cost_sensitive_penalty(logits + shift, labels, cost)),
    ]
    for a, b in pairs:
        assert abs(float(a) - float(b)) < 1e-10


def test_weighted_ce_hand_case():
    # independent numpy computation of the weighted, smoothed objective
    logits = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, -1.0]])
    labels = np.array([0, 2])
    weights = np.array([0.5, 1.0, 2.0])
    eps = 0.1
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    targets = np.full((2, 3), eps / 3)
    targets[0, 0] += 1 - eps
    targets[1, 2] += 1 - eps
    per = -(targets * log_probs).sum(axis=1)
    frame_w = weights[labels]
    expected = (frame_w * per).sum() / frame_w.sum()

    got = weighted_smoothed_ce(
        torch.from_numpy(logits), torch.from_numpy(labels),
        torch.from_numpy(weights), eps,
    )
    assert abs(float(got) - expected) < 1e-12


def test_weighted_ce_upweights_rare_class_errors():
    # row 0 (class 1, low weight) is right, row 1 (class 2, high weight)
    # is wrong: weighting must pull the mean toward the expensive mistake
    logits = torch.tensor([[0.0, 3.0, 0.0], [3.0, 0.0, 0.0]])
    labels = torch.tensor([1, 2])
    w = torch.tensor([1.0, 0.5, 2.0])
    ce_unweighted = weighted_smoothed_ce(logits, labels, None, 0.0)
    ce_weighted = weighted_smoothed_ce(logits, labels, w, 0.0)
    assert float(ce_weighted) > float(ce_unweighted)


def test_focal_downweights_easy_examples():
    easy = torch.tensor([[6.0, 0.0, 0.0]])
    hard = torch.tensor([[0.5, 0.0, 0.0]])
    labels = torch.tensor([0])
    for logits in (easy, hard):
        assert float(focal_loss(logits, labels, 2.0)) < float(
            focal_loss(logits, labels, 0.0)
        )
    # the reduction factor is far stronger for the confident example
    ratio_easy = float(focal_loss(easy, labels, 2.0)) / float(focal_loss(easy, labels, 0.0))
    ratio_hard = float(focal_loss(hard, labels, 2.0)) / float(focal_loss(hard, labels, 0.0))
    assert ratio_easy < ratio_hard


def test_cost_penalty_hand_case():
    cost = torch.tensor([[0.0, 1.0, 4.0], [2.0, 0.0, 1.0], [8.0, 2.0, 0.0]])
    logits = torch.tensor([[10.0, 0.0, 0.0], [0.0, 0.0, 10.0]])
    labels = torch.tensor([0, 2])
    # both predictions are confidently correct: expected cost ~ 0
    assert float(cost_sensitive_penalty(logits, labels, cost)) < 1e-3

    wrong = torch.tensor([[0.0, 0.0, 10.0]])  # true 0 predicted as 2
    val = float(cost_sensitive_penalty(wrong, torch.tensor([0]), cost))
    assert abs(val - 4.0) < 1e-3  # pays cost[0, 2]


def test_losses_shape_handling_and_guards():
    logits = torch.randn(4, 7, 3, dtype=torch.float64)
    labels = torch.randint(0, 3, (4, 7))
    assert weighted_smoothed_ce(logits, labels).ndim == 0
    with pytest.raises(ValidationError):
        weighted_smoothed_ce(torch.randn(3, 4), torch.tensor([0, 1, 2]))
    with pytest.raises(ValidationError):
        weighted_smoothed_ce(torch.randn(2, 3), torch.tensor([0, 3]))


def test_losses_differentiable():
    logits = torch.randn(8, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (8,))
    weighted_smoothed_ce(logits, labels, torch.ones(3, dtype=torch.float64), 0.1).backward()
    assert torch.isfinite(logits.grad).all()


def test_build_loss_dispatch():
    logits = torch.randn(5, 3, dtype=torch.float64)
    labels = torch.randint(0, 3, (5,))
    for cfg in (
        LossConfig(kind="weighted_ce", class_weights=(1.0, 1.0, 1.0)),
        LossConfig(kind="focal", focal_gamma=1.5),
        LossConfig(kind="cost", cost_matrix=((0, 1, 2), (1, 0, 1), (2, 1, 0))),
    ):
        fn = build_loss(cfg)
        val = fn(logits, labels)
        assert val.ndim == 0 and torch.isfinite(val)
    with pytest.raises(ValidationError):
        build_loss(LossConfig(kind="cost"))
    with pytest.raises(ValidationError):
        LossConfig(kind="hinge")

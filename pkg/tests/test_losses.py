"""Loss closed forms, shuffling properties, finite-difference gradients."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference, max_relative_error
from topdownseg.losses import (
    LossWeights,
    loss_ce,
    loss_diversity,
    loss_peer,
    loss_uncertainty,
    shuffle_labels,
    total_loss,
)
from topdownseg.pseudolabels import IGNORE_LABEL


def uniform_probs(k, h, w):
    return torch.full((k, h, w), 1.0 / k, dtype=torch.float64)


def one_hot_probs(labels, k):
    labels = torch.as_tensor(labels, dtype=torch.long)
    probs = torch.zeros((k,) + tuple(labels.shape), dtype=torch.float64)
    return probs.scatter_(0, labels[None], 1.0)


# --------------------------------------------------------------------- ce


def test_ce_uniform_is_log_k():
    value = loss_ce(uniform_probs(4, 3, 3), torch.zeros(3, 3, dtype=torch.long))
    assert abs(float(value) - math.log(4.0)) < 1e-12


def test_ce_matching_one_hot_hits_clamp_floor():
    labels = torch.tensor([[0, 1], [1, 0]])
    value = loss_ce(one_hot_probs(labels, 2), labels)
    assert abs(float(value) - (-math.log(1.0 - 1e-7))) < 1e-15
    assert abs(float(value) - 1e-7) < 1e-8


def test_ce_half_correct_half_uniform():
    labels = torch.zeros(2, 2, dtype=torch.long)
    probs = one_hot_probs(labels, 2)
    probs[:, 1, :] = 0.5
    expected = (-math.log(1.0 - 1e-7) + math.log(2.0)) / 2.0
    assert abs(float(loss_ce(probs, labels)) - expected) < 1e-12


def test_ce_ignores_255_and_rejects_all_ignored():
    labels = torch.tensor([[0, IGNORE_LABEL], [IGNORE_LABEL, IGNORE_LABEL]])
    probs = uniform_probs(4, 2, 2)
    probs[:, 0, 0] = torch.tensor([0.5, 0.3, 0.1, 0.1])
    assert abs(float(loss_ce(probs, labels)) - (-math.log(0.5))) < 1e-12
    with pytest.raises(ValueError):
        loss_ce(probs, torch.full((2, 2), IGNORE_LABEL, dtype=torch.long))


def test_ce_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        loss_ce(uniform_probs(2, 2, 2), torch.full((2, 2), 5, dtype=torch.long))
    with pytest.raises(ValueError):
        loss_ce(uniform_probs(2, 2, 2), torch.zeros(3, 3, dtype=torch.long))


def test_ce_batched_matches_pooled_pixels(rng):
    probs = torch.from_numpy(rng.uniform(0.05, 0.95, (2, 3, 4, 4)))
    labels = torch.from_numpy(rng.integers(0, 3, (2, 4, 4)))
    pooled = loss_ce(
        probs.permute(1, 0, 2, 3).reshape(3, 2 * 4, 4),
        labels.reshape(2 * 4, 4),
    )
    assert abs(float(loss_ce(probs, labels)) - float(pooled)) < 1e-12


# ---------------------------------------------------------------- shuffle


def test_shuffle_finds_identity_and_swap_draws():
    labels = np.array([[0, 1], [1, 0]], dtype=np.uint8)
    outcomes = {}
    for seed in range(64):
        out = shuffle_labels(labels, 2, seed)
        outcomes[out.tobytes()] = out
    assert labels.tobytes() in outcomes
    assert (1 - labels).astype(np.uint8).tobytes() in outcomes
    np.testing.assert_array_equal(
        shuffle_labels(labels, 2, 11), shuffle_labels(labels, 2, 11)
    )


def test_shuffle_preserves_ignore_and_type(rng):
    labels = rng.integers(0, 3, (5, 5)).astype(np.uint8)
    labels[0] = IGNORE_LABEL
    out = shuffle_labels(labels, 3, seed=4)
    assert out.dtype == labels.dtype
    np.testing.assert_array_equal(out[0], labels[0])
    tensor = torch.from_numpy(labels.astype(np.int64))
    out_t = shuffle_labels(tensor, 3, seed=4)
    assert isinstance(out_t, torch.Tensor)
    np.testing.assert_array_equal(out_t.numpy(), out.astype(np.int64))


@settings(deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
def test_shuffle_is_a_permutation_of_histograms(seed, k):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, (6, 6))
    out = shuffle_labels(labels, k, seed=seed ^ 0x5A5A)
    before = np.bincount(labels.ravel(), minlength=k)
    after = np.bincount(out.ravel(), minlength=k)
    assert sorted(before.tolist()) == sorted(after.tolist())
    mapping = {}
    for src, dst in zip(labels.ravel(), out.ravel()):
        assert mapping.setdefault(int(src), int(dst)) == int(dst)
    assert len(set(mapping.values())) == len(mapping)


def test_shuffle_rejects_k1_and_bad_values():
    with pytest.raises(ValueError):
        shuffle_labels(np.zeros((2, 2), dtype=np.uint8), 1, 0)
    with pytest.raises(ValueError):
        shuffle_labels(np.full((2, 2), 9, dtype=np.uint8), 3, 0)


# ------------------------------------------------------------------- peer


def test_peer_alpha_zero_reduces_to_ce(rng):
    probs = torch.from_numpy(rng.uniform(0.05, 0.95, (3, 4, 4)))
    labels = torch.from_numpy(rng.integers(0, 3, (4, 4)))
    shuffled = shuffle_labels(labels, 3, seed=1)
    assert float(loss_peer(probs, labels, shuffled, 0.0)) == float(
        loss_ce(probs, labels)
    )


def test_peer_identical_operands_scale_by_one_minus_alpha(rng):
    probs = torch.from_numpy(rng.uniform(0.05, 0.95, (3, 4, 4)))
    labels = torch.from_numpy(rng.integers(0, 3, (4, 4)))
    ce = float(loss_ce(probs, labels))
    assert abs(float(loss_peer(probs, labels, labels, 0.25)) - 0.75 * ce) < 1e-12


def test_peer_uniform_closed_form():
    labels = torch.zeros(3, 3, dtype=torch.long)
    value = loss_peer(uniform_probs(2, 3, 3), labels, 1 - labels, 0.1)
    assert abs(float(value) - 0.9 * math.log(2.0)) < 1e-12


# ------------------------------------------------------------ uncertainty


def test_uncertainty_closed_forms():
    one_hot = one_hot_probs(torch.tensor([[0, 1], [1, 0]]), 2)
    assert float(loss_uncertainty(one_hot)) == 0.0
    assert float(loss_uncertainty(uniform_probs(3, 2, 2))) == 1.0
    mixed = one_hot.clone()
    mixed[:, 1, :] = 0.5
    assert abs(float(loss_uncertainty(mixed)) - 0.5) < 1e-12


def test_uncertainty_rejects_single_class():
    with pytest.raises(ValueError):
        loss_uncertainty(torch.ones(1, 2, 2))


@settings(deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_uncertainty_bounded_on_probability_inputs(seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((4, 3, 3)) + 1e-9
    probs = torch.from_numpy(raw / raw.sum(axis=0, keepdims=True))
    value = float(loss_uncertainty(probs))
    assert 0.0 <= value <= 1.0


# -------------------------------------------------------------- diversity


def test_diversity_closed_forms():
    assert float(loss_diversity(torch.zeros(3, 4, dtype=torch.float64))) == 1.0
    lone = torch.zeros(1, 4, dtype=torch.float64)
    lone[0, 0] = math.sqrt(2.0)
    assert abs(float(loss_diversity(lone)) - 2.0) < 1e-12
    opposed = torch.zeros(2, 4, dtype=torch.float64)
    opposed[0, 0] = 1.0
    opposed[1, 0] = -1.0
    assert float(loss_diversity(opposed)) == 1.0


def test_diversity_rejects_bad_shapes():
    with pytest.raises(ValueError):
        loss_diversity(torch.zeros(3))
    with pytest.raises(ValueError):
        loss_diversity(torch.full((2, 2), torch.nan))


# ------------------------------------------------------------------ total


def test_total_assembles_closed_form_parts():
    labels = torch.zeros(2, 2, dtype=torch.long)
    probs = uniform_probs(2, 2, 2)
    weights = LossWeights(alpha=0.1)
    value = total_loss(probs, labels, 1 - labels, torch.zeros(2, 4), weights)
    expected = 0.9 * math.log(2.0) + 1.0 * 1.0 + 0.3 * 1.0
    assert abs(float(value) - expected) < 1e-6


def test_total_respects_weights(rng):
    labels = torch.zeros(2, 2, dtype=torch.long)
    probs = uniform_probs(2, 2, 2)
    weights = LossWeights(alpha=0.0, omega1=2.0, omega2=0.5)
    value = total_loss(probs, labels, labels, torch.zeros(2, 4), weights)
    assert abs(float(value) - (math.log(2.0) + 2.0 + 0.5)) < 1e-6


def test_alpha_ramp_endpoints_and_midpoint():
    weights = LossWeights()
    assert weights.alpha_at(0, 20) == 0.03
    assert weights.alpha_at(19, 20) == 0.1
    mid = weights.alpha_at(10, 21)
    assert abs(mid - 0.065) < 1e-12
    assert weights.alpha_at(0, 1) == 0.1
    with pytest.raises(ValueError):
        weights.alpha_at(20, 20)
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


def test_total_gradient_matches_finite_differences(rng):
    """FD over every entry of P and C jointly on a 2x2 toy; the topk in
    the uncertainty term is smooth here because no probabilities tie."""
    k, h, w, d = 3, 2, 2, 4
    base_p = rng.uniform(0.2, 0.8, (k, h, w))
    base_c = rng.standard_normal((d * k,)).reshape(k, d)
    labels = torch.from_numpy(rng.integers(0, k, (h, w)))
    shuffled = shuffle_labels(labels, k, seed=9)
    weights = LossWeights(alpha=0.07)

    def value(flat):
        p = torch.from_numpy(flat[: k * h * w].reshape(k, h, w))
        c = torch.from_numpy(flat[k * h * w :].reshape(k, d))
        return float(total_loss(p, labels, shuffled, c, weights))

    p_t = torch.from_numpy(base_p.copy()).requires_grad_(True)
    c_t = torch.from_numpy(base_c.copy()).requires_grad_(True)
    total = total_loss(p_t, labels, shuffled, c_t, weights)
    grad_p, grad_c = torch.autograd.grad(total, (p_t, c_t))
    analytic = np.concatenate([grad_p.numpy().ravel(), grad_c.numpy().ravel()])

    flat = np.concatenate([base_p.ravel(), base_c.ravel()])
    reference = finite_difference(value, flat, step=1e-4)
    assert max_relative_error(analytic, reference) < 1e-4


def test_each_loss_gradient_matches_finite_differences(rng):
    probs = rng.uniform(0.1, 0.9, (2, 3, 3))
    labels = torch.from_numpy(rng.integers(0, 2, (3, 3)))

    def ce_value(flat):
        return float(loss_ce(torch.from_numpy(flat.reshape(2, 3, 3)), labels))

    p_t = torch.from_numpy(probs.copy()).requires_grad_(True)
    (grad,) = torch.autograd.grad(loss_ce(p_t, labels), p_t)
    fd = finite_difference(ce_value, probs.ravel().copy(), step=1e-4)
    assert max_relative_error(grad.numpy().ravel(), fd) < 1e-4

    def unc_value(flat):
        return float(loss_uncertainty(torch.from_numpy(flat.reshape(2, 3, 3))))

    (grad_u,) = torch.autograd.grad(loss_uncertainty(p_t), p_t)
    fd_u = finite_difference(unc_value, probs.ravel().copy(), step=1e-4)
    assert max_relative_error(grad_u.numpy().ravel(), fd_u) < 1e-4

    emb = rng.standard_normal((3, 4))

    def div_value(flat):
        return float(loss_diversity(torch.from_numpy(flat.reshape(3, 4))))

    c_t = torch.from_numpy(emb.copy()).requires_grad_(True)
    (grad_c,) = torch.autograd.grad(loss_diversity(c_t), c_t)
    fd_c = finite_difference(div_value, emb.ravel().copy(), step=1e-4)
    assert max_relative_error(grad_c.numpy().ravel(), fd_c) < 1e-4

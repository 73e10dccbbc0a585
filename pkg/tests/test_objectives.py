import math

import numpy as np
import pytest

from captsim.objectives import (
    loss_class_aware,
    loss_general,
    per_sample_gradients,
    predict,
    sgd_step,
    total_loss_and_grads,
)
from captsim.toyclip import FrozenEncoders, PromptState, text_features

from instances import central_fd, make_instance


def test_two_class_worked_example():
    # tau = 1, cosines 1 and -1 on the true and wrong class: loss = ln(1 + e^-2)
    state = PromptState(np.zeros((1, 2)), np.zeros((2, 1, 2)), np.zeros((2, 2)))
    z = np.array([[1.0, 0.0]])
    enc = FrozenEncoders(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros((2, 2)))
    assert loss_general(enc, state, z, [0], 1.0) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert loss_general(enc, state, z, [0], 1.0) == pytest.approx(0.126928, abs=1e-6)


def test_uniform_prior_adjustment_is_a_no_op():
    enc, state, z, labels, _ = make_instance(3)
    tau = 0.5
    logits = z @ text_features(enc, state, "class_aware").T / tau
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(labels.size), labels].mean()
    assert loss_class_aware(enc, state, z, labels, np.full(5, 0.2), tau) == pytest.approx(expected, abs=1e-12)


def test_prior_shifts_loss_toward_rare_classes():
    enc, state, z, labels, _ = make_instance(4)
    head_heavy = np.array([0.9, 0.025, 0.025, 0.025, 0.025])
    rare = labels != 0
    uniform = loss_class_aware(enc, state, z[rare], labels[rare], np.full(5, 0.2), 0.5)
    assert loss_class_aware(enc, state, z[rare], labels[rare], head_heavy, 0.5) > uniform


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    enc, state, z, labels, prior = make_instance(seed)
    tau, lam = 0.5, 0.7
    _, grads = total_loss_and_grads(enc, state, z, labels, prior, tau, lam)
    fd = central_fd(enc, state, z, labels, prior, tau, lam)
    an = grads.flat()
    rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
    assert rel.max() <= 1e-4


def test_masking_zeroes_absent_classes():
    enc, state, z, labels, prior = make_instance(1, all_classes=False)
    keep = labels != 4
    _, grads = total_loss_and_grads(enc, state, z[keep], labels[keep], prior, 0.5, 1.0)
    assert np.all(grads.d_class_aware[4] == 0)
    _, unmasked = total_loss_and_grads(enc, state, z[keep], labels[keep], prior, 0.5, 1.0, mask=False)
    assert np.any(unmasked.d_class_aware[4] != 0)


def test_lambda_zero_drops_class_aware_gradient():
    enc, state, z, labels, prior = make_instance(2)
    rep, grads = total_loss_and_grads(enc, state, z, labels, prior, 0.5, 0.0)
    assert np.all(grads.d_class_aware == 0)
    assert rep.total == pytest.approx(rep.loss_general)


def test_per_sample_rows_match_single_sample_batches():
    enc, state, z, labels, prior = make_instance(5)
    rows = per_sample_gradients(enc, state, z, labels, prior, 0.5, 0.8)
    for i in (0, 7, 15):
        _, g = total_loss_and_grads(enc, state, z[i : i + 1], labels[i : i + 1], prior, 0.5, 0.8)
        np.testing.assert_allclose(rows[i], g.flat(), atol=1e-12)


def test_zero_prior_on_present_label():
    enc, state, z, labels, prior = make_instance(6)
    prior = prior.copy()
    prior[labels[0]] = 0.0
    with pytest.raises(ValueError):
        loss_class_aware(enc, state, z, labels, prior, 0.5)


def test_bad_temperature_and_empty_batch():
    enc, state, z, labels, prior = make_instance(7)
    with pytest.raises(ValueError):
        total_loss_and_grads(enc, state, z, labels, prior, 0.0)
    with pytest.raises(ValueError):
        loss_general(enc, state, z[:0], labels[:0], 0.5)


def test_small_steps_descend():
    enc, state, z, labels, prior = make_instance(8)
    rep, grads = total_loss_and_grads(enc, state, z, labels, prior, 0.5, 1.0, mask=False)
    for lr in (1e-2, 1e-3):
        nxt = sgd_step(state, grads, lr)
        after, _ = total_loss_and_grads(enc, nxt, z, labels, prior, 0.5, 1.0)
        assert after.total < rep.total


def test_sgd_rejects_non_finite():
    enc, state, z, labels, prior = make_instance(9)
    _, grads = total_loss_and_grads(enc, state, z, labels, prior, 0.5)
    grads.d_general[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        sgd_step(state, grads, 0.1)


def test_predict_shape_and_anchor_oracle():
    enc, state, z, labels, prior = make_instance(10)
    assert predict(enc, state, z).shape == (16, 5)
    # zero prompts, matching anchors: every anchor is classified as itself
    c = 4
    anchors = np.eye(16)[:c]
    enc = FrozenEncoders(anchors, anchors.copy(), np.zeros((16, 16)))
    zero = PromptState(np.zeros((2, 16)), np.zeros((c, 2, 16)), np.zeros((16, 16)))
    assert predict(enc, zero, anchors).argmax(axis=1).tolist() == list(range(c))


def test_equal_cosines_reduce_to_the_prior():
    # identical text anchors: logits differ only by ln(prior)
    c, d = 4, 6
    same = np.tile(np.eye(d)[:1], (c, 1))
    enc = FrozenEncoders(np.eye(d)[:c], same, np.zeros((d, d)))
    state = PromptState(np.zeros((1, d)), np.zeros((c, 1, d)), np.zeros((d, d)))
    prior = np.array([0.4, 0.3, 0.2, 0.1])
    labels = np.array([0, 1, 3, 3])
    z = np.eye(d)[[1, 2, 3, 0]]
    expected = -np.mean(np.log(prior[labels]))
    assert loss_class_aware(enc, state, z, labels, prior, 0.07) == pytest.approx(expected, abs=1e-12)

import math

import numpy as np
import pytest

import autograd as ag
from errors import ShapeError
from spc_net import (POINTS, ce_loss, class_count, feature_dim, has_decoder, init_spc, pooled_history,
                     registration_accuracy, spc_apply, spc_encode_sequence, spc_forward, spc_sequence)

J = 4
X_DIM = 6


def _small_net(seed=0, with_decoder=True):
    return init_spc(np.random.default_rng(seed), J, X_DIM, encoder_widths=(8, 12), decoder_hidden=10,
                    with_decoder=with_decoder)


def _inputs(rng, N=3, P=8):
    return rng.normal(size=(N, X_DIM)).astype(np.float32), rng.normal(size=(N, P, 3)).astype(np.float32)


def test_sequence_shapes_and_probabilities(rng):
    params = _small_net()
    x, clouds = _inputs(rng)
    reg = spc_sequence(params, x, clouds, expected_points=8)
    assert reg.probs.shape == (3, 8, J + 1)
    assert reg.global_feature.shape == (3, 12)
    assert np.allclose(reg.probs.sum(axis=-1), 1.0, atol=1e-5)
    assert reg.labels.shape == (3, 8)


def test_introspection():
    params = _small_net()
    assert has_decoder(params)
    assert feature_dim(params) == 12
    assert class_count(params) == J + 1
    assert not has_decoder(_small_net(with_decoder=False))


def test_registration_is_permutation_equivariant(rng):
    params = _small_net()
    x, clouds = _inputs(rng, N=1)
    perm = rng.permutation(8)
    a = spc_forward(params, x[0], clouds[0], np.zeros(12), expected_points=8)
    b = spc_forward(params, x[0], clouds[0, perm], np.zeros(12), expected_points=8)
    assert np.allclose(b.probs, a.probs[perm], atol=1e-6)
    assert np.allclose(b.global_feature, a.global_feature, atol=1e-6)


def test_pooled_history_is_running_mean_of_earlier_frames():
    g = np.array([[1.0], [3.0], [5.0]])
    assert np.allclose(pooled_history(g)[:, 0], [0.0, 1.0, 2.0])
    assert np.allclose(pooled_history(g, prior_sum=[4.0], prior_count=2)[:, 0], [2.0, 5.0 / 3.0, 2.0])


def test_sequence_registration_is_causal(rng):
    params = _small_net()
    x, clouds = _inputs(rng, N=5)
    changed = clouds.copy()
    changed[3:] += 1.0
    a = spc_sequence(params, x, clouds, expected_points=8)
    b = spc_sequence(params, x, changed, expected_points=8)
    assert np.allclose(a.probs[:3], b.probs[:3])
    assert not np.allclose(a.probs[3:], b.probs[3:])


def test_sequence_matches_frame_by_frame(rng):
    params = _small_net()
    x, clouds = _inputs(rng, N=4)
    reg = spc_sequence(params, x, clouds, expected_points=8)
    glob = spc_encode_sequence(params, x, clouds)
    history = pooled_history(glob)
    for t in range(4):
        frame = spc_forward(params, x[t], clouds[t], history[t], expected_points=8)
        assert np.allclose(frame.probs, reg.probs[t], atol=1e-6)


def test_wrong_point_count_is_rejected(rng):
    params = _small_net()
    x, clouds = _inputs(rng, N=1)
    with pytest.raises(ShapeError):
        spc_forward(params, x[0], clouds[0], np.zeros(12), expected_points=10)
    with pytest.raises(ShapeError):
        spc_sequence(params, x, clouds[..., :2], expected_points=8)


def test_point_count_defaults_to_sampled_cloud_size(rng):
    params = _small_net()
    x, clouds = _inputs(rng, N=2, P=8)
    with pytest.raises(ShapeError):
        spc_sequence(params, x, clouds)
    with pytest.raises(ShapeError):
        spc_forward(params, x[0], clouds[0], np.zeros(12))
    full = rng.normal(size=(2, POINTS, 3)).astype(np.float32)
    assert spc_sequence(params, x, full).probs.shape == (2, POINTS, J + 1)


def test_ce_loss_of_uniform_probabilities():
    probs = ag.constant(np.full((2, 5, 4), 0.25))
    labels = np.zeros((2, 5), dtype=int)
    assert ce_loss(probs, labels).item() == pytest.approx(np.log(4.0))
    with pytest.raises(ShapeError):
        ce_loss(probs, labels[:, :3])


def test_ce_loss_uniform_over_full_body_classes(rng):
    classes = 23
    probs = ag.constant(np.full((3, POINTS, classes), 1.0 / classes), dtype=np.float64)
    labels = rng.integers(classes, size=(3, POINTS))
    assert ce_loss(probs, labels).item() == pytest.approx(np.log(23.0), abs=1e-9)


def test_ce_loss_matches_loop(rng):
    for _ in range(100):
        N, P, C = rng.integers(1, 4), rng.integers(1, 12), rng.integers(2, 9)
        probs = rng.dirichlet(np.ones(C), size=(N, P))
        labels = rng.integers(C, size=(N, P))
        expected = 0.0
        for n in range(N):
            for p in range(P):
                expected -= math.log(probs[n, p, labels[n, p]])
        expected /= N * P
        got = ce_loss(ag.constant(probs, dtype=np.float64), labels).item()
        assert got == pytest.approx(expected, abs=1e-6)


def test_registration_accuracy():
    probs = np.array([[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]])
    assert registration_accuracy(probs, [[0, 1, 1, 1]]) == pytest.approx(0.75)


@pytest.mark.parametrize("seed", range(20))
def test_registration_gradients(seed):
    rng = np.random.default_rng(seed)
    params = _small_net(seed)
    x, clouds = _inputs(rng, N=4, P=8)
    history = rng.normal(size=(4, 12))
    labels = rng.integers(J + 1, size=(4, 8))

    def loss_fn(p):
        probs, _ = spc_apply(p, x, clouds, history)
        return ce_loss(probs, labels)

    result = ag.gradcheck(loss_fn, params, eps=1e-6, max_checks=6, rng=rng)
    assert result.ok, result.failures

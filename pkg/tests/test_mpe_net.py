import numpy as np
import pytest

import autograd as ag
from conftest import random_rot6d, toy_shape
from errors import ShapeError
from kinematics import anchored_positions
from losses import JointEvidence, joint_evidence, pc_loss, pos_mse, pose_positions_graph, rot_mse, spc_loss
from mpe_net import (EVIDENCE_WIDTH, compose_residual, dims, feature_width, init_mpe, mpe_forward, mpe_graph,
                     mpe_sequence, registration_features, scaled_global_feature)


def test_untrained_model_returns_zero_offsets(rng):
    params = init_mpe(rng, 4, three_point_dim=6, feature_dim=5, hidden=(8,))
    assert dims(params) == (6 + 24 + 5, 4)
    offset = mpe_forward(rng.normal(size=6), random_rot6d(rng, 4), rng.normal(size=5), params)
    assert offset.shape == (4, 6)
    assert np.array_equal(offset, np.zeros((4, 6)))


def test_sequence_matches_single_frames(rng):
    params = init_mpe(rng, 4, three_point_dim=6, feature_dim=5, hidden=(8,))
    params["mpe.1.weight"].data = rng.normal(size=params["mpe.1.weight"].shape).astype(np.float32)
    x, y, f = rng.normal(size=(3, 6)), random_rot6d(rng, 3, 4), rng.normal(size=(3, 5))
    seq = mpe_sequence(params, x, y, f)
    for t in range(3):
        assert np.allclose(seq[t], mpe_forward(x[t], y[t], f[t], params), atol=1e-5)


def test_input_shapes_are_checked(rng):
    params = init_mpe(rng, 4, three_point_dim=6, feature_dim=5, hidden=(8,))
    with pytest.raises(ShapeError):
        mpe_forward(np.zeros(6), np.zeros((3, 6)), np.zeros(5), params)
    with pytest.raises(ShapeError):
        mpe_forward(np.zeros(7), np.zeros((4, 6)), np.zeros(5), params)
    with pytest.raises(ShapeError):
        compose_residual(np.zeros((2, 4, 6)), np.zeros((2, 3, 6)))


def test_compose_residual_adds_offsets():
    y = np.ones((2, 3, 6))
    assert np.array_equal(compose_residual(y, np.full((2, 3, 6), 0.5)), np.full((2, 3, 6), 1.5))



def test_scaled_global_feature_has_unit_rms_and_ignores_scale(rng):
    glob = np.abs(rng.normal(size=(5, 12)))
    scaled = scaled_global_feature(glob).data
    assert np.allclose(np.sqrt((scaled ** 2).mean(axis=1)), 1.0, atol=1e-5)
    assert np.allclose(scaled_global_feature(glob * 40.0).data, scaled, atol=1e-5)


def test_registration_features_layout():
    synth = np.zeros((2, 3, 3))
    centroid = np.array([[[0.01, 0.0, 0.0], [2.0, -2.0, 0.02], [0.3, 0.3, 0.3]],
                         [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]]])
    active = np.array([[True, True, False], [True, True, True]])
    evidence = JointEvidence(np.ones((2, 3)), centroid, active)
    rows = registration_features(evidence, synth, valid=np.array([True, False]))
    assert rows.shape == (2, 3 * EVIDENCE_WIDTH)
    frame = rows[0].reshape(3, EVIDENCE_WIDTH)
    assert np.allclose(frame[0], [1.0, 0.1, 0.0, 0.0])
    assert np.allclose(frame[1], [1.0, 5.0, -5.0, 0.2])
    assert np.array_equal(frame[2], np.zeros(EVIDENCE_WIDTH))
    assert np.array_equal(rows[1], np.zeros(3 * EVIDENCE_WIDTH))
    assert feature_width(12, 3, True) == 24
    assert feature_width(12, 3, False) == 12
    with pytest.raises(ShapeError):
        registration_features(evidence, synth[:, :2])


@pytest.mark.parametrize("term", ["rot", "pos", "pc", "spc"])
@pytest.mark.parametrize("seed", range(20))
def test_refinement_gradients(toy, seed, term):
    rng = np.random.default_rng(seed)
    B, P, J = 4, 8, toy.J
    x = rng.normal(size=(B, 6))
    y = random_rot6d(rng, B, J)
    head = rng.normal(size=(B, 3))
    world = head[:, None, :] + 0.4 * rng.normal(size=(B, P, 3))
    probs = rng.dirichlet(np.ones(J + 1), size=(B, P))
    evidence = joint_evidence(world, probs, support_fraction=0.05)
    glob = np.abs(rng.normal(size=(B, 5)))
    f = np.concatenate([scaled_global_feature(glob).data,
                        registration_features(evidence, anchored_positions(toy, y, head))], axis=1)
    params = init_mpe(rng, J, three_point_dim=6, feature_dim=feature_width(5, J, True), hidden=(8,))
    params["mpe.1.weight"].data = (0.1 * rng.normal(size=params["mpe.1.weight"].shape)).astype(np.float32)
    gt = random_rot6d(rng, B, J)
    gt_pos = anchored_positions(toy, gt, head)

    def loss_fn(p):
        offset = ag.reshape(mpe_graph(p, x, y.reshape(B, -1), f), (B, J, 6))
        z = ag.constant(y, dtype=np.float64) + offset
        if term == "rot":
            return rot_mse(z, gt)
        positions = pose_positions_graph(toy, z, head)
        if term == "pos":
            return pos_mse(positions, gt_pos)
        if term == "pc":
            return pc_loss(world, positions, toy, toy_shape().radius)
        return spc_loss(evidence.centroid, evidence.active, positions, theta=0.05)

    result = ag.gradcheck(loss_fn, params, eps=1e-6, max_checks=12, rng=rng)
    assert result.ok, result.failures

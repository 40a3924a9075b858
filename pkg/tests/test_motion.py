import numpy as np
import pytest

from errors import UnknownProtocolError
from kinematics import IDENTITY_6D, rot6d_to_matrix
from metrics import rotation_angles
from motion import (BLOCK, PROTOCOLS, THREE_POINT_DIM, ThreePointFrame, canonical_three_point, gen_motion,
                    second_difference)


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_every_protocol_generates_valid_clips(protocol, skeleton):
    clip = gen_motion(protocol, 2.0, np.random.default_rng(0), skeleton)
    assert clip.frames == 60
    assert clip.local_rot.shape == (60, skeleton.J, 6)
    assert clip.three_point.shape == (60, THREE_POINT_DIM)
    assert np.all(np.isfinite(clip.three_point))
    m = rot6d_to_matrix(clip.local_rot.astype(np.float64))
    assert np.allclose(np.linalg.det(m), 1.0, atol=1e-5)


def test_unknown_protocol():
    with pytest.raises(UnknownProtocolError):
        gen_motion("moonwalk", 1.0, np.random.default_rng(0), None)


def test_same_seed_same_clip(skeleton):
    a = gen_motion("kick", 1.0, np.random.default_rng(5), skeleton)
    b = gen_motion("kick", 1.0, np.random.default_rng(5), skeleton)
    assert np.array_equal(a.three_point, b.three_point)
    assert np.array_equal(a.local_rot, b.local_rot)


def test_three_point_tracks_head_and_wrists(skeleton):
    clip = gen_motion("walk", 1.0, np.random.default_rng(1), skeleton)
    for k, j in enumerate(skeleton.tracked):
        assert np.allclose(clip.three_point[:, k * BLOCK:k * BLOCK + 3], clip.positions[:, j], atol=1e-5)
    frame = ThreePointFrame.from_vector(clip.three_point[10])
    assert np.allclose(frame.left_wrist.position, clip.positions[10, skeleton.left_wrist], atol=1e-5)


def test_idle_legs_stay_still_and_kick_legs_move(skeleton):
    hip = skeleton.index("left_hip")
    idle = gen_motion("idle", 3.0, np.random.default_rng(2), skeleton)
    kick = gen_motion("kick", 3.0, np.random.default_rng(2), skeleton)
    rest = np.broadcast_to(IDENTITY_6D, (idle.frames, 6))
    assert np.max(rotation_angles(idle.local_rot[:, hip], rest)) < 1e-6
    assert np.max(rotation_angles(kick.local_rot[:, hip], rest)) > np.deg2rad(30.0)


def test_walk_moves_forward(skeleton):
    clip = gen_motion("walk", 2.0, np.random.default_rng(3), skeleton)
    assert clip.root_pos[-1, 0] - clip.root_pos[0, 0] > 1.0


def test_second_difference_of_quadratic():
    t = np.arange(10) / 30.0
    acc = second_difference((t ** 2)[:, None], 30)
    assert np.allclose(acc, 2.0)


def test_second_difference_short_input_is_zero():
    assert np.array_equal(second_difference(np.ones((2, 3)), 30), np.zeros((2, 3)))


def test_canonical_three_point_removes_head_ground_position(skeleton):
    clip = gen_motion("walk", 1.0, np.random.default_rng(4), skeleton)
    x = canonical_three_point(clip.three_point)
    assert np.allclose(x[:, 0:2], 0.0)
    assert np.allclose(x[:, 2], clip.three_point[:, 2])
    head_xy = clip.three_point[:, 0:2]
    assert np.allclose(x[:, BLOCK:BLOCK + 2], clip.three_point[:, BLOCK:BLOCK + 2] - head_xy, atol=1e-6)
    assert np.array_equal(x[:, 3:BLOCK], clip.three_point[:, 3:BLOCK])

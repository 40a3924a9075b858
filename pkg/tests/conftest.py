from pathlib import Path

import numpy as np
import pytest

from config import ExperimentConfig, MpeConfig, SpcConfig, SynthesisConfig, TrainConfig
from kinematics import BodyShape, Skeleton, load_skeleton
from sensor_sim import PSEUDO_REAL, SensorRig, SimulationSettings, build_dataset

ROOT = Path(__file__).resolve().parent.parent


def toy_skeleton():
    """pelvis -> spine -> head, pelvis -> leg. The spine stands in for both wrists."""
    return Skeleton(
        names=("pelvis", "spine", "head", "leg"),
        parent=np.array([0, 0, 1, 0]),
        bone_offset=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.3], [0.0, 0.1, -0.5]],
                             dtype=np.float32),
        head=2,
        left_wrist=1,
        right_wrist=1,
        lower_body=np.array([True, False, False, True]),
    )


def toy_shape():
    return BodyShape(np.array([0.1, 0.08, 0.09, 0.07], dtype=np.float32))


def random_rot6d(rng, *lead):
    """Random valid 6D rotations (first two columns of random rotation matrices)."""
    q, _ = np.linalg.qr(rng.normal(size=(*lead, 3, 3)))
    return np.concatenate([q[..., :, 0], q[..., :, 1]], axis=-1)


def capsule_surface_samples(a, b, r, count, rng):
    """Dense point sampling of the full capsule surface: lateral cylinder plus both hemispherical caps."""
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    e1 = np.cross(u, [0.0, 0.0, 1.0] if abs(u[2]) < 0.9 else [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    side = int(count * 2 * length / (2 * length + 4 * r))
    t = rng.random(side)
    theta = rng.random(side) * 2 * np.pi
    lateral = a + t[:, None] * axis + r * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)
    dirs = rng.normal(size=(count - side, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    along = dirs @ u
    caps = np.where((along >= 0)[:, None], b, a) + r * dirs
    return np.concatenate([lateral, caps])


def tiny_config(**train):
    values = dict(iterations=3, batch_mocap=2, batch_real=2, window=4, history_refresh=2, seed=5,
                  fine_tune_iterations=2, lr=1e-3)
    values.update(train)
    return ExperimentConfig(
        simulation=SMALL_SETTINGS,
        spc=SpcConfig(encoder_widths=(16, 32), decoder_hidden=16),
        mpe=MpeConfig(hidden=(32,)),
        train=TrainConfig(**values),
    )


SMALL_SETTINGS = SimulationSettings(frames=24, points=32, raw_points=400, synthesis_samples=2)


@pytest.fixture(scope="session")
def body():
    return load_skeleton(ROOT / "skeleton.yaml")


@pytest.fixture(scope="session")
def skeleton(body):
    return body[0]


@pytest.fixture(scope="session")
def shape(body):
    return body[1]


@pytest.fixture
def toy():
    return toy_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sequences(skeleton, shape):
    synth = SynthesisConfig().synthesizer(skeleton, SMALL_SETTINGS.fps)
    return build_dataset(skeleton, shape, ("walk", "kick"), 4, 3, SMALL_SETTINGS, SensorRig(), synth, prefix="t")


@pytest.fixture(scope="session")
def real_sequences(skeleton, shape):
    synth = SynthesisConfig().synthesizer(skeleton, SMALL_SETTINGS.fps)
    return build_dataset(skeleton, shape, ("kick", "walk"), 2, 50, SMALL_SETTINGS, SensorRig(), synth,
                         domain=PSEUDO_REAL, prefix="r")

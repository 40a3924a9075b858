"""
Full-body synthesis from the 3-point signal alone.

The refinement stages treat synthesis as frozen and interchangeable: anything
with `sample(sequence, index)` returning (N, J, 6) local rotations and a
`checksum()` can be plugged in. Two baselines ship, a noisy oracle that is
accurate for the upper body and blind for the legs, and a small learned MLP.
Pose sequences produced elsewhere can be imported from files.
"""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial.transform import Rotation
from tqdm import tqdm

import autograd as ag
from errors import ConfigError, SequenceFormatError, ShapeError
from io_formats import import_pose_sequence
from kinematics import IDENTITY_6D, anchored_positions, matrix_to_rot6d, rot6d_to_matrix
from losses import normalized_rot6d_graph, pos_mse, pose_positions_graph, rot_mse
from motion import canonical_three_point

log = logging.getLogger(__name__)

LOWER_MODES = ("idle", "lagged", "gt")
PREFIX = "synth."


@dataclass
class SynthesisOutput:
    y: np.ndarray


def _smooth_noise(rng, frames, count, sigma, smooth_frames):
    white = rng.normal(size=(frames, count, 3))
    if smooth_frames <= 0 or frames < 2:
        return sigma * white
    half = int(np.ceil(4.0 * smooth_frames))
    impulse = np.zeros(2 * half + 1)
    impulse[half] = 1.0
    gain = np.sqrt(np.sum(gaussian_filter1d(impulse, smooth_frames) ** 2))
    return sigma * gaussian_filter1d(white, smooth_frames, axis=0, mode="nearest") / gain


def synth_noisy_oracle(x_seq, gt_rot, skeleton, rng, upper_sigma=np.deg2rad(3.0), lower_mode="idle",
                       lag_seconds=0.5, fps=30, smooth_frames=3.0):
    """Ground-truth rotations perturbed by smooth angular noise, with the legs replaced per `lower_mode`.

    The pelvis (joint 0) always comes from ground truth. "idle" stands the legs
    straight, "lagged" delays them by `lag_seconds`, "gt" keeps them.
    """
    if lower_mode not in LOWER_MODES:
        raise ConfigError(f"unknown lower_mode {lower_mode!r}; expected one of {LOWER_MODES}")
    gt_rot = np.asarray(gt_rot, dtype=np.float32)
    N, J = gt_rot.shape[:2]
    if np.shape(x_seq)[0] != N or J != skeleton.J:
        raise ShapeError("synth_noisy_oracle", np.shape(x_seq), gt_rot.shape)

    legs = skeleton.lower_body.copy()
    legs[0] = False
    y = gt_rot.copy()
    if lower_mode == "lagged":
        lag = int(round(lag_seconds * fps))
        source = np.maximum(np.arange(N) - lag, 0)
        y[:, legs] = gt_rot[source][:, legs]

    # drawn for every joint so the stream does not depend on the mode
    noise = _smooth_noise(rng, N, J, upper_sigma, smooth_frames)
    if upper_sigma > 0:
        noisy = ~legs if lower_mode == "idle" else np.ones(J, dtype=bool)
        base = Rotation.from_matrix(rot6d_to_matrix(y[:, noisy].astype(np.float64)).reshape(-1, 3, 3))
        perturbed = Rotation.from_rotvec(noise[:, noisy].reshape(-1, 3)) * base
        y[:, noisy] = matrix_to_rot6d(perturbed.as_matrix()).reshape(N, -1, 6)
    if lower_mode == "idle":
        y[:, legs] = IDENTITY_6D
    return SynthesisOutput(y)


# learned baseline

def init_synth_mlp(rng, J, three_point_dim=54, hidden=(256, 256)):
    return ag.ParamSet.from_arrays(ag.init_mlp(rng, PREFIX, [three_point_dim, *hidden, J * 6]))


def _synth_graph(params, x):
    n = 0
    while f"{PREFIX}{n}.weight" in params:
        n += 1
    out = ag.mlp(ag.constant(x, dtype=params[f"{PREFIX}0.weight"].data.dtype), params, PREFIX, n)
    J = out.shape[1] // 6
    bias = ag.constant(np.tile(IDENTITY_6D, (out.shape[0], J)), dtype=out.data.dtype)
    return ag.reshape(out + bias, (out.shape[0], J, 6))


def synth_mlp(x_seq, params):
    """Deterministic per-frame poses from the canonicalized 3-point signal."""
    x = canonical_three_point(x_seq)
    with ag.no_grad():
        y = normalized_rot6d_graph(_synth_graph(params, x))
    return SynthesisOutput(y.data.astype(np.float32))


def train_synth_mlp(sequences, skeleton, rng, iterations=500, batch=256, lr=1e-3, w_pos=0.01,
                    hidden=(256, 256), progress=False):
    """Fit the learned baseline with rotation MSE plus weighted position MSE on random frames."""
    usable = [s for s in sequences if s.gt_rot is not None]
    if not usable:
        raise ConfigError("train_synth_mlp needs sequences with ground truth")
    x_all = np.concatenate([canonical_three_point(s.three_point) for s in usable])
    head_all = np.concatenate([s.three_point[:, 0:3] for s in usable])
    rot_all = np.concatenate([s.gt_rot for s in usable])
    pos_all = anchored_positions(skeleton, rot_all, head_all)

    params = init_synth_mlp(rng, skeleton.J, x_all.shape[1], hidden)
    opt = ag.Adam(params, lr=lr)
    loss = None
    for _ in tqdm(range(iterations), desc="synthesis mlp", disable=not progress):
        pick = rng.integers(len(x_all), size=batch)
        z = _synth_graph(params, x_all[pick])
        loss = rot_mse(z, rot_all[pick]) + pos_mse(pose_positions_graph(skeleton, z, head_all[pick]), pos_all[pick]) * w_pos
        ag.backward(loss)
        opt.step()
    if loss is not None:
        log.info("Trained synthesis MLP on %d frames (final loss %.5f)", len(x_all), loss.item())
    return params


# pluggable stages

class StoredSamplesStage:
    """Noisy-oracle samples drawn when the sequence was generated."""

    name = "noisy_oracle"

    def sample(self, sequence, index=0):
        return sequence.synthesis[index % len(sequence.synthesis)]

    def checksum(self):
        return hashlib.sha256(b"stored-samples").hexdigest()


class MlpStage:
    name = "mlp"

    def __init__(self, params):
        self.params = params
        self._cache = {}

    def sample(self, sequence, index=0):
        if sequence.name not in self._cache:
            self._cache[sequence.name] = synth_mlp(sequence.three_point, self.params).y
        return self._cache[sequence.name]

    def checksum(self):
        return self.params.checksum()


class ImportedStage:
    """Pose sequences produced by an external synthesis model, keyed by sequence name."""

    name = "imported"

    def __init__(self, poses):
        self.poses = dict(poses)

    @classmethod
    def from_directory(cls, directory, J=None):
        poses = {}
        for path in sorted(Path(directory).glob("*.pose")):
            poses[path.stem] = import_pose_sequence(path, J)
        log.info("Imported %d pose sequences from %s", len(poses), directory)
        return cls(poses)

    def sample(self, sequence, index=0):
        try:
            y = self.poses[sequence.name]
        except KeyError:
            raise SequenceFormatError(f"no imported poses for sequence {sequence.name}") from None
        if y.shape[0] != sequence.frames:
            raise ShapeError("ImportedStage", y.shape, (sequence.frames,))
        return y

    def checksum(self):
        digest = hashlib.sha256()
        for name in sorted(self.poses):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.poses[name]).tobytes())
        return digest.hexdigest()

"""
Procedural motion clips standing in for motion capture, and the 3-point tracking signal derived from them.

Every protocol is built from sinusoids and sin^2 pulses, so joint-angle
trajectories are C1. Joint 0 carries the global pelvis orientation and the
root rotation stays at identity, which is the convention predicted poses use
as well.
"""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from errors import ShapeError, UnknownProtocolError
from kinematics import Pose, forward_kinematics, matrix_to_rot6d

PROTOCOLS = ("idle", "walk", "kick", "knee_strike", "lift_leg", "elbow_knee_strike", "football", "beatsaber")
DEFAULT_FPS = 30
THREE_POINT_DIM = 54
BLOCK = 18

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


@dataclass
class TrackedPoint:
    position: np.ndarray
    acceleration: np.ndarray
    rotation: np.ndarray
    rot_acceleration: np.ndarray

    def to_vector(self):
        return np.concatenate([self.position, self.acceleration, self.rotation, self.rot_acceleration])


@dataclass
class ThreePointFrame:
    head: TrackedPoint
    left_wrist: TrackedPoint
    right_wrist: TrackedPoint

    def to_vector(self):
        return np.concatenate([p.to_vector() for p in (self.head, self.left_wrist, self.right_wrist)]).astype(np.float32)

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x)
        if x.shape != (THREE_POINT_DIM,):
            raise ShapeError("ThreePointFrame", x.shape, (THREE_POINT_DIM,))
        points = []
        for k in range(3):
            b = x[k * BLOCK:(k + 1) * BLOCK]
            points.append(TrackedPoint(b[0:3], b[3:6], b[6:12], b[12:18]))
        return cls(*points)


@dataclass
class MotionClip:
    protocol: str
    fps: int
    scale: float
    local_rot: np.ndarray
    root_pos: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    three_point: np.ndarray

    @property
    def frames(self):
        return len(self.local_rot)

    @property
    def pose(self):
        return Pose(self.local_rot, self.root_pos)


def second_difference(x, fps):
    """Central second difference along axis 0, scaled to per-second^2, edges replicated."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    if len(x) < 3:
        return out
    out[1:-1] = (x[2:] - 2.0 * x[1:-1] + x[:-2]) * fps * fps
    out[0] = out[1]
    out[-1] = out[-2]
    return out


def three_point_signal(skeleton, positions, rotations, fps):
    """Stack [pos, acc, rot6d, rot6d acc] for head, left wrist, right wrist -> (N, 54)."""
    blocks = []
    for j in skeleton.tracked:
        pos = positions[:, j, :].astype(np.float64)
        rot = matrix_to_rot6d(rotations[:, j, :, :]).astype(np.float64)
        blocks.append(np.concatenate([pos, second_difference(pos, fps), rot, second_difference(rot, fps)], axis=-1))
    return np.concatenate(blocks, axis=-1).astype(np.float32)


def canonical_three_point(x):
    """Express the three tracked positions relative to the head's ground-plane position."""
    x = np.array(x, dtype=np.float32, copy=True)
    if x.shape[-1] != THREE_POINT_DIM:
        raise ShapeError("canonical_three_point", x.shape, (THREE_POINT_DIM,))
    head_xy = x[..., 0:2].copy()
    for k in range(3):
        x[..., k * BLOCK:k * BLOCK + 2] -= head_xy
    return x


def _pulse(t, start, duration):
    phase = (t - start) / duration
    inside = (phase >= 0.0) & (phase <= 1.0)
    return np.where(inside, np.sin(np.pi * np.clip(phase, 0.0, 1.0)) ** 2, 0.0)


def _pulse_train(t, period, duration, offset):
    out = np.zeros_like(t)
    start = offset
    while start < t[-1] + period:
        out += _pulse(t, start - period, duration)
        start += period
    return out


class _Body:
    """Accumulates per-joint rotation terms (outermost first) and the root trajectory."""

    def __init__(self, skeleton, t, scale):
        self.skeleton = skeleton
        self.t = t
        self.terms = [[] for _ in range(skeleton.J)]
        self.root = np.zeros((len(t), 3))
        self.root[:, 2] = skeleton.root_height * scale

    def rotate(self, name, axis, angle):
        angle = np.broadcast_to(np.asarray(angle, dtype=np.float64), self.t.shape)
        self.terms[self.skeleton.index(name)].append(angle[:, None] * axis[None, :])

    def hip(self, side, flex):
        self.rotate(f"{side}_hip", _Y, -np.asarray(flex))

    def knee(self, side, flex):
        self.rotate(f"{side}_knee", _Y, flex)

    def arm(self, side, down, forward=0.0, elbow=0.0):
        sign = 1.0 if side == "left" else -1.0
        self.rotate(f"{side}_shoulder", _Y, -np.asarray(forward))
        self.rotate(f"{side}_shoulder", _X, -sign * np.asarray(down))
        self.rotate(f"{side}_elbow", _Z, -sign * np.asarray(elbow))

    def local_rotations(self):
        N = len(self.t)
        out = np.empty((N, self.skeleton.J, 6))
        for j, terms in enumerate(self.terms):
            rot = Rotation.identity(N)
            for rotvec in terms:
                rot = rot * Rotation.from_rotvec(rotvec)
            out[:, j, :] = matrix_to_rot6d(rot.as_matrix())
        return out


def _idle(body, rng):
    down = np.deg2rad(rng.uniform(70.0, 80.0))
    elbow = np.deg2rad(rng.uniform(5.0, 15.0))
    for side in ("left", "right"):
        body.arm(side, down, elbow=elbow)


def _walk(body, rng):
    t = body.t
    amp = rng.uniform(0.85, 1.15)
    period = rng.uniform(1.0, 1.2)
    phi = 2.0 * np.pi * t / period + rng.uniform(0.0, 2.0 * np.pi)
    speed = 1.1 * amp
    for side, shift in (("left", 0.0), ("right", np.pi)):
        body.hip(side, np.deg2rad(25.0) * amp * np.sin(phi + shift))
        body.knee(side, np.deg2rad(35.0) * amp * 0.5 * (1.0 - np.cos(phi + shift + 0.5 * np.pi)))
        body.arm(side, np.deg2rad(75.0), forward=np.deg2rad(15.0) * amp * np.sin(phi + shift + np.pi),
                 elbow=np.deg2rad(20.0))
    body.rotate("pelvis", _Z, np.deg2rad(4.0) * np.sin(phi))
    body.root[:, 0] = speed * t
    body.root[:, 2] -= 0.02 * 0.5 * (1.0 - np.cos(2.0 * phi))


def _strikes(body, rng, hip_deg, knee_deg, period, duration, knee_lead=0.0):
    """Alternating single-leg pulses; returns the per-side pulse envelopes."""
    t = body.t
    amp = rng.uniform(0.85, 1.15)
    period *= rng.uniform(0.9, 1.1)
    first = rng.integers(2)
    offset = rng.uniform(0.2, 0.6)
    envelopes = {}
    for k, side in enumerate(("left", "right")):
        start = offset + period * ((k + first) % 2)
        hip = _pulse_train(t, 2.0 * period, duration, start)
        if knee_lead > 0:
            knee = _pulse_train(t, 2.0 * period, duration * (1.0 - knee_lead), start)
        else:
            knee = hip
        body.hip(side, np.deg2rad(hip_deg) * amp * hip)
        body.knee(side, np.deg2rad(knee_deg) * amp * knee)
        envelopes[side] = hip
    return envelopes


def _kick(body, rng):
    env = _strikes(body, rng, hip_deg=70.0, knee_deg=65.0, period=0.9, duration=0.7, knee_lead=0.4)
    for side in ("left", "right"):
        body.arm(side, np.deg2rad(60.0), forward=np.deg2rad(20.0), elbow=np.deg2rad(60.0))
    body.rotate("pelvis", _Y, -np.deg2rad(8.0) * (env["left"] + env["right"]))


def _knee_strike(body, rng):
    env = _strikes(body, rng, hip_deg=85.0, knee_deg=100.0, period=0.8, duration=0.6)
    pull = env["left"] + env["right"]
    for side in ("left", "right"):
        body.arm(side, np.deg2rad(40.0), forward=np.deg2rad(60.0) - np.deg2rad(30.0) * pull,
                 elbow=np.deg2rad(90.0))


def _lift_leg(body, rng):
    _strikes(body, rng, hip_deg=50.0, knee_deg=50.0, period=1.5, duration=2.0)
    for side in ("left", "right"):
        body.arm(side, np.deg2rad(75.0), elbow=np.deg2rad(10.0))


def _elbow_knee_strike(body, rng):
    env = _strikes(body, rng, hip_deg=80.0, knee_deg=95.0, period=0.9, duration=0.7)
    twist = np.deg2rad(20.0) * (env["left"] - env["right"])
    body.rotate("spine2", _Z, twist)
    # the elbow opposite to the striking knee comes across
    body.arm("left", np.deg2rad(45.0), forward=np.deg2rad(70.0) * env["right"], elbow=np.deg2rad(110.0) * env["right"])
    body.arm("right", np.deg2rad(45.0), forward=np.deg2rad(70.0) * env["left"], elbow=np.deg2rad(110.0) * env["left"])


def _football(body, rng):
    _strikes(body, rng, hip_deg=35.0, knee_deg=40.0, period=0.4, duration=0.5)
    for side in ("left", "right"):
        body.arm(side, np.deg2rad(55.0), elbow=np.deg2rad(25.0))
    body.root[:, 0] = rng.uniform(0.2, 0.5) * body.t


def _beatsaber(body, rng):
    t = body.t
    for side in ("left", "right"):
        f1, f2, f3 = rng.uniform(0.4, 1.2, size=3)
        p1, p2, p3 = rng.uniform(0.0, 2.0 * np.pi, size=3)
        body.arm(side,
                 np.deg2rad(60.0) + np.deg2rad(30.0) * np.sin(2.0 * np.pi * f2 * t + p2),
                 forward=np.deg2rad(50.0) + np.deg2rad(40.0) * np.sin(2.0 * np.pi * f1 * t + p1),
                 elbow=np.deg2rad(30.0) + np.deg2rad(25.0) * np.sin(2.0 * np.pi * f3 * t + p3))
    squat = _pulse_train(t, rng.uniform(2.5, 3.5), 1.5, rng.uniform(0.3, 1.0))
    hip = np.deg2rad(40.0) * squat
    knee = np.deg2rad(80.0) * squat
    for side in ("left", "right"):
        body.hip(side, hip)
        body.knee(side, knee)
    # keep the feet near the floor while squatting
    thigh = -body.skeleton.bone_offset[body.skeleton.index("left_knee"), 2]
    shin = -body.skeleton.bone_offset[body.skeleton.index("left_ankle"), 2]
    drop = thigh * (1.0 - np.cos(hip)) + shin * (1.0 - np.cos(hip - knee))
    body.root[:, 2] -= drop * body.root[0, 2] / body.skeleton.root_height


_BUILDERS = {
    "idle": _idle,
    "walk": _walk,
    "kick": _kick,
    "knee_strike": _knee_strike,
    "lift_leg": _lift_leg,
    "elbow_knee_strike": _elbow_knee_strike,
    "football": _football,
    "beatsaber": _beatsaber,
}


def gen_motion(protocol, duration, rng, skeleton, fps=DEFAULT_FPS, scale=1.0):
    """Generate `duration` seconds of the named protocol at `fps`."""
    builder = _BUILDERS.get(protocol)
    if builder is None:
        raise UnknownProtocolError(f"unknown motion protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    frames = max(1, int(round(duration * fps)))
    t = np.arange(frames, dtype=np.float64) / fps
    body = _Body(skeleton, t, scale)
    builder(body, rng)

    local_rot = body.local_rotations().astype(np.float32)
    root_pos = body.root.astype(np.float32)
    positions, rotations = forward_kinematics(skeleton, Pose(local_rot, root_pos), scale)
    return MotionClip(
        protocol=protocol,
        fps=fps,
        scale=float(scale),
        local_rot=local_rot,
        root_pos=root_pos,
        positions=positions,
        rotations=rotations,
        three_point=three_point_signal(skeleton, positions, rotations, fps),
    )

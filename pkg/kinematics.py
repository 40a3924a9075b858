"""
Skeleton, 6D rotations, forward kinematics and the capsule body proxy.

Axes are +z up, +x forward, +y left, in meters. Bone j is the segment from
joint parent(j) to joint j; the root (joint 0) has no bone. Rotations are
carried as 6D vectors holding the first two columns of the rotation matrix.
"""
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from errors import ConfigError, DegenerateRotationError, ShapeError

RADIUS_RANGE = (0.02, 0.20)
SCALE_RANGE = (0.85, 1.15)
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float32)

_DEGENERATE_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Skeleton:
    names: tuple
    parent: np.ndarray
    bone_offset: np.ndarray
    head: int
    left_wrist: int
    right_wrist: int
    lower_body: np.ndarray
    root_height: float = 0.94

    def __post_init__(self):
        J = len(self.names)
        if self.parent.shape != (J,) or self.bone_offset.shape != (J, 3) or self.lower_body.shape != (J,):
            raise ShapeError("Skeleton", self.parent.shape, self.bone_offset.shape, self.lower_body.shape)
        if self.parent[0] != 0:
            raise ConfigError("joint 0 must be the root (its own parent)")
        for j in range(1, J):
            if not 0 <= self.parent[j] < j:
                raise ConfigError(f"joint {self.names[j]} must come after its parent")
            if np.linalg.norm(self.bone_offset[j]) <= 0:
                raise ConfigError(f"bone ending at {self.names[j]} has zero length")

    @property
    def J(self):
        return len(self.names)

    @property
    def tracked(self):
        return (self.head, self.left_wrist, self.right_wrist)

    @property
    def bones(self):
        return np.arange(1, self.J)

    @property
    def upper_body(self):
        return ~self.lower_body

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown joint {name!r}") from None

    def signature(self):
        digest = hashlib.sha256()
        digest.update(",".join(self.names).encode())
        digest.update(self.parent.astype("<i4").tobytes())
        digest.update(self.bone_offset.astype("<f4").tobytes())
        return digest.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class BodyShape:
    """Capsule radius per bone (entry j spans parent(j) -> j) and a bone-length scale."""

    radius: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        lo, hi = RADIUS_RANGE
        if np.any(self.radius < lo) or np.any(self.radius > hi):
            raise ConfigError(f"capsule radii must lie in [{lo}, {hi}] m")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ConfigError(f"body scale {self.scale} outside {SCALE_RANGE}")


@dataclass(eq=False)
class Pose:
    """Local joint rotations plus the root transform; leading frame axes are allowed."""

    local_rot: np.ndarray
    root_pos: np.ndarray
    root_rot: np.ndarray = field(default_factory=lambda: IDENTITY_6D.copy())

    @classmethod
    def identity(cls, J, root_pos=(0.0, 0.0, 0.0)):
        return cls(np.tile(IDENTITY_6D, (J, 1)), np.asarray(root_pos, dtype=np.float32))


@dataclass
class SurfaceSamples:
    points: np.ndarray
    bone: np.ndarray


def load_skeleton(path="skeleton.yaml"):
    """Read the skeleton file. Returns (Skeleton, BodyShape)."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"skeleton file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid skeleton file {path}: {exc}") from None

    joints = raw.get("joints") or []
    if not joints:
        raise ConfigError(f"{path}: no joints declared")
    names = tuple(j["name"] for j in joints)
    lookup = {name: i for i, name in enumerate(names)}
    try:
        parent = np.array([lookup[j["parent"]] for j in joints], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"{path}: unknown parent {exc}") from None
    offset = np.array([j["offset"] for j in joints], dtype=np.float32)
    radius = np.array([j["radius"] for j in joints], dtype=np.float32)

    tracked = raw.get("tracked", {})
    lower = np.zeros(len(names), dtype=bool)
    for name in raw.get("lower_body", []):
        if name not in lookup:
            raise ConfigError(f"{path}: lower_body names unknown joint {name!r}")
        lower[lookup[name]] = True
    try:
        head, lw, rw = (lookup[tracked[k]] for k in ("head", "left_wrist", "right_wrist"))
    except KeyError as exc:
        raise ConfigError(f"{path}: tracked joint missing {exc}") from None

    skeleton = Skeleton(names, parent, offset, head, lw, rw, lower,
                        root_height=float(raw.get("root_height", 0.94)))
    return skeleton, BodyShape(radius, float(raw.get("scale", 1.0)))


# rotations

def rot6d_to_matrix(r):
    """Gram-Schmidt on the two stored columns; columns of the result are (b1, b2, b1 x b2)."""
    r = np.asarray(r)
    if r.shape[-1] != 6:
        raise ShapeError("rot6d_to_matrix", r.shape, (6,))
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_EPS):
        raise DegenerateRotationError("6D rotation has a zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _DEGENERATE_EPS * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise DegenerateRotationError("6D rotation has parallel columns")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m):
    m = np.asarray(m)
    if m.shape[-2:] != (3, 3):
        raise ShapeError("matrix_to_rot6d", m.shape, (3, 3))
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def orthonormalize_rot6d(r):
    return matrix_to_rot6d(rot6d_to_matrix(r)).astype(np.asarray(r).dtype)


# forward kinematics

def forward_kinematics(skeleton, pose, scale=1.0):
    """World joint positions (..., J, 3) and rotations (..., J, 3, 3)."""
    local = rot6d_to_matrix(pose.local_rot)
    if local.shape[-3] != skeleton.J:
        raise ShapeError("forward_kinematics", local.shape[-3:-2], (skeleton.J,))
    root_rot = rot6d_to_matrix(pose.root_rot)
    root_pos = np.asarray(pose.root_pos)
    lead = local.shape[:-3]
    root_rot = np.broadcast_to(root_rot, lead + (3, 3))
    root_pos = np.broadcast_to(root_pos, lead + (3,))
    offsets = skeleton.bone_offset.astype(local.dtype) * local.dtype.type(scale)

    world_rot = [None] * skeleton.J
    world_pos = [None] * skeleton.J
    world_rot[0] = root_rot @ local[..., 0, :, :]
    world_pos[0] = root_pos.astype(local.dtype)
    for j in range(1, skeleton.J):
        p = skeleton.parent[j]
        world_pos[j] = world_pos[p] + np.einsum("...ij,j->...i", world_rot[p], offsets[j])
        world_rot[j] = world_rot[p] @ local[..., j, :, :]
    return np.stack(world_pos, axis=-2), np.stack(world_rot, axis=-3)


def fk(skeleton, pose, scale=1.0):
    return forward_kinematics(skeleton, pose, scale)[0]


def anchored_positions(skeleton, local_rot, head_pos, scale=1.0):
    """Place a pose from local rotations alone by putting its head on the tracked head position.

    Joint 0's rotation is taken as the global pelvis orientation.
    """
    local_rot = np.asarray(local_rot)
    head_pos = np.asarray(head_pos)
    lead = local_rot.shape[:-2]
    pose = Pose(local_rot, np.zeros(lead + (3,), dtype=local_rot.dtype))
    positions = fk(skeleton, pose, scale)
    return positions + (head_pos - positions[..., skeleton.head, :])[..., None, :]


def bone_segments(skeleton, positions):
    """(starts, ends) of every bone for one frame of joint positions."""
    bones = skeleton.bones
    return positions[skeleton.parent[bones]], positions[bones]


# body surface

def _perpendicular_basis(axis):
    helper = np.where(np.abs(axis[..., 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(axis, e1)
    return e1, e2


def surface_sample(skeleton, pose, shape, rng, count, positions=None):
    """Sample points on the lateral surface of the bone capsules.

    Bones are picked in proportion to their lateral area 2*pi*r*L; within a
    bone the position along the axis and the angle around it are uniform.
    """
    if count < 1:
        raise ValueError("surface_sample needs count >= 1")
    if positions is None:
        positions = fk(skeleton, pose, shape.scale)
    starts, ends = bone_segments(skeleton, positions)
    bones = skeleton.bones
    radii = shape.radius[bones].astype(np.float64)
    axis = (ends - starts).astype(np.float64)
    length = np.linalg.norm(axis, axis=-1)
    area = 2.0 * np.pi * radii * length
    if area.sum() <= 0:
        raise ValueError("skeleton has no bone surface to sample")
    pick = rng.choice(len(bones), size=count, p=area / area.sum())
    t = rng.random(count)
    theta = rng.random(count) * 2.0 * np.pi

    unit = axis / np.maximum(length, 1e-12)[:, None]
    e1, e2 = _perpendicular_basis(unit)
    ring = np.cos(theta)[:, None] * e1[pick] + np.sin(theta)[:, None] * e2[pick]
    points = starts[pick] + t[:, None] * axis[pick] + radii[pick][:, None] * ring
    return SurfaceSamples(points.astype(np.float32), bones[pick])


def closest_joint(point, joint_positions):
    """(index, distance) of the nearest joint; ties go to the lowest index."""
    d = np.linalg.norm(np.asarray(joint_positions) - np.asarray(point), axis=-1)
    j = int(np.argmin(d))
    return j, float(d[j])


def closest_joints(points, joint_positions):
    d = np.linalg.norm(np.asarray(points)[:, None, :] - np.asarray(joint_positions)[None, :, :], axis=-1)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(idx)), idx]


# geometry

def segment_distances(points, starts, ends):
    """Distance from each point (Q, 3) to each segment (B, 3) -> (Q, B)."""
    points = np.asarray(points, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    ab = ends - starts
    ap = points[:, None, :] - starts[None, :, :]
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
    t = np.clip(np.sum(ap * ab[None], axis=-1) / denom[None], 0.0, 1.0)
    closest = starts[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def point_segment_distance(point, a, b):
    return float(segment_distances(np.asarray(point)[None], np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def capsule_surface_distance(points, starts, ends, radii):
    """Distance to the nearest capsule surface, 0 inside any capsule."""
    d = segment_distances(points, starts, ends) - np.asarray(radii, dtype=np.float64)[None, :]
    if d.shape[1] == 0:
        return np.full(d.shape[0], np.inf)
    return np.maximum(d.min(axis=1), 0.0)


def point_capsule_distance(point, a, b, radius):
    return float(capsule_surface_distance(np.asarray(point)[None], np.asarray(a)[None],
                                          np.asarray(b)[None], [radius])[0])


def _sphere_interval(origin, directions, centers, radii):
    m = origin[None, None, :] - centers[None, :, :]
    bm = np.einsum("qi,qbi->qb", directions, m)
    c = np.sum(m * m, axis=-1) - radii[None] ** 2
    disc = bm * bm - c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    return np.where(hit, -bm - root, np.inf), np.where(hit, -bm + root, -np.inf)


def ray_capsule_intervals(origin, directions, starts, ends, radii):
    """Entry/exit ray parameters for unit `directions` (Q, 3) against capsules (B,).

    Misses are reported as enter=+inf, exit=-inf. The capsule is convex, so its
    interval is the hull of the clipped cylinder and the two end-cap spheres.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    a = np.asarray(starts, dtype=np.float64)
    b = np.asarray(ends, dtype=np.float64)
    r = np.asarray(radii, dtype=np.float64)

    ba = b - a
    length = np.linalg.norm(ba, axis=-1)
    u = ba / np.maximum(length, 1e-12)[:, None]
    oc = origin[None, :] - a
    oc_u = np.sum(oc * u, axis=-1)
    d_u = d @ u.T
    d_perp = d[:, None, :] - d_u[..., None] * u[None]
    o_perp = oc - oc_u[:, None] * u
    qa = np.sum(d_perp * d_perp, axis=-1)
    qb = 2.0 * np.einsum("qbi,bi->qb", d_perp, o_perp)
    qc = np.sum(o_perp * o_perp, axis=-1)[None, :] - r[None] ** 2

    parallel = qa < 1e-12
    disc = qb * qb - 4.0 * qa * qc
    root = np.sqrt(np.where(disc >= 0, disc, 0.0))
    safe_a = np.where(parallel, 1.0, qa)
    cyl_in = np.where(parallel, -np.inf, (-qb - root) / (2.0 * safe_a))
    cyl_out = np.where(parallel, np.inf, (-qb + root) / (2.0 * safe_a))
    cyl_hit = np.where(parallel, qc <= 0, disc >= 0)

    flat = np.abs(d_u) < 1e-12
    safe_du = np.where(flat, 1.0, d_u)
    s0 = (0.0 - oc_u[None]) / safe_du
    s1 = (length[None] - oc_u[None]) / safe_du
    inside_slab = (oc_u >= 0) & (oc_u <= length)
    slab_in = np.where(flat, np.where(inside_slab[None], -np.inf, np.inf), np.minimum(s0, s1))
    slab_out = np.where(flat, np.where(inside_slab[None], np.inf, -np.inf), np.maximum(s0, s1))

    enter = np.maximum(cyl_in, slab_in)
    exit_ = np.minimum(cyl_out, slab_out)
    cyl_ok = cyl_hit & (enter <= exit_) & (length[None] > 0)
    enter = np.where(cyl_ok, enter, np.inf)
    exit_ = np.where(cyl_ok, exit_, -np.inf)

    for center in (a, b):
        s_in, s_out = _sphere_interval(origin, d, center, r)
        enter = np.minimum(enter, s_in)
        exit_ = np.maximum(exit_, s_out)
    return enter, exit_


def ray_capsule_interval(origin, direction, a, b, radius):
    """(t_enter, t_exit) along a unit ray, or None when it misses."""
    enter, exit_ = ray_capsule_intervals(origin, np.asarray(direction)[None], np.asarray(a)[None],
                                         np.asarray(b)[None], [radius])
    if not np.isfinite(enter[0, 0]):
        return None
    return float(enter[0, 0]), float(exit_[0, 0])


# shapes

def randomize_shape(base, rng, scale_range=(0.95, 1.05), radius_jitter=0.10):
    """Per-subject body shape: one global scale and multiplicative radius jitter, clipped to valid ranges."""
    lo = max(scale_range[0], SCALE_RANGE[0])
    hi = min(scale_range[1], SCALE_RANGE[1])
    scale = float(rng.uniform(lo, hi))
    jitter = rng.uniform(1.0 - radius_jitter, 1.0 + radius_jitter, size=base.radius.shape)
    radius = np.clip(base.radius * jitter, *RADIUS_RANGE).astype(np.float32)
    return BodyShape(radius, scale)

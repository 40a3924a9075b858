"""
Training losses: rotation and position MSE, the naive point-to-surface PC-loss, and the semantic SPC-loss
built from per-joint support and probability-weighted centroids.

Graph versions take `autograd.Tensor` predictions and return scalar tensors.
Ground truth, clouds and masks are plain arrays.
"""
import logging
from dataclasses import dataclass, fields

import numpy as np

import autograd as ag
from errors import ConfigError, NumericalError, ShapeError
from kinematics import capsule_surface_distance, bone_segments
from spc_net import ce_loss

log = logging.getLogger(__name__)

MOCAP = "mocap-synthetic"
PSEUDO_REAL = "pseudo-real"

_DOMAIN_TERMS = {
    MOCAP: ("rot", "pos", "ce", "spc", "pc"),
    PSEUDO_REAL: ("spc", "pc"),
}

__all__ = [
    "LossWeights", "LossComponents", "JointEvidence", "ce_loss", "rot_mse", "pos_mse", "pc_loss",
    "pc_loss_value", "joint_evidence", "joint_evidence_graph", "spc_loss", "total_loss",
    "gram_schmidt_graph", "normalized_rot6d_graph", "pose_positions_graph",
]


@dataclass(frozen=True)
class LossWeights:
    w_rot: float = 1.0
    w_pos: float = 0.01
    w_ce: float = 0.1
    w_spc: float = 0.01
    w_pc: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossComponents:
    rot: ag.Tensor = None
    pos: ag.Tensor = None
    ce: ag.Tensor = None
    spc: ag.Tensor = None
    pc: ag.Tensor = None

    def present(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def values(self):
        return {name: t.item() for name, t in self.present().items()}


@dataclass
class JointEvidence:
    support: np.ndarray
    centroid: np.ndarray
    active: np.ndarray


def _const(like, array):
    return ag.constant(array, dtype=like.data.dtype)


# rotations and kinematics on the graph

def gram_schmidt_graph(r):
    """Orthonormal columns (b1, b2, b3) from 6D rotations (..., 6)."""
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    b1 = ag.normalize(a1)
    along = ag.expand(ag.sum(b1 * a2, axis=-1), -1, 3)
    b2 = ag.normalize(a2 - b1 * along)
    return b1, b2, ag.cross(b1, b2)


def normalized_rot6d_graph(r):
    b1, b2, _ = gram_schmidt_graph(r)
    return ag.concat([b1, b2], axis=-1)


def rotation_matrices_graph(r):
    return ag.stack(gram_schmidt_graph(r), axis=-1)


def pose_positions_graph(skeleton, rot6d, head_pos, scale=1.0):
    """Head-anchored joint positions (B, J, 3) from local 6D rotations (B, J, 6)."""
    B, J = rot6d.shape[:2]
    if J != skeleton.J:
        raise ShapeError("pose_positions", rot6d.shape, (B, skeleton.J, 6))
    rots = rotation_matrices_graph(rot6d)
    world = [None] * J
    pos = [None] * J
    world[0] = rots[:, 0]
    pos[0] = _const(rot6d, np.zeros((B, 3)))
    for j in range(1, J):
        p = skeleton.parent[j]
        offset = _const(rot6d, np.tile(skeleton.bone_offset[j] * scale, (B, 1)).reshape(B, 3, 1))
        pos[j] = pos[p] + ag.reshape(ag.matmul(world[p], offset), (B, 3))
        world[j] = ag.matmul(world[p], rots[:, j])
    positions = ag.stack(pos, axis=1)
    shift = _const(rot6d, head_pos) - positions[:, skeleton.head]
    return positions + ag.expand(shift, 1, J)


# supervised terms

def rot_mse(z, gt):
    """Squared 6D difference after re-orthonormalizing z, summed over components, mean over frames and joints."""
    if z.shape != np.shape(gt):
        raise ShapeError("rot_mse", z.shape, np.shape(gt))
    d = normalized_rot6d_graph(z) - _const(z, gt)
    return ag.mean(ag.sum(d * d, axis=-1))


def pos_mse(pred_positions, gt_positions):
    if pred_positions.shape != np.shape(gt_positions):
        raise ShapeError("pos_mse", pred_positions.shape, np.shape(gt_positions))
    d = pred_positions - _const(pred_positions, gt_positions)
    return ag.mean(ag.sum(d * d, axis=-1))


# point-cloud terms

def pc_loss(points, positions, skeleton, radii, valid=None):
    """Mean distance from each point to the nearest posed capsule surface, 0 inside a capsule.

    points: (B, P, 3) world coordinates; positions: tracked (B, J, 3). Frames
    with valid=False are left out.
    """
    points = np.asarray(points)
    if valid is not None:
        keep = np.flatnonzero(valid)
        if keep.size == 0:
            return _const(positions, 0.0)
        points = points[keep]
        positions = positions[keep]
    B, P = points.shape[:2]
    bones = skeleton.bones
    nb = len(bones)
    a = ag.expand(positions[:, skeleton.parent[bones]], 1, P)
    b = ag.expand(positions[:, bones], 1, P)
    p = _const(positions, np.repeat(points[:, :, None, :], nb, axis=2))
    ab = b - a
    ap = p - a
    t = ag.clip(ag.sum(ap * ab, axis=-1) / ag.shift(ag.sum(ab * ab, axis=-1), 1e-12), 0.0, 1.0)
    closest = a + ag.expand(t, -1, 3) * ab
    r = _const(positions, np.broadcast_to(np.asarray(radii)[bones], (B, P, nb)))
    signed = ag.norm(p - closest) - r
    nearest = -ag.max_pool(-signed, axis=2)
    return ag.mean(ag.relu(nearest))


def pc_loss_value(points, positions, skeleton, radii):
    """Array version of `pc_loss` for one frame: mean surface distance in meters."""
    starts, ends = bone_segments(skeleton, np.asarray(positions))
    return float(np.mean(capsule_surface_distance(points, starts, ends, np.asarray(radii)[skeleton.bones])))


def joint_evidence(points, probs, support_fraction=0.05):
    """Support, probability-weighted centroids and the active set per frame; background excluded.

    points: (B, P, 3), probs: (B, P, J+1).
    """
    points = np.asarray(points, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[:2] != points.shape[:2]:
        raise ShapeError("joint_evidence", points.shape, probs.shape)
    P = probs.shape[1]
    joint_probs = probs[..., :-1]
    support = joint_probs.sum(axis=1)
    weighted = np.einsum("bpj,bpk->bjk", joint_probs, points)
    safe = np.where(support > 0, support, 1.0)
    centroid = np.where((support > 0)[..., None], weighted / safe[..., None], 0.0)
    return JointEvidence(support, centroid, support > support_fraction * P)


def joint_evidence_graph(points, probs):
    """(support, centroid) as tensors so the SPC loss can reach the registration."""
    joint_probs = probs[..., 0:probs.shape[-1] - 1]
    support = ag.sum(joint_probs, axis=1)
    weighted = ag.matmul(ag.transpose(joint_probs, (0, 2, 1)), _const(probs, points))
    denom = support + _const(probs, (support.data == 0).astype(np.float64))
    return support, weighted / ag.expand(denom, -1, 3)


def spc_loss(centroids, active, positions, theta=0.10):
    """Hinge on predicted-joint-to-centroid distance beyond theta.

    Averaged over each frame's active joints, then over frames that have any;
    returns 0 when no frame has an active joint.
    """
    active = np.asarray(active, dtype=bool)
    if active.shape != positions.shape[:2]:
        raise ShapeError("spc_loss", active.shape, positions.shape)
    counts = active.sum(axis=1)
    frames = counts > 0
    if not frames.any():
        return _const(positions, 0.0)
    weights = np.where(active, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / frames.sum()
    centroids = centroids if isinstance(centroids, ag.Tensor) else _const(positions, centroids)
    distance = ag.norm(positions - centroids)
    hinge = ag.relu(ag.shift(distance, -theta))
    return ag.sum(hinge * _const(positions, weights))


def total_loss(components, weights, domain=MOCAP):
    """Weighted sum of the present components allowed for `domain`."""
    allowed = _DOMAIN_TERMS.get(domain)
    if allowed is None:
        raise ConfigError(f"unknown domain {domain!r}")
    total = None
    for name, value in components.present().items():
        if not np.all(np.isfinite(value.data)):
            raise NumericalError(f"{name} loss is not finite", component=name)
        if name not in allowed:
            log.debug("dropping %s loss for a %s batch", name, domain)
            continue
        term = value * getattr(weights, f"w_{name}")
        total = term if total is None else total + term
    if total is None:
        return ag.constant(0.0)
    return total

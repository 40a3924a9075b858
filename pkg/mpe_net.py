"""
Residual pose refinement: an MLP maps (3-point vector, synthesized 6D pose, SPC features) to a
per-joint 6D offset, and the refined pose is the synthesized pose plus that offset.

The SPC features are the encoder's global feature rescaled to unit RMS. When the SPC
network has a decoder they also carry, per joint, whether the registration found
support for it and where its evidence centroid lies relative to the synthesized joint.
"""
import numpy as np

import autograd as ag
from errors import ShapeError

PREFIX = "mpe."

# per-joint registration feature: active flag and clipped centroid offset (x, y, z)
EVIDENCE_WIDTH = 4
EVIDENCE_CLIP = 0.5
EVIDENCE_SCALE = 10.0


def feature_width(encoder_width, J, with_registration):
    return encoder_width + (J * EVIDENCE_WIDTH if with_registration else 0)


def scaled_global_feature(glob):
    """Global feature normalized per frame to norm sqrt(F)."""
    glob = glob if isinstance(glob, ag.Tensor) else ag.constant(glob)
    return ag.scale(ag.normalize(glob), float(np.sqrt(glob.shape[-1])))


def registration_features(evidence, synth_positions, valid=None):
    """(N, J*4) rows of [active, 10 * clip(centroid - synthesized joint, 0.5)]; zero for inactive joints.

    evidence: JointEvidence over N frames; synth_positions: (N, J, 3) world positions of the synthesized pose.
    """
    active = np.asarray(evidence.active, dtype=bool)
    synth_positions = np.asarray(synth_positions, dtype=np.float64)
    if active.shape != synth_positions.shape[:2]:
        raise ShapeError("registration_features", active.shape, synth_positions.shape)
    if valid is not None:
        active = active & np.asarray(valid, dtype=bool)[:, None]
    offset = np.clip(np.asarray(evidence.centroid) - synth_positions, -EVIDENCE_CLIP, EVIDENCE_CLIP)
    rows = np.concatenate([active[..., None].astype(np.float64), offset * EVIDENCE_SCALE], axis=-1)
    rows[~active] = 0.0
    N, J = active.shape
    return rows.reshape(N, J * EVIDENCE_WIDTH).astype(np.float32)


def init_mpe(rng, J, three_point_dim=54, feature_dim=128, hidden=(256, 256)):
    """The last layer starts at zero, so an untrained model returns the synthesized pose unchanged."""
    widths = [three_point_dim + J * 6 + feature_dim, *hidden, J * 6]
    return ag.ParamSet.from_arrays(ag.init_mlp(rng, PREFIX, widths, zero_last=True))


def _layers(params):
    n = 0
    while f"{PREFIX}{n}.weight" in params:
        n += 1
    return n


def dims(params):
    """(input width, J)."""
    n = _layers(params)
    return params[f"{PREFIX}0.weight"].shape[0], params[f"{PREFIX}{n - 1}.weight"].shape[1] // 6


def mpe_graph(params, x, y, f):
    """Offsets (B, J*6) for flattened rows; `f` may be a tracked tensor so gradients reach the encoder."""
    dtype = params[f"{PREFIX}0.weight"].data.dtype
    x = x if isinstance(x, ag.Tensor) else ag.constant(x, dtype=dtype)
    y = y if isinstance(y, ag.Tensor) else ag.constant(y, dtype=dtype)
    f = f if isinstance(f, ag.Tensor) else ag.constant(f, dtype=dtype)
    width, _ = dims(params)
    if x.shape[1] + y.shape[1] + f.shape[1] != width:
        raise ShapeError("mpe", x.shape, y.shape, f.shape, detail=f"expected total width {width}")
    return ag.mlp(ag.concat([x, y, f], axis=-1), params, PREFIX, _layers(params))


def mpe_forward(x_frame, y_frame, f_frame, params):
    """Offset (J, 6) for one frame."""
    x_frame = np.asarray(x_frame)
    y_frame = np.asarray(y_frame)
    f_frame = np.asarray(f_frame)
    width, J = dims(params)
    if y_frame.shape != (J, 6) or x_frame.ndim != 1 or f_frame.ndim != 1:
        raise ShapeError("mpe_forward", x_frame.shape, y_frame.shape, f_frame.shape, detail=f"J={J}")
    with ag.no_grad():
        out = mpe_graph(params, x_frame[None], y_frame.reshape(1, J * 6), f_frame[None])
    return out.data.reshape(J, 6)


def mpe_sequence(params, x_seq, y_seq, f_seq):
    N, J = y_seq.shape[:2]
    with ag.no_grad():
        out = mpe_graph(params, x_seq, y_seq.reshape(N, J * 6), f_seq)
    return out.data.reshape(N, J, 6)


def compose_residual(y, offset):
    y = np.asarray(y)
    offset = np.asarray(offset)
    if y.shape != offset.shape:
        raise ShapeError("compose_residual", y.shape, offset.shape)
    return y + offset

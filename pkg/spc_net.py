"""
Semantic point-cloud network: a PointNet-style per-point encoder with a max-pooled global feature, and a
per-point decoder giving probabilities over J joints plus one background class.

The encoder sees each point concatenated with the frame's 3-point vector. The
decoder sees the point's local feature, the current global feature, the running
mean of global features from earlier frames and the raw 3-point vector.
"""
from dataclasses import dataclass

import numpy as np

import autograd as ag
from errors import ShapeError

ENC = "spc.enc"
DEC = "spc.dec"

# sampled points per frame
POINTS = 100


@dataclass
class Registration:
    probs: np.ndarray
    global_feature: np.ndarray

    @property
    def labels(self):
        return np.argmax(self.probs, axis=-1)


def init_spc(rng, J, three_point_dim=54, encoder_widths=(64, 128), decoder_hidden=128, with_decoder=True):
    arrays = ag.init_mlp(rng, ENC, [3 + three_point_dim, *encoder_widths])
    if with_decoder:
        feature = encoder_widths[-1]
        arrays.update(ag.init_mlp(rng, DEC, [3 * feature + three_point_dim, decoder_hidden, J + 1]))
    return ag.ParamSet.from_arrays(arrays)


def _layers(params, prefix):
    n = 0
    while f"{prefix}{n}.weight" in params:
        n += 1
    return n


def has_decoder(params):
    return _layers(params, DEC) > 0


def feature_dim(params):
    return params[f"{ENC}{_layers(params, ENC) - 1}.weight"].shape[1]


def class_count(params):
    return params[f"{DEC}{_layers(params, DEC) - 1}.weight"].shape[1]


def encode(params, clouds, x):
    """Per-point local features (N, P, F) and max-pooled global features (N, F)."""
    clouds = np.asarray(clouds)
    x = np.asarray(x)
    N, P = clouds.shape[:2]
    if x.shape[0] != N:
        raise ShapeError("spc.encode", clouds.shape, x.shape)
    dtype = params[f"{ENC}0.weight"].data.dtype
    points = ag.constant(clouds.reshape(N * P, 3), dtype=dtype)
    tracked = ag.constant(np.repeat(x, P, axis=0), dtype=dtype)
    h = ag.mlp(ag.concat([points, tracked], axis=-1), params, ENC, _layers(params, ENC), final_activation=True)
    local = ag.reshape(h, (N, P, h.shape[-1]))
    return local, ag.max_pool(local, axis=1)


def decode(params, local, global_feature, history, x):
    N, P, F = local.shape
    dtype = local.data.dtype
    pooled = ag.constant(np.repeat(np.asarray(history)[:, None, :], P, axis=1), dtype=dtype)
    tracked = ag.constant(np.repeat(np.asarray(x)[:, None, :], P, axis=1), dtype=dtype)
    stacked = ag.concat([local, ag.expand(global_feature, 1, P), pooled, tracked], axis=-1)
    h = ag.reshape(stacked, (N * P, stacked.shape[-1]))
    logits = ag.mlp(h, params, DEC, _layers(params, DEC))
    return ag.softmax(ag.reshape(logits, (N, P, logits.shape[-1])), axis=-1)


def pooled_history(global_features, prior_sum=None, prior_count=0):
    """Mean of the global features of all earlier frames; zeros when there are none."""
    g = np.asarray(global_features, dtype=np.float64)
    N, F = g.shape
    prior = np.zeros(F) if prior_sum is None else np.asarray(prior_sum, dtype=np.float64)
    running = prior + np.concatenate([np.zeros((1, F)), np.cumsum(g, axis=0)[:-1]], axis=0)
    counts = prior_count + np.arange(N)
    out = np.zeros_like(running)
    seen = counts > 0
    out[seen] = running[seen] / counts[seen, None]
    return out.astype(np.float32)


def spc_apply(params, x, clouds, history):
    """Graph-building forward over a block of frames with externally supplied history."""
    local, glob = encode(params, clouds, x)
    return decode(params, local, glob, history, x), glob


def _check_cloud(clouds, expected_points):
    if clouds.ndim != 3 or clouds.shape[-1] != 3:
        raise ShapeError("spc", clouds.shape, (None, expected_points, 3))
    if clouds.shape[1] != expected_points:
        raise ShapeError("spc", clouds.shape[1:], (expected_points, 3), detail="wrong point count")


def spc_forward(params, x_frame, cloud, history, expected_points=POINTS):
    """Register a single frame."""
    cloud = np.asarray(cloud)
    _check_cloud(cloud[None], expected_points)
    with ag.no_grad():
        probs, glob = spc_apply(params, np.asarray(x_frame)[None], cloud[None], np.asarray(history)[None])
    return Registration(probs.data[0], glob.data[0])


def spc_sequence(params, x_seq, cloud_seq, expected_points=POINTS, prior_sum=None, prior_count=0):
    """Register every frame of a sequence causally. Returns a Registration with a leading frame axis."""
    cloud_seq = np.asarray(cloud_seq)
    _check_cloud(cloud_seq, expected_points)
    with ag.no_grad():
        local, glob = encode(params, cloud_seq, x_seq)
        history = pooled_history(glob.data, prior_sum, prior_count)
        probs = decode(params, local, glob, history, x_seq)
    return Registration(probs.data, glob.data)


def spc_encode_sequence(params, x_seq, cloud_seq):
    with ag.no_grad():
        _, glob = encode(params, cloud_seq, x_seq)
    return glob.data


def ce_loss(probs, labels):
    """Mean negative log-probability of the true class over all points and frames."""
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ShapeError("ce_loss", probs.shape, labels.shape)
    key = tuple(np.indices(labels.shape)) + (labels,)
    return -ag.mean(ag.log(probs[key]))


def registration_accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=-1) == np.asarray(labels)))

"""
Egocentric depth-sensor simulation.

Per frame: sample the capsule body surface, keep what the head-mounted sensor
can see (view cone, range, self-occlusion), draw P points with probability
proportional to range, label them against the ground-truth joints, then add
sensor noise. Clouds are stored relative to the sensor origin.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from errors import ConfigError
from kinematics import bone_segments, closest_joints, randomize_shape, ray_capsule_intervals, surface_sample
from motion import gen_motion

log = logging.getLogger(__name__)

MOCAP = "mocap-synthetic"
PSEUDO_REAL = "pseudo-real"
OCCLUSION_TOLERANCE = 0.005


@dataclass(frozen=True)
class SensorRig:
    mount_offset: tuple = (0.15, 0.0, -0.03)
    view_pitch: float = float(np.deg2rad(50.0))
    fov_half_angle: float = float(np.deg2rad(65.0))
    max_range: float = 2.5

    def __post_init__(self):
        if not 0 < self.fov_half_angle <= np.pi / 2:
            raise ConfigError("fov_half_angle must lie in (0, pi/2]")
        if self.max_range <= 0:
            raise ConfigError("max_range must be positive")

    def pose(self, head_pos, head_rot):
        """(sensor origin, unit view axis) in world coordinates."""
        origin = head_pos + head_rot @ np.asarray(self.mount_offset)
        axis = head_rot @ np.array([np.cos(self.view_pitch), 0.0, -np.sin(self.view_pitch)])
        return origin, axis / np.linalg.norm(axis)

    def sentinel(self, view_axis):
        """Stand-in point for frames where nothing is visible, in the sensor frame."""
        return (np.asarray(view_axis) * self.max_range).astype(np.float32)


@dataclass(frozen=True)
class DomainProfile:
    axial_factor: float = 1.5
    base_sigma: float = 0.02
    dropout_fraction: float = 0.05
    low_quantile: float = 0.25
    radial_bias: float = 0.01


@dataclass
class SampledCloud:
    points: np.ndarray
    gt_label: np.ndarray = None


@dataclass
class ShiftedCloud:
    points: np.ndarray
    source: np.ndarray
    gt_label: np.ndarray = None


@dataclass
class SequenceSample:
    name: str
    three_point: np.ndarray
    points: np.ndarray
    labels: np.ndarray
    sensor_origin: np.ndarray
    view_axis: np.ndarray
    empty: np.ndarray
    synthesis: np.ndarray
    gt_rot: np.ndarray = None
    gt_root_pos: np.ndarray = None
    domain_tag: str = MOCAP
    protocol: str = "idle"
    fps: int = 30
    seed: int = 0
    body_scale: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def frames(self):
        return len(self.three_point)

    @property
    def has_ground_truth(self):
        return self.gt_rot is not None

    def points_world(self):
        return self.points + self.sensor_origin[:, None, :]

    def strip_ground_truth(self):
        self.labels = None
        self.gt_rot = None
        self.gt_root_pos = None
        self.domain_tag = PSEUDO_REAL
        return self


# per-frame stages

def visible_mask(raw_points, origin, view_axis, rig, starts, ends, radii, tolerance=OCCLUSION_TOLERANCE):
    """True for points inside the view cone and range that no capsule hides."""
    raw_points = np.asarray(raw_points, dtype=np.float64)
    if len(raw_points) == 0:
        return np.zeros(0, dtype=bool)
    rays = raw_points - origin
    dist = np.linalg.norm(rays, axis=-1)
    unit = rays / np.maximum(dist, 1e-12)[:, None]
    in_cone = (unit @ view_axis >= np.cos(rig.fov_half_angle)) & (dist <= rig.max_range) & (dist > 0)
    mask = np.zeros(len(raw_points), dtype=bool)
    idx = np.flatnonzero(in_cone)
    if idx.size == 0:
        return mask
    enter, exit_ = ray_capsule_intervals(origin, unit[idx], starts, ends, radii)
    blocked = (enter < (dist[idx] - tolerance)[:, None]) & (exit_ > 0.0) & (enter <= exit_)
    mask[idx] = ~blocked.any(axis=1)
    return mask


def visible_points(raw_points, origin, view_axis, rig, skeleton, positions, shape):
    starts, ends = bone_segments(skeleton, positions)
    mask = visible_mask(raw_points, origin, view_axis, rig, starts, ends, shape.radius[skeleton.bones])
    return np.asarray(raw_points)[mask]


def depth_weighted_sample(points, sensor_origin, P, rng, sentinel=None):
    """Draw P points with replacement, probability proportional to range from the sensor.

    Returns (points relative to the sensor, source indices). With nothing
    visible, every row is the sentinel and every index is -1.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        if sentinel is None:
            sentinel = np.array([SensorRig().max_range, 0.0, 0.0])
        return np.tile(np.asarray(sentinel, dtype=np.float32), (P, 1)), np.full(P, -1, dtype=np.int64)
    rel = points - np.asarray(sensor_origin, dtype=np.float64)
    depth = np.linalg.norm(rel, axis=-1)
    total = depth.sum()
    probs = depth / total if total > 0 else np.full(len(depth), 1.0 / len(depth))
    idx = rng.choice(len(points), size=P, replace=True, p=probs)
    return rel[idx].astype(np.float32), idx


def corrupt(points, rng, sigma=0.02, outlier_sigma=0.20, outlier_fraction=0.02):
    """Isotropic Gaussian noise on every point plus wide noise on an independent Bernoulli subset."""
    points = np.asarray(points)
    n = len(points)
    noise = rng.normal(0.0, sigma, size=(n, 3))
    outliers = rng.random(n) < outlier_fraction
    noise[outliers] += rng.normal(0.0, outlier_sigma, size=(int(outliers.sum()), 3))
    return (points + noise).astype(points.dtype if points.dtype.kind == "f" else np.float32)


def label_points(points, joint_positions, threshold=0.10):
    """Nearest joint index, or J (background) when it is farther than `threshold`."""
    points = np.asarray(points).reshape(-1, 3)
    J = len(joint_positions)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    idx, dist = closest_joints(points, joint_positions)
    return np.where(dist <= threshold, idx, J).astype(np.int64)


def domain_shift(cloud, view_axis, rng, profile=DomainProfile()):
    """Apply the held-out sensor profile to a simulated cloud and drop its labels.

    Extra noise along the view axis brings the axial spread to
    `axial_factor` times the base noise; a `dropout_fraction` of points is
    removed from the lowest `low_quantile` by height and replaced by copies of
    kept points; everything moves `radial_bias` away from the sensor.
    """
    points = np.asarray(cloud.points, dtype=np.float64)
    P = len(points)
    source = np.arange(P)
    n_drop = int(round(profile.dropout_fraction * P))
    if n_drop > 0 and P > n_drop:
        order = np.argsort(points[:, 2], kind="stable")
        low = order[:max(n_drop, int(np.ceil(profile.low_quantile * P)))]
        dropped = rng.choice(low, size=n_drop, replace=False)
        kept = np.setdiff1d(source, dropped)
        source[dropped] = rng.choice(kept, size=n_drop)
    shifted = points[source]

    axis = np.asarray(view_axis, dtype=np.float64)
    extra = profile.base_sigma * np.sqrt(max(profile.axial_factor ** 2 - 1.0, 0.0))
    shifted = shifted + rng.normal(0.0, extra, size=(P, 1)) * axis[None, :]
    radius = np.linalg.norm(shifted, axis=-1, keepdims=True)
    shifted = shifted + profile.radial_bias * shifted / np.maximum(radius, 1e-12)
    return ShiftedCloud(shifted.astype(np.float32), source, None)


# sequences

@dataclass(frozen=True)
class SimulationSettings:
    frames: int = 196
    fps: int = 30
    points: int = 100
    raw_points: int = 1500
    noise_sigma: float = 0.02
    outlier_sigma: float = 0.20
    outlier_fraction: float = 0.02
    label_threshold: float = 0.10
    scale_range: tuple = (0.95, 1.05)
    radius_jitter: float = 0.10
    synthesis_samples: int = 3


def simulate_sequence(skeleton, base_shape, protocol, seed, settings, rig, synthesizer, domain=MOCAP,
                      profile=DomainProfile(), name=None):
    """Generate one aligned sequence. `synthesizer(x_seq, gt_rot, rng=rng)` returns a SynthesisOutput."""
    rng = np.random.default_rng(seed)
    shape = randomize_shape(base_shape, rng, settings.scale_range, settings.radius_jitter)
    clip = gen_motion(protocol, settings.frames / settings.fps, rng, skeleton, settings.fps, shape.scale)
    N, P, J = clip.frames, settings.points, skeleton.J
    radii = shape.radius[skeleton.bones]

    points = np.zeros((N, P, 3), dtype=np.float32)
    labels = np.zeros((N, P), dtype=np.int64)
    origins = np.zeros((N, 3), dtype=np.float32)
    axes = np.zeros((N, 3), dtype=np.float32)
    empty = np.zeros(N, dtype=bool)
    for t in range(N):
        positions = clip.positions[t].astype(np.float64)
        origin, axis = rig.pose(positions[skeleton.head], clip.rotations[t, skeleton.head].astype(np.float64))
        raw = surface_sample(skeleton, None, shape, rng, settings.raw_points, positions=positions).points
        starts, ends = bone_segments(skeleton, positions)
        seen = raw[visible_mask(raw, origin, axis, rig, starts, ends, radii)]
        sampled, idx = depth_weighted_sample(seen, origin, P, rng, sentinel=rig.sentinel(axis))
        if len(seen) == 0:
            empty[t] = True
            labels[t] = J
        else:
            labels[t] = label_points(seen[idx], positions, settings.label_threshold)
        noisy = corrupt(sampled, rng, settings.noise_sigma, settings.outlier_sigma, settings.outlier_fraction)
        if domain == PSEUDO_REAL:
            noisy = domain_shift(SampledCloud(noisy), axis, rng, profile).points
        points[t] = noisy
        origins[t] = origin
        axes[t] = axis
    if empty.any():
        log.warning("%s: %d of %d frames saw no body points", name or protocol, int(empty.sum()), N)

    samples = np.stack([synthesizer(clip.three_point, clip.local_rot, rng=rng).y
                        for _ in range(settings.synthesis_samples)]).astype(np.float32)
    sample = SequenceSample(
        name=name or f"{protocol}_{seed}",
        three_point=clip.three_point,
        points=points,
        labels=labels,
        sensor_origin=origins,
        view_axis=axes,
        empty=empty,
        synthesis=samples,
        gt_rot=clip.local_rot,
        gt_root_pos=clip.root_pos,
        domain_tag=MOCAP,
        protocol=protocol,
        fps=settings.fps,
        seed=int(seed),
        body_scale=shape.scale,
    )
    if domain == PSEUDO_REAL:
        sample.strip_ground_truth()
    return sample


def _simulate_job(job):
    return simulate_sequence(*job[:-1], **job[-1])


def build_dataset(skeleton, base_shape, protocols, count, seed, settings, rig, synthesizer, domain=MOCAP,
                  profile=DomainProfile(), prefix="seq", workers=1, progress=False):
    """`count` sequences cycling through `protocols`; sequence i uses seed + i."""
    if count < 0:
        raise ConfigError("sequence count must be non-negative")
    if not protocols:
        raise ConfigError("at least one protocol is required")
    jobs = [
        (skeleton, base_shape, protocols[i % len(protocols)], seed + i, settings, rig, synthesizer,
         {"domain": domain, "profile": profile, "name": f"{prefix}_{i:04d}"})
        for i in range(count)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_simulate_job, jobs), total=count, desc=prefix, disable=not progress))
    else:
        results = [_simulate_job(job) for job in tqdm(jobs, desc=prefix, disable=not progress)]
    log.info("Generated %d %s sequences (%s)", count, domain, ", ".join(sorted(set(protocols))))
    return results

"""
Evaluation metrics with upper/lower body splits and per-action breakdowns.

The split comes from the skeleton file: the lower body is the pelvis plus both
legs (hips, knees, ankles, feet; 9 of 22 joints), the upper body is the other 13.
The pelvis counts as lower body, the same split the 3-point synthesis baseline
reports against.

Conventions: positions in cm, rotations in radians, velocity error in cm/s.
Velocities and jerk use numpy's central differences (one-sided at the ends)
at the sequence frame rate. Jitter is reported as the ratio of predicted to
ground-truth mean jerk magnitude.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from errors import NumericalError, ShapeError
from io_formats import write_csv
from kinematics import anchored_positions, rot6d_to_matrix
from losses import pc_loss_value

COLUMNS = (
    "mpjpe_up", "mpjpe_low", "mpjre_up", "mpjre_low", "mpjve_up", "mpjve_low",
    "jitter_ratio_up", "jitter_ratio_low", "pc_loss",
)
HEADERS = {
    "mpjpe_up": "MPJPE up (cm)", "mpjpe_low": "MPJPE low (cm)",
    "mpjre_up": "MPJRE up (rad)", "mpjre_low": "MPJRE low (rad)",
    "mpjve_up": "MPJVE up (cm/s)", "mpjve_low": "MPJVE low (cm/s)",
    "jitter_ratio_up": "jitter up (pred/gt)", "jitter_ratio_low": "jitter low (pred/gt)",
    "pc_loss": "PC-loss (cm)",
}
STATIC_JERK = 1e-9


def _select(x, subset):
    if subset is None:
        return x
    return x[..., subset, :] if x.ndim >= 2 else x


def _as_matrices(r):
    r = np.asarray(r, dtype=np.float64)
    return rot6d_to_matrix(r) if r.shape[-1] == 6 else r


def _check(op, pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(op, np.shape(pred), np.shape(gt))


def position_errors(pred, gt):
    return np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)


def rotation_angles(pred, gt):
    """Geodesic angle between rotation matrices, from the chordal distance."""
    diff = _as_matrices(pred) - _as_matrices(gt)
    chord = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    return 2.0 * np.arcsin(np.clip(chord / (2.0 * np.sqrt(2.0)), 0.0, 1.0))


def velocities(positions, fps):
    return np.gradient(np.asarray(positions, np.float64), axis=0) * fps


def jerk(positions, fps):
    x = np.asarray(positions, np.float64)
    for _ in range(3):
        x = np.gradient(x, axis=0)
    return x * fps ** 3


def mpjpe(pred, gt, joint_subset=None):
    _check("mpjpe", pred, gt)
    return float(np.mean(position_errors(_select(np.asarray(pred), joint_subset),
                                         _select(np.asarray(gt), joint_subset)))) * 100.0


def mpjre(pred, gt, subset=None):
    """Mean geodesic angle in radians; accepts 6D vectors or rotation matrices."""
    pred = _as_matrices(pred)
    gt = _as_matrices(gt)
    _check("mpjre", pred, gt)
    if subset is not None:
        pred = pred[..., subset, :, :]
        gt = gt[..., subset, :, :]
    return float(np.mean(rotation_angles(pred, gt)))


def mpjve(pred, gt, subset=None, fps=30):
    _check("mpjve", pred, gt)
    if len(pred) < 2:
        raise ShapeError("mpjve", np.shape(pred), (2,), detail="needs at least 2 frames")
    dv = velocities(_select(np.asarray(pred), subset), fps) - velocities(_select(np.asarray(gt), subset), fps)
    return float(np.mean(np.linalg.norm(dv, axis=-1))) * 100.0


def jitter_ratio(pred, gt, subset=None, fps=30):
    _check("jitter_ratio", pred, gt)
    if len(pred) < 4:
        raise ShapeError("jitter_ratio", np.shape(pred), (4,), detail="needs at least 4 frames")
    pred_jerk = np.mean(np.linalg.norm(jerk(_select(np.asarray(pred), subset), fps), axis=-1))
    gt_jerk = np.mean(np.linalg.norm(jerk(_select(np.asarray(gt), subset), fps), axis=-1))
    if gt_jerk < STATIC_JERK:
        raise NumericalError("ground-truth jerk is zero; jitter ratio undefined", component="jitter")
    return float(pred_jerk / gt_jerk)


@dataclass
class MetricReport:
    label: str = ""
    mpjpe_up: float = math.nan
    mpjpe_low: float = math.nan
    mpjre_up: float = math.nan
    mpjre_low: float = math.nan
    mpjve_up: float = math.nan
    mpjve_low: float = math.nan
    jitter_ratio_up: float = math.nan
    jitter_ratio_low: float = math.nan
    pc_loss: float = math.nan
    per_action: dict = field(default_factory=dict)

    def row(self):
        return {c: getattr(self, c) for c in COLUMNS}

    def to_table(self):
        return format_table({self.label or "all": self})

    def csv_rows(self):
        rows = [{"label": self.label, "action": "all", **self.row()}]
        for action in sorted(self.per_action):
            rows.append({"label": self.label, "action": action, **self.per_action[action]})
        return rows

    def to_csv(self, path):
        write_csv(path, self.csv_rows(), ["label", "action", *COLUMNS])


def _fmt(value):
    return "   n/a" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:8.3f}"


def format_table(reports, action=None):
    """One row per report, one column per metric."""
    width = max([len("method")] + [len(k) for k in reports])
    lines = [
        "# positions cm, rotations rad, velocity error cm/s (central differences), jitter = pred/gt mean jerk",
        f"{'method':<{width}}  " + "  ".join(f"{HEADERS[c]:>20}" for c in COLUMNS),
    ]
    for name, report in reports.items():
        row = report.row() if action is None else report.per_action.get(action, {})
        lines.append(f"{name:<{width}}  " + "  ".join(f"{_fmt(row.get(c)):>20}" for c in COLUMNS))
    return "\n".join(lines)


class _Accumulator:
    def __init__(self):
        self.sums = {}

    def add(self, key, total, count):
        s, n = self.sums.get(key, (0.0, 0))
        self.sums[key] = (s + float(total), n + int(count))

    def mean(self, key, factor=1.0):
        s, n = self.sums.get(key, (0.0, 0))
        return s / n * factor if n else math.nan

    def ratio(self, num, den):
        s_num, n_num = self.sums.get(num, (0.0, 0))
        s_den, n_den = self.sums.get(den, (0.0, 0))
        if not n_den or s_den / n_den < STATIC_JERK:
            return math.nan
        return (s_num / n_num) / (s_den / n_den)

    def row(self):
        row = {}
        for part in ("up", "low"):
            row[f"mpjpe_{part}"] = self.mean(f"pos_{part}", 100.0)
            row[f"mpjre_{part}"] = self.mean(f"rot_{part}")
            row[f"mpjve_{part}"] = self.mean(f"vel_{part}", 100.0)
            row[f"jitter_ratio_{part}"] = self.ratio(f"jerk_pred_{part}", f"jerk_gt_{part}")
        row["pc_loss"] = self.mean("pc", 100.0)
        return row


def evaluate(predictions, sequences, skeleton, radii, label=""):
    """Score predicted local rotations against ground truth; PC-loss needs only the clouds.

    predictions maps sequence name to (N, J, 6). Positions of both prediction
    and ground truth are placed with `anchored_positions` on the tracked head.
    """
    overall = _Accumulator()
    actions = {}
    parts = {"up": skeleton.upper_body, "low": skeleton.lower_body}
    for seq in sequences:
        pred = np.asarray(predictions[seq.name], dtype=np.float64)
        head = seq.three_point[:, 0:3].astype(np.float64)
        pred_pos = anchored_positions(skeleton, pred, head)
        targets = (overall, actions.setdefault(seq.protocol, _Accumulator()))

        if seq.gt_rot is not None:
            gt = np.asarray(seq.gt_rot, dtype=np.float64)
            gt_pos = anchored_positions(skeleton, gt, head)
            angles = rotation_angles(pred, gt)
            errors = position_errors(pred_pos, gt_pos)
            vel = np.linalg.norm(velocities(pred_pos, seq.fps) - velocities(gt_pos, seq.fps), axis=-1)
            jerk_pred = np.linalg.norm(jerk(pred_pos, seq.fps), axis=-1)
            jerk_gt = np.linalg.norm(jerk(gt_pos, seq.fps), axis=-1)
            for part, mask in parts.items():
                for acc in targets:
                    acc.add(f"pos_{part}", errors[:, mask].sum(), errors[:, mask].size)
                    acc.add(f"rot_{part}", angles[:, mask].sum(), angles[:, mask].size)
                    acc.add(f"vel_{part}", vel[:, mask].sum(), vel[:, mask].size)
                    acc.add(f"jerk_pred_{part}", jerk_pred[:, mask].sum(), jerk_pred[:, mask].size)
                    acc.add(f"jerk_gt_{part}", jerk_gt[:, mask].sum(), jerk_gt[:, mask].size)

        world = seq.points_world().astype(np.float64)
        for t in np.flatnonzero(~seq.empty):
            value = pc_loss_value(world[t], pred_pos[t], skeleton, radii)
            for acc in targets:
                acc.add("pc", value, 1)

    report = MetricReport(label=label, **overall.row())
    report.per_action = {name: acc.row() for name, acc in sorted(actions.items())}
    return report


def check_ablation_trends(reports, action=None, min_gap=0.05):
    """Ordering checks on lower-body MPJPE across the ablation ladder; returns failure messages."""
    def low(mode):
        report = reports[mode]
        row = report.row() if action is None else report.per_action.get(action, {})
        return row.get("mpjpe_low", math.nan)

    failures = []
    checks = [
        ("mpe_spc_decoder_spcloss", "mpe"),
        ("mpe", "synthesis_only"),
        ("mpe_spc_decoder_spcloss", "mpe_spc_decoder_pcloss"),
    ]
    for better, worse in checks:
        if better not in reports or worse not in reports:
            failures.append(f"missing report for {better if better not in reports else worse}")
            continue
        a, b = low(better), low(worse)
        if not (a < b * (1.0 - min_gap)):
            failures.append(f"lower-body MPJPE {better}={a:.3f} is not {min_gap:.0%} below {worse}={b:.3f}")
    return failures


@dataclass
class DomainAdaptationReport:
    """PC-loss (cm) per protocol on held-out pseudo-real sequences, before and after fine-tuning."""

    before: dict
    after: dict

    @property
    def relative_reduction(self):
        return 1.0 - self.after["all"] / self.before["all"]

    def to_table(self):
        keys = ["all"] + sorted(k for k in self.before if k != "all")
        lines = [f"{'protocol':<20}{'before (cm)':>14}{'after (cm)':>14}"]
        for k in keys:
            lines.append(f"{k:<20}{_fmt(self.before.get(k)):>14}{_fmt(self.after.get(k)):>14}")
        return "\n".join(lines)

    def to_csv(self, path):
        keys = ["all"] + sorted(k for k in self.before if k != "all")
        write_csv(path, [{"protocol": k, "before": self.before.get(k), "after": self.after.get(k)} for k in keys],
                  ["protocol", "before", "after"])


def pc_loss_by_protocol(report):
    out = {"all": report.pc_loss}
    out.update({name: row["pc_loss"] for name, row in report.per_action.items()})
    return out

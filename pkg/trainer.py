"""
Joint training of the SPC and MPE networks on mixed mocap/pseudo-real batches, the ablation ladder,
domain-adaptation fine-tuning and evaluation.

Synthesis is frozen: its samples are read from the sequences (or from any
other stage) and never updated. Every step draws windows of consecutive frames
from randomly chosen sequences and takes one Adam step on the combined loss.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

import autograd as ag
from config import ABLATION_MODES
from errors import ConfigError, EmptyDatasetError, NumericalError, SkeletonMismatchError
from io_formats import load_checkpoint, save_checkpoint
from kinematics import anchored_positions
from losses import (MOCAP, PSEUDO_REAL, LossComponents, ce_loss, joint_evidence, joint_evidence_graph, pc_loss,
                    pos_mse, pose_positions_graph, rot_mse, spc_loss, total_loss)
from metrics import DomainAdaptationReport, evaluate as evaluate_predictions, pc_loss_by_protocol
from motion import canonical_three_point
from mpe_net import (compose_residual, feature_width, init_mpe, mpe_graph, mpe_sequence, registration_features,
                     scaled_global_feature)
from spc_net import encode, has_decoder, init_spc, pooled_history, spc_apply, spc_encode_sequence, spc_sequence
from synthesis import StoredSamplesStage

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "l_rot", "l_pos", "l_ce", "l_spc", "l_pc", "total", "domain"]
NO_TRAINING = "none"


@dataclass(frozen=True)
class ModeSpec:
    refine: bool
    decoder: bool
    pc: bool = False
    spc: bool = False

    @property
    def uses_real(self):
        return self.pc or self.spc


MODES = {
    "synthesis_only": ModeSpec(refine=False, decoder=False),
    "mpe": ModeSpec(refine=True, decoder=False),
    "mpe_spc_decoder": ModeSpec(refine=True, decoder=True),
    "mpe_spc_decoder_pcloss": ModeSpec(refine=True, decoder=True, pc=True),
    "mpe_spc_decoder_spcloss": ModeSpec(refine=True, decoder=True, spc=True),
}
assert tuple(MODES) == ABLATION_MODES


@dataclass
class PipelineModel:
    skeleton: object
    shape: object
    mode: str
    spc: ag.ParamSet = None
    mpe: ag.ParamSet = None
    points: int = 100
    support_fraction: float = 0.05

    @classmethod
    def create(cls, skeleton, shape, mode, config, rng):
        spec = MODES[mode]
        model = cls(skeleton, shape, mode, points=config.simulation.points,
                    support_fraction=config.train.support_fraction)
        if spec.refine:
            model.spc = init_spc(rng, skeleton.J, encoder_widths=config.spc.encoder_widths,
                                 decoder_hidden=config.spc.decoder_hidden, with_decoder=spec.decoder)
            width = feature_width(config.spc.encoder_widths[-1], skeleton.J, spec.decoder)
            model.mpe = init_mpe(rng, skeleton.J, feature_dim=width,
                                 hidden=config.mpe.hidden)
        return model

    @property
    def spec(self):
        return MODES[self.mode]

    def params(self):
        tensors = {}
        for group in (self.spc, self.mpe):
            if group is not None:
                tensors.update(group.items())
        return ag.ParamSet(tensors)

    def copy(self, mode=None):
        return PipelineModel(self.skeleton, self.shape, mode or self.mode,
                             self.spc.copy() if self.spc is not None else None,
                             self.mpe.copy() if self.mpe is not None else None,
                             self.points, self.support_fraction)

    def predict(self, sequence, y):
        """Refined local rotations (N, J, 6) given a synthesized pose sequence."""
        y = np.asarray(y, dtype=np.float32)
        if not self.spec.refine:
            return y.copy()
        x = canonical_three_point(sequence.three_point)
        probs = None
        if self.spec.decoder:
            registration = spc_sequence(self.spc, x, sequence.points, expected_points=self.points)
            probs, glob = registration.probs, registration.global_feature
        else:
            glob = spc_encode_sequence(self.spc, x, sequence.points)
        head = sequence.three_point[:, 0:3]
        with ag.no_grad():
            f = _mpe_features(self, glob, probs, sequence.points_world(), y, head, ~sequence.empty)
        return compose_residual(y, mpe_sequence(self.mpe, x, y, f.data))

    def register(self, sequence):
        if self.spc is None or not has_decoder(self.spc):
            raise ConfigError(f"mode {self.mode} has no SPC decoder")
        return spc_sequence(self.spc, canonical_three_point(sequence.three_point), sequence.points,
                            expected_points=self.points)

    def meta(self):
        return {"mode": self.mode, "joints": self.skeleton.J, "skeleton": self.skeleton.signature(),
                "points": self.points, "support_fraction": self.support_fraction}

    def save(self, path):
        save_checkpoint(path, self.params(), self.meta())

    @classmethod
    def load(cls, path, skeleton, shape):
        blocks, meta = load_checkpoint(path)
        if meta.get("skeleton") != skeleton.signature() or int(meta.get("joints", -1)) != skeleton.J:
            raise SkeletonMismatchError(f"{path}: checkpoint was trained on a different skeleton")
        mode = meta.get("mode")
        if mode not in MODES:
            raise ConfigError(f"{path}: unknown mode {mode!r}")
        spc = {k: v for k, v in blocks.items() if k.startswith("spc.")}
        mpe = {k: v for k, v in blocks.items() if k.startswith("mpe.")}
        return cls(skeleton, shape, mode,
                   ag.ParamSet.from_arrays(spc) if spc else None,
                   ag.ParamSet.from_arrays(mpe) if mpe else None,
                   int(meta.get("points", 100)), float(meta.get("support_fraction", 0.05)))


@dataclass
class RunArtifacts:
    model: PipelineModel
    checkpoint: Path = None
    training_log: Path = None
    steps: int = 0
    synthesis_checksum: str = None


class _Prepared:
    """Per-sequence arrays reused by every batch."""

    def __init__(self, seq, skeleton):
        self.seq = seq
        self.x = canonical_three_point(seq.three_point)
        self.world = seq.points_world()
        self.head = seq.three_point[:, 0:3]
        self.valid = ~seq.empty
        self.gt_pos = None
        if seq.gt_rot is not None:
            self.gt_pos = anchored_positions(skeleton, seq.gt_rot, self.head).astype(np.float32)


class _HistoryCache:
    """Pooled SPC history per sequence, recomputed once it is `refresh` steps old."""

    def __init__(self, refresh):
        self.refresh = refresh
        self.entries = {}

    def get(self, prepared, params, step):
        name = prepared.seq.name
        entry = self.entries.get(name)
        if entry is None or step - entry[0] >= self.refresh:
            glob = spc_encode_sequence(params, prepared.x, prepared.seq.points)
            entry = (step, pooled_history(glob))
            self.entries[name] = entry
        return entry[1]


def _draw(rng, prepared, batch, window, stage, samples=None):
    """Pick sequences, window starts and synthesis samples; returns stacked per-frame rows."""
    picks = rng.integers(len(prepared), size=batch)
    rows = []
    for i in picks:
        p = prepared[i]
        start = int(rng.integers(p.seq.frames - window + 1))
        k = int(rng.integers(samples if samples is not None else len(p.seq.synthesis)))
        rows.append((p, slice(start, start + window), stage.sample(p.seq, k)))
    return rows


def _stack(rows, get):
    return np.concatenate([get(p, sl, y) for p, sl, y in rows], axis=0)


def _mpe_features(model, glob, probs, world, y, head, valid):
    """MPE feature rows: the rescaled global feature, plus registration evidence when there is a decoder."""
    scaled = scaled_global_feature(glob)
    if probs is None:
        return scaled
    evidence = joint_evidence(world, probs, model.support_fraction)
    synth = anchored_positions(model.skeleton, y, head)
    rows = registration_features(evidence, synth, valid)
    return ag.concat([scaled, ag.constant(rows, dtype=scaled.data.dtype)], axis=-1)


def _domain_components(model, config, rows, history_cache, step, supervised):
    """Forward one batch of windows and return its LossComponents."""
    spec = model.spec
    train = config.train
    J = model.skeleton.J
    x = _stack(rows, lambda p, sl, y: p.x[sl])
    clouds = _stack(rows, lambda p, sl, y: p.seq.points[sl])
    world = _stack(rows, lambda p, sl, y: p.world[sl])
    head = _stack(rows, lambda p, sl, y: p.head[sl])
    valid = _stack(rows, lambda p, sl, y: p.valid[sl])
    y = _stack(rows, lambda p, sl, y: y[sl]).astype(np.float32)
    B = len(x)

    probs = None
    if spec.decoder:
        history = _stack(rows, lambda p, sl, _: history_cache.get(p, model.spc, step)[sl])
        probs, glob = spc_apply(model.spc, x, clouds, history)
    else:
        _, glob = encode(model.spc, clouds, x)
    features = _mpe_features(model, glob, probs.data if probs is not None else None, world, y, head, valid)
    offsets = mpe_graph(model.mpe, x, y.reshape(B, J * 6), features)
    z = ag.reshape(ag.constant(y.reshape(B, J * 6)) + offsets, (B, J, 6))
    positions = pose_positions_graph(model.skeleton, z, head)

    parts = LossComponents()
    if supervised:
        parts.rot = rot_mse(z, _stack(rows, lambda p, sl, y: p.seq.gt_rot[sl]))
        parts.pos = pos_mse(positions, _stack(rows, lambda p, sl, y: p.gt_pos[sl]))
        if spec.decoder:
            parts.ce = ce_loss(probs, _stack(rows, lambda p, sl, y: p.seq.labels[sl]))
    if spec.pc:
        parts.pc = pc_loss(world, positions, model.skeleton, model.shape.radius, valid=valid)
    if spec.spc:
        P = clouds.shape[1]
        if train.detach_evidence:
            evidence = joint_evidence(world, probs.data, train.support_fraction)
            centroids, active = evidence.centroid, evidence.active
        else:
            support, centroids = joint_evidence_graph(world, probs)
            active = support.data > train.support_fraction * P
        parts.spc = spc_loss(centroids, active & valid[:, None], positions, train.theta)
    return parts


def _mean_of(values):
    values = [v for v in values if v is not None]
    return repr(float(np.mean(values))) if values else ""


def _check_sequences(skeleton, sequences):
    for seq in sequences:
        if seq.synthesis.shape[2] != skeleton.J:
            raise SkeletonMismatchError(f"{seq.name} has {seq.synthesis.shape[2]} joints, skeleton has {skeleton.J}")


def train(config, skeleton, shape, mocap, real=(), run_dir=None, mode=None, model=None, iterations=None,
          stage=None, progress=False):
    """Train one ablation mode. Writes checkpoint.ckpt and training_log.csv into `run_dir` when given."""
    mode = mode or config.train.ablation_mode
    if mode not in MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    spec = MODES[mode]
    iterations = config.train.iterations if iterations is None else iterations
    stage = stage or StoredSamplesStage()
    mocap = [s for s in mocap if s.has_ground_truth]
    if not mocap:
        raise EmptyDatasetError("training needs at least one mocap sequence with ground truth")
    if spec.uses_real and not real:
        raise EmptyDatasetError(f"mode {mode} needs pseudo-real sequences")
    _check_sequences(skeleton, mocap)
    _check_sequences(skeleton, real)

    rng = np.random.default_rng(config.train.seed)
    if model is None:
        model = PipelineModel.create(skeleton, shape, mode, config, rng)
    elif model.mode != mode:
        model = model.copy(mode)
    if spec.decoder and not has_decoder(model.spc):
        raise ConfigError(f"mode {mode} needs a model with an SPC decoder")

    run_dir = Path(run_dir) if run_dir is not None else None
    artifacts = RunArtifacts(model, synthesis_checksum=stage.checksum())
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        artifacts.checkpoint = run_dir / "checkpoint.ckpt"
        artifacts.training_log = run_dir / "training_log.csv"

    log_file = open(artifacts.training_log, "w", newline="") if run_dir is not None else None
    writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS) if log_file else None
    if writer:
        writer.writeheader()

    try:
        if spec.refine and iterations > 0:
            _fit(model, config, mocap, real, iterations, stage, rng, writer, artifacts, progress)
        elif writer:
            # no optimizer steps: one row with empty losses marks the run as untrained
            writer.writerow({"domain": NO_TRAINING})
    except NumericalError:
        if artifacts.checkpoint is not None:
            model.save(artifacts.checkpoint)
            log.error("Training diverged at step %d; last good checkpoint saved to %s",
                      artifacts.steps + 1, artifacts.checkpoint)
        raise
    finally:
        if log_file:
            log_file.close()

    if stage.checksum() != artifacts.synthesis_checksum:
        raise NumericalError("synthesis stage changed during training", component="synthesis")
    if artifacts.checkpoint is not None:
        model.save(artifacts.checkpoint)
    log.info("Trained %s for %d steps", mode, artifacts.steps)
    return artifacts


def _fit(model, config, mocap, real, iterations, stage, rng, writer, artifacts, progress):
    train_cfg = config.train
    spec = model.spec
    skeleton = model.skeleton
    window = min(train_cfg.window, min(s.frames for s in mocap), *(s.frames for s in real))
    mocap_prepared = [_Prepared(s, skeleton) for s in mocap]
    real_prepared = [_Prepared(s, skeleton) for s in real] if spec.uses_real else []
    history = _HistoryCache(train_cfg.history_refresh)
    params = model.params()
    opt = ag.Adam(params, lr=train_cfg.lr)

    for step in tqdm(range(iterations), desc=f"train {model.mode}", disable=not progress):
        rows = _draw(rng, mocap_prepared, train_cfg.batch_mocap, window, stage)
        mocap_parts = _domain_components(model, config, rows, history, step, supervised=True)
        total = total_loss(mocap_parts, train_cfg.weights, MOCAP)
        real_parts = None
        if real_prepared:
            real_rows = _draw(rng, real_prepared, train_cfg.batch_real, window, stage)
            real_parts = _domain_components(model, config, real_rows, history, step, supervised=False)
            total = total + total_loss(real_parts, train_cfg.weights, PSEUDO_REAL)

        ag.backward(total)
        last_good = params.arrays()
        try:
            opt.step()
        except NumericalError:
            for name, tensor in params.items():
                tensor.data = last_good[name]
            raise
        artifacts.steps = step + 1

        if writer:
            m = mocap_parts.values()
            r = real_parts.values() if real_parts else {}
            writer.writerow({
                "step": step,
                "l_rot": _mean_of([m.get("rot")]),
                "l_pos": _mean_of([m.get("pos")]),
                "l_ce": _mean_of([m.get("ce")]),
                "l_spc": _mean_of([m.get("spc"), r.get("spc")]),
                "l_pc": _mean_of([m.get("pc"), r.get("pc")]),
                "total": repr(total.item()),
                "domain": f"{MOCAP}+{PSEUDO_REAL}" if real_parts else MOCAP,
            })


def predictions_for(model, sequences, stage=None, sample=0):
    stage = stage or StoredSamplesStage()
    return {seq.name: model.predict(seq, stage.sample(seq, sample)) for seq in sequences}


def evaluate(checkpoint, sequences, skeleton, shape, stage=None, label=None):
    """MetricReport for a model (or checkpoint path) on `sequences`, using synthesis sample 0."""
    model = checkpoint if isinstance(checkpoint, PipelineModel) else PipelineModel.load(checkpoint, skeleton, shape)
    if model.skeleton.signature() != skeleton.signature():
        raise SkeletonMismatchError("model and evaluation skeletons differ")
    if not sequences:
        raise EmptyDatasetError("nothing to evaluate")
    _check_sequences(skeleton, sequences)
    return evaluate_predictions(predictions_for(model, sequences, stage), sequences, skeleton, shape.radius,
                                label=label or model.mode)


def run_ablation_ladder(config, skeleton, shape, mocap, real, eval_set, out_dir=None, modes=ABLATION_MODES,
                        progress=False, record=None):
    """Train and evaluate each mode from the same seed on the same data; returns {mode: MetricReport}.

    `record(mode, artifacts, report)` is called after each mode finishes.
    """
    reports = {}
    for mode in modes:
        run_dir = Path(out_dir) / mode if out_dir is not None else None
        artifacts = train(config, skeleton, shape, mocap, real, run_dir=run_dir, mode=mode, progress=progress)
        report = evaluate(artifacts.model, eval_set, skeleton, shape, label=mode)
        if run_dir is not None:
            (run_dir / "report.txt").write_text(report.to_table() + "\n")
            report.to_csv(run_dir / "report.csv")
        if record is not None:
            record(mode, artifacts, report)
        reports[mode] = report
        log.info("%s: lower MPJPE %.2f cm, upper MPJPE %.2f cm", mode, report.mpjpe_low, report.mpjpe_up)
    return reports


def fine_tune(model, config, mocap, real, iterations=None, run_dir=None, progress=False):
    """Continue training with the SPC-loss on pseudo-real data; the input model is left untouched."""
    if not real:
        raise EmptyDatasetError("fine-tuning needs pseudo-real sequences")
    iterations = config.train.fine_tune_iterations if iterations is None else iterations
    return train(config, model.skeleton, model.shape, mocap, real, run_dir=run_dir,
                 mode="mpe_spc_decoder_spcloss", model=model.copy("mpe_spc_decoder_spcloss"),
                 iterations=iterations, progress=progress)


def compare_domain_adaptation(config, skeleton, shape, mocap, real_train, real_eval, out_dir=None, progress=False):
    """PC-loss on held-out pseudo-real data for a clean-simulation model before and after SPC fine-tuning."""
    base_dir = Path(out_dir) / "clean" if out_dir is not None else None
    tuned_dir = Path(out_dir) / "adapted" if out_dir is not None else None
    base = train(config, skeleton, shape, mocap, (), run_dir=base_dir, mode="mpe_spc_decoder", progress=progress)
    before = evaluate(base.model, real_eval, skeleton, shape, label="clean")
    tuned = fine_tune(base.model, config, mocap, real_train, run_dir=tuned_dir, progress=progress)
    after = evaluate(tuned.model, real_eval, skeleton, shape, label="adapted")
    report = DomainAdaptationReport(pc_loss_by_protocol(before), pc_loss_by_protocol(after))
    if out_dir is not None:
        (Path(out_dir) / "adaptation.txt").write_text(report.to_table() + "\n")
        report.to_csv(Path(out_dir) / "adaptation.csv")
    return report


__all__ = [
    "MODES", "ModeSpec", "PipelineModel", "RunArtifacts", "train", "evaluate",
    "predictions_for", "run_ablation_ladder", "fine_tune", "compare_domain_adaptation",
]

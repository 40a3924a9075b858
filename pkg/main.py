import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from config import load_config
from errors import EmptyDatasetError, NumericalError, PipelineError
from io_formats import export_ply, export_pose_sequence, export_registration_csv, load_sequence, load_sequences, save_sequence, sequence_filename
from kinematics import load_skeleton
from ledger import list_runs, open_ledger, overall_metrics, record_dataset, record_report, record_run
from metrics import check_ablation_trends, format_table
from sensor_sim import MOCAP, PSEUDO_REAL, build_dataset
from synthesis import ImportedStage, MlpStage, StoredSamplesStage, train_synth_mlp
from trainer import MODES, PipelineModel, compare_domain_adaptation, evaluate, run_ablation_ladder, train

log = logging.getLogger("egopose")

# split -> (domain, count field, protocol field, seed offset)
SPLITS = {
    "train": (MOCAP, "train_sequences", "protocols", 0),
    "eval": (MOCAP, "eval_sequences", "eval_protocols", 100_000),
    "real": (PSEUDO_REAL, "real_sequences", "protocols", 200_000),
    "real_eval": (PSEUDO_REAL, "real_eval_sequences", "eval_protocols", 300_000),
}


class Context:
    def __init__(self, args):
        self.args = args
        self.config = load_config(args.config, args.set)
        self.skeleton, self.shape = load_skeleton(self._skeleton_path())
        self.progress = not args.quiet

    def _skeleton_path(self):
        path = Path(self.config.run.skeleton)
        if not path.is_absolute() and not path.exists() and self.config.source:
            candidate = Path(self.config.source).parent / path
            if candidate.exists():
                return candidate
        return path

    @property
    def output_dir(self):
        return Path(self.config.run.output_dir)

    def split_dir(self, split):
        return Path(self.config.data.data_dir) / split

    def load_split(self, split, required=True):
        directory = self.split_dir(split)
        sequences = load_sequences(directory) if directory.is_dir() else []
        if not sequences and required:
            raise EmptyDatasetError(f"no sequences in {directory}; run gen-data first")
        log.info("Loaded %d sequences from %s", len(sequences), directory)
        return sequences

    def ledger(self):
        return open_ledger(self.config.run.ledger)

    def stage(self, train_set=None):
        args = self.args
        if getattr(args, "poses", None):
            return ImportedStage.from_directory(args.poses, self.skeleton.J)
        if getattr(args, "synthesis", "stored") == "mlp":
            train_set = train_set if train_set is not None else self.load_split("train")
            rng = np.random.default_rng(self.config.train.seed)
            params = train_synth_mlp(train_set, self.skeleton, rng, progress=self.progress)
            return MlpStage(params)
        return StoredSamplesStage()


def cmd_gen_data(ctx):
    config = ctx.config
    session = ctx.ledger()
    synthesizer = config.synthesis.synthesizer(ctx.skeleton, config.simulation.fps)
    for split in ctx.args.split or list(SPLITS):
        domain, count_field, protocol_field, offset = SPLITS[split]
        count = getattr(config.data, count_field)
        seed = config.data.seed + offset
        sequences = build_dataset(
            ctx.skeleton, ctx.shape, getattr(config.data, protocol_field), count, seed,
            config.simulation, config.sensor, synthesizer, domain=domain, profile=config.domain,
            prefix=split, workers=config.data.workers, progress=ctx.progress,
        )
        directory = ctx.split_dir(split)
        directory.mkdir(parents=True, exist_ok=True)
        for seq in sequences:
            save_sequence(sequence_filename(directory, seq.name), seq)
        record_dataset(session, split, directory, sequences, seed, config.source)
        empty = sum(int(s.empty.sum()) for s in sequences)
        print(f"Generated {len(sequences)} {domain} sequences into {directory} ({empty} empty frames)")
    return 0


def _write_report(run_dir, report):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.txt").write_text(report.to_table() + "\n")
    report.to_csv(run_dir / "report.csv")


def cmd_train(ctx):
    config = ctx.config
    mode = ctx.args.mode or config.train.ablation_mode
    mocap = ctx.load_split("train")
    real = ctx.load_split("real") if MODES[mode].uses_real else []
    stage = ctx.stage(mocap)
    run_dir = ctx.output_dir / (ctx.args.name or mode)
    session = ctx.ledger()
    try:
        artifacts = train(config, ctx.skeleton, ctx.shape, mocap, real, run_dir=run_dir, mode=mode,
                          stage=stage, progress=ctx.progress)
    except NumericalError:
        record_run(session, "train", mode, run_dir=run_dir, config=config, status="diverged")
        raise
    run = record_run(session, "train", mode, artifacts, run_dir, config)

    eval_set = ctx.load_split("eval", required=False)
    if eval_set:
        report = evaluate(artifacts.model, eval_set, ctx.skeleton, ctx.shape, stage=stage, label=mode)
        _write_report(run_dir, report)
        record_report(session, run, report)
        print(report.to_table())
    print(f"Trained {mode} for {artifacts.steps} steps. Results in {run_dir}/")
    return 0


def cmd_eval(ctx):
    sequences = ctx.load_split(ctx.args.split)
    model = PipelineModel.load(ctx.args.checkpoint, ctx.skeleton, ctx.shape)
    report = evaluate(model, sequences, ctx.skeleton, ctx.shape, stage=ctx.stage(), label=model.mode)
    if ctx.args.out:
        _write_report(Path(ctx.args.out), report)
    print(report.to_table())
    if ctx.args.action:
        print(format_table({report.label: report}, action=ctx.args.action))
    return 0


def cmd_ablate(ctx):
    config = ctx.config
    mocap = ctx.load_split("train")
    real = ctx.load_split("real")
    eval_set = ctx.load_split("eval")
    out_dir = ctx.output_dir / (ctx.args.name or "ablation")
    session = ctx.ledger()

    def record(mode, artifacts, report):
        run = record_run(session, "ablate", mode, artifacts, out_dir / mode, config)
        record_report(session, run, report)

    reports = run_ablation_ladder(config, ctx.skeleton, ctx.shape, mocap, real, eval_set, out_dir=out_dir,
                                  progress=ctx.progress, record=record)
    print(format_table(reports))
    print(f"\n{ctx.args.action}:")
    print(format_table(reports, action=ctx.args.action))
    for failure in check_ablation_trends(reports, action=ctx.args.action):
        log.warning("Trend check failed: %s", failure)
    print(f"\nAblation complete. Results in {out_dir}/")
    return 0


def cmd_adapt(ctx):
    mocap = ctx.load_split("train")
    real = ctx.load_split("real")
    real_eval = ctx.load_split("real_eval")
    out_dir = ctx.output_dir / (ctx.args.name or "adaptation")
    report = compare_domain_adaptation(ctx.config, ctx.skeleton, ctx.shape, mocap, real, real_eval,
                                       out_dir=out_dir, progress=ctx.progress)
    record_run(ctx.ledger(), "adapt", "mpe_spc_decoder_spcloss", run_dir=out_dir, config=ctx.config)
    print(report.to_table())
    print(f"PC-loss reduced by {report.relative_reduction:.1%}. Results in {out_dir}/")
    return 0


def cmd_export_ply(ctx):
    args = ctx.args
    seq = load_sequence(args.sequence)
    if not 0 <= args.frame < seq.frames:
        raise EmptyDatasetError(f"frame {args.frame} outside 0..{seq.frames - 1}")
    points = seq.points_world()[args.frame]
    labels = seq.labels[args.frame] if seq.labels is not None else None
    if args.checkpoint:
        model = PipelineModel.load(args.checkpoint, ctx.skeleton, ctx.shape)
        probs = model.register(seq).probs[args.frame]
        labels = np.argmax(probs, axis=-1)
        if args.csv:
            export_registration_csv(args.csv, points, probs)
    export_ply(points, labels, args.out)
    print(f"Wrote {len(points)} points of {seq.name} frame {args.frame} to {args.out}")
    return 0


def cmd_export_pose(ctx):
    args = ctx.args
    seq = load_sequence(args.sequence)
    y = ctx.stage().sample(seq, 0)
    mode = "synthesis_only"
    if args.checkpoint:
        model = PipelineModel.load(args.checkpoint, ctx.skeleton, ctx.shape)
        y = model.predict(seq, y)
        mode = model.mode
    export_pose_sequence(args.out, y, {"name": seq.name, "mode": mode})
    print(f"Wrote {y.shape[0]} frames of {seq.name} ({mode}) to {args.out}")
    return 0


def cmd_history(ctx):
    session = ctx.ledger()
    runs = list_runs(session, ctx.args.limit)
    if not runs:
        print("No runs recorded.")
        return 0
    print(f"{'id':>4}  {'created':<19}  {'command':<7}  {'mode':<24}  {'status':<9}  {'steps':>6}  {'MPJPE low':>9}")
    for run in runs:
        rows = overall_metrics(session, run)
        low = f"{rows[0].mpjpe_low:9.3f}" if rows and rows[0].mpjpe_low is not None else "      n/a"
        print(f"{run.id:>4}  {run.created_at or '':<19}  {run.command:<7}  {run.mode:<24}  {run.status:<9}  "
              f"{run.steps or 0:>6}  {low}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="Egocentric point-cloud pose refinement")
    parser.add_argument("--config", default="desk_config.yaml", help="Experiment YAML file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config entry, e.g. train.iterations=50 (repeatable)")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate mocap and pseudo-real sequences")
    p.add_argument("--split", action="append", choices=list(SPLITS), help="Only these splits (repeatable)")
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "Train one ablation mode"),
                             ("eval", cmd_eval, "Evaluate a checkpoint"),
                             ("export-pose", cmd_export_pose, "Export a refined pose sequence")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--synthesis", choices=["stored", "mlp"], default="stored",
                       help="Synthesis stage: stored noisy-oracle samples or the learned MLP baseline")
        p.add_argument("--poses", help="Directory of imported .pose files to use as the synthesis stage")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--mode", choices=list(MODES), help="Ablation mode (default from config)")
            p.add_argument("--name", help="Run directory name under run.output_dir")
        elif name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", default="eval", choices=list(SPLITS))
            p.add_argument("--action", help="Also print the breakdown for one protocol")
            p.add_argument("--out", help="Directory for report.txt and report.csv")
        else:
            p.add_argument("--sequence", required=True)
            p.add_argument("--checkpoint", help="Refine with this checkpoint (synthesis only if omitted)")
            p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="Train and evaluate every ablation mode")
    p.add_argument("--name", help="Output directory name under run.output_dir")
    p.add_argument("--action", default="kick", help="Protocol for the per-action table and trend checks")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("adapt", help="PC-loss before and after SPC fine-tuning on pseudo-real data")
    p.add_argument("--name", help="Output directory name under run.output_dir")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("export-ply", help="Write one frame's cloud as PLY with labels")
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--checkpoint", help="Color by the SPC registration instead of ground-truth labels")
    p.add_argument("--csv", help="Also write per-point registration probabilities")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("history", help="List runs recorded in the ledger")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(func=cmd_history)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(Context(args))
    except PipelineError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

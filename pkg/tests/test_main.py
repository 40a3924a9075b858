import numpy as np
import pytest

from conftest import ROOT
from io_formats import import_pose_sequence, load_sequence, read_ply
from main import main

TINY = """
data:
  seed: 11
  train_sequences: 3
  eval_sequences: 2
  real_sequences: 2
  real_eval_sequences: 1
  protocols: [walk, kick]
  eval_protocols: [kick]
  data_dir: {tmp}/data
simulation:
  frames: 20
  points: 24
  raw_points: 300
  synthesis_samples: 2
spc:
  encoder_widths: [8, 16]
  decoder_hidden: 8
mpe:
  hidden: [16]
train:
  iterations: 2
  batch_mocap: 2
  batch_real: 2
  window: 4
  history_refresh: 1
  fine_tune_iterations: 1
run:
  output_dir: {tmp}/runs
  ledger: {tmp}/egopose.db
  skeleton: {skeleton}
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY.format(tmp=tmp_path, skeleton=ROOT / "skeleton.yaml"))
    return tmp_path, ["--config", str(path), "--quiet"]


@pytest.fixture
def generated(tiny):
    tmp, base = tiny
    assert main([*base, "gen-data"]) == 0
    return tmp, base


def test_gen_data_writes_every_split(generated):
    tmp, _ = generated
    for split, count in (("train", 3), ("eval", 2), ("real", 2), ("real_eval", 1)):
        assert len(list((tmp / "data" / split).glob("*.seq"))) == count
    real = load_sequence(tmp / "data" / "real" / "real_0000.seq")
    assert real.labels is None
    assert real.domain_tag == "pseudo-real"


def test_gen_data_is_deterministic(tiny):
    tmp, base = tiny
    assert main([*base, "gen-data", "--split", "train"]) == 0
    first = (tmp / "data" / "train" / "train_0001.seq").read_bytes()
    assert main([*base, "gen-data", "--split", "train"]) == 0
    assert (tmp / "data" / "train" / "train_0001.seq").read_bytes() == first


def test_train_eval_and_exports(generated, capsys):
    tmp, base = generated
    assert main([*base, "train", "--mode", "mpe_spc_decoder", "--name", "dec"]) == 0
    run_dir = tmp / "runs" / "dec"
    checkpoint = run_dir / "checkpoint.ckpt"
    assert checkpoint.exists()
    assert (run_dir / "training_log.csv").exists()
    assert (run_dir / "report.csv").exists()
    assert "Trained mpe_spc_decoder for 2 steps" in capsys.readouterr().out

    assert main([*base, "eval", "--checkpoint", str(checkpoint), "--action", "kick",
                 "--out", str(tmp / "eval")]) == 0
    out = capsys.readouterr().out
    assert "MPJPE low (cm)" in out
    assert (tmp / "eval" / "report.txt").exists()

    sequence = tmp / "data" / "eval" / "eval_0000.seq"
    assert main([*base, "export-ply", "--sequence", str(sequence), "--frame", "3", "--checkpoint", str(checkpoint),
                 "--csv", str(tmp / "reg.csv"), "--out", str(tmp / "frame.ply")]) == 0
    points, labels = read_ply(tmp / "frame.ply")
    assert points.shape == (24, 3)
    assert labels.min() >= 0 and labels.max() <= 22
    assert len((tmp / "reg.csv").read_text().splitlines()) == 25

    assert main([*base, "export-pose", "--sequence", str(sequence), "--checkpoint", str(checkpoint),
                 "--out", str(tmp / "refined.pose")]) == 0
    pose = import_pose_sequence(tmp / "refined.pose", 22)
    assert pose.shape == (20, 22, 6)
    assert np.all(np.isfinite(pose))

    assert main([*base, "history"]) == 0
    assert "mpe_spc_decoder" in capsys.readouterr().out


def test_exported_synthesis_feeds_back_as_imported_poses(generated):
    tmp, base = generated
    poses = tmp / "poses"
    for split in ("train", "eval"):
        for sequence in sorted((tmp / "data" / split).glob("*.seq")):
            assert main([*base, "export-pose", "--sequence", str(sequence),
                         "--out", str(poses / f"{sequence.stem}.pose")]) == 0
    assert main([*base, "train", "--mode", "mpe", "--poses", str(poses), "--name", "imported"]) == 0
    assert (tmp / "runs" / "imported" / "report.csv").exists()


def test_missing_imported_poses_fail(generated, capsys):
    tmp, base = generated
    (tmp / "poses").mkdir()
    assert main([*base, "train", "--mode", "mpe", "--poses", str(tmp / "poses")]) == 1
    assert "no imported poses" in capsys.readouterr().err


def test_unknown_config_section_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("nonsense:\n  a: 1\n")
    assert main(["--config", str(path), "history"]) == 2
    assert "unknown config section" in capsys.readouterr().err


def test_training_without_data_fails_cleanly(tiny, capsys):
    _, base = tiny
    assert main([*base, "train"]) == 1
    assert "run gen-data first" in capsys.readouterr().err


def test_history_on_an_empty_ledger(tiny, capsys):
    _, base = tiny
    assert main([*base, "history"]) == 0
    assert "No runs recorded." in capsys.readouterr().out

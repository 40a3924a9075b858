import csv
import math

import numpy as np
import pytest

from conftest import random_rot6d
from errors import NumericalError, ShapeError
from metrics import (DomainAdaptationReport, MetricReport, check_ablation_trends, evaluate, format_table,
                     jitter_ratio, mpjpe, mpjre, mpjve, pc_loss_by_protocol)


def test_ground_truth_scores_perfectly(small_sequences, skeleton, shape):
    predictions = {s.name: s.gt_rot for s in small_sequences}
    report = evaluate(predictions, small_sequences, skeleton, shape.radius, label="gt")
    for part in ("up", "low"):
        assert getattr(report, f"mpjpe_{part}") == pytest.approx(0.0, abs=1e-9)
        assert getattr(report, f"mpjre_{part}") == pytest.approx(0.0, abs=1e-9)
        assert getattr(report, f"mpjve_{part}") == pytest.approx(0.0, abs=1e-9)
        assert getattr(report, f"jitter_ratio_{part}") == pytest.approx(1.0)
    assert report.pc_loss >= 0.0
    assert set(report.per_action) == {"walk", "kick"}


def test_idle_legs_score_worse_below_the_waist(small_sequences, skeleton, shape):
    legs = skeleton.lower_body.copy()
    legs[0] = False
    predictions = {}
    for s in small_sequences:
        y = s.gt_rot.copy()
        y[:, legs] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        predictions[s.name] = y
    report = evaluate(predictions, small_sequences, skeleton, shape.radius)
    assert report.mpjpe_low > report.mpjpe_up
    assert report.mpjre_low > 0.0


def test_unlabeled_sequences_only_get_pc_loss(real_sequences, skeleton, shape):
    predictions = {s.name: s.synthesis[0] for s in real_sequences}
    report = evaluate(predictions, real_sequences, skeleton, shape.radius)
    assert math.isnan(report.mpjpe_low)
    assert math.isfinite(report.pc_loss)
    assert pc_loss_by_protocol(report)["all"] == report.pc_loss


def test_mpjpe_in_centimeters():
    gt = np.zeros((3, 4, 3))
    pred = gt + [0.03, 0.04, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(5.0)
    assert mpjpe(pred, gt, joint_subset=np.array([True, False, False, False])) == pytest.approx(5.0)


def test_mpjre_quarter_turn():
    gt = np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], (2, 3, 1))
    pred = np.tile([0.0, 1.0, 0.0, -1.0, 0.0, 0.0], (2, 3, 1))
    assert mpjre(pred, gt) == pytest.approx(np.pi / 2)


def test_mpjre_is_symmetric(rng):
    a, b = random_rot6d(rng, 10, 5), random_rot6d(rng, 10, 5)
    assert mpjre(a, b) == pytest.approx(mpjre(b, a))


def test_mpjve_of_constant_velocity():
    frames = np.arange(10)[:, None, None] * np.array([0.01, 0.0, 0.0])
    gt = np.zeros((10, 2, 3))
    assert mpjve(frames + gt, gt, fps=30) == pytest.approx(30.0)
    with pytest.raises(ShapeError):
        mpjve(gt[:1], gt[:1])


def test_jitter_ratio():
    t = np.arange(12, dtype=np.float64)
    gt = (t ** 3)[:, None, None] * np.array([1e-3, 0.0, 0.0])
    assert jitter_ratio(gt, gt) == pytest.approx(1.0)
    assert jitter_ratio(2.0 * gt, gt) == pytest.approx(2.0)
    with pytest.raises(NumericalError):
        jitter_ratio(gt, np.zeros_like(gt))
    with pytest.raises(ShapeError):
        jitter_ratio(gt[:3], gt[:3])


def _ladder(**low):
    return {mode: MetricReport(label=mode, mpjpe_low=value) for mode, value in low.items()}


def test_ablation_trends_hold():
    reports = _ladder(synthesis_only=10.0, mpe=8.0, mpe_spc_decoder_pcloss=7.5, mpe_spc_decoder_spcloss=6.0)
    assert check_ablation_trends(reports) == []


def test_ablation_trend_failures():
    reports = _ladder(synthesis_only=10.0, mpe=8.0, mpe_spc_decoder_pcloss=7.5, mpe_spc_decoder_spcloss=7.2)
    failures = check_ablation_trends(reports)
    assert len(failures) == 1
    assert "mpe_spc_decoder_pcloss" in failures[0]
    del reports["mpe"]
    assert any("missing report for mpe" in f for f in check_ablation_trends(reports))


def test_per_action_trends():
    reports = _ladder(synthesis_only=1.0, mpe=1.0, mpe_spc_decoder_pcloss=1.0, mpe_spc_decoder_spcloss=1.0)
    for mode, value in (("synthesis_only", 10.0), ("mpe", 8.0), ("mpe_spc_decoder_pcloss", 7.5),
                        ("mpe_spc_decoder_spcloss", 6.0)):
        reports[mode].per_action["kick"] = {"mpjpe_low": value}
    assert check_ablation_trends(reports, action="kick") == []
    assert len(check_ablation_trends(reports)) == 3


def test_format_table_marks_missing_values():
    table = format_table({"mpe": MetricReport(label="mpe", mpjpe_up=1.25)})
    lines = table.splitlines()
    assert "MPJPE up (cm)" in lines[1]
    assert lines[2].startswith("mpe")
    assert "1.250" in lines[2]
    assert "n/a" in lines[2]


def test_report_csv_has_per_action_rows(tmp_path):
    report = MetricReport(label="x", mpjpe_up=1.0)
    report.per_action["kick"] = {"mpjpe_up": 2.0}
    report.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["action"] for r in rows] == ["all", "kick"]
    assert float(rows[1]["mpjpe_up"]) == 2.0


def test_domain_adaptation_report(tmp_path):
    report = DomainAdaptationReport(before={"all": 2.0, "kick": 3.0}, after={"all": 1.5, "kick": 2.0})
    assert report.relative_reduction == pytest.approx(0.25)
    table = report.to_table().splitlines()
    assert table[1].startswith("all")
    assert table[2].startswith("kick")
    report.to_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "protocol,before,after"


def test_body_split_puts_pelvis_with_the_legs(skeleton):
    lower = {skeleton.names[j] for j in np.flatnonzero(skeleton.lower_body)}
    assert "pelvis" in lower
    assert {"left_hip", "right_hip", "left_knee", "right_knee"} <= lower
    assert not lower & {"spine1", "head", "left_wrist", "right_wrist"}
    assert int(skeleton.upper_body.sum()) == 13

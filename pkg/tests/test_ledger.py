from sqlalchemy import create_engine, text

from conftest import tiny_config
from ledger import file_sha256, list_runs, open_ledger, overall_metrics, record_dataset, record_report, record_run
from metrics import MetricReport
from schema import init_db
from trainer import train


def test_dataset_and_run_records(small_sequences, skeleton, shape, tmp_path):
    session = open_ledger(tmp_path / "ledger" / "egopose.db")
    record = record_dataset(session, "train", tmp_path / "data", small_sequences, 3)
    assert record.sequences == 4
    assert record.frames == 4 * small_sequences[0].frames
    assert record.protocols == "kick,walk"
    assert record.domain_tag == "mocap-synthetic"

    config = tiny_config()
    artifacts = train(config, skeleton, shape, small_sequences, run_dir=tmp_path / "run", mode="mpe", iterations=1)
    run = record_run(session, "train", "mpe", artifacts, tmp_path / "run", config)
    assert run.checkpoint_sha == file_sha256(artifacts.checkpoint)
    assert run.steps == 1
    assert run.status == "completed"

    report = MetricReport(label="mpe", mpjpe_low=4.5)
    report.per_action["kick"] = {"mpjpe_low": 6.0}
    record_report(session, run, report)
    rows = overall_metrics(session, run)
    assert len(rows) == 1
    assert rows[0].mpjpe_low == 4.5
    assert rows[0].mpjpe_up is None
    assert len(run.metrics) == 2


def test_runs_listed_newest_first(tmp_path):
    session = open_ledger(tmp_path / "egopose.db")
    for mode in ("mpe", "mpe_spc_decoder", "synthesis_only"):
        record_run(session, "train", mode)
    diverged = record_run(session, "train", "mpe", status="diverged")
    runs = list_runs(session, limit=3)
    assert [r.id for r in runs] == [diverged.id, diverged.id - 1, diverged.id - 2]
    assert runs[0].status == "diverged"
    assert runs[0].checkpoint_sha is None


def test_old_ledgers_gain_checkpoint_hash_column(tmp_path):
    path = tmp_path / "old.db"
    engine = create_engine(f"sqlite:///{path}")
    with engine.connect() as conn:
        conn.execute(text("CREATE TABLE runs (id INTEGER PRIMARY KEY, command VARCHAR, mode VARCHAR, "
                          "run_dir VARCHAR, checkpoint VARCHAR, config_source VARCHAR, seed INTEGER, "
                          "iterations INTEGER, steps INTEGER, status VARCHAR, created_at VARCHAR)"))
        conn.commit()
    engine.dispose()
    init_db(str(path))
    session = open_ledger(path)
    run = record_run(session, "train", "mpe")
    assert run.checkpoint_sha is None

"""
Run ledger: records generated datasets, training runs and their metric rows in SQLite.
"""
import datetime
import hashlib
import logging
import math
from pathlib import Path

from metrics import COLUMNS
from schema import DatasetRecord, MetricRow, Run, init_db

log = logging.getLogger(__name__)


def open_ledger(db_path):
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    _, Session = init_db(str(db_path))
    return Session()


def _now():
    return datetime.datetime.now().isoformat(timespec="seconds")


def file_sha256(path):
    if path is None or not Path(path).is_file():
        return None
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def record_dataset(session, split, directory, sequences, seed, config_source=None):
    record = DatasetRecord(
        split=split,
        directory=str(directory),
        domain_tag=sequences[0].domain_tag if sequences else None,
        sequences=len(sequences),
        frames=sum(s.frames for s in sequences),
        seed=seed,
        protocols=",".join(sorted({s.protocol for s in sequences})),
        config_source=config_source,
        created_at=_now(),
    )
    session.add(record)
    session.commit()
    return record


def record_run(session, command, mode, artifacts=None, run_dir=None, config=None, status="completed"):
    checkpoint = artifacts.checkpoint if artifacts is not None else None
    run = Run(
        command=command,
        mode=mode,
        run_dir=str(run_dir) if run_dir is not None else None,
        checkpoint=str(checkpoint) if checkpoint is not None else None,
        checkpoint_sha=file_sha256(checkpoint),
        config_source=config.source if config is not None else None,
        seed=config.train.seed if config is not None else None,
        iterations=config.train.iterations if config is not None else None,
        steps=artifacts.steps if artifacts is not None else 0,
        status=status,
        created_at=_now(),
    )
    session.add(run)
    session.commit()
    log.info("Recorded run %d (%s, %s)", run.id, command, mode)
    return run


def _number(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def record_report(session, run, report):
    for row in report.csv_rows():
        session.add(MetricRow(run_id=run.id, label=row["label"], action=row["action"],
                              **{c: _number(row.get(c)) for c in COLUMNS}))
    session.commit()


def list_runs(session, limit=20):
    return session.query(Run).order_by(Run.id.desc()).limit(limit).all()


def overall_metrics(session, run):
    return session.query(MetricRow).filter(MetricRow.run_id == run.id, MetricRow.action == "all").all()

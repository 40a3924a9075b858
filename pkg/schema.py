from sqlalchemy import Column, Integer, String, Float, ForeignKey, create_engine, text
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()

class DatasetRecord(Base):
    """
    One generated split (train, eval, real, real_eval) written by gen-data.
    """
    __tablename__ = 'datasets'

    id = Column(Integer, primary_key=True)
    split = Column(String)
    directory = Column(String)
    domain_tag = Column(String)  # mocap-synthetic or pseudo-real
    sequences = Column(Integer)
    frames = Column(Integer)
    seed = Column(Integer)
    protocols = Column(String)  # comma separated
    config_source = Column(String)
    created_at = Column(String)

class Run(Base):
    """
    A training (or fine-tuning) run and where its artifacts live.
    """
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String)  # train, ablate, adapt
    mode = Column(String)
    run_dir = Column(String)
    checkpoint = Column(String)
    checkpoint_sha = Column(String)
    config_source = Column(String)
    seed = Column(Integer)
    iterations = Column(Integer)
    steps = Column(Integer)
    status = Column(String)  # completed, diverged
    created_at = Column(String)

    metrics = relationship("MetricRow", back_populates="run", cascade="all, delete-orphan")

class MetricRow(Base):
    """
    One row of a MetricReport: the overall numbers or one action's breakdown.
    """
    __tablename__ = 'metric_rows'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'))
    label = Column(String)
    action = Column(String)  # 'all' or a protocol name
    mpjpe_up = Column(Float)
    mpjpe_low = Column(Float)
    mpjre_up = Column(Float)
    mpjre_low = Column(Float)
    mpjve_up = Column(Float)
    mpjve_low = Column(Float)
    jitter_ratio_up = Column(Float)
    jitter_ratio_low = Column(Float)
    pc_loss = Column(Float)

    run = relationship("Run", back_populates="metrics")

def init_db(db_path='egopose.db'):
    engine = create_engine(f'sqlite:///{db_path}')
    Base.metadata.create_all(engine)

    # Migration: ledgers written before runs carried a checkpoint hash
    with engine.connect() as conn:
        result = conn.execute(
            text("SELECT sql FROM sqlite_master WHERE type='table' AND name='runs'")
        )
        table_sql = result.fetchone()
        if table_sql and table_sql[0] and 'checkpoint_sha' not in table_sql[0]:
            conn.execute(text("ALTER TABLE runs ADD COLUMN checkpoint_sha VARCHAR"))
            conn.commit()

    return engine, sessionmaker(bind=engine)

"""Run registry models."""

from ceharq.models.database import Base, get_engine, get_session, init_db
from ceharq.models.experiment_run import ExperimentRun, RunStatus, compute_config_digest
from ceharq.models.summary_point import SummaryPoint

__all__ = [
    "Base",
    "get_engine",
    "get_session",
    "init_db",
    "ExperimentRun",
    "RunStatus",
    "compute_config_digest",
    "SummaryPoint",
]

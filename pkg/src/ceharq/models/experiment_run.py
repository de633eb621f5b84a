"""ExperimentRun model: one row per simulate/compare/ablation experiment."""

import enum
import hashlib
import uuid
from datetime import datetime
from typing import List, Optional, TYPE_CHECKING

from sqlalchemy import DateTime, Enum as SQLEnum, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column, relationship

from ceharq.models.database import Base

if TYPE_CHECKING:
    from ceharq.models.summary_point import SummaryPoint


class RunStatus(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


def compute_config_digest(config_text: str) -> str:
    """SHA256 of the rendered simulation config."""
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


class ExperimentRun(Base):
    """Stores experiment provenance."""

    __tablename__ = "experiment_runs"

    id: Mapped[str] = mapped_column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    label: Mapped[str] = mapped_column(String(255), nullable=False)
    protocol: Mapped[str] = mapped_column(String(32), nullable=False)
    phy: Mapped[str] = mapped_column(String(32), nullable=False)
    k: Mapped[int] = mapped_column(Integer, nullable=False)
    n: Mapped[int] = mapped_column(Integer, nullable=False)
    max_rounds: Mapped[int] = mapped_column(Integer, nullable=False)
    trials: Mapped[int] = mapped_column(Integer, nullable=False)
    master_seed: Mapped[str] = mapped_column(String(20), nullable=False)  # unsigned 64-bit
    config_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    config_text: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    out_dir: Mapped[Optional[str]] = mapped_column(String(1000), nullable=True)
    status: Mapped[RunStatus] = mapped_column(SQLEnum(RunStatus), default=RunStatus.RUNNING)
    error_message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)

    # Relationships
    points: Mapped[List["SummaryPoint"]] = relationship(
        "SummaryPoint", back_populates="run", cascade="all, delete-orphan"
    )

    def __repr__(self) -> str:
        return f"<ExperimentRun(id={self.id}, label={self.label}, status={self.status})>"

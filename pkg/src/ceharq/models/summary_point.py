"""SummaryPoint model: one summary.csv row of a run."""

from typing import TYPE_CHECKING

from sqlalchemy import Float, ForeignKey, Integer, String
from sqlalchemy.orm import Mapped, mapped_column, relationship

from ceharq.models.database import Base

if TYPE_CHECKING:
    from ceharq.models.experiment_run import ExperimentRun


class SummaryPoint(Base):
    """Aggregated metrics of one (run, SNR) point."""

    __tablename__ = "summary_points"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[str] = mapped_column(
        String(36), ForeignKey("experiment_runs.id"), nullable=False
    )
    protocol: Mapped[str] = mapped_column(String(32), nullable=False)
    snr_db: Mapped[float] = mapped_column(Float, nullable=False)
    trials: Mapped[int] = mapped_column(Integer, nullable=False)
    bler: Mapped[float] = mapped_column(Float, nullable=False)
    bler_ci_half: Mapped[float] = mapped_column(Float, nullable=False)
    avg_rounds: Mapped[float] = mapped_column(Float, nullable=False)
    avg_rounds_se: Mapped[float] = mapped_column(Float, nullable=False)
    spectral_efficiency: Mapped[float] = mapped_column(Float, nullable=False)
    fallback_rate: Mapped[float] = mapped_column(Float, default=0.0)
    ce_round_fraction: Mapped[float] = mapped_column(Float, default=0.0)

    # Relationship to run
    run: Mapped["ExperimentRun"] = relationship("ExperimentRun", back_populates="points")

    def __repr__(self) -> str:
        return f"<SummaryPoint(run={self.run_id}, snr={self.snr_db}, bler={self.bler})>"

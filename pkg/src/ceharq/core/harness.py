"""Experiment orchestration: Monte Carlo driver, paired comparisons and persistence."""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

from ceharq.config import (
    AppConfig,
    ConfigError,
    MacMetadata,
    ProtocolKind,
    SimConfig,
    StopRule,
    ThresholdMode,
    ThresholdSource,
    dump_sim_config,
    get_config,
)
from ceharq.core.metrics import (
    SUMMARY_COLUMNS,
    MetricsSummary,
    expected_rounds_from_profile,
    paired_record_deltas,
    summarize,
)
from ceharq.core.pool import chunk_ranges, run_tasks
from ceharq.core.protocol import SchemeKind, SessionConfig, TrialChunk, TrialRecord, run_chunk
from ceharq.core.reports import ce_bound_frame
from ceharq.core.threshold import (
    PeTable,
    ThresholdTable,
    ThresholdTableError,
    analytic_threshold_table,
    tau_star_grid_search,
)
from ceharq.services.channel import ChannelConfig
from ceharq.services.fec import FecKind, FecScheme, RateFamily

logger = logging.getLogger(__name__)


class MissingThresholdTable(ConfigError):
    """CE-HARQ needs a threshold table that was not provided."""

    pass


def build_phy(sim: SimConfig, app: AppConfig) -> FecScheme:
    """PHY scheme of a simulation config, checked against an explicit n."""
    scheme = FecScheme(
        kind=FecKind(sim.phy),
        k=sim.k,
        generators=tuple(sim.conv_generators),
        constraint_length=sim.constraint_length,
        ldpc_matrix=sim.ldpc_matrix,
        max_iterations=sim.ldpc_iterations or app.ldpc.max_iterations,
        normalization=sim.ldpc_normalization or app.ldpc.normalization,
        llr_clip=app.ldpc.llr_clip,
    )
    if sim.n is not None and sim.n != scheme.n:
        raise ConfigError(
            f"n = {sim.n} disagrees with the {sim.phy} PHY geometry (K={sim.k} gives N={scheme.n})"
        )
    return scheme


def build_family(sim: SimConfig) -> RateFamily:
    return RateFamily.from_denominators(sim.mac_rates)


@dataclass(frozen=True)
class ThresholdPlan:
    """Sparsity thresholds for one SNR point."""

    tau: float = 0.0
    round_thresholds: Optional[tuple[float, ...]] = None


def _plans_from_table(
    table: ThresholdTable, sim: SimConfig
) -> dict[float, ThresholdPlan]:
    plans = {}
    for snr in sim.snr_list:
        if sim.threshold_mode == ThresholdMode.PER_ROUND:
            plans[snr] = ThresholdPlan(round_thresholds=table.round_thresholds(snr, sim.rounds))
        else:
            plans[snr] = ThresholdPlan(tau=table.tau_for(snr))
    return plans


def resolve_thresholds(
    sim: SimConfig,
    app: AppConfig,
    phy: FecScheme,
    family: RateFamily,
    workers: int = 1,
) -> tuple[dict[float, ThresholdPlan], Optional[ThresholdTable]]:
    """Threshold plan per SNR, plus the table it came from when one was built or loaded.

    Raises:
        MissingThresholdTable: If a table or P_e table source has no usable file
    """
    if sim.protocol != ProtocolKind.CE_HARQ:
        return {snr: ThresholdPlan() for snr in sim.snr_list}, None

    if sim.threshold_source == ThresholdSource.FIXED:
        return {snr: ThresholdPlan(tau=sim.tau) for snr in sim.snr_list}, None

    if sim.threshold_source == ThresholdSource.TABLE:
        if not sim.threshold_table:
            raise MissingThresholdTable(
                "threshold_source = table needs threshold_table; "
                "create one with `ceharq threshold-search <config>`"
            )
        try:
            table = ThresholdTable.from_csv(Path(sim.threshold_table).expanduser())
        except ThresholdTableError as e:
            raise MissingThresholdTable(
                f"{e}; create one with `ceharq threshold-search <config>`"
            ) from e
        return _plans_from_table(table, sim), table

    if sim.threshold_source == ThresholdSource.ANALYTIC:
        if not sim.pe_table:
            raise MissingThresholdTable(
                "threshold_source = analytic needs pe_table; create one with "
                "`ceharq pe-table <config>` or switch to `ceharq threshold-search <config>`"
            )
        try:
            pe_table = PeTable.from_csv(Path(sim.pe_table).expanduser())
        except ThresholdTableError as e:
            raise MissingThresholdTable(
                f"{e}; create one with `ceharq pe-table <config>` or "
                "`ceharq threshold-search <config>`"
            ) from e
        table = analytic_threshold_table(
            sim.snr_list,
            sim.rounds,
            float(phy.rate),
            phy.k,
            pe_table,
            margin_bits=app.threshold.margin_bits,
            resolution=app.threshold.bisection_resolution,
        )
        return _plans_from_table(table, sim), table

    table = run_threshold_search(sim, app, phy, family, workers)
    return _plans_from_table(table, sim), table


def session_config(
    sim: SimConfig,
    phy: FecScheme,
    family: RateFamily,
    snr_db: float,
    plan: ThresholdPlan = ThresholdPlan(),
) -> SessionConfig:
    return SessionConfig(
        phy=phy,
        channel=ChannelConfig(snr_db=snr_db, seed=sim.master_seed),
        max_rounds=sim.rounds,
        family=family,
        tau_star=plan.tau,
        round_thresholds=plan.round_thresholds,
        mac_in_band=sim.mac_metadata == MacMetadata.IN_BAND,
    )


def run_threshold_search(
    sim: SimConfig,
    app: AppConfig,
    phy: Optional[FecScheme] = None,
    family: Optional[RateFamily] = None,
    workers: int = 1,
) -> ThresholdTable:
    """Grid search of a single tau* per SNR for a CE-HARQ config."""
    phy = phy or build_phy(sim, app)
    family = family or build_family(sim)
    base = session_config(sim, phy, family, sim.snr_list[0])
    return tau_star_grid_search(
        base,
        sim.snr_list,
        sim.trials,
        seed=sim.master_seed,
        grid_max=app.threshold.grid_max,
        grid_step=app.threshold.grid_step,
        objective=app.threshold.objective,
        workers=workers,
        chunk_size=app.simulation.chunk_size,
        progress=app.simulation.progress,
    )


@dataclass
class ExperimentResult:
    sim: SimConfig
    k: int
    n: int
    summaries: list[MetricsSummary]
    records: dict[float, list[TrialRecord]]
    thresholds: dict[float, ThresholdPlan] = field(default_factory=dict)
    threshold_table: Optional[ThresholdTable] = None
    out_dir: Optional[Path] = None
    run_id: Optional[str] = None

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.summary_row() for s in self.summaries], columns=SUMMARY_COLUMNS)

    def diagnostics_frame(self) -> pd.DataFrame:
        rows = []
        for summary in self.summaries:
            row = summary.diagnostics_row()
            plan = self.thresholds.get(summary.snr_db, ThresholdPlan())
            row["tau_star"] = plan.tau
            if plan.round_thresholds is not None:
                row["round_thresholds"] = " ".join(f"{t:.4f}" for t in plan.round_thresholds)
            rows.append(row)
        return pd.DataFrame(rows)


def _simulate(
    sim: SimConfig,
    app: AppConfig,
    workers: int,
) -> ExperimentResult:
    phy = build_phy(sim, app)
    family = build_family(sim)
    plans, table = resolve_thresholds(sim, app, phy, family, workers)

    chunks = chunk_ranges(0, sim.trials, app.simulation.chunk_size)
    tasks = []
    for snr in sim.snr_list:
        session = session_config(sim, phy, family, snr, plans[snr])
        for begin, end in chunks:
            tasks.append(TrialChunk(sim.protocol, session, sim.master_seed, begin, end))

    results = run_tasks(run_chunk, tasks, workers, app.simulation.progress, desc=sim.label)

    records: dict[float, list[TrialRecord]] = {}
    summaries = []
    for position, snr in enumerate(sim.snr_list):
        batch = results[position * len(chunks):(position + 1) * len(chunks)]
        records[snr] = [record for chunk in batch for record in chunk]
        summary = summarize(records[snr], sim.protocol.value, snr, phy.k, sim.rounds)
        summaries.append(summary)
        logger.info(
            f"[{sim.label}] {snr:+.2f} dB: BLER={summary.bler:.4g} "
            f"(+/-{summary.bler_ci_half:.2g}) rounds={summary.avg_rounds:.3f} "
            f"SE={summary.spectral_efficiency:.4f}"
        )
        if sim.protocol == ProtocolKind.AIC_AC:
            substituted = sum(
                1
                for r in records[snr]
                for kind in r.scheme_history[1:]
                if kind == SchemeKind.HARQ.value
            )
            if substituted:
                logger.warning(
                    f"[{sim.label}] {snr:+.2f} dB: {substituted} AIC-AC rounds sent the message "
                    f"because the compressed error exceeded K"
                )

    return ExperimentResult(
        sim=sim,
        k=phy.k,
        n=phy.n,
        summaries=summaries,
        records=records,
        thresholds=plans,
        threshold_table=table,
    )


def write_trials(path: Path, records: dict[float, list[TrialRecord]]) -> None:
    """One JSON object per trial, SNR then trial-index order."""
    with open(path, "w") as f:
        for snr, batch in records.items():
            for record in batch:
                f.write(json.dumps({"snr_db": snr, **asdict(record)}, sort_keys=True) + "\n")


def load_trials(path: Path) -> dict[float, list[TrialRecord]]:
    records: dict[float, list[TrialRecord]] = {}
    with open(path) as f:
        for line in f:
            data = json.loads(line)
            snr = data.pop("snr_db")
            records.setdefault(snr, []).append(TrialRecord(**data))
    return records


def write_outputs(result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    result.summary_frame().to_csv(out_dir / "summary.csv", index=False)
    result.diagnostics_frame().to_csv(out_dir / "diagnostics.csv", index=False)
    write_trials(out_dir / "trials.jsonl", result.records)
    (out_dir / "config.conf").write_text(dump_sim_config(result.sim))
    if result.threshold_table is not None:
        result.threshold_table.to_csv(out_dir / "thresholds.csv")
    if result.sim.protocol == ProtocolKind.CE_HARQ:
        ce_bound_frame(result.records, result.k, result.n).to_csv(
            out_dir / "ce_bound.csv", index=False
        )
    result.out_dir = out_dir
    logger.info(f"Results written to {out_dir}")


def start_run(sim: SimConfig, phy: FecScheme, app: AppConfig) -> Optional[str]:
    """Register a RUNNING experiment; registry failures only log."""
    from ceharq.models import ExperimentRun, RunStatus, compute_config_digest
    from ceharq.models.database import get_engine, get_session, init_db

    config_text = dump_sim_config(sim)
    try:
        get_engine(app.get_database_path())
        init_db()
        with get_session() as session:
            run = ExperimentRun(
                label=sim.label,
                protocol=sim.protocol.value,
                phy=sim.phy,
                k=phy.k,
                n=phy.n,
                max_rounds=sim.rounds,
                trials=sim.trials,
                master_seed=str(sim.master_seed),
                config_digest=compute_config_digest(config_text),
                config_text=config_text,
                status=RunStatus.RUNNING,
            )
            session.add(run)
            session.commit()
            return run.id
    except SQLAlchemyError as e:
        logger.warning(f"Could not register run: {e}")
        return None


def finish_run(run_id: str, result: ExperimentResult) -> None:
    """Mark a run COMPLETED and attach its summary rows."""
    from ceharq.models import ExperimentRun, RunStatus, SummaryPoint
    from ceharq.models.database import get_session

    try:
        with get_session() as session:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                logger.warning(f"Run {run_id} vanished from the registry")
                return
            for summary in result.summaries:
                run.points.append(SummaryPoint(**summary.summary_row()))
            run.out_dir = str(result.out_dir) if result.out_dir else None
            run.status = RunStatus.COMPLETED
            run.finished_at = datetime.utcnow()
            session.commit()
    except SQLAlchemyError as e:
        logger.warning(f"Could not complete run {run_id}: {e}")


def fail_run(run_id: str, error: BaseException) -> None:
    """Mark a run FAILED with the error that stopped it."""
    from ceharq.models import ExperimentRun, RunStatus
    from ceharq.models.database import get_session

    try:
        with get_session() as session:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                return
            run.status = RunStatus.FAILED
            run.error_message = f"{type(error).__name__}: {error}"
            run.finished_at = datetime.utcnow()
            session.commit()
    except SQLAlchemyError as e:
        logger.warning(f"Could not mark run {run_id} as failed: {e}")


def run_experiment(
    sim: SimConfig,
    app: Optional[AppConfig] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    write: bool = True,
) -> ExperimentResult:
    """Run every SNR point of a config and persist summary, diagnostics and trial log.

    With the registry enabled the run is stored as RUNNING first and ends up COMPLETED
    or FAILED.

    Raises:
        ConfigError: On invalid geometry or a missing threshold table
    """
    app = app or get_config()
    workers = workers if workers is not None else app.get_workers()
    logger.info(
        f"Experiment {sim.label}: {sim.protocol.value}, {sim.phy} PHY, K={sim.k}, "
        f"D={sim.rounds}, {sim.trials} trials x {len(sim.snr_list)} SNRs, {workers} worker(s)"
    )

    phy = build_phy(sim, app)
    run_id = start_run(sim, phy, app) if write and app.database.enabled else None
    try:
        result = _simulate(sim, app, workers)
        if write:
            write_outputs(result, out_dir or app.get_out_dir() / sim.label)
    except Exception as e:
        if run_id is not None:
            fail_run(run_id, e)
        raise

    if run_id is not None:
        finish_run(run_id, result)
        result.run_id = run_id
    return result


def avg_rounds_experiment(
    sim: SimConfig,
    app: Optional[AppConfig] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    write: bool = True,
) -> tuple[ExperimentResult, pd.DataFrame]:
    """Latency experiment: sessions run until success or the rounds cap.

    Returns the experiment and a per-SNR frame with the cap-inclusive mean, the mean
    over successful sessions, the cap failure rate and E[D_c] rebuilt from the per-round
    success profile.
    """
    if sim.stop_rule != StopRule.TARGET_BLER:
        sim = sim.with_overrides(stop_rule=StopRule.TARGET_BLER)
    app = app or get_config()
    result = run_experiment(sim, app, out_dir, workers, write)

    rows = []
    for summary in result.summaries:
        cap_rate = summary.cap_failures / summary.trials
        if cap_rate > sim.target_bler:
            logger.warning(
                f"[{sim.label}] {summary.snr_db:+.2f} dB: {cap_rate:.3g} of sessions hit the "
                f"rounds cap {sim.rounds}, above the target BLER {sim.target_bler}"
            )
        rows.append({
            "protocol": summary.protocol,
            "snr_db": summary.snr_db,
            "trials": summary.trials,
            "avg_rounds": summary.avg_rounds,
            "avg_rounds_se": summary.avg_rounds_se,
            "conditional_avg_rounds": summary.conditional_avg_rounds,
            "cap_failure_rate": cap_rate,
            "profile_avg_rounds": expected_rounds_from_profile(
                summary.success_profile, sim.rounds
            ),
        })
    latency = pd.DataFrame(rows)
    if write and result.out_dir is not None:
        latency.to_csv(result.out_dir / "latency.csv", index=False)
    return result, latency


def check_comparable(sims: Sequence[SimConfig], app: AppConfig) -> None:
    """Paired comparisons need one geometry, SNR grid, trial count and seed.

    Raises:
        ConfigError: On a mismatch or duplicate labels
    """
    if len(sims) < 2:
        raise ConfigError("compare needs at least two configs")
    labels = [s.label for s in sims]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"compare needs distinct labels, got {labels}")
    reference = sims[0]
    ref_n = build_phy(reference, app).n
    for sim in sims[1:]:
        mismatches = [
            name
            for name, a, b in (
                ("k", reference.k, sim.k),
                ("n", ref_n, build_phy(sim, app).n),
                ("rounds", reference.rounds, sim.rounds),
                ("snr_list", reference.snr_list, sim.snr_list),
                ("trials", reference.trials, sim.trials),
                ("master_seed", reference.master_seed, sim.master_seed),
            )
            if a != b
        ]
        if mismatches:
            raise ConfigError(
                f"{sim.label} differs from {reference.label} in {', '.join(mismatches)}"
            )


def comparison_frame(results: Sequence[ExperimentResult]) -> pd.DataFrame:
    """Wide per-SNR table; deltas are (config - first config) with paired CIs."""
    baseline = results[0]
    rows = []
    for position, snr in enumerate(baseline.sim.snr_list):
        row = {"snr_db": snr, "trials": baseline.sim.trials}
        for result in results:
            label = result.sim.label
            summary = result.summaries[position]
            row[f"bler_{label}"] = summary.bler
            row[f"bler_ci_half_{label}"] = summary.bler_ci_half
            row[f"avg_rounds_{label}"] = summary.avg_rounds
            row[f"se_{label}"] = summary.spectral_efficiency
        for result in results[1:]:
            label = result.sim.label
            deltas = paired_record_deltas(baseline.records[snr], result.records[snr])
            row[f"delta_bler_{label}"] = deltas["bler"].mean
            row[f"delta_bler_ci_{label}"] = deltas["bler"].ci_half
            row[f"delta_rounds_{label}"] = deltas["rounds"].mean
            row[f"delta_rounds_ci_{label}"] = deltas["rounds"].ci_half
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class ComparisonResult:
    results: list[ExperimentResult]
    frame: pd.DataFrame
    out_dir: Optional[Path] = None


def compare(
    sims: Sequence[SimConfig],
    app: Optional[AppConfig] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    write: bool = True,
) -> ComparisonResult:
    """Run several configs on common random numbers and join their summaries."""
    app = app or get_config()
    check_comparable(sims, app)
    out_dir = out_dir or app.get_out_dir() / "compare"

    results = [
        run_experiment(sim, app, out_dir / sim.label, workers, write) for sim in sims
    ]
    frame = comparison_frame(results)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "comparison.csv", index=False)
        logger.info(f"Comparison written to {out_dir / 'comparison.csv'}")
    return ComparisonResult(results=results, frame=frame, out_dir=out_dir if write else None)


def ablation(
    sim: SimConfig,
    app: Optional[AppConfig] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    write: bool = True,
) -> ComparisonResult:
    """CE-HARQ with its configured tau* against always compressing (tau = 1)."""
    if sim.protocol != ProtocolKind.CE_HARQ:
        raise ConfigError(f"ablation needs protocol = ce_harq, got {sim.protocol.value}")
    tuned = sim.with_overrides(label="tau_star")
    always = sim.with_overrides(
        label="tau_one", threshold_source=ThresholdSource.FIXED, tau=1.0
    )
    app = app or get_config()
    return compare([tuned, always], app, out_dir or app.get_out_dir() / "ablation", workers, write)

"""Sparsity-threshold selection.

Three sources of tau*:
    analytic     P_e(S_i, R_i) < P_e(S_H, R) evaluated on a Monte Carlo P_e table
    grid search  full sessions for tau in 0, 0.005, ..., 0.1 on common random numbers
    fixed        a configured value

Tables are written as CSV preceded by `# key: value` metadata lines.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import isotonic_regression

from ceharq.config import ConfigError, ProtocolKind
from ceharq.core.metrics import wilson_interval
from ceharq.core.pool import chunk_ranges, run_tasks
from ceharq.core.protocol import SessionConfig, TrialChunk, run_chunk
from ceharq.services.channel import ChannelConfig, modulate_bpsk, transmit, trial_stream
from ceharq.services.entropy import binary_entropy
from ceharq.services.fec import FecKind, FecScheme, RateFamily, phy_decode, phy_encode

logger = logging.getLogger(__name__)

PHY_ROW = "phy"


class ThresholdTableError(ConfigError):
    """Threshold or P_e table file cannot be read."""

    pass


def _write_with_metadata(df: pd.DataFrame, path: Path, metadata: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for key, value in metadata.items():
            f.write(f"# {key}: {value}\n")
        df.to_csv(f, index=False)


def _read_with_metadata(path: Path) -> tuple[pd.DataFrame, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ThresholdTableError(f"Table file not found: {path}")
    metadata = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            metadata[key.strip()] = value.strip()
    try:
        df = pd.read_csv(path, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ThresholdTableError(f"Malformed table {path}: {e}") from e
    return df, metadata


@dataclass
class PeTable:
    """Block error probability over (rate, SNR), rows sorted by increasing rate."""

    snr_db: np.ndarray          # (S,)
    rates: np.ndarray           # (R,)
    labels: list[str]
    errors: np.ndarray          # (R, S)
    trials: np.ndarray          # (R, S)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        order = np.argsort(self.rates, kind="stable")
        self.rates = np.asarray(self.rates, dtype=np.float64)[order]
        self.labels = [self.labels[i] for i in order]
        self.errors = np.asarray(self.errors, dtype=np.int64)[order]
        self.trials = np.asarray(self.trials, dtype=np.int64)[order]
        snr_order = np.argsort(self.snr_db)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float64)[snr_order]
        self.errors = self.errors[:, snr_order]
        self.trials = self.trials[:, snr_order]
        self.pe = smooth_pe(self.errors, self.trials)
        self.metadata.setdefault("isotonic", "snr decreasing, then rate increasing")

    @property
    def raw(self) -> np.ndarray:
        return self.errors / np.maximum(self.trials, 1)

    def interval(self, row: int, col: int) -> tuple[float, float]:
        return wilson_interval(int(self.errors[row, col]), int(self.trials[row, col]))

    def lookup(self, snr_db: float, rate: float) -> float:
        """Smoothed P_e, bilinear in (SNR, log2 rate), clamped at the grid edges."""
        column = np.array([np.interp(snr_db, self.snr_db, row) for row in self.pe])
        return float(np.interp(math.log2(rate), np.log2(self.rates), column))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r, label in enumerate(self.labels):
            for s, snr in enumerate(self.snr_db):
                low, high = self.interval(r, s)
                rows.append({
                    "label": label,
                    "rate": self.rates[r],
                    "snr_db": snr,
                    "trials": int(self.trials[r, s]),
                    "errors": int(self.errors[r, s]),
                    "pe_raw": self.raw[r, s],
                    "pe": self.pe[r, s],
                    "ci_low": low,
                    "ci_high": high,
                })
        return pd.DataFrame(rows)

    def to_csv(self, path: Path) -> None:
        _write_with_metadata(self.to_frame(), path, self.metadata)

    @classmethod
    def from_csv(cls, path: Path) -> "PeTable":
        df, metadata = _read_with_metadata(path)
        required = {"label", "rate", "snr_db", "trials", "errors"}
        if not required <= set(df.columns):
            raise ThresholdTableError(f"{path} lacks columns {sorted(required - set(df.columns))}")
        snr = np.sort(df["snr_db"].unique())
        rows = df.groupby("label", sort=False)
        labels, rates, errors, trials = [], [], [], []
        for label, group in rows:
            group = group.set_index("snr_db").reindex(snr)
            if group["errors"].isna().any():
                raise ThresholdTableError(f"{path}: row {label} does not cover every SNR")
            labels.append(str(label))
            rates.append(float(group["rate"].iloc[0]))
            errors.append(group["errors"].to_numpy(dtype=np.int64))
            trials.append(group["trials"].to_numpy(dtype=np.int64))
        return cls(
            snr_db=snr,
            rates=np.array(rates),
            labels=labels,
            errors=np.array(errors),
            trials=np.array(trials),
            metadata=metadata,
        )


def smooth_pe(errors: np.ndarray, trials: np.ndarray) -> np.ndarray:
    """Isotonic smoothing: non-increasing in SNR per rate row, then non-decreasing in rate.

    The rate pass runs last, so bilinear lookups are monotone in rate.
    """
    weights = np.maximum(trials, 1).astype(np.float64)
    pe = errors / weights
    if pe.shape[1] > 1:
        pe = np.array([
            isotonic_regression(row, weights=w, increasing=False).x
            for row, w in zip(pe, weights)
        ])
    if pe.shape[0] > 1:
        pe = np.array([
            isotonic_regression(col, weights=w, increasing=True).x
            for col, w in zip(pe.T, weights.T)
        ]).T
    return np.clip(pe, 0.0, 1.0)


@dataclass(frozen=True)
class PeChunk:
    phy: FecScheme
    family: RateFamily
    member: Optional[int]       # None: the PHY alone
    snr_db: float
    seed: int
    begin: int
    end: int


def run_pe_chunk(chunk: PeChunk) -> int:
    """One-shot block errors over a trial range."""
    phy = chunk.phy
    channel = ChannelConfig(snr_db=chunk.snr_db, seed=chunk.seed)
    member = None if chunk.member is None else chunk.family.members[chunk.member]
    width = phy.k if member is None else member.capacity(phy.k)

    errors = 0
    for trial_index in range(chunk.begin, chunk.end):
        source = trial_stream(chunk.seed, trial_index, 0).integers(0, 2, size=width, dtype=np.uint8)
        message = source if member is None else member.encode_frame(source, phy.k)
        block = transmit(modulate_bpsk(phy_encode(message, phy)), channel, trial_index)
        decoded = phy_decode(block, phy, channel)
        if member is None:
            estimate = decoded.bits
        else:
            mac_input = decoded.llrs if phy.kind == FecKind.LDPC else decoded.bits
            estimate, _ = member.decode_frame(mac_input, phy.k)
        if not np.array_equal(estimate, source):
            errors += 1
    return errors


def build_pe_table(
    phy: FecScheme,
    family: RateFamily,
    snr_list: Sequence[float],
    trials: int,
    seed: int = 0,
    workers: int = 1,
    chunk_size: int = 250,
    progress: bool = False,
) -> PeTable:
    """Monte Carlo P_e for the PHY alone (rate K/N) and every MAC member on top (B_m/N)."""
    n = phy.n
    rows: list[tuple[str, float, Optional[int]]] = [(PHY_ROW, phy.k / n, None)]
    for index, member in enumerate(family.members):
        rows.append((f"mac_1/{member.denominator}", member.capacity(phy.k) / n, index))

    tasks = []
    for _, _, member in rows:
        for snr in snr_list:
            for begin, end in chunk_ranges(0, trials, chunk_size):
                tasks.append(PeChunk(phy, family, member, float(snr), seed, begin, end))

    logger.info(f"Building P_e table: {len(rows)} rates x {len(snr_list)} SNRs x {trials} trials")
    counts = run_tasks(run_pe_chunk, tasks, workers, progress, desc="pe-table")

    per_point = len(chunk_ranges(0, trials, chunk_size))
    errors = np.array(counts, dtype=np.int64).reshape(len(rows), len(snr_list), per_point).sum(-1)
    return PeTable(
        snr_db=np.asarray(snr_list, dtype=np.float64),
        rates=np.array([rate for _, rate, _ in rows]),
        labels=[label for label, _, _ in rows],
        errors=errors,
        trials=np.full_like(errors, trials),
        metadata={
            "method": "monte_carlo",
            "phy": phy.kind.value,
            "k": phy.k,
            "n": n,
            "seed": seed,
            "trials": trials,
            "snr_grid": ",".join(str(s) for s in snr_list),
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )


@dataclass(frozen=True)
class AnalyticThreshold:
    tau: float
    saturated: bool = False     # both P_e values below the table resolution


def tau_star_analytical(
    snr_db: float,
    round_index: int,
    max_rounds: int,
    phy_rate: float,
    k: int,
    table: PeTable,
    margin_bits: int = 24,
    resolution: float = 1e-4,
) -> AnalyticThreshold:
    """Largest tau with P_e(S_i, (K H2(tau) + margin) / N) < P_e(S_H, R).

    S_H = S + 10 log10 D and S_i = S + 10 log10(D - i + 1). The predicate is monotone in
    tau on a smoothed table, so the boundary is found by bisection over (0, 0.5].
    """
    if not 1 <= round_index <= max_rounds:
        raise ValueError(f"round_index must lie in [1, {max_rounds}], got {round_index}")
    n = k / phy_rate
    snr_harq = snr_db + 10.0 * math.log10(max_rounds)
    snr_round = snr_db + 10.0 * math.log10(max_rounds - round_index + 1)
    reference = table.lookup(snr_harq, phy_rate)

    def beneficial(tau: float) -> bool:
        rate = (k * binary_entropy(tau) + margin_bits) / n
        return table.lookup(snr_round, rate) < reference

    if not beneficial(resolution):
        saturated = reference == 0.0
        if saturated:
            logger.debug(f"tau* saturated at S={snr_db} dB, round {round_index}")
        return AnalyticThreshold(tau=0.0, saturated=saturated)
    if beneficial(0.5):
        return AnalyticThreshold(tau=0.5)

    lo, hi = resolution, 0.5
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if beneficial(mid):
            lo = mid
        else:
            hi = mid
    return AnalyticThreshold(tau=lo)


@dataclass(frozen=True)
class ThresholdEntry:
    snr_db: float
    tau: float
    round_index: Optional[int] = None   # None: one tau for every round
    bler: Optional[float] = None
    avg_rounds: Optional[float] = None
    bler_tau_zero: Optional[float] = None
    bler_tau_max: Optional[float] = None
    saturated: bool = False


@dataclass
class ThresholdTable:
    entries: list[ThresholdEntry]
    metadata: dict = field(default_factory=dict)

    def _single(self) -> list[ThresholdEntry]:
        return sorted(
            (e for e in self.entries if e.round_index is None), key=lambda e: e.snr_db
        )

    def tau_for(self, snr_db: float) -> float:
        """Single tau*, linearly interpolated in SNR and clamped at the table edges."""
        single = self._single()
        if not single:
            # Per-round table: use the first retransmission
            return self.round_thresholds(snr_db, 2)[1] if self.entries else 0.0
        return float(np.interp(snr_db, [e.snr_db for e in single], [e.tau for e in single]))

    def round_thresholds(self, snr_db: float, max_rounds: int) -> tuple[float, ...]:
        """Per-round thresholds for rounds 1..D (round 1 never compresses)."""
        thresholds = [0.0]
        for round_index in range(2, max_rounds + 1):
            rows = sorted(
                (e for e in self.entries if e.round_index == round_index),
                key=lambda e: e.snr_db,
            )
            if rows:
                tau = float(np.interp(snr_db, [e.snr_db for e in rows], [e.tau for e in rows]))
            else:
                tau = self.tau_for(snr_db) if self._single() else 0.0
            thresholds.append(tau)
        return tuple(thresholds)

    def to_csv(self, path: Path) -> None:
        df = pd.DataFrame([e.__dict__ for e in self.entries])
        _write_with_metadata(df, path, self.metadata)

    @classmethod
    def from_csv(cls, path: Path) -> "ThresholdTable":
        df, metadata = _read_with_metadata(path)
        if not {"snr_db", "tau"} <= set(df.columns):
            raise ThresholdTableError(f"{path} lacks snr_db/tau columns")
        entries = []
        for row in df.to_dict(orient="records"):
            values = {key: (None if pd.isna(value) else value) for key, value in row.items()}
            if values.get("round_index") is not None:
                values["round_index"] = int(values["round_index"])
            values["saturated"] = bool(values.get("saturated") or False)
            entries.append(ThresholdEntry(**{
                key: values[key] for key in ThresholdEntry.__dataclass_fields__ if key in values
            }))
        return cls(entries=entries, metadata=metadata)


def analytic_threshold_table(
    snr_list: Sequence[float],
    max_rounds: int,
    phy_rate: float,
    k: int,
    table: PeTable,
    margin_bits: int = 24,
    resolution: float = 1e-4,
) -> ThresholdTable:
    entries = []
    for snr in snr_list:
        for round_index in range(2, max_rounds + 1):
            result = tau_star_analytical(
                snr, round_index, max_rounds, phy_rate, k, table, margin_bits, resolution
            )
            entries.append(ThresholdEntry(
                snr_db=float(snr),
                tau=result.tau,
                round_index=round_index,
                saturated=result.saturated,
            ))
    if any(e.saturated for e in entries):
        logger.warning("Some analytic thresholds are saturated (P_e below table resolution)")
    return ThresholdTable(
        entries=entries,
        metadata={
            "method": "analytic",
            "margin_bits": margin_bits,
            "resolution": resolution,
            "pe_table_trials": table.metadata.get("trials", ""),
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )


def candidate_grid(grid_max: float = 0.1, grid_step: float = 0.005) -> list[float]:
    count = int(round(grid_max / grid_step))
    return [round(i * grid_step, 10) for i in range(count + 1)]


@dataclass(frozen=True)
class CandidateResult:
    tau: float
    bler: float
    avg_rounds: float


def select_candidate(
    results: Sequence[CandidateResult], objective: str = "bler"
) -> CandidateResult:
    """Best candidate; ties go to fewer rounds (or lower BLER), then to the smaller tau."""
    if objective == "avg_rounds":
        return min(results, key=lambda c: (c.avg_rounds, c.bler, c.tau))
    return min(results, key=lambda c: (c.bler, c.avg_rounds, c.tau))


def tau_star_grid_search(
    base: SessionConfig,
    snr_list: Sequence[float],
    trials: int,
    seed: int = 0,
    grid_max: float = 0.1,
    grid_step: float = 0.005,
    objective: str = "bler",
    workers: int = 1,
    chunk_size: int = 250,
    progress: bool = False,
) -> ThresholdTable:
    """Pick one tau* per SNR by running full CE-HARQ sessions for every candidate.

    All candidates see the same messages and noise (trial streams depend only on the
    trial index), so their differences are paired.
    """
    grid = candidate_grid(grid_max, grid_step)
    chunks = chunk_ranges(0, trials, chunk_size)
    tasks = []
    for snr in snr_list:
        for tau in grid:
            session = replace(
                base,
                channel=ChannelConfig(snr_db=float(snr), seed=seed),
                tau_star=tau,
                round_thresholds=None,
            )
            for begin, end in chunks:
                tasks.append(TrialChunk(ProtocolKind.CE_HARQ, session, seed, begin, end))

    logger.info(f"Grid search: {len(grid)} candidates x {len(snr_list)} SNRs x {trials} trials")
    results = run_tasks(run_chunk, tasks, workers, progress, desc="threshold-search")

    entries = []
    position = 0
    for snr in snr_list:
        candidates = []
        for tau in grid:
            records = [r for chunk in results[position:position + len(chunks)] for r in chunk]
            position += len(chunks)
            failures = sum(1 for r in records if not r.success)
            candidates.append(CandidateResult(
                tau=tau,
                bler=failures / trials,
                avg_rounds=float(np.mean([r.rounds_used for r in records])),
            ))
        best = select_candidate(candidates, objective)
        entries.append(ThresholdEntry(
            snr_db=float(snr),
            tau=best.tau,
            bler=best.bler,
            avg_rounds=best.avg_rounds,
            bler_tau_zero=candidates[0].bler,
            bler_tau_max=candidates[-1].bler,
        ))
        logger.info(
            f"SNR {snr} dB: tau*={best.tau} BLER={best.bler:.4g} "
            f"(tau=0: {candidates[0].bler:.4g}, tau={grid[-1]}: {candidates[-1].bler:.4g})"
        )

    return ThresholdTable(
        entries=entries,
        metadata={
            "method": "grid_search",
            "objective": objective,
            "grid": f"0:{grid_max}:{grid_step}",
            "seed": seed,
            "trials": trials,
            "k": base.k,
            "n": base.n,
            "max_rounds": base.max_rounds,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    )

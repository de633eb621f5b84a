"""Aggregation of trial records into BLER, latency and spectral-efficiency figures."""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from ceharq.core.protocol import SchemeKind, TrialRecord

logger = logging.getLogger(__name__)

CONFIDENCE = 0.95

SUMMARY_COLUMNS = [
    "protocol",
    "snr_db",
    "trials",
    "bler",
    "bler_ci_half",
    "avg_rounds",
    "avg_rounds_se",
    "spectral_efficiency",
    "fallback_rate",
    "ce_round_fraction",
]


def z_value(confidence: float = CONFIDENCE) -> float:
    return float(norm.ppf(0.5 + confidence / 2.0))


def wilson_interval(
    failures: int, trials: int, confidence: float = CONFIDENCE
) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    z = z_value(confidence)
    p = failures / trials
    denom = 1.0 + z**2 / trials
    centre = (p + z**2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z**2 / (4 * trials**2)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class MetricsSummary:
    """Aggregate of one (protocol, SNR) point."""

    protocol: str
    snr_db: float
    trials: int
    failures: int
    bler: float
    bler_ci_low: float
    bler_ci_high: float
    avg_rounds: float
    avg_rounds_se: float
    mean_channel_uses: float
    spectral_efficiency: float
    fallback_rate: float
    ce_round_fraction: float
    # Diagnostics
    conditional_avg_rounds: Optional[float] = None
    cap_failures: int = 0
    avalanche_rate: Optional[float] = None
    scheme_counts: dict[str, int] = field(default_factory=dict)
    success_profile: list[float] = field(default_factory=list)

    @property
    def bler_ci_half(self) -> float:
        return (self.bler_ci_high - self.bler_ci_low) / 2.0

    def summary_row(self) -> dict:
        return {
            "protocol": self.protocol,
            "snr_db": self.snr_db,
            "trials": self.trials,
            "bler": self.bler,
            "bler_ci_half": self.bler_ci_half,
            "avg_rounds": self.avg_rounds,
            "avg_rounds_se": self.avg_rounds_se,
            "spectral_efficiency": self.spectral_efficiency,
            "fallback_rate": self.fallback_rate,
            "ce_round_fraction": self.ce_round_fraction,
        }

    def diagnostics_row(self) -> dict:
        row = {
            "protocol": self.protocol,
            "snr_db": self.snr_db,
            "trials": self.trials,
            "failures": self.failures,
            "bler_ci_low": self.bler_ci_low,
            "bler_ci_high": self.bler_ci_high,
            "conditional_avg_rounds": self.conditional_avg_rounds,
            "cap_failures": self.cap_failures,
            "avalanche_rate": self.avalanche_rate,
            "mean_channel_uses": self.mean_channel_uses,
        }
        for kind in SchemeKind:
            row[f"rounds_{kind.value}"] = self.scheme_counts.get(kind.value, 0)
        for round_index, fraction in enumerate(self.success_profile, start=1):
            row[f"success_round_{round_index}"] = fraction
        return row


def avalanche_events(record: TrialRecord, k: int) -> tuple[int, int]:
    """Compressed-error rounds and how many of them increased the error weight.

    Returns:
        (events, compressed rounds)
    """
    events = 0
    rounds = 0
    for index, kind in enumerate(record.scheme_history):
        if kind != SchemeKind.CE_FRESH.value or index == 0:
            continue
        rounds += 1
        if record.error_weights[index] > record.error_weights[index - 1]:
            events += 1
    return events, rounds


def success_profile(records: Sequence[TrialRecord], max_rounds: int) -> list[float]:
    """Fraction of sessions that succeed exactly at round 1..D."""
    counts = np.zeros(max_rounds, dtype=np.int64)
    for record in records:
        if record.success:
            counts[record.rounds_used - 1] += 1
    return (counts / max(len(records), 1)).tolist()


def summarize(
    records: Sequence[TrialRecord],
    protocol: str,
    snr_db: float,
    k: int,
    max_rounds: int,
) -> MetricsSummary:
    """Aggregate trial records of one SNR point.

    SE = K (1 - BLER) / E[N_c] with E[N_c] the mean channel uses per session.
    Rounds of failed sessions count at their cap in avg_rounds.
    """
    trials = len(records)
    if trials == 0:
        raise ValueError("Cannot summarize zero trials")

    failures = sum(1 for r in records if not r.success)
    bler = failures / trials
    low, high = wilson_interval(failures, trials)

    rounds = np.array([r.rounds_used for r in records], dtype=np.float64)
    avg_rounds = float(rounds.mean())
    avg_rounds_se = float(rounds.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    mean_uses = float(np.mean([r.channel_uses for r in records]))
    spectral_efficiency = k * (1.0 - bler) / mean_uses if mean_uses > 0 else 0.0

    scheme_counts = Counter(kind for r in records for kind in r.scheme_history)
    total_rounds = sum(scheme_counts.values())
    fallback = scheme_counts.get(SchemeKind.CE_FALLBACK.value, 0)
    ce_rounds = fallback + scheme_counts.get(SchemeKind.CE_FRESH.value, 0)

    successes = rounds[[r.success for r in records]]
    conditional = float(successes.mean()) if successes.size else None

    events = 0
    compressed = 0
    for record in records:
        e, c = avalanche_events(record, k)
        events += e
        compressed += c

    return MetricsSummary(
        protocol=protocol,
        snr_db=snr_db,
        trials=trials,
        failures=failures,
        bler=bler,
        bler_ci_low=low,
        bler_ci_high=high,
        avg_rounds=avg_rounds,
        avg_rounds_se=avg_rounds_se,
        mean_channel_uses=mean_uses,
        spectral_efficiency=spectral_efficiency,
        fallback_rate=fallback / total_rounds if total_rounds else 0.0,
        ce_round_fraction=ce_rounds / total_rounds if total_rounds else 0.0,
        conditional_avg_rounds=conditional,
        cap_failures=failures,
        avalanche_rate=events / compressed if compressed else None,
        scheme_counts=dict(scheme_counts),
        success_profile=success_profile(records, max_rounds),
    )


def expected_rounds_from_profile(profile: Sequence[float], max_rounds: int) -> float:
    """E[D_c] rebuilt from the per-round success profile, failures counted at the cap."""
    profile = np.asarray(profile, dtype=np.float64)
    rounds = np.arange(1, profile.shape[0] + 1)
    failure = max(0.0, 1.0 - float(profile.sum()))
    return float(np.dot(rounds, profile) + failure * max_rounds)


@dataclass(frozen=True)
class PairedDelta:
    """Mean of per-trial differences (b - a) with its confidence half-width."""

    mean: float
    ci_half: float


def paired_delta(values_a: Sequence[float], values_b: Sequence[float]) -> PairedDelta:
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Paired samples differ in size: {a.shape} vs {b.shape}")
    diff = b - a
    if diff.size < 2:
        return PairedDelta(mean=float(diff.mean()) if diff.size else 0.0, ci_half=0.0)
    half = z_value() * float(diff.std(ddof=1)) / math.sqrt(diff.size)
    return PairedDelta(mean=float(diff.mean()), ci_half=half)


def paired_record_deltas(
    records_a: Sequence[TrialRecord], records_b: Sequence[TrialRecord]
) -> dict[str, PairedDelta]:
    """BLER and rounds deltas of two protocols run on the same trial indices."""
    index_a = [r.trial_index for r in records_a]
    index_b = [r.trial_index for r in records_b]
    if index_a != index_b:
        raise ValueError("Paired comparison needs identical trial indices")
    return {
        "bler": paired_delta(
            [0.0 if r.success else 1.0 for r in records_a],
            [0.0 if r.success else 1.0 for r in records_b],
        ),
        "rounds": paired_delta(
            [r.rounds_used for r in records_a], [r.rounds_used for r in records_b]
        ),
    }


def horizontal_gain(
    snr_db: Sequence[float],
    bler_a: Sequence[float],
    bler_b: Sequence[float],
    target: float,
) -> float:
    """SNR advantage of curve a over curve b at a target BLER, in dB.

    Each curve is interpolated linearly in log10(BLER) versus SNR. Positive means a
    reaches the target at a lower SNR. NaN when either curve never crosses the target.
    """
    return crossing_snr(snr_db, bler_b, target) - crossing_snr(snr_db, bler_a, target)


def crossing_snr(snr_db: Sequence[float], bler: Sequence[float], target: float) -> float:
    snr = np.asarray(snr_db, dtype=np.float64)
    order = np.argsort(snr)
    snr = snr[order]
    curve = np.log10(np.clip(np.asarray(bler, dtype=np.float64)[order], 1e-12, 1.0))
    # Force a non-increasing curve so the inverse is well defined
    curve = np.minimum.accumulate(curve)
    level = math.log10(target)
    if curve[0] < level or curve[-1] > level:
        return math.nan
    hits = np.flatnonzero(curve <= level)
    j = int(hits[0])
    if j == 0 or curve[j] == level:
        return float(snr[j])
    x0, x1 = snr[j - 1], snr[j]
    y0, y1 = curve[j - 1], curve[j]
    return float(x0 + (level - y0) * (x1 - x0) / (y1 - y0))

"""Bound tables and the consistency report of measured CE rounds against C / H2(tau)."""

import itertools
import logging
import math
from typing import Sequence

import numpy as np
import pandas as pd

from ceharq.core.protocol import SchemeKind, TrialRecord
from ceharq.services.bounds import bound_point, bpsk_awgn_capacity
from ceharq.services.entropy import binary_entropy

logger = logging.getLogger(__name__)


def bounds_frame(
    snr_list: Sequence[float],
    tau_list: Sequence[float],
    distortion_list: Sequence[float],
) -> pd.DataFrame:
    """BoundPoints over the full grid of (SNR, tau, D)."""
    rows = []
    for snr, tau, distortion in itertools.product(snr_list, tau_list, distortion_list):
        point = bound_point(snr, tau, distortion)
        rows.append({
            "snr_db": point.snr_db,
            "capacity": point.capacity,
            "tau": point.tau,
            "distortion": point.distortion,
            "rsi": point.rsi,
            "max_rate": point.max_rate,
            "unbounded": point.unbounded,
        })
    return pd.DataFrame(rows)


def lossless_ce_sparsities(records: Sequence[TrialRecord], k: int) -> list[float]:
    """Sparsity of the error carried by every compressed-error round that ended the session."""
    taus = []
    for record in records:
        for index, kind in enumerate(record.scheme_history):
            if kind != SchemeKind.CE_FRESH.value or index == 0:
                continue
            if record.error_weights[index] == 0:
                taus.append(record.error_weights[index - 1] / k)
    return taus


def ce_bound_row(records: Sequence[TrialRecord], snr_db: float, k: int, n: int) -> dict:
    """One report row; within_bound is informational, never asserted."""
    taus = lossless_ce_sparsities(records, k)
    capacity = bpsk_awgn_capacity(snr_db)
    operating_rate = k / n
    if not taus:
        return {
            "snr_db": snr_db,
            "ce_successes": 0,
            "mean_tau": math.nan,
            "capacity": capacity,
            "rsi": math.nan,
            "max_rate": math.nan,
            "operating_rate": operating_rate,
            "within_bound": None,
        }
    mean_tau = float(np.mean(taus))
    rsi = binary_entropy(min(mean_tau, 0.5))
    max_rate = capacity / rsi if rsi > 0 else math.inf
    return {
        "snr_db": snr_db,
        "ce_successes": len(taus),
        "mean_tau": mean_tau,
        "capacity": capacity,
        "rsi": rsi,
        "max_rate": max_rate,
        "operating_rate": operating_rate,
        "within_bound": operating_rate <= max_rate,
    }


def ce_bound_frame(
    records_by_snr: dict[float, Sequence[TrialRecord]], k: int, n: int
) -> pd.DataFrame:
    rows = [ce_bound_row(records, snr, k, n) for snr, records in records_by_snr.items()]
    df = pd.DataFrame(rows)
    outside = df["within_bound"].eq(False).sum()
    if outside:
        logger.info(f"{outside} SNR point(s) operate above C/H2(tau) for lossless CE rounds")
    return df

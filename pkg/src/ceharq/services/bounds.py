"""Information-theoretic reference values for the compressed-error rounds.

Capacity of equiprobable BPSK on the real AWGN channel, the conditional
rate-distortion function of a binary symmetric source with side information at both
ends, and the resulting limit on K/N for a round that must reach distortion D.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss

from ceharq.services.entropy import binary_entropy

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 160
LN2 = math.log(2.0)


@lru_cache(maxsize=None)
def _hermite_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    return hermgauss(n)


def bpsk_awgn_capacity(snr_db: float, nodes: int = QUADRATURE_NODES) -> float:
    """Mutual information of equiprobable BPSK over AWGN in bits per channel use.

    C = 1 - E[log2(1 + exp(-2y / sigma^2))] with y ~ N(1, sigma^2), evaluated by
    Gauss-Hermite quadrature.
    """
    if math.isinf(snr_db):
        return 1.0 if snr_db > 0 else 0.0
    sigma = 10.0 ** (-snr_db / 20.0)
    x, w = _hermite_nodes(nodes)
    y = 1.0 + math.sqrt(2.0) * sigma * x
    # log(1 + e^-a) without overflow
    penalty = np.logaddexp(0.0, -2.0 * y / sigma**2) / LN2
    capacity = 1.0 - float(np.dot(w, penalty)) / math.sqrt(math.pi)
    return min(max(capacity, 0.0), 1.0)


def rsi_hamming(tau: float, distortion: float) -> float:
    """Conditional rate-distortion R_SI(D) for the doubly symmetric binary pair.

    Returns H2(tau) - H2(D) for D < tau, else 0.
    """
    if not 0.0 <= tau <= 0.5:
        raise ValueError(f"tau must lie in [0, 0.5], got {tau}")
    if distortion < 0.0:
        raise ValueError(f"distortion must be non-negative, got {distortion}")
    if distortion >= tau:
        return 0.0
    return binary_entropy(tau) - binary_entropy(distortion)


def max_ce_rate(snr_db: float, tau: float, distortion: float) -> float:
    """Largest K/N that can reach distortion D in one round: C / R_SI(D).

    Returns +inf when R_SI(D) = 0 (the side information already meets the target).
    """
    rsi = rsi_hamming(tau, distortion)
    if rsi <= 0.0:
        return math.inf
    return bpsk_awgn_capacity(snr_db) / rsi


@dataclass(frozen=True)
class BoundPoint:
    snr_db: float
    capacity: float
    tau: float
    distortion: float
    rsi: float
    max_rate: float

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.max_rate)


def bound_point(snr_db: float, tau: float, distortion: float) -> BoundPoint:
    capacity = bpsk_awgn_capacity(snr_db)
    rsi = rsi_hamming(tau, distortion)
    return BoundPoint(
        snr_db=snr_db,
        capacity=capacity,
        tau=tau,
        distortion=distortion,
        rsi=rsi,
        max_rate=math.inf if rsi <= 0.0 else capacity / rsi,
    )


def blahut_arimoto_rd(
    source: np.ndarray,
    distortion: np.ndarray,
    slope: float,
    iterations: int = 500,
    tol: float = 1e-12,
) -> tuple[float, float]:
    """One point of the rate-distortion curve at a given slope.

    Args:
        source: Source pmf p(u)
        distortion: Matrix d(u, v)
        slope: Lagrange multiplier (larger means lower distortion)

    Returns:
        (rate in bits, expected distortion)
    """
    source = np.asarray(source, dtype=np.float64)
    distortion = np.asarray(distortion, dtype=np.float64)
    kernel = np.exp(-slope * distortion)
    output = np.full(distortion.shape[1], 1.0 / distortion.shape[1])

    for _ in range(iterations):
        weighted = output[None, :] * kernel
        test_channel = weighted / weighted.sum(axis=1, keepdims=True)
        updated = source @ test_channel
        if np.max(np.abs(updated - output)) < tol:
            output = updated
            break
        output = updated

    weighted = output[None, :] * kernel
    test_channel = weighted / weighted.sum(axis=1, keepdims=True)
    joint = source[:, None] * test_channel
    expected = float(np.sum(joint * distortion))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(joint > 0, test_channel / output[None, :], 1.0)
    rate = float(np.sum(joint * np.log2(ratio)))
    return max(rate, 0.0), expected


def rsi_blahut_arimoto(tau: float, distortion: float, max_slope: float = 60.0) -> float:
    """R_SI(D) computed numerically, for cross-checking rsi_hamming.

    Each side-information value s gives the conditional source p(u | s); both share
    one slope, and the slope is bisected until the averaged distortion meets D.
    """
    if distortion >= tau:
        return 0.0
    hamming = np.array([[0.0, 1.0], [1.0, 0.0]])
    conditionals = [np.array([1.0 - tau, tau]), np.array([tau, 1.0 - tau])]

    def point(slope: float) -> tuple[float, float]:
        results = [blahut_arimoto_rd(p, hamming, slope) for p in conditionals]
        return (
            0.5 * sum(r for r, _ in results),
            0.5 * sum(d for _, d in results),
        )

    if distortion <= 0.0:
        return point(max_slope)[0]

    lo, hi = 0.0, max_slope
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        _, achieved = point(mid)
        if achieved > distortion:
            lo = mid
        else:
            hi = mid
    return point(hi)[0]

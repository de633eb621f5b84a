"""BPSK modulation over a real AWGN forward channel.

Symbol energy is fixed at Es = 1 and SNR is Es/sigma^2 in dB. Bit 0 maps to +1.0 and
bit 1 maps to -1.0; a received value of exactly zero demodulates to bit 0.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

logger = logging.getLogger(__name__)

# Largest LLR magnitude reported on a noiseless (sigma = 0) channel
NOISELESS_LLR = 1.0e6


class ChannelMisuseError(Exception):
    """Soft blocks that cannot belong to the same codeword were combined."""

    pass


@dataclass(frozen=True)
class ChannelConfig:
    """Forward channel parameters."""

    snr_db: float
    seed: int = 0

    @property
    def sigma(self) -> float:
        """Noise standard deviation, zero for an infinite SNR."""
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return 10.0 ** (-self.snr_db / 20.0)

    @property
    def noiseless(self) -> bool:
        return self.sigma == 0.0


@dataclass(frozen=True)
class SoftBlock:
    """Received symbols, possibly the running mean of several identical transmissions."""

    values: np.ndarray
    combine_count: int = 1

    def __post_init__(self):
        if self.combine_count < 1:
            raise ChannelMisuseError(f"combine_count must be >= 1, got {self.combine_count}")

    def __len__(self) -> int:
        return int(self.values.shape[0])


def trial_stream(seed: int, trial_index: int, stream: int) -> np.random.Generator:
    """Counter-based RNG stream for one trial.

    Stream 0 draws the message, stream r >= 1 draws the noise of round r. The stream
    depends only on (seed, trial_index, stream), never on execution order.
    """
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(trial_index, stream))
    return np.random.Generator(np.random.PCG64(seq))


def modulate_bpsk(bits: np.ndarray) -> np.ndarray:
    """Map bits to BPSK symbols: 0 -> +1.0, 1 -> -1.0."""
    bits = np.asarray(bits, dtype=np.uint8)
    return 1.0 - 2.0 * bits.astype(np.float64)


def transmit(
    symbols: np.ndarray,
    cfg: ChannelConfig,
    trial_index: int,
    round_index: int = 1,
) -> SoftBlock:
    """Send symbols through the AWGN channel.

    Args:
        symbols: BPSK symbols in {-1, +1}
        cfg: Channel configuration (SNR and master seed)
        trial_index: Index of the Monte Carlo trial
        round_index: Round within the trial (selects the noise stream)

    Returns:
        A fresh SoftBlock with combine_count 1
    """
    symbols = np.asarray(symbols, dtype=np.float64)
    if cfg.noiseless:
        return SoftBlock(values=symbols.copy())

    rng = trial_stream(cfg.seed, trial_index, round_index)
    noise = rng.standard_normal(symbols.shape[0]) * cfg.sigma
    return SoftBlock(values=symbols + noise)


def chase_combine(previous: SoftBlock, fresh: SoftBlock) -> SoftBlock:
    """Combine two receptions of the same codeword into their running mean."""
    if len(previous) != len(fresh):
        raise ChannelMisuseError(
            f"Cannot combine blocks of length {len(previous)} and {len(fresh)}"
        )

    total = previous.combine_count + fresh.combine_count
    values = (
        previous.values * previous.combine_count + fresh.values * fresh.combine_count
    ) / total
    return SoftBlock(values=values, combine_count=total)


def demodulate_hard(block: SoftBlock) -> np.ndarray:
    """Hard decisions: value >= 0 -> 0, value < 0 -> 1."""
    return (block.values < 0).astype(np.uint8)


def demodulate_llr(block: SoftBlock, cfg: ChannelConfig) -> np.ndarray:
    """Channel LLRs, positive meaning bit 0.

    The block holds a running mean of combine_count receptions, so its noise variance
    is sigma^2 / combine_count.
    """
    if cfg.noiseless:
        return np.sign(block.values) * NOISELESS_LLR
    return 2.0 * block.values * block.combine_count / cfg.sigma**2


def effective_snr_db(snr_db: float, combine_count: int) -> float:
    """SNR of a k-fold chase-combined block."""
    return snr_db + 10.0 * math.log10(combine_count)


def q_function(x):
    """Gaussian tail probability Q(x)."""
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def uncoded_ber(snr_db: float) -> float:
    """Closed-form BPSK bit error rate at the given Es/sigma^2."""
    return float(q_function(10.0 ** (snr_db / 20.0)))

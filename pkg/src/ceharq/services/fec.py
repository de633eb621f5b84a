"""Two-layer channel coding: fixed-rate PHY codes and the variable-rate MAC layer.

PHY schemes map K message bits to N coded bits (uncoded, zero-terminated convolutional,
or systematic LDPC). The MAC layer protects a compressed payload with a member of a
rate family built from convolutional mother codes and repetition of coded streams.

MAC frame for family member m (rate 1/n_m):
    B_m = floor(K / n_m) input bits = [prefix] + payload + zero padding
    prefix (in-band mode only) = rate index (4 bits) + L_total (16 bits)
The frame is tail-biting encoded into n_m * B_m bits and filled to exactly K bits by
cyclic repetition of the coded bits. The K MAC output bits then pass a fixed pseudo-random
interleaver (seeded by INTERLEAVER_SEED, one permutation per K) before the PHY encoder,
so a burst left by the PHY Viterbi decoder lands on scattered mother-code bits.
"""

import enum
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from ceharq.config import ConfigError
from ceharq.services.channel import ChannelConfig, SoftBlock, demodulate_hard, demodulate_llr
from ceharq.services.convolutional import ERASED, ConvolutionalCode
from ceharq.services.entropy import HEADER_BITS, CompressedPayload
from ceharq.services.ldpc import DATA_DIR, AlistFormatError, LdpcCode

logger = logging.getLogger(__name__)

RATE_INDEX_BITS = 4
LENGTH_BITS = 16
PREFIX_BITS = RATE_INDEX_BITS + LENGTH_BITS

DEFAULT_MAC_DENOMINATORS = (2, 3, 4, 6, 8, 12)
RATE_HALF_GENERATORS = (0o133, 0o171)
RATE_THIRD_GENERATORS = (0o133, 0o171, 0o165)

# Seed of the fixed MAC output interleaver; both ends derive the same permutation per K
INTERLEAVER_SEED = 0x5EED_CE


class FecConfigError(ConfigError):
    """Invalid FEC scheme or parity-check matrix."""

    pass


class NotCompressibleEnough(Exception):
    """Payload does not fit the highest-rate MAC code."""

    pass


class FecKind(str, enum.Enum):
    UNCODED = "uncoded"
    CONVOLUTIONAL = "convolutional"
    LDPC = "ldpc"


@dataclass(frozen=True)
class FecScheme:
    """PHY code configuration."""

    kind: FecKind
    k: int
    generators: tuple[int, ...] = RATE_HALF_GENERATORS
    constraint_length: int = 7
    ldpc_matrix: Optional[str] = None
    max_iterations: int = 6
    normalization: float = 0.8
    llr_clip: float = 20.0

    @property
    def n(self) -> int:
        if self.kind == FecKind.UNCODED:
            return self.k
        if self.kind == FecKind.CONVOLUTIONAL:
            return (self.k + self.constraint_length - 1) * len(self.generators)
        return load_ldpc(self).n

    @property
    def rate(self) -> Fraction:
        return Fraction(self.k, self.n)

    @property
    def tail_bits(self) -> int:
        """Coded bits spent on trellis termination."""
        if self.kind == FecKind.CONVOLUTIONAL:
            return (self.constraint_length - 1) * len(self.generators)
        return 0

    def conv_code(self) -> ConvolutionalCode:
        return _conv_code(self.generators, self.constraint_length)


def default_ldpc_matrix(k: int) -> Path:
    """Shipped rate-3/4 matrix for a message length (240 or 960)."""
    lifting = k // 12
    path = DATA_DIR / f"ldpc_r34_z{lifting}.alist"
    if k % 12 != 0 or not path.exists():
        raise FecConfigError(
            f"No shipped rate-3/4 LDPC matrix for K={k}; set ldpc_matrix to an alist file"
        )
    return path


@lru_cache(maxsize=None)
def _conv_code(generators: tuple[int, ...], constraint_length: int) -> ConvolutionalCode:
    try:
        return ConvolutionalCode(generators=generators, constraint_length=constraint_length)
    except ValueError as e:
        raise FecConfigError(str(e)) from e


@lru_cache(maxsize=None)
def _ldpc_code(
    path: str, normalization: float, max_iterations: int, llr_clip: float
) -> LdpcCode:
    try:
        return LdpcCode.from_alist(
            Path(path),
            normalization=normalization,
            max_iterations=max_iterations,
            llr_clip=llr_clip,
        )
    except AlistFormatError as e:
        raise FecConfigError(str(e)) from e


def load_ldpc(scheme: FecScheme) -> LdpcCode:
    """LDPC code of a scheme, loaded once per process."""
    path = scheme.ldpc_matrix or str(default_ldpc_matrix(scheme.k))
    code = _ldpc_code(path, scheme.normalization, scheme.max_iterations, scheme.llr_clip)
    if code.k != scheme.k:
        raise FecConfigError(f"LDPC matrix {path} has K={code.k}, scheme expects K={scheme.k}")
    return code


def _check_length(bits: np.ndarray, expected: int, what: str) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape[0] != expected:
        raise FecConfigError(f"{what} must have {expected} bits, got {bits.shape[0]}")
    return bits


@lru_cache(maxsize=None)
def _interleaver(k: int) -> tuple[np.ndarray, np.ndarray]:
    permutation = np.random.default_rng(INTERLEAVER_SEED).permutation(k)
    inverse = np.argsort(permutation)
    permutation.flags.writeable = False
    inverse.flags.writeable = False
    return permutation, inverse


def interleave(values: np.ndarray) -> np.ndarray:
    """Permute K MAC output positions with the fixed interleaver for that K."""
    values = np.asarray(values)
    permutation, _ = _interleaver(values.shape[0])
    return values[permutation]


def deinterleave(values: np.ndarray) -> np.ndarray:
    """Inverse of interleave for hard bits or soft values."""
    values = np.asarray(values)
    _, inverse = _interleaver(values.shape[0])
    return values[inverse]


def phy_encode(bits: np.ndarray, scheme: FecScheme) -> np.ndarray:
    """Encode K message bits into an N-bit PHY codeword."""
    bits = _check_length(bits, scheme.k, "PHY message")
    if scheme.kind == FecKind.UNCODED:
        return bits.copy()
    if scheme.kind == FecKind.CONVOLUTIONAL:
        return scheme.conv_code().encode(bits)
    return ldpc_encode(bits, scheme)


def viterbi_decode_hard(received: np.ndarray, scheme: FecScheme) -> np.ndarray:
    """Hard-decision Viterbi decoding of a zero-terminated PHY codeword."""
    if scheme.kind != FecKind.CONVOLUTIONAL:
        raise FecConfigError(f"Viterbi decoding needs a convolutional scheme, got {scheme.kind}")
    received = _check_length(received, scheme.n, "Received codeword")
    bits, _ = scheme.conv_code().viterbi_decode(received, scheme.k)
    return bits


def ldpc_encode(bits: np.ndarray, scheme: FecScheme) -> np.ndarray:
    if scheme.kind != FecKind.LDPC:
        raise FecConfigError(f"LDPC encoding needs an LDPC scheme, got {scheme.kind}")
    return load_ldpc(scheme).encode(bits)


def ldpc_decode_minsum(llrs: np.ndarray, scheme: FecScheme) -> tuple[np.ndarray, bool]:
    """Normalized min-sum decoding; returns (message bits, converged)."""
    result = load_ldpc(scheme).decode(llrs)
    return result.bits, result.converged


@dataclass
class PhyDecoding:
    """PHY decoder output handed to the MAC layer."""

    bits: np.ndarray
    llrs: Optional[np.ndarray] = None   # soft values for LLR combining, LDPC only
    converged: bool = True


def phy_decode(block: SoftBlock, scheme: FecScheme, channel: ChannelConfig) -> PhyDecoding:
    """Decode a (possibly chase-combined) received block."""
    if scheme.kind == FecKind.UNCODED:
        return PhyDecoding(bits=demodulate_hard(block))
    if scheme.kind == FecKind.CONVOLUTIONAL:
        return PhyDecoding(bits=viterbi_decode_hard(demodulate_hard(block), scheme))
    result = load_ldpc(scheme).decode(demodulate_llr(block, channel))
    return PhyDecoding(bits=result.bits, llrs=result.llrs, converged=result.converged)


@dataclass(frozen=True)
class MacRate:
    """One member of the MAC rate family: mother code plus stream repetition pattern."""

    denominator: int
    mother: ConvolutionalCode
    pattern: tuple[int, ...]

    @property
    def rate(self) -> Fraction:
        return Fraction(1, self.denominator)

    def capacity(self, k: int) -> int:
        """Frame input bits B = floor(K / n) for a K-bit MAC output."""
        return k // self.denominator

    def encode_frame(self, frame: np.ndarray, k: int) -> np.ndarray:
        """Tail-biting encode a B-bit frame, fill to K bits by cyclic repetition, interleave."""
        frame = _check_length(frame, self.capacity(k), "MAC frame")
        streams = self.mother.encode_streams(frame, tail_biting=True)
        coded = streams[:, list(self.pattern)].reshape(-1)
        return interleave(np.resize(coded, k).astype(np.uint8))

    def fold(self, values: np.ndarray, k: int) -> np.ndarray:
        """Fold repeated coded bits onto the mother code and take hard decisions.

        Copies are combined by summing soft values (+1/-1 for hard bits); a zero sum is an
        erasure, so a majority vote tie costs nothing in the Viterbi metric.
        """
        capacity = self.capacity(k)
        n_coded = capacity * self.denominator
        mother_outputs = self.mother.n_outputs

        coded_index = np.arange(k) % n_coded
        step = coded_index // self.denominator
        slot = coded_index % self.denominator
        stream = np.asarray(self.pattern)[slot]
        target = step * mother_outputs + stream

        summed = np.bincount(target, weights=values, minlength=capacity * mother_outputs)
        hard = (summed < 0).astype(np.uint8)
        hard[summed == 0] = ERASED
        return hard

    def decode_frame(
        self,
        received: np.ndarray,
        k: int,
        known_zero_from: Optional[int] = None,
    ) -> tuple[np.ndarray, float]:
        """Decode K hard bits or soft values back to a B-bit frame.

        Returns:
            (frame bits, Viterbi path metric per coded bit)
        """
        values = _soft_values(received)
        if values.shape[0] != k:
            raise FecConfigError(f"MAC input must have {k} values, got {values.shape[0]}")
        return self.mother.viterbi_decode(
            self.fold(deinterleave(values), k),
            self.capacity(k),
            tail_biting=True,
            known_zero_from=known_zero_from,
        )

    @classmethod
    def from_denominator(cls, denominator: int) -> "MacRate":
        """Rate 1/2 from (133,171); rate 1/n >= 3 by cyclic repetition of (133,171,165)."""
        if denominator < 2:
            raise FecConfigError(f"MAC rate denominator must be >= 2, got {denominator}")
        if denominator == 2:
            mother = _conv_code(RATE_HALF_GENERATORS, 7)
            return cls(denominator=2, mother=mother, pattern=(0, 1))
        mother = _conv_code(RATE_THIRD_GENERATORS, 7)
        pattern = tuple(i % mother.n_outputs for i in range(denominator))
        return cls(denominator=denominator, mother=mother, pattern=pattern)


@dataclass(frozen=True)
class RateFamily:
    """Ordered MAC rates, highest rate first."""

    members: tuple[MacRate, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.members:
            raise FecConfigError("MAC rate family is empty")
        if len(self.members) > (1 << RATE_INDEX_BITS):
            raise FecConfigError(f"At most {1 << RATE_INDEX_BITS} MAC rates can be signalled")
        denominators = [m.denominator for m in self.members]
        if any(b <= a for a, b in zip(denominators, denominators[1:])):
            raise FecConfigError(f"MAC rates must be strictly decreasing, got 1/{denominators}")

    @classmethod
    def from_denominators(cls, denominators=DEFAULT_MAC_DENOMINATORS) -> "RateFamily":
        return cls(members=tuple(MacRate.from_denominator(d) for d in sorted(set(denominators))))

    @property
    def rates(self) -> list[Fraction]:
        return [m.rate for m in self.members]

    def select(self, frame_bits: int, k: int) -> int:
        """Index of the lowest rate whose frame capacity holds frame_bits.

        Raises:
            NotCompressibleEnough: If even the highest rate cannot hold the frame
        """
        for index in range(len(self.members) - 1, -1, -1):
            if frame_bits <= self.members[index].capacity(k):
                return index
        raise NotCompressibleEnough(
            f"{frame_bits} frame bits exceed the capacity {self.members[0].capacity(k)} "
            f"of rate {self.members[0].rate} at K={k}"
        )


@dataclass(frozen=True)
class MacFrame:
    """Result of MAC encoding."""

    bits: np.ndarray      # K bits handed to the PHY encoder
    rate_index: int
    chosen_rate: Fraction
    payload_bits: int     # L_total
    filler_bits: int      # cyclically repeated coded bits
    padding_bits: int     # zero input bits after the payload


def _to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> s) & 1 for s in range(width - 1, -1, -1)], dtype=np.uint8)


def _from_bits(bits: np.ndarray) -> int:
    value = 0
    for bit in bits.tolist():
        value = (value << 1) | int(bit)
    return value


def mac_encode(
    payload: CompressedPayload,
    k: int,
    family: RateFamily,
    in_band: bool = True,
) -> MacFrame:
    """Encode a compressed payload into exactly K bits at the lowest fitting rate.

    Raises:
        NotCompressibleEnough: If the payload exceeds the highest-rate capacity
    """
    payload_bits = payload.to_bits()
    l_total = payload.total_bits
    prefix_bits = PREFIX_BITS if in_band else 0
    index = family.select(l_total + prefix_bits, k)
    member = family.members[index]
    capacity = member.capacity(k)

    parts = []
    if in_band:
        parts.append(_to_bits(index, RATE_INDEX_BITS))
        parts.append(_to_bits(l_total, LENGTH_BITS))
    parts.append(payload_bits)
    padding = capacity - l_total - prefix_bits
    parts.append(np.zeros(padding, dtype=np.uint8))
    frame = np.concatenate(parts)

    bits = member.encode_frame(frame, k)
    n_coded = capacity * member.denominator

    logger.debug(
        f"MAC rate {member.rate} for L_total={l_total}: {n_coded} coded bits, "
        f"{k - n_coded} filler, {padding} padding"
    )
    return MacFrame(
        bits=bits,
        rate_index=index,
        chosen_rate=member.rate,
        payload_bits=l_total,
        filler_bits=k - n_coded,
        padding_bits=padding,
    )


def _soft_values(received: np.ndarray) -> np.ndarray:
    received = np.asarray(received)
    if np.issubdtype(received.dtype, np.floating):
        return received.astype(np.float64)
    return 1.0 - 2.0 * received.astype(np.float64)


def _frame_consistent(frame: np.ndarray, index: int, family: RateFamily, k: int) -> bool:
    if _from_bits(frame[:RATE_INDEX_BITS]) != index:
        return False
    l_total = _from_bits(frame[RATE_INDEX_BITS:PREFIX_BITS])
    if l_total < HEADER_BITS or l_total + PREFIX_BITS > family.members[index].capacity(k):
        return False
    header_length = _from_bits(frame[PREFIX_BITS:PREFIX_BITS + HEADER_BITS])
    if header_length + HEADER_BITS != l_total:
        return False
    try:
        if family.select(l_total + PREFIX_BITS, k) != index:
            return False
    except NotCompressibleEnough:
        return False
    return not frame[PREFIX_BITS + l_total:].any()


def mac_decode(
    received: np.ndarray,
    family: RateFamily,
    k: int,
    chosen_rate: Optional[Fraction] = None,
    payload_bits: Optional[int] = None,
    in_band: bool = True,
) -> CompressedPayload:
    """Recover the compressed payload from K hard bits or K soft values (LLRs).

    In genie mode chosen_rate and payload_bits (L_total) come from the control channel.
    In in-band mode every family member is tried and the self-consistent frame wins.
    Always returns a payload; wrong payloads are caught by the protocol feedback loop.
    """
    values = _soft_values(received)
    if values.shape[0] != k:
        raise FecConfigError(f"MAC input must have {k} values, got {values.shape[0]}")

    if not in_band:
        if chosen_rate is None or payload_bits is None:
            raise FecConfigError("Genie MAC decoding needs chosen_rate and payload_bits")
        index = family.rates.index(Fraction(chosen_rate))
        member = family.members[index]
        frame, _ = member.decode_frame(values, k, known_zero_from=payload_bits)
        return CompressedPayload.from_bits(frame[:payload_bits])

    best: Optional[tuple[bool, float, int, np.ndarray]] = None
    for index, member in enumerate(family.members):
        if member.capacity(k) < PREFIX_BITS + HEADER_BITS:
            continue
        frame, metric = member.decode_frame(values, k)
        consistent = _frame_consistent(frame, index, family, k)
        candidate = (consistent, metric, index, frame)
        if best is None or (consistent, -metric) > (best[0], -best[1]):
            best = candidate

    if best is None:
        raise FecConfigError(f"No MAC rate can carry a framed payload at K={k}")

    consistent, _, index, frame = best
    l_total = _from_bits(frame[RATE_INDEX_BITS:PREFIX_BITS])
    l_total = min(max(l_total, HEADER_BITS), family.members[index].capacity(k) - PREFIX_BITS)
    if consistent:
        # Second pass with the padding now known to be zero
        member = family.members[index]
        frame, _ = member.decode_frame(values, k, known_zero_from=PREFIX_BITS + l_total)
    return CompressedPayload.from_bits(frame[PREFIX_BITS:PREFIX_BITS + l_total])

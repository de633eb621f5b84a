"""Lossless compression of sparse binary error vectors.

The coder is an adaptive binary arithmetic coder driven by the Krichevsky-Trofimov
estimator. It works on 32-bit integer state only, so the emitted bits are identical on
every platform.

Payload bit format (MSB first):
    header: 16-bit big-endian body length L
    body:   L coded bits

The message length K is session configuration and is not transmitted.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

HEADER_BITS = 16
MAX_BODY_BITS = (1 << HEADER_BITS) - 1

STATE_BITS = 32
FULL_RANGE = 1 << STATE_BITS
STATE_MASK = FULL_RANGE - 1
TOP_MASK = FULL_RANGE >> 1
SECOND_MASK = TOP_MASK >> 1
MAX_TOTAL = (FULL_RANGE >> 2) + 2


class EntropyDomainError(ValueError):
    """Sparsity outside [0, 1]."""

    pass


class PayloadError(Exception):
    """Error vector cannot be framed into a payload."""

    pass


def binary_entropy(tau: float) -> float:
    """Binary entropy H2(tau) in bits, with 0 log 0 = 0."""
    if not 0.0 <= tau <= 1.0:
        raise EntropyDomainError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0 or tau == 1.0:
        return 0.0
    return float(-tau * np.log2(tau) - (1.0 - tau) * np.log2(1.0 - tau))


@dataclass(frozen=True)
class ErrorVector:
    """Difference between the message and the receiver's estimate."""

    bits: np.ndarray

    @classmethod
    def between(cls, message: np.ndarray, estimate: np.ndarray) -> "ErrorVector":
        return cls(bits=np.bitwise_xor(message, estimate).astype(np.uint8))

    @property
    def k(self) -> int:
        return int(self.bits.shape[0])

    @property
    def weight(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def sparsity(self) -> float:
        return self.weight / self.k if self.k else 0.0

    def apply(self, estimate: np.ndarray) -> np.ndarray:
        """Correct an estimate: u_hat XOR e."""
        return np.bitwise_xor(estimate, self.bits).astype(np.uint8)


@dataclass(frozen=True)
class CompressedPayload:
    """Arithmetic-coded error vector with its length header."""

    body: np.ndarray

    @property
    def body_bits(self) -> int:
        return int(self.body.shape[0])

    @property
    def total_bits(self) -> int:
        """L_total = L + header, the length handed to the MAC layer."""
        return self.body_bits + HEADER_BITS

    @property
    def header(self) -> np.ndarray:
        length = self.body_bits
        return np.array(
            [(length >> shift) & 1 for shift in range(HEADER_BITS - 1, -1, -1)],
            dtype=np.uint8,
        )

    def to_bits(self) -> np.ndarray:
        return np.concatenate([self.header, self.body]).astype(np.uint8)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "CompressedPayload":
        """Parse header and body; a short body is kept as received."""
        bits = np.asarray(bits, dtype=np.uint8)
        length = 0
        for bit in bits[:HEADER_BITS].tolist():
            length = (length << 1) | int(bit)
        body = bits[HEADER_BITS:HEADER_BITS + length]
        return cls(body=body.copy())


class _KTModel:
    """Krichevsky-Trofimov counts, stored doubled so the initial 1/2 stays integral."""

    def __init__(self):
        self.zeros = 1
        self.ones = 1

    @property
    def total(self) -> int:
        return self.zeros + self.ones

    def update(self, bit: int) -> None:
        if bit:
            self.ones += 2
        else:
            self.zeros += 2


class _CoderState:
    def __init__(self):
        self.low = 0
        self.high = STATE_MASK

    def narrow(self, bit: int, zeros: int, total: int) -> None:
        span = self.high - self.low + 1
        if bit:
            sym_low, sym_high = zeros, total
        else:
            sym_low, sym_high = 0, zeros
        self.high = self.low + sym_high * span // total - 1
        self.low = self.low + sym_low * span // total

        while ((self.low ^ self.high) & TOP_MASK) == 0:
            self.shift()
            self.low = (self.low << 1) & STATE_MASK
            self.high = ((self.high << 1) & STATE_MASK) | 1

        while (self.low & ~self.high & SECOND_MASK) != 0:
            self.underflow()
            self.low = (self.low << 1) & (STATE_MASK >> 1)
            self.high = ((self.high << 1) & (STATE_MASK >> 1)) | TOP_MASK | 1

    def shift(self) -> None:
        raise NotImplementedError

    def underflow(self) -> None:
        raise NotImplementedError


class _Encoder(_CoderState):
    def __init__(self):
        super().__init__()
        self.out: list[int] = []
        self.pending = 0

    def shift(self) -> None:
        bit = self.low >> (STATE_BITS - 1)
        self.out.append(bit)
        self.out.extend([bit ^ 1] * self.pending)
        self.pending = 0

    def underflow(self) -> None:
        self.pending += 1

    def finish(self) -> list[int]:
        # A single 1 selects the interval midpoint; pending bits are the implied zeros
        self.out.append(1)
        return self.out


class _Decoder(_CoderState):
    def __init__(self, body: list[int]):
        super().__init__()
        self.body = body
        self.pos = 0
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._next_bit()

    def _next_bit(self) -> int:
        # Reading past the end yields zeros
        if self.pos < len(self.body):
            bit = self.body[self.pos]
            self.pos += 1
            return bit
        return 0

    def read(self, zeros: int, total: int) -> int:
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        bit = 0 if value < zeros else 1
        self.narrow(bit, zeros, total)
        return bit

    def shift(self) -> None:
        self.code = ((self.code << 1) & STATE_MASK) | self._next_bit()

    def underflow(self) -> None:
        self.code = (
            (self.code & TOP_MASK) | ((self.code << 1) & (STATE_MASK >> 1)) | self._next_bit()
        )


def ac_encode(error: ErrorVector) -> CompressedPayload:
    """Compress an error vector.

    Raises:
        PayloadError: If the coded body does not fit the 16-bit length header
    """
    if error.k < 1:
        raise PayloadError("Cannot encode an empty error vector")
    if 2 * error.k + 2 > MAX_TOTAL:
        raise PayloadError(f"Error vector of length {error.k} exceeds the coder model range")

    model = _KTModel()
    encoder = _Encoder()
    for bit in error.bits.tolist():
        encoder.narrow(bit, model.zeros, model.total)
        model.update(bit)
    body = encoder.finish()

    if len(body) > MAX_BODY_BITS:
        raise PayloadError(f"Compressed body of {len(body)} bits exceeds the header range")
    return CompressedPayload(body=np.array(body, dtype=np.uint8))


def ac_decode(payload: CompressedPayload, k: int) -> ErrorVector:
    """Reconstruct a length-k error vector.

    Any payload decodes to some vector: a corrupted body yields an arbitrary estimate
    rather than an error.
    """
    model = _KTModel()
    decoder = _Decoder(payload.body.tolist())
    bits = np.empty(k, dtype=np.uint8)
    for i in range(k):
        bit = decoder.read(model.zeros, model.total)
        model.update(bit)
        bits[i] = bit
    return ErrorVector(bits=bits)

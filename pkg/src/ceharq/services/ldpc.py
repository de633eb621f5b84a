"""Quasi-cyclic LDPC codes: alist I/O, systematic encoding and normalized min-sum decoding."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# 4 x 16 exponent base graph for rate 3/4: 12 information block columns followed by an
# 802.11n-style dual-diagonal parity part. -1 marks an all-zero block.
R34_PARITY_EXPONENTS = [
    [1, 0, -1, -1],
    [-1, 0, 0, -1],
    [0, -1, 0, 0],
    [1, -1, -1, 0],
]


class AlistFormatError(ValueError):
    """Parity-check matrix file is missing or ill-formed."""

    pass


def r34_exponents(z: int) -> list[list[int]]:
    """Exponent matrix of the shipped rate-3/4 base graph for lifting size z."""
    rows = []
    for r in range(4):
        info = [(7 * (r + 1) * (c + 1) + 13 * r) % z for c in range(12)]
        rows.append(info + R34_PARITY_EXPONENTS[r])
    return rows


def build_qc_matrix(exponents: list[list[int]], z: int) -> np.ndarray:
    """Lift an exponent matrix into a binary parity-check matrix.

    Block (r, c) with shift s is the z x z identity cyclically shifted so that row i
    has its one in column (i + s) mod z.
    """
    base = np.asarray(exponents, dtype=np.int64)
    rows, cols = base.shape
    h = np.zeros((rows * z, cols * z), dtype=np.uint8)
    idx = np.arange(z)
    for r in range(rows):
        for c in range(cols):
            shift = base[r, c]
            if shift < 0:
                continue
            h[r * z + idx, c * z + (idx + shift) % z] = 1
    return h


def load_alist(path: Path) -> np.ndarray:
    """Read a parity-check matrix in alist format."""
    path = Path(path)
    if not path.exists():
        raise AlistFormatError(f"alist file not found: {path}")

    try:
        tokens = [int(tok) for tok in path.read_text().split()]
        n, m = tokens[0], tokens[1]
        pos = 4  # skip the maximum column and row weights
        col_weights = tokens[pos:pos + n]
        pos += n
        row_weights = tokens[pos:pos + m]
        pos += m
        max_col = max(col_weights)

        h = np.zeros((m, n), dtype=np.uint8)
        for col in range(n):
            entries = tokens[pos:pos + max_col]
            pos += max_col
            for row in entries[:col_weights[col]]:
                h[row - 1, col] = 1
    except (IndexError, ValueError) as e:
        raise AlistFormatError(f"Malformed alist file {path}: {e}") from e

    if not np.array_equal(h.sum(axis=0), np.asarray(col_weights)):
        raise AlistFormatError(f"Column weights in {path} disagree with the column lists")
    if not np.array_equal(h.sum(axis=1), np.asarray(row_weights)):
        raise AlistFormatError(f"Row weights in {path} disagree with the column lists")
    return h


def write_alist(h: np.ndarray, path: Path) -> None:
    """Write a parity-check matrix in alist format (1-based indices, zero padded)."""
    h = np.asarray(h, dtype=np.uint8)
    m, n = h.shape
    col_lists = [np.flatnonzero(h[:, c]) + 1 for c in range(n)]
    row_lists = [np.flatnonzero(h[r]) + 1 for r in range(m)]
    max_col = max(len(c) for c in col_lists)
    max_row = max(len(r) for r in row_lists)

    lines = [f"{n} {m}", f"{max_col} {max_row}"]
    lines.append(" ".join(str(len(c)) for c in col_lists))
    lines.append(" ".join(str(len(r)) for r in row_lists))
    for c in col_lists:
        lines.append(" ".join(str(v) for v in list(c) + [0] * (max_col - len(c))))
    for r in row_lists:
        lines.append(" ".join(str(v) for v in list(r) + [0] * (max_row - len(r))))
    Path(path).write_text("\n".join(lines) + "\n")


def systematic_form(h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduce H over GF(2), picking pivots from the rightmost columns.

    Returns:
        info_positions: columns carrying message bits
        parity_positions: pivot column of each independent check
        parity_map: (rank, k) matrix with parity = parity_map @ message mod 2
    """
    work = (np.asarray(h, dtype=np.uint8) & 1).copy()
    m, n = work.shape
    pivots: list[int] = []
    row = 0
    for col in range(n - 1, -1, -1):
        if row == m:
            break
        candidates = np.flatnonzero(work[row:, col])
        if candidates.size == 0:
            continue
        pivot_row = row + int(candidates[0])
        if pivot_row != row:
            work[[row, pivot_row]] = work[[pivot_row, row]]
        others = np.flatnonzero(work[:, col])
        others = others[others != row]
        work[others] ^= work[row]
        pivots.append(col)
        row += 1

    parity_positions = np.asarray(pivots, dtype=np.int64)
    pivot_set = set(pivots)
    info_positions = np.asarray([c for c in range(n) if c not in pivot_set], dtype=np.int64)
    parity_map = work[:row][:, info_positions]
    return info_positions, parity_positions, parity_map


@dataclass
class LdpcDecodeResult:
    bits: np.ndarray          # information bits
    llrs: np.ndarray          # posterior LLRs of the information bits
    converged: bool
    iterations: int


class LdpcCode:
    """Binary LDPC code with a systematic encoder and a flooding min-sum decoder."""

    def __init__(
        self,
        h: np.ndarray,
        normalization: float = 0.8,
        max_iterations: int = 6,
        llr_clip: float = 20.0,
        source: str = "<memory>",
    ):
        self.h = np.asarray(h, dtype=np.uint8)
        self.m, self.n = self.h.shape
        self.normalization = normalization
        self.max_iterations = max_iterations
        self.llr_clip = llr_clip
        self.source = source

        self.info_positions, self.parity_positions, self.parity_map = systematic_form(self.h)
        self.k = int(self.info_positions.shape[0])

        # Edges sorted by check row for segment reductions
        rows, cols = np.nonzero(self.h)
        self.edge_rows = rows.astype(np.int64)
        self.edge_cols = cols.astype(np.int64)
        self.row_starts = np.flatnonzero(np.r_[True, np.diff(self.edge_rows) != 0])
        self._edge_index = np.arange(self.edge_rows.shape[0])

        logger.debug(f"LDPC code from {source}: N={self.n}, K={self.k}, edges={rows.shape[0]}")

    @classmethod
    def from_alist(cls, path: Path, **kwargs) -> "LdpcCode":
        return cls(load_alist(path), source=str(path), **kwargs)

    @property
    def rate(self) -> float:
        return self.k / self.n

    def encode(self, bits: np.ndarray) -> np.ndarray:
        """Systematic encoding: message bits at the information positions."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape[0] != self.k:
            raise ValueError(f"LDPC message must have {self.k} bits, got {bits.shape[0]}")
        codeword = np.zeros(self.n, dtype=np.uint8)
        codeword[self.info_positions] = bits
        codeword[self.parity_positions] = (self.parity_map.astype(np.int64) @ bits) % 2
        return codeword

    def syndrome(self, codeword: np.ndarray) -> np.ndarray:
        bits = np.asarray(codeword, dtype=np.int64)[self.edge_cols]
        return (np.add.reduceat(bits, self.row_starts) % 2).astype(np.uint8)

    def decode(self, llrs: np.ndarray) -> LdpcDecodeResult:
        """Normalized min-sum with flooding schedule and syndrome-based early exit."""
        channel = np.clip(np.asarray(llrs, dtype=np.float64), -self.llr_clip, self.llr_clip)
        if channel.shape[0] != self.n:
            raise ValueError(f"Expected {self.n} LLRs, got {channel.shape[0]}")

        rows, cols, starts = self.edge_rows, self.edge_cols, self.row_starts
        edge_index = self._edge_index
        n_edges = edge_index.shape[0]

        to_check = channel[cols].copy()
        posterior = channel.copy()
        hard = (posterior < 0).astype(np.uint8)
        converged = False
        iterations = 0

        for iterations in range(1, self.max_iterations + 1):
            magnitude = np.abs(to_check)
            negative = (to_check < 0).astype(np.int64)

            min1 = np.minimum.reduceat(magnitude, starts)
            at_min = magnitude == min1[rows]
            first = np.minimum.reduceat(np.where(at_min, edge_index, n_edges), starts)
            masked = magnitude.copy()
            masked[first] = np.inf
            min2 = np.minimum.reduceat(masked, starts)
            is_first = edge_index == first[rows]
            extrinsic_mag = np.where(is_first, min2[rows], min1[rows])
            extrinsic_mag = np.where(np.isinf(extrinsic_mag), 0.0, extrinsic_mag)

            parity = np.add.reduceat(negative, starts) % 2
            sign = 1.0 - 2.0 * (parity[rows] ^ negative)
            to_var = self.normalization * sign * extrinsic_mag

            posterior = channel + np.bincount(cols, weights=to_var, minlength=self.n)
            to_check = np.clip(posterior[cols] - to_var, -self.llr_clip, self.llr_clip)

            hard = (posterior < 0).astype(np.uint8)
            if not self.syndrome(hard).any():
                converged = True
                break

        return LdpcDecodeResult(
            bits=hard[self.info_positions],
            llrs=posterior[self.info_positions],
            converged=converged,
            iterations=iterations,
        )

"""Feedforward convolutional codes and hard-decision Viterbi decoding.

Shift register convention: the current input bit is the MSB of the constraint-length
register, the state holds the previous K-1 inputs with the most recent at its MSB.
Output j of a step is the parity of (register & generator_j).
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

# Coded-bit value marking an erased position (contributes no branch metric)
ERASED = 2


@dataclass(frozen=True)
class ConvolutionalCode:
    """Rate 1/g feedforward code given by octal generators."""

    generators: tuple[int, ...] = (0o133, 0o171)
    constraint_length: int = 7

    def __post_init__(self):
        if len(self.generators) < 1:
            raise ValueError("At least one generator polynomial is required")
        limit = 1 << self.constraint_length
        for g in self.generators:
            if not 0 < g < limit:
                raise ValueError(
                    f"Generator {g:o} does not fit constraint length {self.constraint_length}"
                )

    @property
    def n_outputs(self) -> int:
        return len(self.generators)

    @property
    def memory(self) -> int:
        return self.constraint_length - 1

    @property
    def n_states(self) -> int:
        return 1 << self.memory

    @cached_property
    def _trellis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Predecessor states, input bits and branch outputs per next state.

        Returns:
            predecessors: (S, 2) predecessor states, lower index first
            inputs: (S,) input bit driving every transition into the state
            outputs: (S, 2, g) coded bits on each incoming branch
        """
        memory = self.memory
        n_states = self.n_states
        predecessors = np.zeros((n_states, 2), dtype=np.int64)
        inputs = np.zeros(n_states, dtype=np.int64)
        outputs = np.zeros((n_states, 2, self.n_outputs), dtype=np.uint8)
        for nxt in range(n_states):
            bit = nxt >> (memory - 1)
            inputs[nxt] = bit
            for j in range(2):
                prev = ((nxt << 1) & (n_states - 1)) | j
                predecessors[nxt, j] = prev
                register = (bit << memory) | prev
                for k, g in enumerate(self.generators):
                    outputs[nxt, j, k] = bin(register & g).count("1") & 1
        return predecessors, inputs, outputs

    def _run_encoder(self, bits: np.ndarray, state: int) -> np.ndarray:
        memory = self.memory
        out = np.empty((bits.shape[0], self.n_outputs), dtype=np.uint8)
        for t, bit in enumerate(bits.tolist()):
            register = (bit << memory) | state
            for k, g in enumerate(self.generators):
                out[t, k] = bin(register & g).count("1") & 1
            state = register >> 1
        return out

    def encode_streams(self, bits: np.ndarray, tail_biting: bool = False) -> np.ndarray:
        """Encode to a (steps, g) array of coded bits.

        Zero-terminated encoding appends K-1 zero tail inputs. Tail-biting encoding
        starts from the state the last K-1 inputs leave behind, so it has no tail.
        """
        bits = np.asarray(bits, dtype=np.uint8)
        if tail_biting:
            if bits.shape[0] < self.memory:
                raise ValueError(
                    f"Tail-biting needs at least {self.memory} input bits, got {bits.shape[0]}"
                )
            state = 0
            for bit in bits[-self.memory:].tolist():
                state = ((bit << self.memory) | state) >> 1
            return self._run_encoder(bits, state)

        padded = np.concatenate([bits, np.zeros(self.memory, dtype=np.uint8)])
        return self._run_encoder(padded, 0)

    def encode(self, bits: np.ndarray, tail_biting: bool = False) -> np.ndarray:
        """Encode and serialize step by step (g bits per input)."""
        return self.encode_streams(bits, tail_biting).reshape(-1)

    def coded_length(self, k: int, tail_biting: bool = False) -> int:
        steps = k if tail_biting else k + self.memory
        return steps * self.n_outputs

    def _branch_metrics(self, received: np.ndarray) -> np.ndarray:
        """Hamming branch metrics, shape (steps, S, 2); erased bits cost nothing."""
        _, _, outputs = self._trellis
        mismatch = received[:, None, None, :] != outputs[None, :, :, :]
        mismatch &= (received != ERASED)[:, None, None, :]
        return mismatch.sum(axis=-1, dtype=np.int64)

    def _forward(
        self,
        metrics: np.ndarray,
        start: np.ndarray,
        forced_zero_from: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        predecessors, inputs, _ = self._trellis
        p0 = predecessors[:, 0]
        p1 = predecessors[:, 1]
        unreachable = np.iinfo(np.int64).max // 4
        one_input = inputs == 1

        path = start.copy()
        decisions = np.zeros((metrics.shape[0], self.n_states), dtype=bool)
        for t in range(metrics.shape[0]):
            cand0 = path[p0] + metrics[t, :, 0]
            cand1 = path[p1] + metrics[t, :, 1]
            # Ties keep the lower-indexed predecessor
            choose = cand1 < cand0
            path = np.where(choose, cand1, cand0)
            if forced_zero_from is not None and t >= forced_zero_from:
                path = np.where(one_input, unreachable, path)
            np.minimum(path, unreachable, out=path)
            decisions[t] = choose
        return path, decisions

    def _traceback(self, decisions: np.ndarray, end_state: int) -> np.ndarray:
        predecessors, inputs, _ = self._trellis
        steps = decisions.shape[0]
        bits = np.empty(steps, dtype=np.uint8)
        state = end_state
        for t in range(steps - 1, -1, -1):
            bits[t] = inputs[state]
            state = predecessors[state, int(decisions[t, state])]
        return bits

    def viterbi_decode(
        self,
        received: np.ndarray,
        k: int,
        tail_biting: bool = False,
        known_zero_from: int | None = None,
    ) -> tuple[np.ndarray, float]:
        """Maximum-likelihood (Hamming metric) decoding of hard bits.

        Args:
            received: Coded bits in {0, 1}, or ERASED for erasures
            k: Number of information bits
            tail_biting: Decode a tail-biting codeword (wrap-around Viterbi)
            known_zero_from: Information positions >= this index are known zeros

        Returns:
            (decoded bits, path metric per coded bit)
        """
        received = np.asarray(received, dtype=np.uint8).reshape(-1, self.n_outputs)
        metrics = self._branch_metrics(received)
        n_coded = max(received.size, 1)

        if not tail_biting:
            start = np.full(self.n_states, np.iinfo(np.int64).max // 4, dtype=np.int64)
            start[0] = 0
            path, decisions = self._forward(metrics, start, known_zero_from)
            bits = self._traceback(decisions, 0)[:k]
            return bits, float(path[0]) / n_coded

        if known_zero_from is not None and known_zero_from <= k - self.memory:
            # Trailing known zeros pin the start state to zero
            start = np.full(self.n_states, np.iinfo(np.int64).max // 4, dtype=np.int64)
            start[0] = 0
            path, decisions = self._forward(metrics, start, known_zero_from)
            bits = self._traceback(decisions, 0)
            return bits, float(path[0]) / n_coded

        # Wrap-around decoding over a circularly extended trellis
        wrap = 6 * self.memory
        order = np.arange(-wrap, k + wrap) % k
        extended = metrics[order]
        start = np.zeros(self.n_states, dtype=np.int64)
        path, decisions = self._forward(extended, start)
        end_state = int(np.argmin(path))
        bits = self._traceback(decisions, end_state)[wrap:wrap + k]
        reencoded = self.encode_streams(bits, tail_biting=True)
        valid = received != ERASED
        distance = int(np.count_nonzero((reencoded != received) & valid))
        return bits, distance / n_coded

"""Round-by-round session state machines: CE-HARQ, HARQ and AIC-AC.

Every session sends constant-length N-bit codewords. After each round the receiver
feeds its K-bit estimate back over a noiseless link, so the transmitter knows the
exact error vector e = u XOR u_hat and stops as soon as it is zero.

Combine buffers:
    "harq"      every transmission of the message codeword
    "ce:<r>"    the compressed-error codeword first sent in round r, plus its
                fallback repeats
"""

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from ceharq.config import ProtocolKind
from ceharq.services.channel import (
    ChannelConfig,
    SoftBlock,
    chase_combine,
    modulate_bpsk,
    transmit,
    trial_stream,
)
from ceharq.services.entropy import (
    CompressedPayload,
    ErrorVector,
    PayloadError,
    ac_decode,
    ac_encode,
)
from ceharq.services.fec import (
    FecKind,
    FecScheme,
    NotCompressibleEnough,
    RateFamily,
    mac_decode,
    mac_encode,
    phy_decode,
    phy_encode,
)

logger = logging.getLogger(__name__)

HARQ_BUFFER = "harq"


class ProtocolError(Exception):
    """Session step invoked after success or after the last round."""

    pass


class SchemeKind(str, enum.Enum):
    HARQ = "harq"
    CE_FRESH = "ce_fresh"
    CE_FALLBACK = "ce_fallback"


CE_KINDS = frozenset({SchemeKind.CE_FRESH, SchemeKind.CE_FALLBACK})


@dataclass(frozen=True)
class DecisionBasis:
    """Why the transmitter chose a scheme."""

    error_weight: int
    tau_star: float
    below_threshold: bool
    fallback_triggered: bool = False
    not_compressible: bool = False


@dataclass(frozen=True)
class SchemeDecision:
    kind: SchemeKind
    basis: DecisionBasis
    buffer_key: str
    # Control-channel metadata for genie MAC decoding
    chosen_rate: Optional[Fraction] = None
    payload_bits: Optional[int] = None


@dataclass(frozen=True)
class SessionConfig:
    """Everything a single session needs besides the message."""

    phy: FecScheme
    channel: ChannelConfig
    max_rounds: int
    family: RateFamily = field(default_factory=RateFamily.from_denominators)
    tau_star: float = 0.0
    round_thresholds: Optional[tuple[float, ...]] = None   # tau for rounds 1..D
    mac_in_band: bool = True

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError(f"max_rounds must be >= 1, got {self.max_rounds}")

    @property
    def k(self) -> int:
        return self.phy.k

    @property
    def n(self) -> int:
        return self.phy.n

    def threshold(self, round_index: int) -> float:
        """Sparsity threshold in force for a round."""
        if self.round_thresholds is not None:
            return self.round_thresholds[min(round_index, len(self.round_thresholds)) - 1]
        return self.tau_star


@dataclass
class TrialRecord:
    """Outcome of one session."""

    trial_index: int
    success: bool
    rounds_used: int
    channel_uses: int
    scheme_history: list[str]
    error_weights: list[int]    # |u XOR u_hat| after each round

    @property
    def success_round(self) -> Optional[int]:
        return self.rounds_used if self.success else None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


@dataclass
class SessionState:
    """Per-message state shared by the transmitter and receiver sides of a session."""

    max_rounds: int
    message: np.ndarray
    estimate: np.ndarray
    n: int
    round: int = 0
    channel_uses: int = 0
    scheme_history: list[SchemeKind] = field(default_factory=list)
    error_weights: list[int] = field(default_factory=list)

    # Transmitter cache of the last fresh CE round
    prev_error: Optional[ErrorVector] = None
    prev_error_weight: int = 0
    cached_codeword: Optional[np.ndarray] = None
    cached_decision: Optional[SchemeDecision] = None

    # Receiver side
    combine_buffers: dict[str, SoftBlock] = field(default_factory=dict)
    ce_bases: dict[str, np.ndarray] = field(default_factory=dict)
    last_ce_key: Optional[str] = None

    @classmethod
    def start(cls, message: np.ndarray, max_rounds: int, n: int) -> "SessionState":
        message = np.asarray(message, dtype=np.uint8)
        return cls(
            max_rounds=max_rounds,
            message=message,
            estimate=np.zeros_like(message),
            n=n,
        )

    @property
    def k(self) -> int:
        return int(self.message.shape[0])

    @property
    def succeeded(self) -> bool:
        return self.round > 0 and np.array_equal(self.message, self.estimate)

    @property
    def finished(self) -> bool:
        return self.succeeded or self.round >= self.max_rounds

    def current_error(self) -> ErrorVector:
        return ErrorVector.between(self.message, self.estimate)

    def begin_round(self, kind: SchemeKind) -> None:
        if self.finished:
            raise ProtocolError(
                f"No round left: succeeded={self.succeeded}, round={self.round}/{self.max_rounds}"
            )
        self.round += 1
        self.channel_uses += self.n
        self.scheme_history.append(kind)

    def feedback(self) -> int:
        """Deliver the estimate to the transmitter; returns the new error weight."""
        weight = self.current_error().weight
        self.error_weights.append(weight)
        return weight

    def to_record(self, trial_index: int) -> TrialRecord:
        return TrialRecord(
            trial_index=trial_index,
            success=self.succeeded,
            rounds_used=self.round,
            channel_uses=self.channel_uses,
            scheme_history=[kind.value for kind in self.scheme_history],
            error_weights=list(self.error_weights),
        )


def draw_message(seed: int, trial_index: int, k: int) -> np.ndarray:
    """Uniform K-bit message of a trial (stream 0 of the trial)."""
    return trial_stream(seed, trial_index, 0).integers(0, 2, size=k, dtype=np.uint8)


def select_scheme(state: SessionState, tau_star: float) -> SchemeDecision:
    """Sparsity check and fallback rule for the next round (before MAC encoding)."""
    weight = state.current_error().weight
    if state.round == 0:
        # The first round always carries the message
        basis = DecisionBasis(error_weight=weight, tau_star=tau_star, below_threshold=False)
        return SchemeDecision(kind=SchemeKind.HARQ, basis=basis, buffer_key=HARQ_BUFFER)

    below = weight < state.k * tau_star
    previous_ce = state.scheme_history[-1] in CE_KINDS
    if previous_ce and state.cached_decision is not None and weight > state.prev_error_weight:
        basis = DecisionBasis(
            error_weight=weight, tau_star=tau_star, below_threshold=below, fallback_triggered=True
        )
        cached = state.cached_decision
        return SchemeDecision(
            kind=SchemeKind.CE_FALLBACK,
            basis=basis,
            buffer_key=cached.buffer_key,
            chosen_rate=cached.chosen_rate,
            payload_bits=cached.payload_bits,
        )

    basis = DecisionBasis(error_weight=weight, tau_star=tau_star, below_threshold=below)
    if not below:
        return SchemeDecision(kind=SchemeKind.HARQ, basis=basis, buffer_key=HARQ_BUFFER)
    return SchemeDecision(
        kind=SchemeKind.CE_FRESH, basis=basis, buffer_key=f"ce:{state.round + 1}"
    )


def transmitter_step(
    state: SessionState,
    tau_star: float,
    phy: FecScheme,
    family: RateFamily,
    in_band: bool = True,
) -> tuple[np.ndarray, SchemeDecision, SessionState]:
    """Choose the scheme for the next round and build its N-bit codeword.

    Raises:
        ProtocolError: If the session already succeeded or used all rounds
    """
    if state.finished:
        raise ProtocolError(
            f"transmitter_step after the session ended (round {state.round}/{state.max_rounds})"
        )

    decision = select_scheme(state, tau_star)

    if decision.kind == SchemeKind.CE_FALLBACK:
        codeword = state.cached_codeword
    elif decision.kind == SchemeKind.CE_FRESH:
        error = state.current_error()
        try:
            frame = mac_encode(ac_encode(error), state.k, family, in_band=in_band)
        except (NotCompressibleEnough, PayloadError) as e:
            logger.debug(f"Round {state.round + 1}: {e}; sending the message instead")
            basis = DecisionBasis(
                error_weight=decision.basis.error_weight,
                tau_star=tau_star,
                below_threshold=True,
                not_compressible=True,
            )
            decision = SchemeDecision(kind=SchemeKind.HARQ, basis=basis, buffer_key=HARQ_BUFFER)
            codeword = phy_encode(state.message, phy)
        else:
            decision = SchemeDecision(
                kind=SchemeKind.CE_FRESH,
                basis=decision.basis,
                buffer_key=decision.buffer_key,
                chosen_rate=frame.chosen_rate,
                payload_bits=frame.payload_bits,
            )
            codeword = phy_encode(frame.bits, phy)
            state.prev_error = error
            state.prev_error_weight = error.weight
            state.cached_codeword = codeword
            state.cached_decision = decision
    else:
        codeword = phy_encode(state.message, phy)

    state.begin_round(decision.kind)
    logger.debug(
        f"Round {state.round}: {decision.kind.value} |e|={decision.basis.error_weight} "
        f"tau*={tau_star:.4f} rate={decision.chosen_rate}"
    )
    return codeword, decision, state


def _decode_compressed_error(
    block: SoftBlock,
    decision: SchemeDecision,
    phy: FecScheme,
    family: RateFamily,
    channel: ChannelConfig,
    in_band: bool,
) -> ErrorVector:
    decoded = phy_decode(block, phy, channel)
    # LDPC hands over posterior LLRs so repeated MAC bits combine softly
    mac_input = decoded.llrs if phy.kind == FecKind.LDPC else decoded.bits
    payload = mac_decode(
        mac_input,
        family,
        phy.k,
        chosen_rate=decision.chosen_rate,
        payload_bits=decision.payload_bits,
        in_band=in_band,
    )
    return ac_decode(payload, phy.k)


def receiver_step(
    block: SoftBlock,
    decision: SchemeDecision,
    state: SessionState,
    phy: FecScheme,
    family: RateFamily,
    channel: ChannelConfig,
    in_band: bool = True,
) -> np.ndarray:
    """Combine, decode and update the message estimate for the round just received."""
    if decision.kind == SchemeKind.HARQ:
        previous = state.combine_buffers.get(HARQ_BUFFER)
        combined = block if previous is None else chase_combine(previous, block)
        state.combine_buffers[HARQ_BUFFER] = combined
        state.estimate = phy_decode(combined, phy, channel).bits.astype(np.uint8)
        return state.estimate

    if decision.kind == SchemeKind.CE_FRESH:
        key = decision.buffer_key
        state.combine_buffers[key] = block
        state.ce_bases[key] = state.estimate.copy()
        state.last_ce_key = key
        combined = block
    else:
        key = state.last_ce_key
        if key is None:
            raise ProtocolError("Fallback round received before any compressed-error round")
        combined = chase_combine(state.combine_buffers[key], block)
        state.combine_buffers[key] = combined

    error = _decode_compressed_error(combined, decision, phy, family, channel, in_band)
    state.estimate = error.apply(state.ce_bases[key])
    return state.estimate


def run_session(u: np.ndarray, cfg: SessionConfig, trial_index: int) -> TrialRecord:
    """CE-HARQ session: runs until the estimate is exact or D rounds are used."""
    state = SessionState.start(u, cfg.max_rounds, cfg.n)
    while not state.finished:
        tau = cfg.threshold(state.round + 1)
        codeword, decision, state = transmitter_step(
            state, tau, cfg.phy, cfg.family, cfg.mac_in_band
        )
        block = transmit(modulate_bpsk(codeword), cfg.channel, trial_index, state.round)
        receiver_step(block, decision, state, cfg.phy, cfg.family, cfg.channel, cfg.mac_in_band)
        state.feedback()
    return state.to_record(trial_index)


def run_session_harq(u: np.ndarray, cfg: SessionConfig, trial_index: int) -> TrialRecord:
    """Chase-combining HARQ: every round repeats the message codeword."""
    u = np.asarray(u, dtype=np.uint8)
    symbols = modulate_bpsk(phy_encode(u, cfg.phy))
    combined: Optional[SoftBlock] = None
    weights: list[int] = []

    for round_index in range(1, cfg.max_rounds + 1):
        block = transmit(symbols, cfg.channel, trial_index, round_index)
        combined = block if combined is None else chase_combine(combined, block)
        estimate = phy_decode(combined, cfg.phy, cfg.channel).bits
        weights.append(int(np.count_nonzero(u ^ estimate)))
        if weights[-1] == 0:
            break

    rounds = len(weights)
    return TrialRecord(
        trial_index=trial_index,
        success=weights[-1] == 0,
        rounds_used=rounds,
        channel_uses=rounds * cfg.n,
        scheme_history=[SchemeKind.HARQ.value] * rounds,
        error_weights=weights,
    )


def run_session_aic_ac(u: np.ndarray, cfg: SessionConfig, trial_index: int) -> TrialRecord:
    """AIC-AC: every retransmission carries the compressed error, zero padded, no MAC code.

    A compressed error longer than K bits cannot be sent; that round repeats the message
    instead and is recorded as HARQ.
    """
    state = SessionState.start(u, cfg.max_rounds, cfg.n)
    k = state.k
    while not state.finished:
        kind = SchemeKind.HARQ
        frame = None
        if state.round > 0:
            try:
                bits = ac_encode(state.current_error()).to_bits()
            except PayloadError:
                bits = None
            if bits is not None and bits.shape[0] <= k:
                kind = SchemeKind.CE_FRESH
                frame = np.concatenate([bits, np.zeros(k - bits.shape[0], dtype=np.uint8)])
            else:
                logger.debug(f"Round {state.round + 1}: compressed error exceeds K, sending u")

        codeword = phy_encode(state.message if frame is None else frame, cfg.phy)
        state.begin_round(kind)
        block = transmit(modulate_bpsk(codeword), cfg.channel, trial_index, state.round)

        if kind == SchemeKind.HARQ:
            previous = state.combine_buffers.get(HARQ_BUFFER)
            combined = block if previous is None else chase_combine(previous, block)
            state.combine_buffers[HARQ_BUFFER] = combined
            state.estimate = phy_decode(combined, cfg.phy, cfg.channel).bits.astype(np.uint8)
        else:
            decoded = phy_decode(block, cfg.phy, cfg.channel).bits
            error = ac_decode(CompressedPayload.from_bits(decoded), k)
            state.estimate = error.apply(state.estimate)
        state.feedback()
    return state.to_record(trial_index)


SESSION_RUNNERS = {
    ProtocolKind.CE_HARQ: run_session,
    ProtocolKind.HARQ: run_session_harq,
    ProtocolKind.AIC_AC: run_session_aic_ac,
}


@dataclass(frozen=True)
class TrialChunk:
    """Contiguous trial indices of one protocol at one operating point."""

    protocol: ProtocolKind
    session: SessionConfig
    seed: int
    begin: int
    end: int


def run_chunk(chunk: TrialChunk) -> list[TrialRecord]:
    """Run trials [begin, end); top-level so worker processes can unpickle it."""
    runner = SESSION_RUNNERS[chunk.protocol]
    records = []
    for trial_index in range(chunk.begin, chunk.end):
        u = draw_message(chunk.seed, trial_index, chunk.session.k)
        records.append(runner(u, chunk.session, trial_index))
    return records

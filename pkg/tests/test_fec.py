"""Tests for PHY schemes and the variable-rate MAC layer."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceharq.config import ConfigError
from ceharq.services.channel import ChannelConfig, SoftBlock, modulate_bpsk
from ceharq.services.entropy import HEADER_BITS, CompressedPayload
from ceharq.services.fec import (
    PREFIX_BITS,
    FecConfigError,
    FecKind,
    FecScheme,
    MacRate,
    NotCompressibleEnough,
    RateFamily,
    deinterleave,
    interleave,
    ldpc_decode_minsum,
    ldpc_encode,
    mac_decode,
    mac_encode,
    phy_decode,
    phy_encode,
    viterbi_decode_hard,
)


def payload_of(total_bits: int, rng=None) -> CompressedPayload:
    """Payload whose L_total (header included) is total_bits."""
    rng = rng or np.random.default_rng(total_bits)
    return CompressedPayload(body=rng.integers(0, 2, total_bits - HEADER_BITS, dtype=np.uint8))


class TestFecScheme:
    def test_geometry(self, uncoded, conv, ldpc):
        """N follows from K and the code."""
        assert uncoded.n == 200 and uncoded.rate == 1
        assert conv.n == (200 + 6) * 2
        assert conv.tail_bits == 12
        assert ldpc.n == 320 and ldpc.rate == Fraction(3, 4)

    def test_missing_ldpc_matrix(self):
        """No shipped matrix for an arbitrary K."""
        with pytest.raises(FecConfigError):
            FecScheme(kind=FecKind.LDPC, k=100).n

    def test_config_error_family(self):
        """FEC configuration errors are configuration errors."""
        assert issubclass(FecConfigError, ConfigError)

    def test_length_mismatch(self, conv):
        """Encoding checks the message length."""
        with pytest.raises(FecConfigError):
            phy_encode(np.zeros(10, dtype=np.uint8), conv)


class TestPhy:
    def test_uncoded_passthrough(self, uncoded, rng):
        """Uncoded output equals input."""
        bits = rng.integers(0, 2, 200, dtype=np.uint8)
        np.testing.assert_array_equal(phy_encode(bits, uncoded), bits)

    def test_zero_in_zero_out(self, uncoded, conv, ldpc):
        """Linear codes map zero to zero."""
        for scheme in (uncoded, conv, ldpc):
            assert not phy_encode(np.zeros(scheme.k, dtype=np.uint8), scheme).any()

    def test_conv_first_output(self):
        """(133, 171) impulse response starts with 11."""
        scheme = FecScheme(kind=FecKind.CONVOLUTIONAL, k=7)
        coded = phy_encode(np.array([1, 0, 0, 0, 0, 0, 0], dtype=np.uint8), scheme)
        np.testing.assert_array_equal(coded[:2], [1, 1])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed):
        """encode(a XOR b) = encode(a) XOR encode(b)."""
        rng = np.random.default_rng(seed)
        for scheme in (
            FecScheme(kind=FecKind.CONVOLUTIONAL, k=200),
            FecScheme(kind=FecKind.LDPC, k=240),
        ):
            a = rng.integers(0, 2, scheme.k, dtype=np.uint8)
            b = rng.integers(0, 2, scheme.k, dtype=np.uint8)
            np.testing.assert_array_equal(
                phy_encode(a ^ b, scheme), phy_encode(a, scheme) ^ phy_encode(b, scheme)
            )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_clean_channel_identity(self, seed):
        """decode(encode(m)) = m for every scheme."""
        rng = np.random.default_rng(seed)
        channel = ChannelConfig(snr_db=float("inf"))
        for scheme in (
            FecScheme(kind=FecKind.UNCODED, k=200),
            FecScheme(kind=FecKind.CONVOLUTIONAL, k=200),
            FecScheme(kind=FecKind.LDPC, k=240),
        ):
            bits = rng.integers(0, 2, scheme.k, dtype=np.uint8)
            block = SoftBlock(modulate_bpsk(phy_encode(bits, scheme)))
            np.testing.assert_array_equal(phy_decode(block, scheme, channel).bits, bits)

    def test_viterbi_needs_conv(self, uncoded):
        """Viterbi decoding rejects other schemes."""
        with pytest.raises(FecConfigError):
            viterbi_decode_hard(np.zeros(200, dtype=np.uint8), uncoded)

    def test_viterbi_single_flip(self):
        """One flipped bit of a K=100 codeword is always corrected."""
        scheme = FecScheme(kind=FecKind.CONVOLUTIONAL, k=100)
        bits = np.random.default_rng(1).integers(0, 2, 100, dtype=np.uint8)
        codeword = phy_encode(bits, scheme)
        for position in range(0, scheme.n, 3):
            received = codeword.copy()
            received[position] ^= 1
            np.testing.assert_array_equal(viterbi_decode_hard(received, scheme), bits)

    def test_ldpc_roundtrip(self, ldpc, rng):
        """LDPC encode then min-sum on noiseless LLRs."""
        bits = rng.integers(0, 2, 240, dtype=np.uint8)
        llrs = modulate_bpsk(ldpc_encode(bits, ldpc)) * 50.0
        decoded, converged = ldpc_decode_minsum(llrs, ldpc)
        np.testing.assert_array_equal(decoded, bits)
        assert converged

    def test_ldpc_posteriors_for_mac(self, ldpc, rng):
        """LDPC decoding hands soft values to the MAC layer."""
        bits = rng.integers(0, 2, 240, dtype=np.uint8)
        block = SoftBlock(modulate_bpsk(phy_encode(bits, ldpc)))
        decoded = phy_decode(block, ldpc, ChannelConfig(snr_db=3.0))
        assert decoded.llrs is not None and decoded.llrs.shape == (240,)
        np.testing.assert_array_equal((decoded.llrs < 0).astype(np.uint8), bits)


class TestRateFamily:
    def test_default_family(self, family):
        """1/2 down to 1/12, strictly decreasing."""
        assert family.rates == [Fraction(1, d) for d in (2, 3, 4, 6, 8, 12)]

    def test_empty(self):
        """An empty family is invalid."""
        with pytest.raises(FecConfigError):
            RateFamily(members=())

    def test_duplicates_collapse(self):
        """Denominators are sorted and deduplicated."""
        assert RateFamily.from_denominators([4, 2, 4]).rates == [Fraction(1, 2), Fraction(1, 4)]

    def test_invalid_denominator(self):
        """Rate 1 is not a MAC code."""
        with pytest.raises(FecConfigError):
            MacRate.from_denominator(1)

    def test_selects_lowest_fitting_rate(self, family):
        """Lowest rate whose capacity holds the frame."""
        assert family.rates[family.select(66, 800)] == Fraction(1, 12)
        assert family.rates[family.select(400, 800)] == Fraction(1, 2)
        assert family.rates[family.select(134, 800)] == Fraction(1, 4)

    def test_not_compressible(self, family):
        """Frames larger than K/2 fail."""
        with pytest.raises(NotCompressibleEnough):
            family.select(401, 800)


class TestMacEncode:
    def test_lowest_rate_with_filler(self, family):
        """L_total = 66 at K = 800 picks 1/12 with 8 filler bits."""
        frame = mac_encode(payload_of(66), 800, family, in_band=False)
        assert frame.chosen_rate == Fraction(1, 12)
        assert frame.filler_bits == 8
        assert frame.padding_bits == 0
        assert frame.bits.shape == (800,)

    def test_exact_fit(self, family):
        """L_total = 400 at K = 800 is rate 1/2 with no filler."""
        frame = mac_encode(payload_of(400), 800, family, in_band=False)
        assert frame.chosen_rate == Fraction(1, 2)
        assert frame.filler_bits == 0

    def test_too_long(self, family):
        """L_total = 500 at K = 800 cannot be sent."""
        with pytest.raises(NotCompressibleEnough):
            mac_encode(payload_of(500), 800, family, in_band=False)

    def test_in_band_prefix_counts(self, family):
        """The in-band prefix shares the frame with the payload."""
        frame = mac_encode(payload_of(66), 800, family, in_band=True)
        assert frame.chosen_rate == Fraction(1, 8)
        assert frame.padding_bits == 800 // 8 - 66 - PREFIX_BITS

    def test_effective_rate_accounting(self, family, conv):
        """Chosen MAC rate times PHY rate bounds L_total / N from above."""
        frame = mac_encode(payload_of(50), conv.k, family, in_band=False)
        effective = frame.chosen_rate * conv.rate
        slack = (frame.filler_bits + frame.padding_bits * frame.chosen_rate.denominator)
        assert effective >= Fraction(frame.payload_bits, conv.n) - Fraction(slack, conv.n)


class TestInterleaver:
    @pytest.mark.parametrize("k", [200, 240, 800])
    def test_permutation(self, k):
        """The interleaver moves every position exactly once and deinterleave undoes it."""
        positions = np.arange(k)
        shuffled = interleave(positions)
        assert sorted(shuffled.tolist()) == positions.tolist()
        assert not np.array_equal(shuffled, positions)
        np.testing.assert_array_equal(deinterleave(shuffled), positions)

    def test_fixed_per_length(self):
        """Transmitter and receiver derive the same permutation independently."""
        np.testing.assert_array_equal(interleave(np.arange(200)), interleave(np.arange(200)))

    def test_soft_values(self, rng):
        values = rng.normal(size=400)
        np.testing.assert_array_equal(deinterleave(interleave(values)), values)

    def test_repeated_copies_separated(self, family):
        """Copies of one mother-code bit no longer sit next to each other on the channel."""
        k = 800
        member = family.members[-1]
        capacity = member.capacity(k)
        frame = np.zeros(capacity, dtype=np.uint8)
        frame[0] = 1
        bits = member.encode_frame(frame, k)
        ones = np.flatnonzero(bits)
        # without interleaving an impulse only touches the first 7 trellis steps and the filler
        n_coded = capacity * member.denominator
        window = member.mother.constraint_length * member.denominator
        assert np.any((ones >= window) & (ones < n_coded))


class TestMacDecode:
    @pytest.mark.parametrize("in_band", [False, True])
    def test_clean_roundtrip(self, family, in_band):
        """Every payload length survives a clean MAC roundtrip."""
        k = 200
        limit = k // 2 - (PREFIX_BITS if in_band else 0)
        for total in range(HEADER_BITS, limit + 1, 7):
            payload = payload_of(total)
            frame = mac_encode(payload, k, family, in_band=in_band)
            decoded = mac_decode(
                frame.bits,
                family,
                k,
                chosen_rate=frame.chosen_rate,
                payload_bits=frame.payload_bits,
                in_band=in_band,
            )
            np.testing.assert_array_equal(decoded.body, payload.body)

    def test_single_flip_anywhere(self, family):
        """One flipped coded bit is repaired by folding and Viterbi."""
        k = 800
        payload = payload_of(60)
        frame = mac_encode(payload, k, family, in_band=True)
        for position in range(0, k, 37):
            received = frame.bits.copy()
            received[position] ^= 1
            decoded = mac_decode(received, family, k)
            np.testing.assert_array_equal(decoded.body, payload.body)

    def test_contiguous_burst_is_spread(self, family):
        """A 48-bit burst, like a Viterbi error event on the PHY, still decodes at rate 1/12."""
        k = 800
        payload = payload_of(66)
        frame = mac_encode(payload, k, family, in_band=False)
        assert frame.chosen_rate == Fraction(1, 12)
        received = frame.bits.copy()
        received[100:148] ^= 1
        decoded = mac_decode(
            received,
            family,
            k,
            chosen_rate=frame.chosen_rate,
            payload_bits=frame.payload_bits,
            in_band=False,
        )
        np.testing.assert_array_equal(decoded.body, payload.body)

    def test_soft_input(self, family):
        """Soft values (positive means 0) decode like hard bits."""
        k = 400
        payload = payload_of(70)
        frame = mac_encode(payload, k, family)
        decoded = mac_decode(modulate_bpsk(frame.bits) * 3.0, family, k)
        np.testing.assert_array_equal(decoded.body, payload.body)

    def test_wrong_length_still_decodes(self, family):
        """A wrong L_total yields some payload rather than an error."""
        k = 400
        frame = mac_encode(payload_of(70), k, family, in_band=False)
        decoded = mac_decode(
            frame.bits, family, k, chosen_rate=frame.chosen_rate, payload_bits=40, in_band=False
        )
        assert isinstance(decoded, CompressedPayload)

    def test_genie_needs_metadata(self, family):
        """Genie decoding requires rate and length."""
        with pytest.raises(FecConfigError):
            mac_decode(np.zeros(200, dtype=np.uint8), family, 200, in_band=False)

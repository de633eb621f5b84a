"""Tests for QC-LDPC construction, encoding and min-sum decoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceharq.services.channel import ChannelConfig, demodulate_llr, modulate_bpsk, transmit
from ceharq.services.ldpc import (
    DATA_DIR,
    AlistFormatError,
    LdpcCode,
    build_qc_matrix,
    load_alist,
    r34_exponents,
    write_alist,
)


@pytest.fixture(scope="module")
def code():
    return LdpcCode.from_alist(DATA_DIR / "ldpc_r34_z20.alist")


class TestMatrix:
    def test_lifting(self):
        """Each exponent lifts to a shifted identity."""
        h = build_qc_matrix([[1, -1], [0, 2]], 3)
        assert h.shape == (6, 6)
        np.testing.assert_array_equal(h[:3, :3], np.roll(np.eye(3, dtype=np.uint8), 1, axis=1))
        assert not h[:3, 3:].any()

    def test_shipped_matrices_match_construction(self):
        """Shipped alist files are the lifted rate-3/4 base graph."""
        for z in (20, 80):
            h = load_alist(DATA_DIR / f"ldpc_r34_z{z}.alist")
            np.testing.assert_array_equal(h, build_qc_matrix(r34_exponents(z), z))

    def test_alist_roundtrip(self, temp_dir):
        """write_alist and load_alist agree."""
        h = build_qc_matrix(r34_exponents(5), 5)
        path = temp_dir / "small.alist"
        write_alist(h, path)
        np.testing.assert_array_equal(load_alist(path), h)

    def test_missing_file(self, temp_dir):
        """A missing matrix file is a format error."""
        with pytest.raises(AlistFormatError):
            load_alist(temp_dir / "missing.alist")

    def test_malformed_file(self, temp_dir):
        """Truncated alist content is rejected."""
        path = temp_dir / "bad.alist"
        path.write_text("320 80\n4 15\n4 4\n")
        with pytest.raises(AlistFormatError):
            load_alist(path)


class TestEncoder:
    def test_geometry(self, code):
        """Z = 20 gives K = 240, N = 320."""
        assert (code.k, code.n) == (240, 320)
        assert code.rate == pytest.approx(0.75)

    def test_all_zero(self, code):
        """Zero message, zero codeword."""
        assert not code.encode(np.zeros(240, dtype=np.uint8)).any()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_parity_checks_hold(self, seed):
        """Every codeword satisfies H c = 0 and is systematic."""
        code = LdpcCode.from_alist(DATA_DIR / "ldpc_r34_z20.alist")
        bits = np.random.default_rng(seed).integers(0, 2, 240, dtype=np.uint8)
        codeword = code.encode(bits)
        assert not code.syndrome(codeword).any()
        np.testing.assert_array_equal(codeword[code.info_positions], bits)

    def test_wrong_length(self, code):
        """Messages must have K bits."""
        with pytest.raises(ValueError):
            code.encode(np.zeros(10, dtype=np.uint8))


class TestMinSum:
    def test_noiseless(self, code, rng):
        """Large correct LLRs decode in one iteration."""
        bits = rng.integers(0, 2, 240, dtype=np.uint8)
        llrs = modulate_bpsk(code.encode(bits)) * 1e3
        result = code.decode(llrs)
        np.testing.assert_array_equal(result.bits, bits)
        assert result.converged
        assert result.iterations == 1

    def test_zero_llrs(self, code):
        """No information decodes to all zeros, which satisfies every check."""
        result = code.decode(np.zeros(320))
        assert not result.bits.any()
        assert result.converged

    def test_corrects_light_noise(self, code, rng):
        """A handful of weakly flipped LLRs are repaired."""
        bits = rng.integers(0, 2, 240, dtype=np.uint8)
        llrs = modulate_bpsk(code.encode(bits)) * 4.0
        flipped = rng.choice(320, size=2, replace=False)
        llrs[flipped] = -0.5 * llrs[flipped]
        result = code.decode(llrs)
        np.testing.assert_array_equal(result.bits, bits)

    def test_waterfall_monotone(self, code):
        """BLER decreases over a 2 dB sweep."""
        messages = np.random.default_rng(0)
        blers = []
        for snr in (3.0, 4.0, 5.0):
            channel = ChannelConfig(snr_db=snr, seed=5)
            errors = 0
            for trial in range(300):
                bits = messages.integers(0, 2, 240, dtype=np.uint8)
                block = transmit(modulate_bpsk(code.encode(bits)), channel, trial)
                result = code.decode(demodulate_llr(block, channel))
                errors += int(not np.array_equal(result.bits, bits))
            blers.append(errors / 300)
        assert blers[0] >= blers[1] >= blers[2]
        assert blers[0] > blers[2]

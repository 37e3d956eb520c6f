"""
Tests for RoPE rotations, frequency construction, the pulse check and the InP decomposition
"""
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from services.rope_core import (
    FrequencySequence,
    active_frequencies,
    apply_rope,
    classic_frequencies,
    compose_frequencies,
    cosine_sum,
    frequency_bands,
    inp_at_lag,
    inp_decompose,
    pulse_check,
    pulse_frequencies,
    relative_logit,
    rotate_rows,
    rotation_matrix,
    semantic_frequencies,
)
from utils.error_handlers import AliasingError, InvalidArgumentError

finite = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)
vectors16 = arrays(np.float64, 16, elements=finite)
positions = st.integers(min_value=-500, max_value=500)

class TestApplyRope:
    """Rotations by position"""

    def test_first_pair_quarter_turn(self):
        freqs = FrequencySequence([np.pi / 2], 1)
        assert np.allclose(apply_rope([1.0, 0.0], 1, freqs), [0.0, 1.0], atol=1e-15)

    def test_position_zero_is_identity(self, classic16):
        v = np.arange(16, dtype=float)
        assert np.array_equal(apply_rope(v, 0, classic16), v)

    @given(vectors16, positions)
    def test_norm_preserved(self, v, pos):
        freqs = classic_frequencies(16)
        rotated = apply_rope(v, pos, freqs)
        norm = np.linalg.norm(v)
        assert abs(np.linalg.norm(rotated) - norm) <= 1e-12 * max(norm, 1.0)

    @given(vectors16, vectors16, positions, positions, st.integers(min_value=-200, max_value=200))
    def test_logit_depends_on_offset_only(self, q, k, i, j, shift):
        freqs = classic_frequencies(16)
        base = np.dot(apply_rope(q, i, freqs), apply_rope(k, j, freqs))
        shifted = np.dot(apply_rope(q, i + shift, freqs), apply_rope(k, j + shift, freqs))
        scale = max(1.0, np.linalg.norm(q) * np.linalg.norm(k))
        assert abs(base - shifted) <= 1e-9 * scale

    @given(vectors16, vectors16, positions, positions)
    def test_relative_logit_matches_rotated_product(self, q, k, i, j):
        freqs = classic_frequencies(16)
        direct = np.dot(apply_rope(q, i, freqs), apply_rope(k, j, freqs))
        scale = max(1.0, np.linalg.norm(q) * np.linalg.norm(k))
        assert abs(relative_logit(q, k, i, j, freqs) - direct) <= 1e-9 * scale

    def test_odd_dimension_rejected(self, classic16):
        with pytest.raises(InvalidArgumentError):
            apply_rope(np.ones(15), 3, classic16)

    def test_rotation_matrix_is_orthogonal(self, classic16):
        R = rotation_matrix(7, classic16)
        assert np.allclose(R @ R.T, np.eye(16), atol=1e-13)
        v = np.linspace(-1, 1, 16)
        assert np.allclose(R @ v, apply_rope(v, 7, classic16), atol=1e-13)

    def test_rotate_rows_uses_row_positions(self, classic16, rng):
        X = rng.standard_normal((5, 16))
        pos = np.arange(1, 6)
        rotated = rotate_rows(X, pos, classic16)
        for r in range(5):
            assert np.allclose(rotated[r], apply_rope(X[r], pos[r], classic16), atol=1e-13)

class TestFrequencies:
    """Classic, pulse and semantic frequency builders"""

    def test_classic_strictly_decreasing(self):
        values = classic_frequencies(64).values
        assert values.size == 32
        assert np.all(np.diff(values) < 0)
        assert values[0] == pytest.approx(10000.0 ** (-2 / 64))

    def test_classic_rejects_odd_width(self):
        with pytest.raises(InvalidArgumentError):
            classic_frequencies(15)

    def test_pulse_values(self):
        freqs = pulse_frequencies(3, 3)
        assert np.allclose(freqs.values, 2 * np.pi * np.array([3, 2, 1]) / 7)
        assert freqs.cone_band_len == 3

    def test_pulse_aliasing_rejected(self):
        with pytest.raises(AliasingError):
            pulse_frequencies(4, 5)

    def test_semantic_band_below_horizon_power(self):
        values = semantic_frequencies(3, 129, alpha=2.0)
        assert np.all(values <= 129.0 ** -2)
        assert np.all(np.diff(values) < 0)

    def test_compose_marks_cone_band(self):
        freqs = compose_frequencies([1.0, 0.5], [0.01])
        assert freqs.cone_band_len == 2
        assert np.array_equal(freqs.semantic_band, [0.01])
        assert freqs.doubled().dim == 12

    def test_values_are_read_only(self, classic16):
        with pytest.raises(ValueError):
            classic16.values[0] = 0.0

class TestPulseCheck:
    """Pulse condition over the prompt horizon"""

    @pytest.mark.parametrize("m", range(2, 201))
    def test_pulse_frequencies_pass(self, m):
        result = pulse_check(pulse_frequencies(m, m), m, tolerance=1e-9)
        assert result.passed
        assert result.eps_fn <= 1e-9
        assert result.c1 == pytest.approx(m + 0.5, abs=1e-9)
        assert result.c2 == pytest.approx(-0.5, abs=1e-9)

    def test_acceptance_band_passes(self):
        result = pulse_check(pulse_frequencies(130, 129), 129, tolerance=1e-9)
        assert result.passed

    def test_classic_fails(self):
        result = pulse_check(classic_frequencies(32, 10000.0), 100, tolerance=1e-9)
        assert not result.passed
        assert result.eps_fn > 0.1

    def test_horizon_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            pulse_check(pulse_frequencies(3, 3), 0, tolerance=1e-9)

    def test_cosine_sum_matches_dirichlet_identity(self):
        values = pulse_frequencies(5, 5).values
        f = cosine_sum(values, np.arange(0, 6))
        assert f[0] == pytest.approx(5.0)
        assert np.allclose(f[1:], -0.5, atol=1e-12)

class TestInPDecomposition:
    """Per-frequency split of attention logits"""

    def test_contributions_sum_to_logit(self, rng):
        freqs = classic_frequencies(16)
        for _ in range(1000):
            q, k = rng.standard_normal(16), rng.standard_normal(16)
            i, j = rng.integers(-300, 300, size=2)
            decomposition = inp_decompose(q, k, int(i), int(j), freqs)
            direct = np.dot(apply_rope(q, int(i), freqs), apply_rope(k, int(j), freqs))
            assert abs(decomposition.total - direct) <= 1e-10 * max(1.0, abs(direct))

    def test_cosine_form(self, rng):
        freqs = classic_frequencies(16)
        q, k = rng.standard_normal(16), rng.standard_normal(16)
        decomposition = inp_decompose(q, k, 9, 4, freqs)
        assert decomposition.offset == 5
        assert np.allclose(decomposition.reconstruct(freqs), decomposition.contributions, atol=1e-12)
        assert np.all(decomposition.phases > -np.pi)
        assert np.all(decomposition.phases <= np.pi)

    def test_inp_at_lag_matches_pairwise(self, rng, classic16):
        Q = rng.standard_normal((6, 16))
        K = rng.standard_normal((6, 16))
        per_pair = inp_at_lag(Q, K, 2, classic16)
        assert per_pair.shape == (4, 8)
        expected = inp_decompose(Q[3], K[1], 3, 1, classic16).contributions
        assert np.allclose(per_pair[1], expected, atol=1e-12)

    def test_lag_out_of_range(self, rng, classic16):
        Q = rng.standard_normal((4, 16))
        with pytest.raises(InvalidArgumentError):
            inp_at_lag(Q, Q, 4, classic16)

class TestBands:
    """Frequency bands and active-frequency selection"""

    def test_sixty_four_split(self):
        bands = frequency_bands(classic_frequencies(128), 3)
        assert [len(band) for band in bands] == [21, 21, 22]
        assert bands[0][0] == 0 and bands[-1][-1] == 63

    def test_active_frequencies_single_block(self, classic16):
        Q = np.zeros((5, 16))
        K = np.zeros((5, 16))
        Q[:, 2] = 1.0
        K[:, 2] = 1.0
        assert active_frequencies(Q, K, [1], classic16) == [1]

    def test_active_frequencies_all_zero(self, classic16):
        Q = np.zeros((5, 16))
        assert active_frequencies(Q, Q, [0, 1], classic16) == []

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from strobecap.errors import DegenerateColorError, QuantizationError
from strobecap.strobe import (build_dictionary, design_circle_sequence, min_pairwise_cosine_distance,
                              quantize_pwm, scalar_multiple_pairs, usable_colors)


def circle_oracle(n, N):
    return tuple((1 + math.sin(2 * math.pi * n / N + k * 2 * math.pi / 3)) / 2 for k in range(3))


class TestCircleSequence:
    def test_single(self):
        got = design_circle_sequence(1)
        np.testing.assert_allclose(got, [circle_oracle(0, 1)], atol=1e-15)
        np.testing.assert_allclose(got[0], [0.5, 0.9330, 0.0670], atol=1e-4)

    @pytest.mark.parametrize("N", [2, 5, 10, 28])
    def test_matches_oracle(self, N):
        got = design_circle_sequence(N)
        for n in range(N):
            np.testing.assert_allclose(got[n], circle_oracle(n, N), atol=1e-15)

    def test_three_are_cyclic_rotations(self):
        s = design_circle_sequence(3)
        # advancing n by one shifts the phase by 2pi/3, i.e. rotates components
        for n in range(3):
            np.testing.assert_allclose(np.roll(s[n], -1), s[(n + 1) % 3], atol=1e-12)

    @pytest.mark.parametrize("N", [2, 3, 7, 10, 28])
    def test_component_means(self, N):
        np.testing.assert_allclose(design_circle_sequence(N).mean(axis=0), 0.5, atol=1e-12)

    @pytest.mark.parametrize("N", [3, 4, 10, 28, 50])
    def test_points_on_circle(self, N):
        s = design_circle_sequence(N)
        c = s.mean(axis=0)
        r = np.linalg.norm(s - c, axis=1)
        np.testing.assert_allclose(r, r[0], atol=1e-9)
        # planar: the centered points have rank 2
        sv = np.linalg.svd(s - c, compute_uv=False)
        assert sv[2] < 1e-9

    def test_components_in_unit_range(self):
        s = design_circle_sequence(97)
        assert s.min() >= 0 and s.max() <= 1

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            design_circle_sequence(0)


class TestPWM:
    def test_half_rounds_up(self):
        pwm = quantize_pwm([[1.0, 0.5, 0.0]], levels=6)
        np.testing.assert_array_equal(pwm.pulses, [[5, 3, 0]])
        np.testing.assert_allclose(pwm.dequantize(), [[1.0, 0.6, 0.0]])

    def test_census(self):
        assert len(usable_colors(6)) == 175

    def test_census_brute_force(self):
        # independent oracle: count nonzero triples with no smaller collinear triple
        count = 0
        for t in itertools.product(range(6), repeat=3):
            if not any(t):
                continue
            dominated = any(k > 1 and all(v % k == 0 for v in t) and all(v // k < 6 for v in t)
                            for k in range(2, 6))
            count += not dominated
        assert count == 175

    def test_scalar_multiples_flagged(self):
        pwm = quantize_pwm([[0.4, 0.4, 0.4], [0.8, 0.8, 0.8]], levels=6)
        assert scalar_multiple_pairs(pwm.pulses) == [(0, 1)]
        with pytest.raises(QuantizationError):
            quantize_pwm([[0.4, 0.4, 0.4], [0.8, 0.8, 0.8]], levels=6, unique=True)

    def test_half_and_full_are_multiples(self):
        # (0.5, 0.5, 0.5) -> (3, 3, 3) and (1, 1, 1) -> (5, 5, 5) are collinear
        pwm = quantize_pwm([[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]], levels=6)
        assert scalar_multiple_pairs(pwm.pulses) == [(0, 1)]

    def test_zero_triple_rejected(self):
        with pytest.raises(QuantizationError) as e:
            quantize_pwm([[0.5, 0.5, 0.5], [0.05, 0.0, 0.08]], levels=6)
        assert e.value.index == 1

    def test_rejects_bad_levels(self):
        with pytest.raises(ValueError):
            quantize_pwm([[1, 0, 0]], levels=1)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(0, 1)), st.integers(2, 16))
    def test_roundtrip_bound(self, x, levels):
        x[:, 0] = np.maximum(x[:, 0], 0.5)  # keep every triple nonzero after rounding
        pwm = quantize_pwm(x, levels=levels)
        assert np.max(np.abs(pwm.dequantize() - x)) <= 0.5 / (levels - 1) + 1e-12

    def test_durations(self):
        pwm = quantize_pwm([[1.0, 0.5, 0.0]])
        np.testing.assert_allclose(pwm.durations(), [[5 * 16.7e-6, 3 * 16.7e-6, 0.0]])


class TestDictionary:
    def test_single_primary(self):
        d = build_dictionary([[1.0, 0.0, 0.0]], np.eye(3))
        np.testing.assert_array_equal(d.colors, [[1.0, 0.0, 0.0]])
        assert d.gains[0] == 1.0

    def test_normalization(self):
        d = build_dictionary([[1.0, 1.0, 0.0]], np.eye(3))
        np.testing.assert_allclose(d.colors[0], [1 / math.sqrt(2), 1 / math.sqrt(2), 0.0])
        assert d.gains[0] == pytest.approx(math.sqrt(2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_reconstructs_mixture(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.uniform(0, 1, (3, 3)) + np.eye(3)
        ints = rng.uniform(0.05, 1, (5, 3))
        d = build_dictionary(ints, P)
        for n in range(5):
            direct = ints[n, 0] * P[0] + ints[n, 1] * P[1] + ints[n, 2] * P[2]
            np.testing.assert_allclose(d.gains[n] * d.colors[n], direct, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(np.linalg.norm(d.colors, axis=1), 1.0, rtol=1e-12)

    def test_linear_in_primaries(self):
        rng = np.random.default_rng(4)
        P = rng.uniform(0, 1, (3, 3)) + np.eye(3)
        ints = design_circle_sequence(10)
        a, b = build_dictionary(ints, P), build_dictionary(ints, 3.5 * P)
        np.testing.assert_allclose(b.gains, 3.5 * a.gains, rtol=1e-12)
        np.testing.assert_allclose(b.colors, a.colors, rtol=1e-12)

    def test_degenerate_primaries(self):
        P = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1e-9]])
        with pytest.raises(DegenerateColorError):
            build_dictionary([[1, 0, 0]], P)

    def test_zero_mixture(self):
        with pytest.raises(DegenerateColorError):
            build_dictionary([[0.0, 0.0, 0.0]], np.eye(3))


class TestCosineDistance:
    def test_decreasing_in_n(self):
        vals = [min_pairwise_cosine_distance(build_dictionary(design_circle_sequence(n), np.eye(3)))
                for n in range(2, 41)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[0] == max(vals)

    def test_ten_vs_twentyeight(self):
        f = lambda n: min_pairwise_cosine_distance(build_dictionary(design_circle_sequence(n), np.eye(3)))
        assert f(10) > f(28)

    def test_brute_force(self):
        d = build_dictionary(design_circle_sequence(7), np.eye(3))
        best = min(1 - float(np.dot(d.colors[i], d.colors[j])) for i in range(7) for j in range(7) if i != j)
        assert min_pairwise_cosine_distance(d) == pytest.approx(best, abs=1e-15)

    def test_duplicate_is_zero(self):
        d = build_dictionary([[0.2, 0.5, 0.1], [0.4, 1.0, 0.2]], np.eye(3))
        assert min_pairwise_cosine_distance(d) == pytest.approx(0.0, abs=1e-15)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            min_pairwise_cosine_distance(build_dictionary([[1, 0, 0]], np.eye(3)))

"""
Unit tests for the context model, mixture probabilities and rate estimates.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import ndtr

import nn_core as nn
from codec_config import CodingConfig
from codec_errors import InvalidShapeError, SequencingError
from codec_model import CodecModel
from entropy_model import (LITERAL_BITS, MIXTURE_COMPONENTS, P_MIN, S_MIN, MixtureParams,
                           causal_offsets, coding_distribution, coeff_probability,
                           context_features, decode_order, extract_context,
                           mixture_probabilities, rate_estimate, sequential_rate, symbol_bits,
                           window_bounds)
from lifting_transform import SubbandPyramid
from nn_core import Parameter, Tensor
from quantization import quantize_hard, quantize_soft
from range_coder import CDF_TOTAL


def _mixture(means, scales, weights=None) -> MixtureParams:
    means = np.asarray(means, dtype=np.float64)
    weights = np.full(len(means), 1 / len(means)) if weights is None else np.asarray(weights, dtype=np.float64)
    return MixtureParams(weights, means, np.asarray(scales, dtype=np.float64))


class TestContext:
    """Test causal context extraction."""

    @pytest.mark.parametrize("size", [3, 5, 7])
    def test_causal_offset_count(self, size):
        assert len(causal_offsets(size)) == math.ceil(size * size / 2) - 1

    def test_offsets_precede_target(self):
        for dy, dx in causal_offsets(5):
            assert dy < 0 or (dy == 0 and dx < 0)

    def test_feature_count(self):
        assert context_features(5) == 12 + 25 + 1

    def test_first_position_has_empty_context(self, rng):
        band = rng.normal(size=(6, 6))
        window = extract_context(band, (0, 0), None, 2, "LL", 5)
        assert not np.any(window.same_subband)
        assert not np.any(window.reference)

    def test_future_values_are_never_read(self, rng):
        """Changing the target and everything after it leaves the context unchanged."""
        band = rng.normal(size=(8, 8))
        reference = rng.normal(size=(8, 8))
        target = (3, 4)
        before = extract_context(band, target, reference, 1, "HH", 5)
        altered = band.copy()
        altered.reshape(-1)[3 * 8 + 4:] = 1e6
        after = extract_context(altered, target, reference, 1, "HH", 5)
        np.testing.assert_array_equal(before.same_subband, after.same_subband)
        np.testing.assert_array_equal(before.reference, after.reference)

    def test_neighbour_values(self):
        band = np.arange(16.0).reshape(4, 4)
        window = extract_context(band, (1, 1), None, 1, "LL", 3)
        np.testing.assert_array_equal(window.same_subband, [0, 1, 2, 4])

    def test_missing_reference_raises(self):
        with pytest.raises(SequencingError, match="not reconstructed"):
            extract_context(np.zeros((4, 4)), (0, 0), None, 1, "HL", 5)

    def test_reference_shape_mismatch_raises(self):
        with pytest.raises(SequencingError):
            extract_context(np.zeros((4, 4)), (0, 0), np.zeros((2, 2)), 1, "LH", 5)


class TestMixtureProbability:
    """Test discretised Gaussian mixture probabilities."""

    def test_unit_gaussian_at_zero(self):
        assert coeff_probability(0, _mixture([0.0], [1.0])) == pytest.approx(0.382925, abs=1e-6)

    def test_probabilities_sum_to_one(self, rng):
        mixture = _mixture(rng.normal(0, 3, size=3), rng.uniform(0.5, 4, size=3), rng.dirichlet(np.ones(3)))
        total = mixture_probabilities(np.arange(-200, 201), mixture).sum()
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_sharp_component_is_certain(self):
        assert coeff_probability(10, _mixture([10.0], [0.001])) == pytest.approx(1.0)

    def test_far_tail_does_not_underflow_to_negative(self):
        """Tail masses stay non-negative and symmetric."""
        mixture = _mixture([0.0], [1.0])
        p = mixture_probabilities(np.array([-40, 40]), mixture)
        assert np.all(p >= 0)
        assert p[0] == p[1]

    def test_weights_mix_components(self):
        mixture = _mixture([0.0, 5.0], [1.0, 1.0], [0.25, 0.75])
        expected = 0.25 * coeff_probability(5, _mixture([0.0], [1.0])) + 0.75 * 0.382925
        assert coeff_probability(5, mixture) == pytest.approx(expected, abs=1e-6)


class TestCodingDistribution:
    """Test the windowed alphabet with an escape symbol."""

    def test_total_and_escape(self):
        dist = coding_distribution(_mixture([0.0, 1.0, -2.0], [1.0, 2.0, 0.5]))
        assert dist.cdf.cumulative[-1] == CDF_TOTAL
        assert len(dist.cdf) == dist.high - dist.low + 2
        assert dist.value_for(dist.escape_symbol) is None

    def test_window_centered_on_mean(self):
        dist = coding_distribution(_mixture([100.0], [1.0]), min_radius=8)
        assert dist.low == 92 and dist.high == 108
        assert dist.value_for(dist.symbol_for(100)) == 100

    def test_out_of_window_value_escapes(self):
        dist = coding_distribution(_mixture([0.0], [1.0]))
        assert dist.symbol_for(1000) == dist.escape_symbol
        assert symbol_bits(dist, 1000) > LITERAL_BITS

    def test_radius_capped(self):
        dist = coding_distribution(_mixture([0.0], [1e6]), max_radius=50)
        assert dist.high - dist.low == 100

    def test_likely_symbol_is_cheap(self):
        dist = coding_distribution(_mixture([0.0], [0.01]))
        assert symbol_bits(dist, 0) < 0.01


class TestContextModel:
    """Test the learned mixture heads."""

    @pytest.mark.parametrize("gain", [1.0, 4.0])
    def test_initial_mixture_is_neutral(self, small_arch, rng, gain):
        """Untrained heads: equal weights, zero means, scales gain * ln 2 + S_MIN."""
        model = CodecModel.initialize(replace(small_arch, context_output_gain=gain), seed=0)
        window = extract_context(rng.normal(size=(4, 4)), (2, 2), rng.normal(size=(4, 4)), 1, "HL", 3)
        mixture = model.context.predict_mixture(window)
        np.testing.assert_allclose(mixture.weights, np.full(MIXTURE_COMPONENTS, 1 / 3))
        np.testing.assert_array_equal(mixture.means, np.zeros(MIXTURE_COMPONENTS))
        np.testing.assert_allclose(mixture.scales, gain * math.log(2.0) + S_MIN)

    def test_scales_respect_floor(self, random_model, rng):
        band = Tensor(rng.normal(0, 30, size=(1, 6, 6)))
        _, _, scales = random_model.context.mixture_tensors(band, None, 2, "LL")
        assert np.all(scales.data >= S_MIN)

    @pytest.mark.parametrize("orientation,level", [("LL", 2), ("HL", 2), ("HH", 1)])
    def test_vectorised_matches_per_position(self, random_model, rng, orientation, level):
        """Training-time and coding-time heads give identical mixtures."""
        context = random_model.context
        band = rng.normal(0, 20, size=(6, 6))
        reference = None if orientation == "LL" else rng.normal(0, 50, size=(6, 6))
        weights, means, scales = context.mixture_tensors(
            Tensor(band[None]), None if reference is None else Tensor(reference[None]), level, orientation
        )
        for i, j in [(0, 0), (0, 5), (3, 2), (5, 5)]:
            mixture = context.predict_mixture(extract_context(band, (i, j), reference, level, orientation, 3))
            np.testing.assert_allclose(weights.data[:, i, j], mixture.weights, atol=1e-9)
            np.testing.assert_allclose(means.data[:, i, j], mixture.means, atol=1e-9)
            np.testing.assert_allclose(scales.data[:, i, j], mixture.scales, atol=1e-9)

    @pytest.mark.parametrize("orientation,position", [("LL", (3, 2)), ("HL", (0, 4)), ("HH", (5, 0))])
    def test_vectorised_path_is_causal(self, random_model, rng, orientation, position):
        """Changing coefficients from `position` on in raster order leaves the mixtures up to it alone."""
        context = random_model.context
        band = rng.normal(0, 20, size=(6, 6))
        reference = None if orientation == "LL" else Tensor(rng.normal(0, 50, size=(1, 6, 6)))
        start = position[0] * 6 + position[1]
        changed = band.copy().reshape(-1)
        changed[start:] += rng.normal(0, 30, size=changed.size - start)

        before = context.mixture_tensors(Tensor(band[None]), reference, 1, orientation)
        after = context.mixture_tensors(Tensor(changed.reshape(1, 6, 6)), reference, 1, orientation)
        for a, b in zip(before, after):
            np.testing.assert_allclose(a.data.reshape(MIXTURE_COMPONENTS, -1)[:, :start + 1],
                                       b.data.reshape(MIXTURE_COMPONENTS, -1)[:, :start + 1], rtol=0, atol=1e-12)
        assert not np.allclose(before[1].data, after[1].data)

    def test_reference_shape_mismatch(self, init_model):
        with pytest.raises(InvalidShapeError):
            init_model.context.mixture_tensors(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 2, 2))), 1, "HL")


class TestRate:
    """Test differentiable and sequential rate estimates."""

    def test_zero_band_at_init(self, init_model):
        """An all-zero 8x8 LL costs 64 * -log2 p0 under the neutral mixture."""
        pyramid = SubbandPyramid.zeros(32, 32, 2)
        s0 = math.log(2.0) + S_MIN
        p0 = ndtr(0.5 / s0) - ndtr(-0.5 / s0)
        bits = rate_estimate(pyramid, init_model.context, init_model.transform, per_band=True)
        assert bits[0] == pytest.approx(64 * -math.log2(p0), rel=1e-9)
        assert all(b == pytest.approx(-math.log2(p0) * 64 * 4 ** (0 if n < 4 else 1), rel=1e-9)
                   for n, b in enumerate(bits))

    def test_rate_is_non_negative(self, random_model, rng):
        pyramid = random_model.transform.forward(rng.uniform(0, 255, size=(16, 16)), 2)
        total = rate_estimate(quantize_hard(pyramid), random_model.context, random_model.transform)
        assert total.item() >= 0

    def test_escape_costs_floor_plus_literal(self, init_model):
        """A coefficient far outside its window costs -log2 P_MIN for the escape plus the raw literal."""
        pyramid = SubbandPyramid.zeros(16, 16, 2)
        pyramid.bands[0][0, 0] = 5000.0
        bits = rate_estimate(pyramid, init_model.context, init_model.transform, per_band=True)
        zero_cost = rate_estimate(SubbandPyramid.zeros(16, 16, 2), init_model.context,
                                  init_model.transform, per_band=True)
        s0 = math.log(2.0) + S_MIN
        p0 = ndtr(0.5 / s0) - ndtr(-0.5 / s0)
        expected = -math.log2(P_MIN) + LITERAL_BITS + math.log2(p0)
        assert bits[0] - zero_cost[0] == pytest.approx(expected, rel=1e-9)

    def test_escape_priced_like_coder(self, init_model):
        """With a narrow window the escape symbol carries real tail mass; both paths charge it."""
        coding = CodingConfig(tail_sigmas=1.0, min_radius=1)
        pyramid = SubbandPyramid.zeros(16, 16, 2)
        for (i, j), value in {(0, 0): 5000.0, (1, 1): 3.0, (2, 2): -2.0, (3, 3): 1.0}.items():
            pyramid.bands[0][i, j] = value
        estimate = rate_estimate(pyramid, init_model.context, init_model.transform, coding=coding).item()
        exact = sequential_rate(pyramid, init_model.context, init_model.transform,
                                coding.tail_sigmas, coding.min_radius, coding.max_radius)
        assert exact == pytest.approx(estimate, rel=1e-3)
        assert estimate > 3 * LITERAL_BITS

    def test_sequential_rate_tracks_estimate(self, random_model, smooth_plane):
        """The coder path, escapes included, costs what the vectorised estimate predicts."""
        q = quantize_hard(random_model.transform.forward(smooth_plane, 2))
        estimate = rate_estimate(q, random_model.context, random_model.transform).item()
        exact = sequential_rate(q, random_model.context, random_model.transform)
        assert exact == pytest.approx(estimate, rel=0.01)

    def test_window_matches_coding_distribution(self, random_model, rng):
        band = Tensor(rng.normal(0, 20, size=(1, 5, 5)))
        weights, means, scales = random_model.context.mixture_tensors(band, None, 2, "LL")
        low, high = window_bounds(weights.data, means.data, scales.data)
        for i, j in [(0, 0), (2, 3), (4, 4)]:
            mixture = MixtureParams(weights.data[:, i, j], means.data[:, i, j], scales.data[:, i, j])
            dist = coding_distribution(mixture)
            assert (dist.low, dist.high) == (low[i, j], high[i, j])

    def test_estimate_gradient_wrt_soft_bands(self, random_model):
        """Taped gradient of the rate with respect to soft-quantised coefficients matches finite differences."""
        plane = np.random.default_rng(3).normal(0, 0.5, size=(16, 16))
        soft = quantize_soft(random_model.transform.forward(plane, 2), np.random.default_rng(4))
        bands = [Parameter(f"band.{n}", b[None]) for n, b in enumerate(soft.bands)]

        def loss():
            return rate_estimate(bands, random_model.context, random_model.transform, levels=2)

        errors = nn.gradient_check(loss, bands, step=1e-5, samples=4, rng=np.random.default_rng(0))
        assert max(errors.values()) <= 1e-3

    def test_decode_order(self):
        order = list(decode_order(2))
        assert order[0] == (0, 2, "LL")
        assert [o for _, _, o in order[1:4]] == ["HL", "LH", "HH"]
        assert order[-1] == (6, 1, "HH")

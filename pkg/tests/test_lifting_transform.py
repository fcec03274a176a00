"""
Unit tests for the neural lifting transform and the classical CDF 9/7 oracle.
"""

from dataclasses import replace

import numpy as np
import pytest

import nn_core as nn
from codec_errors import InvalidShapeError
from codec_model import CodecModel
from lifting_transform import (CDF97_ALPHA, CDF97_BETA, CDF97_DELTA, CDF97_GAMMA, CDF97_ZETA,
                               LiftingOperator, LiftingOperatorPair, SubbandPyramid, band_index,
                               band_layout, cdf97_forward, cdf97_inverse, forward_transform,
                               interleave_rows, inverse_transform, split_rows)
from nn_core import Tape, Tensor


class TestSplitRows:
    """Test the even/odd row split."""

    def test_row_indices(self):
        x = np.repeat(np.arange(4.0)[:, None], 4, axis=1)
        L, H = split_rows(x)
        np.testing.assert_array_equal(L[:, 0], [0, 2])
        np.testing.assert_array_equal(H[:, 0], [1, 3])

    def test_merge_inverts_split(self, rng):
        x = rng.normal(size=(6, 5))
        np.testing.assert_array_equal(interleave_rows(*split_rows(x)), x)

    def test_constant_array_gives_equal_halves(self):
        L, H = split_rows(np.full((4, 3), 7.0))
        np.testing.assert_array_equal(L, H)

    def test_odd_row_count_raises(self):
        with pytest.raises(InvalidShapeError):
            split_rows(np.zeros((3, 4)))


class TestLiftingPair:
    """Test one predict/update pair."""

    def _pair(self, model, stage="rows", index=0):
        return model.transform.stages[stage].pairs[index]

    def test_zero_residual_is_classical_step(self, init_model, rng):
        """At initialisation the pair computes the CDF 9/7 predict/update."""
        L, H = rng.normal(size=(1, 4, 6)), rng.normal(size=(1, 4, 6))
        L2, H2 = self._pair(init_model).lift_forward(Tensor(L), Tensor(H))
        next_L = np.concatenate([L[:, 1:], L[:, -1:]], axis=1)
        expected_H = H + CDF97_ALPHA * (L + next_L)
        prev_H = np.concatenate([expected_H[:, :1], expected_H[:, :-1]], axis=1)
        expected_L = L + CDF97_BETA * (expected_H + prev_H)
        np.testing.assert_allclose(H2.data, expected_H, atol=1e-12)
        np.testing.assert_allclose(L2.data, expected_L, atol=1e-12)

    def test_zero_operators_are_identity(self, init_model, rng):
        """With the classical coefficients also zero, lifting changes nothing."""
        params = init_model.params
        t_L = LiftingOperator(params, "lift.rows.0.t_L", 0.0, "next", 1 / 64, 4.0)
        t_H = LiftingOperator(params, "lift.rows.0.t_H", 0.0, "prev", 1 / 64, 4.0)
        L, H = Tensor(rng.normal(size=(1, 2, 3))), Tensor(rng.normal(size=(1, 2, 3)))
        L2, H2 = LiftingOperatorPair(t_L, t_H).lift_forward(L, H)
        np.testing.assert_array_equal(L2.data, L.data)
        np.testing.assert_array_equal(H2.data, H.data)

    def test_inverse_undoes_forward(self, random_model, rng):
        pair = self._pair(random_model, "cols_high", 1)
        L, H = Tensor(rng.normal(0, 50, size=(1, 4, 8))), Tensor(rng.normal(0, 50, size=(1, 4, 8)))
        L2, H2 = pair.lift_inverse(*pair.lift_forward(L, H))
        np.testing.assert_allclose(L2.data, L.data, atol=1e-12)
        np.testing.assert_allclose(H2.data, H.data, atol=1e-12)

    def test_shape_mismatch_raises(self, init_model):
        with pytest.raises(InvalidShapeError):
            self._pair(init_model).lift_forward(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 4))))


class TestForwardTransform:
    """Test the full pyramid."""

    def test_layout_and_shapes(self, rng):
        """128x128 at K=4: level-4 bands 8x8, level-1 bands 64x64."""
        model = CodecModel.initialize(seed=0)
        pyramid = model.transform.forward(rng.uniform(0, 255, size=(128, 128)), 4)
        assert len(pyramid.bands) == 13
        assert pyramid.band(4, "LL").shape == (8, 8)
        assert pyramid.band(4, "HH").shape == (8, 8)
        assert pyramid.band(1, "HL").shape == (64, 64)
        assert pyramid.image_shape == (128, 128)

    def test_zero_image_gives_zero_pyramid(self, init_model):
        pyramid = init_model.transform.forward(np.zeros((16, 16)), 2)
        assert all(not np.any(b) for b in pyramid.bands)

    def test_constant_image_has_no_detail_at_init(self, init_model):
        """Detail vanishes up to the rounding of the lifting constants."""
        pyramid = init_model.transform.forward(np.full((32, 32), 113.0), 2)
        for band in pyramid.bands[1:]:
            assert np.max(np.abs(band)) < 1e-8 * 113

    def test_matches_classical_cdf97_at_init(self, init_model, rng):
        x = rng.uniform(0, 255, size=(32, 24))
        ours = init_model.transform.forward(x, 2)
        oracle = cdf97_forward(x, 2)
        for a, b in zip(ours.bands, oracle.bands):
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_indivisible_plane_raises(self, init_model):
        with pytest.raises(InvalidShapeError):
            init_model.transform.forward(np.zeros((30, 32)), 2)

    def test_module_level_functions(self, random_model, rng):
        x = rng.uniform(0, 255, size=(16, 16))
        pyramid = forward_transform(x, 2, random_model.params)
        np.testing.assert_allclose(inverse_transform(pyramid, random_model.params), x, atol=1e-9)


class TestInverseTransform:
    """Test exact invertibility."""

    @staticmethod
    def _random_transform(arch, levels, seed):
        model = CodecModel.initialize(replace(arch, levels=levels), seed=seed)
        model.randomize_output_layers(np.random.default_rng(100 + seed), scale=0.2)
        return model.transform

    @pytest.mark.parametrize("levels", [1, 2, 3, 4])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_weights_round_trip(self, small_arch, levels, seed):
        transform = self._random_transform(small_arch, levels, seed)
        x = np.random.default_rng(seed).uniform(0, 255, size=(2 ** levels * 3, 2 ** levels * 2))
        pyramid = transform.forward(x, levels)
        assert pyramid.levels == levels
        assert np.max(np.abs(transform.inverse(pyramid) - x)) <= 1e-9

    def test_zero_pyramid_gives_zero_image(self, init_model):
        zeros = SubbandPyramid.zeros(16, 16, 2)
        assert not np.any(init_model.transform.inverse(zeros))

    def test_partial_inverse(self, random_model, rng):
        """LL_k rebuilt from the coarser subbands equals the forward LL_k."""
        x = rng.uniform(0, 255, size=(32, 32))
        transform = random_model.transform
        pyramid = transform.forward(x, 2)
        ll_1 = transform.forward(x, 1).band(1, "LL")
        np.testing.assert_allclose(transform.partial_inverse(pyramid, 1), ll_1, atol=1e-9)
        np.testing.assert_allclose(transform.partial_inverse(pyramid, 2), pyramid.bands[0])
        np.testing.assert_allclose(transform.partial_inverse(pyramid, 0), x, atol=1e-9)

    @pytest.mark.parametrize("seed", [3, 7, 11])
    def test_log_det_is_zero(self, small_arch, seed):
        """Numerical Jacobian of a one-level transform has unit determinant."""
        transform = self._random_transform(small_arch, 2, seed)
        x = np.random.default_rng(seed).uniform(0, 255, size=(4, 4))
        jacobian = np.zeros((16, 16))
        flat = x.reshape(-1)
        for i in range(16):
            orig = flat[i]
            flat[i] = orig + 1e-4
            up = transform.forward(x, 1).flatten()
            flat[i] = orig - 1e-4
            down = transform.forward(x, 1).flatten()
            flat[i] = orig
            jacobian[:, i] = (up - down) / 2e-4
        _, logdet = np.linalg.slogdet(jacobian)
        assert logdet == pytest.approx(transform.log_abs_det_jacobian(), abs=1e-6)

    def test_gradients_flow_through_transform(self, random_model, rng):
        x = Tensor(rng.uniform(0, 255, size=(1, 8, 8)))
        params = random_model.params.group("lift.rows.0.t_L.conv3")
        with Tape():
            bands = random_model.transform.forward_tensors(x, 2)
            loss = nn.sum(nn.square(bands[-1]))
        nn.backward(loss, params)
        assert any(np.any(p.gradient != 0) for p in params)


class TestClassicalCdf97:
    """Test the independent CDF 9/7 implementation."""

    def test_round_trip(self, rng):
        x = rng.uniform(0, 255, size=(16, 32))
        np.testing.assert_allclose(cdf97_inverse(cdf97_forward(x, 3)), x, atol=1e-9)

    def test_constant_image_has_zero_details(self):
        pyramid = cdf97_forward(np.full((16, 16), 42.0), 2)
        for band in pyramid.bands[1:]:
            assert np.max(np.abs(band)) < 1e-8 * 42

    def test_linear_ramp_has_zero_details_away_from_edges(self):
        """Four vanishing moments: a ramp leaves only boundary detail."""
        ramp = np.tile(np.arange(32.0), (32, 1))
        HL = cdf97_forward(ramp, 1).band(1, "HL")
        assert np.max(np.abs(HL[:, 2:-2])) < 1e-6

    def test_lifting_constants(self):
        assert CDF97_ALPHA == pytest.approx(-1.586134342)
        assert CDF97_BETA == pytest.approx(-0.052980118)
        assert CDF97_GAMMA == pytest.approx(0.882911076)
        assert CDF97_DELTA == pytest.approx(0.443506852)
        assert CDF97_ZETA == pytest.approx(1.230174105)


class TestLayout:
    def test_band_order(self):
        assert band_layout(2) == [(2, "LL"), (2, "HL"), (2, "LH"), (2, "HH"),
                                  (1, "HL"), (1, "LH"), (1, "HH")]
        assert band_index(2, 1, "LH") == 5

    def test_pyramid_rejects_wrong_band_count(self):
        with pytest.raises(InvalidShapeError):
            SubbandPyramid(2, [np.zeros((2, 2))] * 4)

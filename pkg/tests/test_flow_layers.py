import math
import unittest

import numpy as np
from scipy import special

from app_configs import LOG_SCALE_CLAMP
from src import flow_layers, masking
from src.errors import LayerStateError, ShapeError
from src.flow_enums import Half, SplitRule
from src.flow_layers import (
    Actnorm,
    AffineCoupling,
    ConditionalCoupling,
    ConditionalInjector,
    Inv1x1,
    MixtureCoupling,
    Squeeze,
    SplitPrior,
)
from src.numkit import Tensor


def _normal(shape, seed=0) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def _perturb(layer, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for param in layer.parameters():
        param.assign(param.data + rng.normal(0.0, scale, param.shape))
    return layer


class TestActnorm(unittest.TestCase):
    def test_data_dependent_init(self):
        """Test the first batch leaves actnorm with zero mean and unit variance per channel"""
        x = Tensor(3.0 + 2.0 * np.random.default_rng(0).normal(size=(16, 2, 4, 4)))
        layer = Actnorm("actnorm", 2)

        y, _ = layer.forward(x)

        # Check statistics
        self.assertTrue(layer.initialized)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), 1.0, atol=1e-12)

    def test_logdet(self):
        """Test log|det| = H * W * sum(log s)"""
        layer = Actnorm("actnorm", 1)
        layer.log_scale.assign(np.full((1, 1, 1, 1), math.log(2.0)))
        layer.initialized = True

        _, logdet = layer.forward(Tensor(np.ones((3, 1, 2, 2))))

        # Check one value per sample
        self.assertEqual(logdet.shape, (3, 1, 1, 1))
        np.testing.assert_allclose(logdet.data.reshape(-1), 4 * math.log(2.0))

    def test_inverse_before_init(self):
        """Test the inverse of an uninitialized actnorm is rejected"""
        with self.assertRaises(LayerStateError):
            Actnorm("actnorm", 1).inverse(Tensor(np.zeros((1, 1, 2, 2))))

    def test_roundtrip(self):
        """Test inverse(forward(x)) == x after init"""
        x = _normal((4, 3, 2, 2))
        layer = Actnorm("actnorm", 3)

        y, _ = layer.forward(x)

        # Check values
        np.testing.assert_allclose(layer.inverse(y).data, x.data, atol=1e-12)


class TestInv1x1(unittest.TestCase):
    def test_init_is_orthogonal(self):
        """Test the random-rotation init has |det W| = 1"""
        layer = Inv1x1("inv", 4, np.random.default_rng(0))

        w = layer.weight().data[0, 0]

        # Check W is orthogonal and the stored log|det| vanishes
        np.testing.assert_allclose(w @ w.T, np.eye(4), atol=1e-12)
        self.assertAlmostEqual(float(layer.log_s.data.sum()), 0.0, places=12)

    def test_explicit_weight(self):
        """Test LU parameterization reproduces an explicit weight"""
        weight = np.array([[2.0, 1.0], [0.5, 3.0]])
        layer = Inv1x1("inv", 2, weight=weight)

        # Check the assembled weight and its inverse
        np.testing.assert_allclose(layer.weight().data[0, 0], weight, atol=1e-12)
        np.testing.assert_allclose(layer.inverse_weight() @ weight, np.eye(2), atol=1e-12)

    def test_gaussian_closed_form(self):
        """Test an inv1x1 flow over Gaussian data matches the closed-form log-likelihood"""
        weight = np.array([[2.0, 1.0], [0.5, 3.0]])
        layer = Inv1x1("inv", 2, weight=weight)
        x = _normal((5, 2, 3, 3), seed=1)

        z, logdet = layer.forward(x)
        log_prob = flow_layers.standard_normal_log_prob(z).data + logdet.data

        # Check against log N(W x; 0, I) + H W log|det W|
        wx = np.einsum("oc,bchw->bohw", weight, x.data)
        expected = (
            -0.5 * (wx**2).sum(axis=(1, 2, 3))
            - 0.5 * 18 * math.log(2 * math.pi)
            + 9 * math.log(abs(np.linalg.det(weight)))
        )
        np.testing.assert_allclose(log_prob.reshape(-1), expected, atol=1e-8)

    def test_roundtrip(self):
        """Test inverse(forward(x)) == x for perturbed LU factors"""
        layer = _perturb(Inv1x1("inv", 3, np.random.default_rng(2)), scale=0.1)
        x = _normal((2, 3, 2, 2))

        # Check values
        np.testing.assert_allclose(layer.inverse(layer.forward(x).y).data, x.data, atol=1e-10)


class TestAffineCoupling(unittest.TestCase):
    def test_zero_init_is_identity(self):
        """Test a fresh coupling is the identity with zero log-determinant"""
        layer = AffineCoupling("affine", 4, 8, np.random.default_rng(0))
        x = _normal((2, 4, 2, 2))

        y, logdet = layer.forward(x)

        # Check values
        np.testing.assert_array_equal(y.data, x.data)
        np.testing.assert_array_equal(logdet.data, np.zeros((2, 1, 1, 1)))

    def test_constant_scale(self):
        """Test a bias-only network scales the transformed half by exactly 2"""
        layer = AffineCoupling("affine", 2, 4, np.random.default_rng(0))
        raw = math.atanh(math.log(2.0) / LOG_SCALE_CLAMP)
        layer.net.b3.assign(np.array([raw, 0.0]).reshape(1, 2, 1, 1))
        x = _normal((1, 2, 2, 2))

        y, logdet = layer.forward(x)

        # Check the first channel doubles, the second passes through
        np.testing.assert_allclose(y.data[:, 0], 2 * x.data[:, 0], atol=1e-12)
        np.testing.assert_array_equal(y.data[:, 1], x.data[:, 1])
        self.assertAlmostEqual(logdet.item(), 4 * math.log(2.0), places=12)

    def test_log_scale_is_clamped(self):
        """Test huge network outputs cannot push |log s| past the clamp"""
        layer = AffineCoupling("affine", 2, 4, np.random.default_rng(0))
        layer.net.b3.assign(np.array([1e6, 0.0]).reshape(1, 2, 1, 1))

        _, logdet = layer.forward(_normal((1, 2, 1, 1)))

        # Check values
        self.assertAlmostEqual(logdet.item(), LOG_SCALE_CLAMP, places=12)

    def test_mask_split_roundtrip(self):
        """Test checkerboard and permuted splits invert and leave half A untouched"""
        x = _normal((2, 2, 4, 4), seed=3)
        masks = {
            SplitRule.CHECKERBOARD: masking.make_mask_2d(4, 4, 1),
            SplitRule.PERMUTED: masking.make_mask_3d(2, 4, 4, 9),
        }
        for rule, mask in masks.items():
            layer = _perturb(AffineCoupling("affine", 2, 4, np.random.default_rng(0), rule, mask))

            y, _ = layer.forward(x)

            # Check half A is unchanged and the inverse is exact
            selector = mask.indicator(Half.A, x.shape) > 0
            np.testing.assert_array_equal(y.data[selector], x.data[selector])
            np.testing.assert_allclose(layer.inverse(y).data, x.data, atol=1e-12)

    def test_channel_split_needs_even_channels(self):
        """Test an odd channel count is rejected for the channel split"""
        with self.assertRaises(ShapeError):
            AffineCoupling("affine", 3, 4, np.random.default_rng(0))


class TestMixtureCoupling(unittest.TestCase):
    def test_roundtrip(self):
        """Test the bisection inverse recovers the input"""
        layer = _perturb(MixtureCoupling("mixture", 2, 4, np.random.default_rng(0), 3))
        x = Tensor(np.random.default_rng(4).uniform(-4.0, 4.0, (3, 2, 2, 2)))

        y, _ = layer.forward(x)

        # Check values
        np.testing.assert_allclose(layer.inverse(y).data, x.data, atol=1e-9)

    def test_elementwise_map_is_increasing(self):
        """Test the mixture map is strictly increasing with finite log-derivative"""
        layer = _perturb(MixtureCoupling("mixture", 2, 4, np.random.default_rng(0), 2), seed=1)
        grid = np.linspace(-6.0, 6.0, 25)
        x = Tensor(np.stack([grid, np.zeros_like(grid)]).reshape(1, 2, 1, 25))

        y, logdet = layer.forward(x)

        # Check the transformed channel is increasing along the grid
        self.assertTrue((np.diff(y.data[0, 0, 0]) > 0).all())
        self.assertTrue(np.isfinite(logdet.data).all())


    def test_inverse_meets_cdf_residual_on_steep_mixture(self):
        """Test the inverse of a very narrow mixture is accurate on the CDF side"""
        shape = (1, 1, 1, 16)
        scale = math.exp(-12.0)
        params = flow_layers.MixtureParams(
            log_s=Tensor(np.zeros(shape)),
            t=Tensor(np.zeros(shape)),
            logits=[Tensor(np.zeros(shape)), Tensor(np.zeros(shape))],
            means=[Tensor(np.full(shape, 0.5)), Tensor(np.full(shape, -1.0))],
            log_scales=[Tensor(np.full(shape, -12.0)), Tensor(np.full(shape, -12.0))],
        )
        offsets = np.random.default_rng(2).uniform(-3.0, 3.0, shape) * scale
        x = Tensor(np.where(np.arange(16) % 2 == 0, 0.5, -1.0).reshape(shape) + offsets)

        y, _ = flow_layers.mixture_forward(x, params)
        restored = flow_layers.mixture_inverse(y, params)
        again, _ = flow_layers.mixture_forward(restored, params)

        # Check the CDF residual
        residual = np.abs(special.expit(again.data) - special.expit(y.data))
        self.assertLess(residual.max(), 1e-10)


class TestConditionalLayers(unittest.TestCase):
    def test_conditional_coupling_roundtrip(self):
        """Test the conditional coupling inverts for a fixed condition"""
        layer = _perturb(ConditionalCoupling("cond", 2, 4, np.random.default_rng(0), 3))
        x = _normal((2, 2, 2, 2))
        c = _normal((2, 3, 2, 2), seed=5)

        y, _ = layer.forward(x, c)

        # Check values
        np.testing.assert_allclose(layer.inverse(y, c).data, x.data, atol=1e-12)

    def test_injector_depends_on_condition(self):
        """Test the injector output changes with the condition and inverts"""
        layer = _perturb(ConditionalInjector("inject", 2, 4, np.random.default_rng(0), 3))
        x = _normal((1, 2, 2, 2))
        c1 = _normal((1, 3, 2, 2), seed=6)
        c2 = _normal((1, 3, 2, 2), seed=7)

        y1, _ = layer.forward(x, c1)
        y2, _ = layer.forward(x, c2)

        # Check values
        self.assertFalse(np.allclose(y1.data, y2.data))
        np.testing.assert_allclose(layer.inverse(y1, c1).data, x.data, atol=1e-12)

    def test_missing_condition(self):
        """Test a conditional layer without condition features is rejected"""
        layer = ConditionalInjector("inject", 2, 4, np.random.default_rng(0), 3)

        with self.assertRaises(ShapeError):
            layer.forward(_normal((1, 2, 2, 2)))


class TestSqueezeAndSplit(unittest.TestCase):
    def test_squeeze_layer(self):
        """Test the squeeze layer is volume preserving"""
        x = _normal((2, 1, 4, 4))

        y, logdet = Squeeze("squeeze").forward(x)

        # Check values
        self.assertEqual(y.shape, (2, 4, 2, 2))
        np.testing.assert_array_equal(logdet.data, np.zeros((2, 1, 1, 1)))

    def test_split_prior_starts_standard_normal(self):
        """Test a fresh split prior scores the latent under N(0, I)"""
        split = SplitPrior("split", 4)
        x = _normal((2, 4, 2, 2))

        kept, latent, log_prob = split.forward(x)

        # Check halves and density
        np.testing.assert_array_equal(kept.data, x.data[:, :2])
        np.testing.assert_array_equal(latent.data, x.data[:, 2:])
        np.testing.assert_allclose(
            log_prob.data, flow_layers.standard_normal_log_prob(latent).data, atol=1e-12
        )

    def test_split_draw_temperature_zero(self):
        """Test drawing at temperature 0 returns the prior mean"""
        split = _perturb(SplitPrior("split", 4))
        kept = _normal((1, 2, 2, 2))

        drawn = split.draw(kept, 0.0)
        mean, _ = split.prior(kept)

        # Check values
        np.testing.assert_array_equal(drawn.data, mean.data)

    def test_split_draw_without_generator(self):
        """Test drawing without a generator uses the split's seed"""
        split = _perturb(SplitPrior("split", 4, seed=5))
        kept = _normal((1, 2, 2, 2))

        drawn = split.draw(kept, 1.0)
        expected = split.draw(kept, 1.0, np.random.default_rng(5))

        # Check values
        np.testing.assert_array_equal(drawn.data, expected.data)

    def test_gaussian_log_prob(self):
        """Test the diagonal Gaussian density against its closed form"""
        z = Tensor(np.full((1, 1, 1, 1), 1.0))
        mean = Tensor(np.zeros((1, 1, 1, 1)))
        log_std = Tensor(np.full((1, 1, 1, 1), math.log(2.0)))

        value = flow_layers.gaussian_log_prob(z, mean, log_std).item()

        # Check log N(1; 0, 4)
        self.assertAlmostEqual(value, -0.125 - math.log(2.0) - 0.5 * math.log(2 * math.pi))

import numpy as np
import pytest

from conftest import central_difference, relative_error
from thermosplat.errors import InvalidConfigError, InvalidInputError
from thermosplat.losses import (
    LossReport,
    LossWeights,
    decay_weight,
    depth_loss,
    minmax_normalize,
    smoothness_loss,
    ssim,
    thermal_loss,
    total_loss,
)

EPS = 1e-5
RTOL = 1e-3


def fd_gradient(fn, image, eps=EPS):
    grad = np.zeros_like(image)
    for index in np.ndindex(*image.shape):
        grad[index] = central_difference(fn, image, index, eps=eps)
    return grad


class TestSsim:
    def test_identical_images(self, rng):
        a = rng.random((16, 16))
        value, _ = ssim(a, a.copy())
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        a = np.full((16, 16), 0.5)
        b = np.full((16, 16), 0.25)
        value, _ = ssim(a, b)
        # zero variance: second factor is 1, first is (2 mu1 mu2 + C1)/(mu1^2 + mu2^2 + C1)
        expected = (2 * 0.5 * 0.25 + 1e-4) / (0.5 ** 2 + 0.25 ** 2 + 1e-4)
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.8004, abs=1e-3)

    def test_symmetric_value(self, rng):
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        assert ssim(a, b)[0] == pytest.approx(ssim(b, a)[0], abs=1e-12)

    def test_range(self, rng):
        a = rng.random((16, 16))
        b = 1.0 - a
        value, _ = ssim(a, b)
        assert -1.0 <= value <= 1.0

    def test_dissimilarity_gradient_matches_fd(self, rng):
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        _, grad = ssim(a, b)
        fd = fd_gradient(lambda: 1.0 - ssim(a, b)[0], a)
        assert float(relative_error(-grad, fd).max()) < RTOL

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((16, 16)), np.zeros((16, 12)))

    def test_too_small_rejected(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestSmoothness:
    def test_constant_image(self):
        value, grad = smoothness_loss(np.full((7, 9), 0.3))
        assert value == 0.0
        assert not grad.any()

    def test_2x2_hand_case(self):
        # rows [0,1],[0,1]: four in-bounds absolute differences of 1 -> 4/(4*4)
        value, _ = smoothness_loss(np.array([[0.0, 1.0], [0.0, 1.0]]))
        assert value == pytest.approx(0.25, abs=0.0)

    def test_gradient_matches_fd_away_from_kinks(self, rng):
        image = rng.random((8, 8))
        # regenerate until all neighbor differences are comfortably nonzero
        while min(np.abs(np.diff(image, axis=0)).min(),
                  np.abs(np.diff(image, axis=1)).min()) < 1e-4:
            image = rng.random((8, 8))
        _, grad = smoothness_loss(image)
        fd = fd_gradient(lambda: smoothness_loss(image)[0], image)
        assert float(relative_error(grad, fd).max()) < RTOL


class TestMinmax:
    def test_affine_example(self):
        np.testing.assert_allclose(minmax_normalize(np.array([[2.0, 4.0, 6.0]])),
                                   [[0.0, 0.5, 1.0]])

    def test_constant_map_becomes_zero(self):
        out = minmax_normalize(np.full((4, 4), 3.7))
        assert not out.any()

    def test_identity_on_normalized(self):
        x = np.array([[0.0, 0.25], [0.75, 1.0]])
        np.testing.assert_allclose(minmax_normalize(x), x)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            minmax_normalize(np.array([[np.nan, 1.0]]))


class TestDepthLoss:
    def test_identity(self, rng):
        d = rng.random((16, 16)) * 5
        value, grad, l1, s = depth_loss(d, d.copy())
        assert value == pytest.approx(0.0, abs=1e-12)
        assert l1 == pytest.approx(0.0, abs=1e-12)
        assert s == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        rendered = rng.random((16, 16)) * 4 + 0.5
        prior = rng.random((16, 16)) * 2
        base, *_ = depth_loss(rendered, prior)
        scaled, *_ = depth_loss(1.7 * rendered + 3.1, prior)
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_gradient_matches_fd(self, rng):
        rendered = rng.random((16, 16)) * 3 + 1
        prior = rng.random((16, 16)) * 2
        assert rendered.max() - rendered.min() > 0.1
        _, grad, *_ = depth_loss(rendered, prior)
        fd = fd_gradient(lambda: depth_loss(rendered, prior)[0], rendered)
        assert float(relative_error(grad, fd).max()) < RTOL

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            depth_loss(np.zeros((16, 16)), np.zeros((12, 16)))


class TestThermalLoss:
    def test_identity_no_smooth(self, rng):
        img = rng.random((16, 16))
        weights = LossWeights(lambda_smooth=0.0, t_end=10)
        value, grad, *_ = thermal_loss(img, img.copy(), weights)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_constant_images_vanish(self):
        img = np.full((16, 16), 0.4)
        weights = LossWeights(lambda_smooth=0.7, t_end=10)
        value, *_ = thermal_loss(img, img.copy(), weights)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1_closed_form(self, rng):
        gt = rng.random((16, 16)) * 0.5
        rendered = gt + 0.1
        weights = LossWeights(lambda_ssim=0.0, lambda_smooth=0.0, t_end=10)
        value, *_ = thermal_loss(rendered, gt, weights)
        assert value == pytest.approx(0.1, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        gt = rng.random((16, 16))
        rendered = rng.random((16, 16))
        weights = LossWeights(t_end=10)
        _, grad, *_ = thermal_loss(rendered, gt, weights)
        fd = fd_gradient(lambda: thermal_loss(rendered, gt, weights)[0], rendered)
        assert float(relative_error(grad, fd).max()) < RTOL


class TestDecayWeight:
    def test_boundaries_and_midpoint(self):
        assert decay_weight(0, 0, 100) == 1.0
        assert decay_weight(100, 0, 100) == 0.0
        assert decay_weight(150, 0, 100) == 0.0
        assert decay_weight(50, 0, 100) == 0.5

    def test_before_start_clamped(self):
        assert decay_weight(-5, 0, 100) == 1.0

    def test_bad_window_rejected(self):
        with pytest.raises(InvalidConfigError):
            decay_weight(5, 10, 10)


class TestTotalLoss:
    def make_inputs(self, rng):
        gt = rng.random((16, 16))
        rendered = np.clip(gt + rng.normal(0, 0.05, gt.shape), 0, 1)
        prior = rng.random((16, 16)) * 2
        depth = prior + rng.normal(0, 0.1, prior.shape)
        return rendered, gt, depth, prior

    def test_after_decay_depth_branch_is_inert(self, rng):
        rendered, gt, depth, prior = self.make_inputs(rng)
        weights = LossWeights(t_end=100)
        report, _, grad_depth = total_loss(rendered, gt, depth, prior, weights, t=100)
        assert report.decay_weight == 0.0
        assert report.total == report.thermal_term
        assert not grad_depth.any()

    def test_perfect_render_is_zero(self, rng):
        gt = rng.random((16, 16))
        prior = rng.random((16, 16)) * 2
        weights = LossWeights(lambda_smooth=0.0, t_end=100)
        report, *_ = total_loss(gt.copy(), gt, prior.copy(), prior, weights, t=17)
        assert report.total == pytest.approx(0.0, abs=1e-12)

    def test_midpoint_composition(self, rng):
        rendered, gt, depth, prior = self.make_inputs(rng)
        weights = LossWeights(lambda_depth=1.0, t_end=100)
        report, *_ = total_loss(rendered, gt, depth, prior, weights, t=50)
        th, *_ = thermal_loss(rendered, gt, weights)
        dv, _, _, _ = depth_loss(depth, prior)
        assert report.total == pytest.approx(th + 0.5 * dv, abs=1e-12)

    @pytest.mark.parametrize("t", [1, 25, 77, 100, 160])
    def test_recomposition_exact(self, rng, t):
        rendered, gt, depth, prior = self.make_inputs(rng)
        weights = LossWeights(t_end=100)
        report, *_ = total_loss(rendered, gt, depth, prior, weights, t=t)
        assert report.total == report.thermal_term + \
            report.decay_weight * weights.lambda_depth * report.depth_term

    def test_lambda_zero_skips_priors(self, rng):
        rendered, gt, depth, _ = self.make_inputs(rng)
        weights = LossWeights(lambda_depth=0.0, t_end=100)
        report, _, grad_depth = total_loss(rendered, gt, depth, None, weights, t=1)
        assert report.depth_term == 0.0
        assert not grad_depth.any()

    def test_missing_prior_rejected(self, rng):
        rendered, gt, depth, _ = self.make_inputs(rng)
        weights = LossWeights(lambda_depth=0.5, t_end=100)
        with pytest.raises(InvalidInputError):
            total_loss(rendered, gt, depth, None, weights, t=1)

    def test_nonnegative(self, rng):
        rendered, gt, depth, prior = self.make_inputs(rng)
        weights = LossWeights(t_end=100)
        report, *_ = total_loss(rendered, gt, depth, prior, weights, t=10)
        assert report.total >= 0.0
        assert report.thermal_term >= 0.0
        assert report.depth_term >= 0.0


class TestLossWeights:
    def test_invalid_ranges_rejected(self):
        with pytest.raises(InvalidConfigError):
            LossWeights(lambda_ssim=1.5)
        with pytest.raises(InvalidConfigError):
            LossWeights(lambda_depth=-0.1)
        with pytest.raises(InvalidConfigError):
            LossWeights(t_start=10, t_end=10)

"""Loss terms for joint thermal/depth supervision, with analytic gradients.

Every public operation returns its scalar value together with the gradient
with respect to the rendered image it supervises, so the training loop can
feed the rasterizer backward pass directly. All gradients are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2   # stabilizers for dynamic range 1
SSIM_C2 = 0.03 ** 2
MINMAX_EPS = 1e-8

DEFAULT_LAMBDA_SSIM = 0.2
DEFAULT_LAMBDA_SMOOTH = 1e-3
DEFAULT_LAMBDA_DEPTH = 0.5


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights and the decay-phase boundaries of the joint loss."""

    lambda_ssim: float = DEFAULT_LAMBDA_SSIM
    lambda_smooth: float = DEFAULT_LAMBDA_SMOOTH
    lambda_depth: float = DEFAULT_LAMBDA_DEPTH
    t_start: int = 0
    t_end: int = 1500

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InvalidConfigError("lambda_ssim must lie in [0, 1]")
        if self.lambda_smooth < 0.0 or self.lambda_depth < 0.0:
            raise InvalidConfigError("lambda_smooth and lambda_depth must be non-negative")
        if not self.t_end > self.t_start >= 0:
            raise InvalidConfigError("need t_end > t_start >= 0")


@dataclass(frozen=True)
class LossReport:
    """Per-term loss values at one iteration.

    ``total`` always recomposes exactly as
    ``thermal_term + decay_weight * lambda_depth * depth_term``.
    """

    total: float
    thermal_term: float
    depth_term: float
    decay_weight: float
    l1_thermal: float
    ssim_thermal: float
    smooth_thermal: float
    l1_depth: float
    ssim_depth: float


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _corr_valid(img: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Separable valid-mode correlation with a symmetric 1D kernel."""
    tmp = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(tmp, k.size, axis=1) @ k


def _corr_spread(gmap: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Adjoint of :func:`_corr_valid`: distribute window values back to pixels."""
    pad = k.size - 1
    return _corr_valid(np.pad(gmap, ((pad, pad), (pad, pad))), k)


def _check_pair(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise InvalidInputError(f"{op}: image shapes differ, {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise InvalidInputError(f"{op}: expected 2D images, got ndim={a.ndim}")


def ssim(a, b):
    """Mean local structural similarity and its gradient with respect to ``a``.

    Uses an 11x11 Gaussian window (sigma 1.5) over fully interior positions
    and stabilizers for dynamic range 1. Both images must be at least the
    window size in each dimension.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b, "ssim")
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}")

    mu_a = _corr_valid(a)
    mu_b = _corr_valid(b)
    m_aa = _corr_valid(a * a)
    m_bb = _corr_valid(b * b)
    m_ab = _corr_valid(a * b)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b

    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())

    # Backward through the mean, the rational map and the windowed moments.
    d_s = np.full(smap.shape, 1.0 / smap.size)
    denom = b1 * b2
    d_a1 = d_s * a2 / denom
    d_a2 = d_s * a1 / denom
    d_b1 = -d_s * smap / b1
    d_b2 = -d_s * smap / b2
    d_cov = 2.0 * d_a2
    d_var_a = d_b2
    d_mu_a = 2.0 * mu_b * d_a1 + 2.0 * mu_a * d_b1 - mu_b * d_cov - 2.0 * mu_a * d_var_a
    grad = _corr_spread(d_mu_a) + 2.0 * a * _corr_spread(d_var_a) + b * _corr_spread(d_cov)
    return value, grad


def smoothness_loss(image):
    """Mean absolute neighbor difference of a thermal image, and its gradient.

    Each pixel contributes the absolute differences to its four neighbors
    (missing neighbors at the border contribute zero), normalized by 4 times
    the pixel count.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise InvalidInputError("smoothness_loss expects a non-empty 2D image")
    m = image.size
    dh = image[:, 1:] - image[:, :-1]
    dv = image[1:, :] - image[:-1, :]
    # Each interior pair is seen from both sides, hence the factor 2.
    value = 2.0 * (np.abs(dh).sum() + np.abs(dv).sum()) / (4.0 * m)
    grad = np.zeros_like(image)
    sh = np.sign(dh) * (2.0 / (4.0 * m))
    sv = np.sign(dv) * (2.0 / (4.0 * m))
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    return float(value), grad


def minmax_normalize(depth):
    """Affine remap of a map onto [0, 1]; a near-constant map becomes zeros."""
    normalized, _ = _minmax_with_vjp(depth)
    return normalized


def _minmax_with_vjp(depth):
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)):
        raise InvalidInputError("minmax_normalize: non-finite values")
    flat = depth.ravel()
    i_min = int(np.argmin(flat))
    i_max = int(np.argmax(flat))
    span = flat[i_max] - flat[i_min]
    if span < MINMAX_EPS:
        normalized = np.zeros_like(depth)

        def vjp_zero(upstream):
            return np.zeros_like(depth)

        return normalized, vjp_zero

    normalized = (depth - flat[i_min]) / span

    def vjp(upstream):
        upstream = np.asarray(upstream, dtype=np.float64)
        total = upstream.sum()
        weighted = float((upstream * normalized).sum())
        grad = upstream / span
        gflat = grad.ravel()
        gflat[i_min] -= (total - weighted) / span
        gflat[i_max] -= weighted / span
        return grad

    return normalized, vjp


def depth_loss(rendered, prior):
    """Scale/shift-invariant depth supervision.

    Both maps are min-max normalized, then compared with mean absolute error
    plus a structural dissimilarity term. Returns
    ``(value, grad_wrt_rendered, l1_part, ssim_part)``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    _check_pair(rendered, prior, "depth_loss")
    norm_r, vjp = _minmax_with_vjp(rendered)
    norm_p = minmax_normalize(prior)
    l1 = float(np.abs(norm_r - norm_p).mean())
    ssim_value, ssim_grad = ssim(norm_r, norm_p)
    value = l1 + (1.0 - ssim_value)
    grad_norm = np.sign(norm_r - norm_p) / norm_r.size - ssim_grad
    return value, vjp(grad_norm), l1, ssim_value


def thermal_loss(rendered, gt, weights: LossWeights):
    """Photometric supervision of the rendered thermal image.

    Blends mean absolute error with structural dissimilarity and adds the
    smoothness penalty on the rendered image. Returns
    ``(value, grad_wrt_rendered, l1_part, ssim_part, smooth_part)``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(rendered, gt, "thermal_loss")
    l1 = float(np.abs(gt - rendered).mean())
    grad_l1 = np.sign(rendered - gt) / rendered.size
    ssim_value, ssim_grad = ssim(rendered, gt)
    smooth_value, smooth_grad = smoothness_loss(rendered)
    value = (
        (1.0 - weights.lambda_ssim) * l1
        + weights.lambda_ssim * (1.0 - ssim_value)
        + weights.lambda_smooth * smooth_value
    )
    grad = (
        (1.0 - weights.lambda_ssim) * grad_l1
        - weights.lambda_ssim * ssim_grad
        + weights.lambda_smooth * smooth_grad
    )
    return value, grad, l1, ssim_value, smooth_value


def decay_weight(t, t_start, t_end) -> float:
    """Linear fade of the depth term: 1 at t_start, 0 at and after t_end."""
    if t_end <= t_start:
        raise InvalidConfigError("decay_weight needs t_end > t_start")
    raw = 1.0 - (t - t_start) / (t_end - t_start)
    return float(min(1.0, max(0.0, raw)))


def total_loss(rendered_thermal, gt_thermal, rendered_depth, prior_depth, weights: LossWeights, t):
    """Joint loss at iteration ``t``.

    Returns ``(report, grad_thermal, grad_depth)``. The depth-branch gradient
    is exactly zero whenever the decayed depth weight is zero, and the depth
    branch is skipped entirely when ``lambda_depth`` is zero (no prior
    required in that case).
    """
    w_decay = decay_weight(t, weights.t_start, weights.t_end)
    th_value, th_grad, l1_t, ssim_t, smooth_t = thermal_loss(rendered_thermal, gt_thermal, weights)

    if weights.lambda_depth == 0.0:
        report = LossReport(
            total=th_value, thermal_term=th_value, depth_term=0.0, decay_weight=w_decay,
            l1_thermal=l1_t, ssim_thermal=ssim_t, smooth_thermal=smooth_t,
            l1_depth=0.0, ssim_depth=1.0,
        )
        return report, th_grad, np.zeros_like(th_grad)

    if prior_depth is None:
        raise InvalidInputError("total_loss: lambda_depth > 0 but no depth prior given")
    d_value, d_grad, l1_d, ssim_d = depth_loss(rendered_depth, prior_depth)
    scale = w_decay * weights.lambda_depth
    total = th_value + scale * d_value
    report = LossReport(
        total=total, thermal_term=th_value, depth_term=d_value, decay_weight=w_decay,
        l1_thermal=l1_t, ssim_thermal=ssim_t, smooth_thermal=smooth_t,
        l1_depth=l1_d, ssim_depth=ssim_d,
    )
    return report, th_grad, scale * d_grad

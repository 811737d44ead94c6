import numpy as np
import pytest

from thermosplat.rasterizer import ALPHA_MAX, TRANSMITTANCE_MIN, project_gaussian
from thermosplat.scene import Camera, GaussianScene, sigmoid


def identity_camera(fx=20.0, fy=20.0, size=16, z_offset=3.0, near=0.1):
    """Camera at the origin looking down +z, scene shifted in front of it."""
    return Camera(fx=fx, fy=fy, cx=size / 2.0, cy=size / 2.0, width=size, height=size,
                  rotation=np.eye(3), translation=np.array([0.0, 0.0, z_offset]),
                  near_clip=near)


def random_scene(rng, n, pos_sigma=0.45, logit_range=(-3.0, -0.62),
                 feat_range=(0.05, 0.95), scale_range=(-2.3, -1.2)):
    """Random small scene for oracle checks.

    Opacity logits default to at most logit(0.35) so that even 20 stacked
    splats keep per-pixel transmittance above the early-exit threshold, and
    features stay strictly inside (0, 1); the hard clamp and termination
    branches are exercised by dedicated tests instead.
    """
    q = rng.normal(0.0, 1.0, (n, 4))
    return GaussianScene(
        positions=rng.normal(0.0, pos_sigma, (n, 3)),
        log_scales=rng.uniform(*scale_range, (n, 3)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity_logits=rng.uniform(*logit_range, n),
        thermal_features=rng.uniform(*feat_range, n),
    )


def reference_blend(scene, camera):
    """Straightforward per-pixel evaluator of the expected blend.

    Independent of the production renderer: evaluates every projected splat's
    full Gaussian at every pixel (no footprint truncation), sorts per pixel
    by (depth, index) and walks the transmittance recurrence directly.
    """
    splats = []
    for i in range(scene.count):
        s = project_gaussian(scene, i, camera)
        if s is not None:
            splats.append(s)
    opac = sigmoid(scene.opacity_logits)
    feat = np.clip(scene.thermal_features, 0.0, 1.0)
    h, w = camera.height, camera.width
    thermal = np.zeros((h, w))
    depth = np.zeros((h, w))
    alpha_acc = np.zeros((h, w))
    for row in range(h):
        for col in range(w):
            px = np.array([col + 0.5, row + 0.5])
            contribs = []
            for s in splats:
                d = px - s.mean2d
                cinv = np.linalg.inv(s.cov2d)
                alpha = min(ALPHA_MAX, opac[s.source_index] * np.exp(-0.5 * d @ cinv @ d))
                contribs.append((s.depth_z, s.source_index, alpha, feat[s.source_index]))
            contribs.sort(key=lambda c: (c[0], c[1]))
            trans = 1.0
            for z, _, alpha, c in contribs:
                if trans < TRANSMITTANCE_MIN:
                    break
                weight = trans * alpha
                thermal[row, col] += c * weight
                depth[row, col] += z * weight
                alpha_acc[row, col] += weight
                trans *= 1.0 - alpha
    return thermal, depth, alpha_acc


def relative_error(analytic, reference, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return np.abs(analytic - reference) / scale


def central_difference(fn, array, index, eps=1e-4):
    """Central finite difference of scalar fn at one array element."""
    orig = array[index]
    array[index] = orig + eps
    hi = fn()
    array[index] = orig - eps
    lo = fn()
    array[index] = orig
    return (hi - lo) / (2.0 * eps)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

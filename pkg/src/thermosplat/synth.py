"""Deterministic synthetic thermal scenes for end-to-end testing.

A generated scene is a handful of warm anisotropic blobs inside the unit
ball on a cold background, observed by cameras spaced evenly on a horizontal
orbit that looks at the origin. Thermal images and depth priors are rendered
from the ground-truth scene itself, so the supervision is exactly
satisfiable and every pipeline stage can be scored against a known answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import TrainingBundle, View, write_bundle
from .errors import InvalidConfigError
from .priors import SOURCE_ORACLE
from .rasterizer import render
from .scene import Camera, GaussianScene, logit
from .training import split_train_test

DEFAULT_RESOLUTION = 64
DEFAULT_ORBIT_RADIUS = 3.0
FOCAL_PER_PIXEL = 0.85          # focal length as a fraction of the resolution
POSITION_RADIUS = 0.7           # blobs stay inside this ball
SCALE_RANGE = (0.12, 0.30)      # world-unit blob extents
AXIS_JITTER = (0.8, 1.25)       # per-axis anisotropy factors
OPACITY_RANGE = (0.6, 0.95)
FEATURE_RANGE = (0.2, 1.0)      # warm blobs on a cold (zero) background
TRAIN_RATIO = 0.8


@dataclass(frozen=True)
class SynthSpec:
    n_gaussians: int = 5
    n_views: int = 12
    resolution: int = DEFAULT_RESOLUTION
    orbit_radius: float = DEFAULT_ORBIT_RADIUS
    seed: int = 0
    prior_noise: float = 0.0    # stddev of Gaussian noise added to depth priors
    arc_degrees: float = 360.0  # < 360 gives a forward-facing style capture

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise InvalidConfigError("need at least one Gaussian")
        if self.n_views < 2:
            raise InvalidConfigError("need at least two views")
        if self.resolution < 16:
            raise InvalidConfigError("resolution must be at least 16")
        if self.orbit_radius <= 1.0:
            raise InvalidConfigError("orbit radius must exceed the unit ball")
        if self.prior_noise < 0.0:
            raise InvalidConfigError("prior_noise must be non-negative")
        if not 0.0 < self.arc_degrees <= 360.0:
            raise InvalidConfigError("arc_degrees must lie in (0, 360]")


def _sample_in_ball(rng, n: int, radius: float) -> np.ndarray:
    points = np.empty((n, 3))
    have = 0
    while have < n:
        cand = rng.uniform(-radius, radius, (2 * (n - have), 3))
        good = cand[np.linalg.norm(cand, axis=1) <= radius]
        take = min(n - have, good.shape[0])
        points[have:have + take] = good[:take]
        have += take
    return points


def ground_truth_scene(spec: SynthSpec, rng) -> GaussianScene:
    n = spec.n_gaussians
    base = rng.uniform(*SCALE_RANGE, (n, 1))
    scales = base * rng.uniform(*AXIS_JITTER, (n, 3))
    quats = rng.normal(0.0, 1.0, (n, 4))
    return GaussianScene(
        positions=_sample_in_ball(rng, n, POSITION_RADIUS),
        log_scales=np.log(scales),
        rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
        opacity_logits=logit(rng.uniform(*OPACITY_RANGE, n)),
        thermal_features=rng.uniform(*FEATURE_RANGE, n),
    )


def orbit_camera(angle: float, radius: float, resolution: int,
                 height: float = 0.0, near_clip: float = 0.1) -> Camera:
    """Camera on a horizontal orbit of the origin, looking at the origin."""
    position = np.array([radius * np.cos(angle), height, radius * np.sin(angle)])
    forward = -position / np.linalg.norm(position)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = FOCAL_PER_PIXEL * resolution
    return Camera(fx=focal, fy=focal, cx=resolution / 2.0, cy=resolution / 2.0,
                  width=resolution, height=resolution,
                  rotation=rotation, translation=-rotation @ position,
                  near_clip=near_clip)


def generate(spec: SynthSpec) -> tuple:
    """Build (ground-truth scene, training bundle), fully determined by the spec.

    Bundle views carry the exact rendered thermal images; depth priors are the
    rasterizer's own expected-depth renders (optionally noised), tagged as
    oracle-sourced. The seed points are the ground-truth Gaussian centers with
    their thermal features as intensities.
    """
    rng = np.random.default_rng(spec.seed)
    gt_scene = ground_truth_scene(spec, rng)

    arc = np.radians(spec.arc_degrees)
    full_circle = spec.arc_degrees >= 360.0
    views = []
    for i in range(spec.n_views):
        # a full circle leaves the wrap-around gap implicit; an arc does not
        step = arc / spec.n_views if full_circle else arc / (spec.n_views - 1)
        camera = orbit_camera(i * step, spec.orbit_radius, spec.resolution)
        out = render(gt_scene, camera)
        depth = out.depth
        if spec.prior_noise > 0.0:
            depth = depth + rng.normal(0.0, spec.prior_noise, depth.shape)
        views.append(View(name=f"view{i:03d}", camera=camera, thermal=out.thermal,
                          depth_prior=depth, prior_source=SOURCE_ORACLE))

    train_idx, test_idx = split_train_test(views, TRAIN_RATIO, spec.seed)
    bundle = TrainingBundle(
        views=views,
        initial_points=gt_scene.positions.copy(),
        initial_intensities=gt_scene.thermal_features.copy(),
        train_indices=train_idx,
        test_indices=test_idx,
        scene_name=f"synth-{spec.seed}",
    )
    return gt_scene, bundle


def generate_to_dir(spec: SynthSpec, root) -> tuple:
    """Generate a scene and materialize its bundle directory on disk."""
    gt_scene, bundle = generate(spec)
    write_bundle(bundle, root)
    return gt_scene, bundle

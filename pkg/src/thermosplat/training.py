"""Gradient-descent training of a Gaussian scene against posed thermal views.

One iteration renders a training view, evaluates the decayed joint loss,
backpropagates through the rasterizer and applies a per-group adaptive
update. Adaptive density control periodically clones small / splits large
Gaussians whose accumulated screen-space gradient is high and prunes
near-transparent ones. Runs are deterministic in (bundle, config, seed).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import TrainingBundle
from .errors import InvalidConfigError, InvalidInputError, MissingPriorError
from .losses import LossReport, LossWeights, ssim, total_loss
from .metrics import psnr
from .priors import missing_prior_views
from .rasterizer import SceneGradients, render, render_backward
from .scene import (
    FIELD_NAMES,
    GaussianScene,
    init_from_points,
    logit,
    quat_normalize,
    quat_to_rotation,
    sigmoid,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

SPLIT_COUNT = 2
SPLIT_SCALE_SHRINK = 1.6
OPACITY_RESET_VALUE = 0.01


@dataclass
class TrainConfig:
    """Hyperparameters of one training run. Defaults follow the common
    splatting recipe; tests use far fewer iterations than the default."""

    iterations: int = 30000
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    opacity_lr: float = 5e-2
    feature_lr: float = 2.5e-3
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int | None = None          # defaults to iterations // 2
    densify_grad_threshold: float = 2e-4      # mean screen gradient, half-image units
    percent_dense: float = 0.01               # split-vs-clone size cutoff, of scene extent
    prune_opacity_threshold: float = 0.005
    opacity_reset_interval: int = 3000
    max_gaussians: int = 100_000
    weights: LossWeights | None = None        # decay window defaults to iterations // 2
    seed: int = 0
    eval_interval: int = 0                    # 0 disables held-out evaluation during training
    stop_psnr: float | None = None            # early stop once held-out PSNR reaches this

    def __post_init__(self):
        if self.iterations <= 0:
            raise InvalidConfigError("iterations must be positive")
        for name in ("position_lr_init", "position_lr_final", "scale_lr", "rotation_lr",
                     "opacity_lr", "feature_lr"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.weights is not None and self.weights.t_end > self.iterations:
            raise InvalidConfigError("decay must end within the run: t_end <= iterations")

    def resolved_weights(self) -> LossWeights:
        if self.weights is not None:
            return self.weights
        return LossWeights(t_end=max(1, self.iterations // 2))

    def resolved_densify_until(self) -> int:
        return self.iterations // 2 if self.densify_until is None else self.densify_until

    def position_lr(self, iteration: int) -> float:
        frac = iteration / self.iterations
        return self.position_lr_init * (self.position_lr_final / self.position_lr_init) ** frac

    def learning_rates(self, iteration: int) -> dict:
        return {
            "positions": self.position_lr(iteration),
            "log_scales": self.scale_lr,
            "rotations": self.rotation_lr,
            "opacity_logits": self.opacity_lr,
            "thermal_features": self.feature_lr,
        }


@dataclass
class OptimizerState:
    """First/second-moment accumulators, resized alongside the scene."""

    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, scene: GaussianScene) -> "OptimizerState":
        return cls(
            step=0,
            m={name: np.zeros_like(getattr(scene, name)) for name in FIELD_NAMES},
            v={name: np.zeros_like(getattr(scene, name)) for name in FIELD_NAMES},
        )


def adam_step(scene: GaussianScene, grads: SceneGradients, state: OptimizerState,
              learning_rates: dict) -> tuple:
    """One bias-corrected adaptive update; returns (new scene, new state)."""
    step = state.step + 1
    new_fields = {}
    new_m = {}
    new_v = {}
    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    for name in FIELD_NAMES:
        param = getattr(scene, name)
        grad = getattr(grads, name)
        if grad.shape != param.shape:
            raise InvalidInputError(f"adam_step: gradient shape mismatch for {name}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad * grad
        update = learning_rates[name] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_fields[name] = param - update
        new_m[name] = m
        new_v[name] = v
    return GaussianScene(**new_fields), OptimizerState(step=step, m=new_m, v=new_v)


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient norms since the last control event."""

    grad_sum: np.ndarray   # (N,)
    seen: np.ndarray       # (N,) number of renders each Gaussian contributed to

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_sum=np.zeros(n), seen=np.zeros(n))

    def accumulate(self, grads: SceneGradients, width: int, height: int):
        ndc = grads.mean2d * np.array([0.5 * width, 0.5 * height])
        norms = np.linalg.norm(ndc, axis=1)
        contributed = norms > 0.0
        self.grad_sum[contributed] += norms[contributed]
        self.seen[contributed] += 1.0


def _concat_state(state: OptimizerState, extra: int) -> OptimizerState:
    m = {}
    v = {}
    for name in FIELD_NAMES:
        pad_shape = (extra,) + state.m[name].shape[1:]
        m[name] = np.concatenate([state.m[name], np.zeros(pad_shape)])
        v[name] = np.concatenate([state.v[name], np.zeros(pad_shape)])
    return OptimizerState(step=state.step, m=m, v=v)


def _mask_state(state: OptimizerState, keep: np.ndarray) -> OptimizerState:
    return OptimizerState(
        step=state.step,
        m={name: state.m[name][keep] for name in FIELD_NAMES},
        v={name: state.v[name][keep] for name in FIELD_NAMES},
    )


def densify_and_prune(scene: GaussianScene, state: OptimizerState, stats: DensifyStats,
                      config: TrainConfig, scene_extent: float, rng) -> tuple:
    """Adaptive density control: clone / split high-gradient Gaussians, prune
    transparent ones. Returns (scene, state, stats) with stats reset.

    Clones duplicate Gaussians whose largest axis is below
    ``percent_dense * scene_extent``; larger ones are replaced by two children
    sampled from the Gaussian itself with shrunken scales. New rows start with
    zeroed optimizer moments. At least one Gaussian always survives.
    """
    n = scene.count
    avg = np.where(stats.seen > 0, stats.grad_sum / np.maximum(stats.seen, 1.0), 0.0)
    over = avg > config.densify_grad_threshold
    max_scale = scene.scales().max(axis=1)
    small = max_scale <= config.percent_dense * scene_extent
    clone_mask = over & small
    split_mask = over & ~small

    grown = int(clone_mask.sum()) + SPLIT_COUNT * int(split_mask.sum())
    if n + grown > config.max_gaussians:
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)

    parts = {name: [getattr(scene, name)] for name in FIELD_NAMES}
    if clone_mask.any():
        for name in FIELD_NAMES:
            parts[name].append(getattr(scene, name)[clone_mask].copy())
    n_clone = int(clone_mask.sum())

    n_split = int(split_mask.sum())
    if n_split:
        src = scene.take(np.flatnonzero(split_mask))
        rot = quat_to_rotation(quat_normalize(src.rotations))
        scales = src.scales()
        for _ in range(SPLIT_COUNT):
            offsets = np.einsum("nij,nj->ni", rot, scales * rng.standard_normal((n_split, 3)))
            parts["positions"].append(src.positions + offsets)
            parts["log_scales"].append(np.log(scales / SPLIT_SCALE_SHRINK))
            parts["rotations"].append(src.rotations.copy())
            parts["opacity_logits"].append(src.opacity_logits.copy())
            parts["thermal_features"].append(src.thermal_features.copy())

    merged = GaussianScene(**{name: np.concatenate(parts[name]) for name in FIELD_NAMES})
    state = _concat_state(state, n_clone + SPLIT_COUNT * n_split)

    # Prune split originals and anything too transparent to matter.
    drop = np.zeros(merged.count, dtype=bool)
    drop[:n] = split_mask
    drop |= sigmoid(merged.opacity_logits) < config.prune_opacity_threshold
    if drop.all():
        drop[int(np.argmax(merged.opacity_logits))] = False
    keep = ~drop
    merged = merged.take(np.flatnonzero(keep))
    state = _mask_state(state, keep)
    return merged, state, DensifyStats.zeros(merged.count)


def reset_opacities(scene: GaussianScene, state: OptimizerState) -> tuple:
    """Clamp activated opacities to at most 0.01 and clear their moments."""
    new_logits = logit(np.minimum(sigmoid(scene.opacity_logits), OPACITY_RESET_VALUE))
    scene = replace(scene, opacity_logits=new_logits)
    state.m["opacity_logits"] = np.zeros_like(new_logits)
    state.v["opacity_logits"] = np.zeros_like(new_logits)
    return scene, state


def split_train_test(views, ratio: float, seed: int) -> tuple:
    """Deterministic seeded split into (train, test) index lists.

    Sizes are round(n * ratio) and the remainder, clamped so both sides are
    non-empty; the returned lists are sorted and disjoint.
    """
    n = len(views)
    if n < 2:
        raise InvalidInputError("need at least 2 views to split")
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError("split ratio must lie strictly between 0 and 1")
    n_train = min(max(int(math.floor(n * ratio + 0.5)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(int(i) for i in perm[:n_train])
    test_idx = sorted(int(i) for i in perm[n_train:])
    return train_idx, test_idx


@dataclass(frozen=True)
class LossLogRow:
    iteration: int
    report: LossReport
    gaussian_count: int


@dataclass(frozen=True)
class EvalPoint:
    iteration: int
    psnr: float
    ssim: float


@dataclass
class TrainResult:
    scene: GaussianScene
    loss_log: list
    eval_log: list = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def final_iteration(self) -> int:
        return self.loss_log[-1].iteration if self.loss_log else 0


def camera_extent(bundle: TrainingBundle) -> float:
    """Radius of the camera rig: max distance from the centroid of camera
    centers, padded 10%. Densification size thresholds scale with this."""
    centers = np.stack([v.camera.position() for v in bundle.views])
    centroid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers - centroid, axis=1).max())
    return 1.1 * max(radius, 1e-6)


def _held_out_scores(scene, bundle):
    values = []
    for i in bundle.test_indices:
        view = bundle.views[i]
        out = render(scene, view.camera)
        values.append((psnr(out.thermal, view.thermal),
                       ssim(out.thermal, view.thermal)[0]))
    return float(np.mean([v[0] for v in values])), float(np.mean([v[1] for v in values]))


def train(bundle: TrainingBundle, config: TrainConfig,
          initial_scene: GaussianScene | None = None) -> TrainResult:
    """Optimize a scene against the bundle's training views.

    The depth term starts at full weight and fades linearly to zero by the
    end of the decay window; with ``lambda_depth == 0`` the depth branch is
    never evaluated, so priors may be absent. Views are visited in a seeded
    per-epoch shuffle. Returns the final scene plus per-iteration loss log
    and optional held-out evaluation log.
    """
    weights = config.resolved_weights()
    if weights.t_end > config.iterations:
        raise InvalidConfigError("decay must end within the run: t_end <= iterations")
    train_views = bundle.train_views()
    if len(train_views) < 2:
        raise InvalidInputError("training needs at least 2 training views")
    if weights.lambda_depth > 0.0:
        missing = missing_prior_views(bundle)
        if missing:
            raise MissingPriorError(
                "depth supervision is enabled but these training views have no prior: "
                + ", ".join(missing))
    if config.eval_interval > 0 and not bundle.test_indices:
        raise InvalidInputError("eval_interval > 0 requires a non-empty test split")

    scene = initial_scene if initial_scene is not None else init_from_points(
        bundle.initial_points, bundle.initial_intensities)
    state = OptimizerState.zeros(scene)
    stats = DensifyStats.zeros(scene.count)
    extent = camera_extent(bundle)
    rng = np.random.default_rng(config.seed)
    densify_until = config.resolved_densify_until()

    loss_log = []
    eval_log = []
    order = []
    t0 = time.perf_counter()
    for t in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(train_views)))
        view = train_views[order.pop(0)]

        out = render(scene, view.camera)
        report, grad_thermal, grad_depth = total_loss(
            out.thermal, view.thermal, out.depth, view.depth_prior, weights, t)
        grads = render_backward(out.backward_tape, grad_thermal, grad_depth)
        stats.accumulate(grads, view.camera.width, view.camera.height)
        scene, state = adam_step(scene, grads, state, config.learning_rates(t))

        if (config.densify_from <= t <= densify_until
                and t % config.densify_interval == 0):
            scene, state, stats = densify_and_prune(scene, state, stats, config, extent, rng)
        if config.opacity_reset_interval > 0 and t <= densify_until \
                and t % config.opacity_reset_interval == 0:
            scene, state = reset_opacities(scene, state)

        loss_log.append(LossLogRow(iteration=t, report=report, gaussian_count=scene.count))

        if config.eval_interval > 0 and (t % config.eval_interval == 0 or t == config.iterations):
            mean_psnr, mean_ssim = _held_out_scores(scene, bundle)
            eval_log.append(EvalPoint(iteration=t, psnr=mean_psnr, ssim=mean_ssim))
            if config.stop_psnr is not None and mean_psnr >= config.stop_psnr:
                break

    return TrainResult(scene=scene, loss_log=loss_log, eval_log=eval_log,
                       wall_seconds=time.perf_counter() - t0)


LOSS_CSV_HEADER = "iteration,total,thermal_term,depth_term,decay_weight,gaussian_count"


def loss_log_csv(loss_log) -> str:
    """Render the per-iteration loss log as deterministic CSV text."""
    lines = [LOSS_CSV_HEADER]
    for row in loss_log:
        r = row.report
        lines.append(
            f"{row.iteration},{r.total!r},{r.thermal_term!r},{r.depth_term!r},"
            f"{r.decay_weight!r},{row.gaussian_count}")
    return "\n".join(lines) + "\n"

"""Depth-supervised thermal Gaussian splatting on the CPU."""

__version__ = "0.1.0"

from .scene import (
    Camera,
    GaussianScene,
    build_covariance,
    init_from_points,
    init_random,
)
from .rasterizer import RenderOutput, Splat2D, project_gaussian, render, render_backward
from .losses import (
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
from .training import TrainConfig, TrainResult, split_train_test, train
from .metrics import evaluate, psnr
from .synth import SynthSpec, generate
from .dataio import TrainingBundle, View, load_scene, read_bundle, save_scene, write_bundle
from .priors import attach_priors, oracle_depth

__all__ = [
    "Camera",
    "GaussianScene",
    "LossReport",
    "LossWeights",
    "RenderOutput",
    "Splat2D",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingBundle",
    "View",
    "attach_priors",
    "build_covariance",
    "decay_weight",
    "depth_loss",
    "evaluate",
    "generate",
    "init_from_points",
    "init_random",
    "load_scene",
    "minmax_normalize",
    "oracle_depth",
    "project_gaussian",
    "psnr",
    "read_bundle",
    "render",
    "render_backward",
    "save_scene",
    "smoothness_loss",
    "split_train_test",
    "ssim",
    "thermal_loss",
    "total_loss",
    "train",
    "write_bundle",
]

"""Depth-prior management: ingestion from disk and a synthetic test oracle.

Priors are dense per-view depth maps produced outside this package (any
monocular estimator run on the thermal frames). They are matched to views by
file stem, never mutated by training, and only ever compared after min-max
normalization, so they may carry arbitrary affine scale. Estimators that emit
inverse depth must be declared explicitly via ``space="inverse"``; the
normalization cannot absorb a reciprocal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import TrainingBundle, read_depth_map
from .errors import InvalidInputError
from .rasterizer import render
from .scene import Camera, GaussianScene

SOURCE_EXTERNAL = "external-estimator"
SOURCE_ORACLE = "synthetic-oracle"
INVERSE_EPS = 1e-6


@dataclass(frozen=True)
class DepthPriorSet:
    """Per-view priors with provenance; summary view over a bundle."""

    maps: tuple          # one entry per view: ndarray or None
    sources: tuple       # matching provenance tags or None

    @property
    def coverage(self) -> float:
        if not self.maps:
            return 0.0
        return sum(m is not None for m in self.maps) / len(self.maps)


def prior_set(bundle: TrainingBundle) -> DepthPriorSet:
    return DepthPriorSet(
        maps=tuple(v.depth_prior for v in bundle.views),
        sources=tuple(v.prior_source for v in bundle.views),
    )


def attach_priors(bundle: TrainingBundle, directory, space: str = "depth") -> TrainingBundle:
    """Attach per-view depth priors loaded from ``directory``.

    Each view looks for ``<view_name>.pfm``; views without a file stay
    prior-less (training rejects them later only if depth supervision is on).
    ``space`` selects how stored values map to depth: "depth" keeps them,
    "inverse" applies 1/max(x, eps).
    """
    if space not in ("depth", "inverse"):
        raise InvalidInputError(f"unknown prior space {space!r} (use 'depth' or 'inverse')")
    directory = Path(directory)
    views = []
    for view in bundle.views:
        path = directory / f"{view.name}.pfm"
        if not path.exists():
            views.append(view)
            continue
        depth = read_depth_map(path)
        if depth.shape != view.thermal.shape:
            raise InvalidInputError(
                f"{path}: prior is {depth.shape} but view {view.name!r} is {view.thermal.shape}")
        if space == "inverse":
            depth = 1.0 / np.maximum(depth, INVERSE_EPS)
        views.append(replace_view(view, depth_prior=depth, prior_source=SOURCE_EXTERNAL))
    new_bundle = TrainingBundle(
        views=views,
        initial_points=bundle.initial_points,
        initial_intensities=bundle.initial_intensities,
        train_indices=list(bundle.train_indices),
        test_indices=list(bundle.test_indices),
        scene_name=bundle.scene_name,
    )
    return new_bundle


def replace_view(view, **updates):
    return replace(view, **updates)


def oracle_depth(scene: GaussianScene, camera: Camera) -> np.ndarray:
    """Exact expected-depth render of a known scene.

    Stands in for an external estimator in tests: by construction it is a
    perfectly consistent prior for views of that scene.
    """
    return render(scene, camera).depth


def missing_prior_views(bundle: TrainingBundle) -> list:
    """Names of training views that lack a depth prior."""
    return [bundle.views[i].name for i in bundle.train_indices
            if bundle.views[i].depth_prior is None]

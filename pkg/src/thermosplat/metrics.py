"""Held-out evaluation: PSNR and SSIM per test view plus scene means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import TrainingBundle
from .errors import InvalidInputError
from .losses import ssim
from .rasterizer import render
from .scene import GaussianScene

PSNR_SENTINEL = 100.0  # reported for an exact match, keeps aggregation finite


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images with dynamic range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"psnr: image shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class EvalRow:
    view: str
    psnr: float
    ssim: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    mean_psnr: float
    mean_ssim: float
    train_seconds: float | None = None

    def to_csv(self) -> str:
        lines = ["# columns: view,psnr,ssim (no LPIPS column: perceptual scoring is out of scope)"]
        lines.append("view,psnr,ssim")
        for row in self.rows:
            lines.append(f"{row.view},{row.psnr!r},{row.ssim!r}")
        lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r}")
        return "\n".join(lines) + "\n"


def evaluate(scene: GaussianScene, bundle: TrainingBundle, split=None,
             train_seconds: float | None = None) -> EvalReport:
    """Render every held-out view and score it against the ground truth.

    ``split`` defaults to the bundle's test indices. Rows keep the bundle's
    view order; the scene means are plain arithmetic means over rows.
    """
    indices = list(bundle.test_indices) if split is None else list(split)
    if not indices:
        raise InvalidInputError("evaluate: empty test split")
    rows = []
    for i in indices:
        view = bundle.views[i]
        out = render(scene, view.camera)
        rows.append(EvalRow(
            view=view.name,
            psnr=psnr(out.thermal, view.thermal),
            ssim=ssim(out.thermal, view.thermal)[0],
        ))
    return EvalReport(
        rows=tuple(rows),
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
        train_seconds=train_seconds,
    )

"""Optimizable 3D Gaussian scene and pinhole camera types.

A scene is a flat set of N anisotropic Gaussians stored in raw (unconstrained)
parameter form so that plain gradient descent can act on every field:

* ``positions``        world-space centers,
* ``log_scales``       per-axis scales, exponentiated on use,
* ``rotations``        quaternions, renormalized on use,
* ``opacity_logits``   sigmoid-activated to (0, 1),
* ``thermal_features`` scalar radiance per Gaussian.

Covariances are reconstructed as R * S * S^T * R^T which is symmetric positive
semi-definite for any raw values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyInputError, InvalidInputError, InvalidSceneError

FIELD_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "thermal_features")

INITIAL_OPACITY = 0.1
FALLBACK_POINT_SCALE = 0.1  # world units, used when a cloud has a single point
_KNN_K = 3


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    """Inverse of :func:`sigmoid`; p must lie strictly in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InvalidInputError("logit requires values strictly inside (0, 1)")
    return np.log(p / (1.0 - p))


def quat_normalize(q):
    """Return q / |q| for an array of quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidInputError("quaternion with zero or non-finite norm")
    return q / norm


def quat_to_rotation(q):
    """Convert unit quaternions (..., 4) in (w, x, y, z) order to (..., 3, 3) matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def build_covariance(log_scale, rotation):
    """Build one 3x3 covariance from log-domain axis scales and a quaternion.

    Returns R * diag(exp(log_scale))^2 * R^T, symmetric PSD by construction.
    The quaternion is renormalized internally.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if log_scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidInputError("expected a 3-vector log_scale and 4-vector quaternion")
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise InvalidInputError("non-finite covariance parameters")
    rot = quat_to_rotation(quat_normalize(rotation))
    m = rot * np.exp(log_scale)[np.newaxis, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


@dataclass
class GaussianScene:
    """Raw-parameter Gaussian set; all arrays share leading dimension N."""

    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4), (w, x, y, z)
    opacity_logits: np.ndarray   # (N,)
    thermal_features: np.ndarray  # (N,)

    def __post_init__(self):
        for name in FIELD_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.validate()

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "thermal_features": (n,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidSceneError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidSceneError(f"{name} contains non-finite values")
        if n and np.any(np.linalg.norm(self.rotations, axis=1) == 0.0):
            raise InvalidSceneError("rotations contain a zero quaternion")

    def opacities(self) -> np.ndarray:
        """Activated opacities in (0, 1)."""
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        """Activated per-axis scales, strictly positive."""
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianScene":
        return GaussianScene(*(getattr(self, name).copy() for name in FIELD_NAMES))

    def take(self, indices) -> "GaussianScene":
        """Sub-scene holding the selected Gaussians (rows are copied)."""
        indices = np.asarray(indices)
        return GaussianScene(*(getattr(self, name)[indices].copy() for name in FIELD_NAMES))

    def equals(self, other: "GaussianScene") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in FIELD_NAMES)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose.

    ``rotation`` maps world to camera coordinates; a point lands in the image
    at u = fx * x/z + cx, v = fy * y/z + cy with (x, y, z) = R p + t.
    Pixel (row i, col j) covers the unit square centered at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)
    near_clip: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.ascontiguousarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.ascontiguousarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidInputError("camera pose must be a 3x3 rotation and 3-vector translation")
        if min(self.fx, self.fy, self.near_clip) <= 0 or min(self.width, self.height) <= 0:
            raise InvalidInputError("fx, fy, width, height and near_clip must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise InvalidInputError("camera rotation is not a proper rotation matrix")

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def _quantize_f32(arr: np.ndarray) -> np.ndarray:
    # Initial values are rounded to float32 so freshly built scenes survive the
    # float32 checkpoint format bit-exactly.
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _mean_knn_distance(points: np.ndarray) -> np.ndarray:
    """Mean distance from each point to its k nearest neighbors (k <= 3)."""
    n = points.shape[0]
    if n == 1:
        return np.full(1, FALLBACK_POINT_SCALE)
    k = min(_KNN_K, n - 1)
    out = np.empty(n)
    chunk = 512
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=2)
        rows = np.arange(block.shape[0])
        d2[rows, start + rows] = np.inf
        nearest = np.sort(d2, axis=1)[:, :k]
        out[start:start + chunk] = np.sqrt(nearest).mean(axis=1)
    return out


def init_from_points(points, intensities=None) -> GaussianScene:
    """Seed a scene from a sparse point cloud.

    Positions are copied; thermal features take the per-point intensity
    (mid-gray 0.5 when absent); initial scales are isotropic at the mean
    distance to the 3 nearest neighbors; opacity starts at 0.1; rotations
    are identity.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise EmptyInputError("point cloud is empty")
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError("points must have shape (N, 3)")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("points contain non-finite coordinates")
    n = points.shape[0]
    if intensities is None:
        intensities = np.full(n, 0.5)
    intensities = np.asarray(intensities, dtype=np.float64)
    if intensities.shape != (n,):
        raise InvalidInputError("intensities must have shape (N,)")

    dist = np.maximum(_mean_knn_distance(points), 1e-7)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=_quantize_f32(points),
        log_scales=_quantize_f32(np.repeat(np.log(dist)[:, None], 3, axis=1)),
        rotations=rotations,
        opacity_logits=_quantize_f32(np.full(n, logit(INITIAL_OPACITY))),
        thermal_features=_quantize_f32(intensities),
    )


def init_random(n: int, bounds, seed: int) -> GaussianScene:
    """Seed a scene with n uniformly random positions inside an axis-aligned box.

    Deterministic in (n, bounds, seed). Remaining fields follow the same
    defaults as :func:`init_from_points`.
    """
    if n < 1:
        raise EmptyInputError("need at least one Gaussian")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidInputError("bounds must be a (low, high) pair spanning positive volume")
    rng = np.random.default_rng(seed)
    points = lo + rng.random((n, 3)) * (hi - lo)
    return init_from_points(points)


def scene_replace(scene: GaussianScene, **updates) -> GaussianScene:
    """Functional field update that re-runs validation."""
    return replace(scene, **updates)

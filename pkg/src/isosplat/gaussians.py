"""Gaussian primitive clouds: storage, activations, initialization, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .volume import PointCloud

# Real spherical-harmonic basis constants for degrees 0 and 1.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

_CKPT_MAGIC = b"SSGC"
_CKPT_VERSION = 1

# Initial opacity 0.1, stored as a logit.
_INIT_OPACITY_LOGIT = math.log(0.1 / 0.9)

_KNN_BRUTE_LIMIT = 10_000


@dataclass
class GaussianCloud:
    """Trainable splat parameters, one row per Gaussian.

    Parameters are stored pre-activation: scales as log-scales, opacity as a
    logit, rotations as unnormalized quaternions (w, x, y, z). ``sh_coeffs``
    has shape (N, K, 3) with K = (degree + 1)^2.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    degree: int = 1

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.count
        k = (self.degree + 1) ** 2
        if self.degree not in (0, 1):
            raise ValueError(f"degree must be 0 or 1, got {self.degree}")
        shapes = {
            "positions": (self.positions.shape, (n, 3)),
            "log_scales": (self.log_scales.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
            "opacity_logits": (self.opacity_logits.shape, (n,)),
            "sh_coeffs": (self.sh_coeffs.shape, (n, k, 3)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name}: shape {got}, expected {want}")
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: contains non-finite values")
        qn = np.linalg.norm(self.rotations, axis=1)
        if (qn < 1e-12).any():
            raise ValueError("rotations: zero-norm quaternion")

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            degree=self.degree,
        )


def quat_to_rotation(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion, normalized first."""
    q = np.asarray(quat, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    w, x, y, z = q / n
    return np.array([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])


def covariance3d(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(exp(2 s)) R^T of one Gaussian, symmetrized."""
    r = quat_to_rotation(quat)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    cov = (r * s2[None, :]) @ r.T
    return 0.5 * (cov + cov.T)


def eval_color(sh: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Decode RGB from SH coefficients for a unit view direction.

    color = clamp(0.5 + sum_k c_k Y_k(dir), 0, 1). Supports a single (K, 3)
    coefficient block with a (3,) direction, or batches (N, K, 3) / (N, 3).
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        d = d[None]
    col = 0.5 + SH_C0 * sh[:, 0, :]
    if degree >= 1:
        col = col + (-SH_C1) * d[:, 1:2] * sh[:, 1, :]
        col = col + SH_C1 * d[:, 2:3] * sh[:, 2, :]
        col = col + (-SH_C1) * d[:, 0:1] * sh[:, 3, :]
    col = np.clip(col, 0.0, 1.0)
    return col[0] if single else col


def _mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors of each point (exact)."""
    n = points.shape[0]
    kk = min(k, n - 1)
    out = np.empty(n, dtype=np.float64)
    if kk == 0:
        out[:] = 1.0
        return out
    if n <= _KNN_BRUTE_LIMIT:
        d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        part = np.partition(d2, kk - 1, axis=1)[:, :kk]
        out[:] = np.sqrt(part).mean(axis=1)
        return out
    return _mean_knn_distance_grid(points, kk)


def _mean_knn_distance_grid(points: np.ndarray, k: int) -> np.ndarray:
    """Exact kNN mean distances via a uniform bucket grid (CSR layout)."""
    n = points.shape[0]
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    # Aim for a handful of points per cell.
    cell = float(np.cbrt(span.prod() / n)) * 2.0
    if cell <= 0.0 or not np.isfinite(cell):
        cell = float(span.max()) or 1.0
    coords = np.floor((points - lo) / cell).astype(np.int64)
    dims = coords.max(axis=0) + 1
    gx, gy, gz = (int(d) for d in dims)
    cell_of = (coords[:, 2] * gy + coords[:, 1]) * gx + coords[:, 0]
    order = np.argsort(cell_of, kind="stable")
    counts = np.bincount(cell_of, minlength=gx * gy * gz)
    starts = np.zeros(gx * gy * gz + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    out = np.empty(n, dtype=np.float64)
    K._knn_mean_grid(np.ascontiguousarray(points, dtype=np.float64),
                     cell_of, order, starts, gx, gy, gz, cell, k, out)
    return out


def init_from_points(cloud: PointCloud, degree: int = 1) -> GaussianCloud:
    """Seed one Gaussian per surface point.

    Scale starts isotropic at the mean distance to the 3 nearest neighbors
    (floored at 1e-7; 1.0 for a single point), rotation at identity, opacity
    at 0.1, and SH coefficients at zero so the decoded color is mid-gray.
    """
    if cloud.count == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if degree not in (0, 1):
        raise ValueError(f"degree must be 0 or 1, got {degree}")
    n = cloud.count
    dist = _mean_knn_distance(np.asarray(cloud.positions, dtype=np.float64))
    dist = np.maximum(dist, 1e-7)
    k = (degree + 1) ** 2
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    gc = GaussianCloud(
        positions=cloud.positions.astype(np.float32),
        log_scales=np.repeat(np.log(dist)[:, None], 3, axis=1).astype(np.float32),
        rotations=rot,
        opacity_logits=np.full(n, _INIT_OPACITY_LOGIT, dtype=np.float32),
        sh_coeffs=np.zeros((n, k, 3), dtype=np.float32),
        degree=degree,
    )
    gc.validate()
    return gc


def save_checkpoint(path: str, cloud: GaussianCloud) -> None:
    """Write a cloud as magic + version + count + degree + f32 parameter blocks."""
    cloud.validate()
    n = cloud.count
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQI", _CKPT_VERSION, n, cloud.degree))
        for arr in (cloud.positions, cloud.log_scales, cloud.rotations,
                    cloud.opacity_logits, cloud.sh_coeffs):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> GaussianCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}")
    version, n, degree = struct.unpack_from("<IQI", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    k = (degree + 1) ** 2
    counts = [n * 3, n * 3, n * 4, n, n * k * 3]
    body = 4 + struct.calcsize("<IQI")
    want = body + 4 * sum(counts)
    if len(blob) != want:
        raise ValueError(f"{path}: expected {want} bytes, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", offset=body)
    parts = []
    at = 0
    for c in counts:
        parts.append(flat[at:at + c].copy())
        at += c
    gc = GaussianCloud(
        positions=parts[0].reshape(n, 3),
        log_scales=parts[1].reshape(n, 3),
        rotations=parts[2].reshape(n, 4),
        opacity_logits=parts[3],
        sh_coeffs=parts[4].reshape(n, k, 3),
        degree=int(degree),
    )
    gc.validate()
    return gc

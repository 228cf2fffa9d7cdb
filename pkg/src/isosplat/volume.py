"""Regular-grid scalar volumes: raw file loading, sampling, and isosurface point extraction."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

_DTYPES = {
    "u8": np.dtype("u1"),
    "u16": np.dtype("u2"),
    "f32": np.dtype("f4"),
    "f64": np.dtype("f8"),
}

# Integer samples are normalized to [0, 1]; float samples pass through.
_INT_SCALE = {"u8": 255.0, "u16": 65535.0}

_POINTS_MAGIC = b"SSPC"
_POINTS_VERSION = 1


@dataclass(frozen=True)
class VolumeGrid:
    """A scalar field sampled on a regular lattice.

    ``data`` is stored as float64 with shape ``(nz, ny, nx)`` in C order, so x is
    the fastest-varying axis. ``dims`` is given as ``(nx, ny, nz)``. World
    coordinates of lattice point ``(i, j, k)`` are ``origin + (i, j, k) * spacing``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self) -> None:
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.data.shape != (nz, ny, nx):
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims} "
                f"(expected {(nz, ny, nx)})"
            )

    @property
    def world_min(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def world_max(self) -> np.ndarray:
        d = np.asarray(self.dims, dtype=np.float64) - 1.0
        return self.world_min + d * np.asarray(self.spacing, dtype=np.float64)

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.data.min()), float(self.data.max())


def load_raw(
    path: str,
    dims: tuple[int, int, int],
    dtype: str,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    endianness: str = "little",
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> VolumeGrid:
    """Load a headerless raw volume written x-fastest.

    ``dtype`` is one of u8 / u16 / f32 / f64. Integer data is normalized to
    [0, 1]; float data is kept verbatim. The file size must match
    ``nx * ny * nz * itemsize`` exactly.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}, expected one of {sorted(_DTYPES)}")
    if endianness not in ("little", "big"):
        raise ValueError(f"endianness must be 'little' or 'big', got {endianness!r}")
    nx, ny, nz = dims
    base = _DTYPES[dtype]
    want = nx * ny * nz * base.itemsize
    got = os.path.getsize(path)
    if got != want:
        raise ValueError(
            f"{path}: size mismatch for dims {dims} dtype {dtype}: "
            f"expected {want}, got {got}"
        )
    file_dt = base.newbyteorder("<" if endianness == "little" else ">")
    raw = np.fromfile(path, dtype=file_dt).reshape(nz, ny, nx)
    data = raw.astype(np.float64)
    if dtype in _INT_SCALE:
        data /= _INT_SCALE[dtype]
    return VolumeGrid(dims=tuple(dims), spacing=tuple(spacing), origin=tuple(origin), data=data)


def _voxel_coords(grid: VolumeGrid, points: np.ndarray) -> np.ndarray:
    """World positions -> continuous lattice coordinates, clamped to the box."""
    p = np.asarray(points, dtype=np.float64)
    v = (p - grid.world_min) / np.asarray(grid.spacing, dtype=np.float64)
    hi = np.asarray(grid.dims, dtype=np.float64) - 1.0
    return np.clip(v, 0.0, hi)


def sample_trilinear(grid: VolumeGrid, points: np.ndarray) -> np.ndarray | float:
    """Trilinearly interpolate the field at world-space points.

    Accepts a single point of shape (3,) or a batch (..., 3). Out-of-box points
    are clamped to the boundary before interpolation.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    v = _voxel_coords(grid, p.reshape(-1, 3))
    nx, ny, nz = grid.dims
    # Base corner, kept one cell inside so i0+1 is always valid.
    i0 = np.minimum(np.floor(v).astype(np.int64), np.asarray([nx, ny, nz]) - 2)
    i0 = np.maximum(i0, 0)
    f = v - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    d = grid.data
    c000 = d[z0, y0, x0]
    c100 = d[z0, y0, x1]
    c010 = d[z0, y1, x0]
    c110 = d[z0, y1, x1]
    c001 = d[z1, y0, x0]
    c101 = d[z1, y0, x1]
    c011 = d[z1, y1, x0]
    c111 = d[z1, y1, x1]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    out = c0 + (c1 - c0) * fz
    if single:
        return float(out[0])
    return out.reshape(p.shape[:-1])


def gradient_central(grid: VolumeGrid, points: np.ndarray) -> np.ndarray:
    """Field gradient by central differences with step equal to the voxel spacing.

    Falls back to one-sided differences when a probe would leave the bounding
    box. Accepts (3,) or (..., 3); returns the matching shape.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    wmin = grid.world_min
    wmax = grid.world_max
    grad = np.empty_like(pts)
    for axis in range(3):
        h = float(grid.spacing[axis])
        hi_ok = pts[:, axis] + h <= wmax[axis] + 1e-12
        lo_ok = pts[:, axis] - h >= wmin[axis] - 1e-12
        p_hi = pts.copy()
        p_hi[hi_ok, axis] += h
        p_lo = pts.copy()
        p_lo[lo_ok, axis] -= h
        f_hi = sample_trilinear(grid, p_hi)
        f_lo = sample_trilinear(grid, p_lo)
        denom = h * (hi_ok.astype(np.float64) + lo_ok.astype(np.float64))
        # Degenerate axis (single slice): both probes clamped, gradient is zero.
        safe = np.where(denom > 0.0, denom, 1.0)
        grad[:, axis] = np.where(denom > 0.0, (f_hi - f_lo) / safe, 0.0)
    if single:
        return grad[0]
    return grad.reshape(p.shape)


@dataclass(frozen=True)
class PointCloud:
    """Surface samples with unit normals. Arrays are float64, shape (N, 3)."""

    positions: np.ndarray
    normals: np.ndarray

    def __post_init__(self) -> None:
        if self.positions.shape != self.normals.shape or self.positions.ndim != 2 \
                or self.positions.shape[1] != 3:
            raise ValueError(
                f"positions {self.positions.shape} / normals {self.normals.shape} "
                "must both be (N, 3)"
            )

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def _axis_crossings(
    vals: np.ndarray,
    isovalue: float,
    axis_data: int,
    stride: int,
    grid: VolumeGrid,
) -> np.ndarray:
    """Crossing positions along one lattice axis of the strided sub-grid.

    ``vals`` has shape (sz, sy, sx); ``axis_data`` is the data axis the edges
    run along (2 = x, 1 = y, 0 = z). Emission order is C order over the edge
    start index, which keeps the overall output canonical.
    """
    a = vals
    sl_lo = [slice(None)] * 3
    sl_hi = [slice(None)] * 3
    sl_lo[axis_data] = slice(0, -1)
    sl_hi[axis_data] = slice(1, None)
    v0 = a[tuple(sl_lo)]
    v1 = a[tuple(sl_hi)]
    cross = (v0 - isovalue) * (v1 - isovalue) < 0.0
    if not cross.any():
        return np.empty((0, 3), dtype=np.float64)
    kz, ky, kx = np.nonzero(cross)
    t = (isovalue - v0[kz, ky, kx]) / (v1[kz, ky, kx] - v0[kz, ky, kx])
    idx = np.stack([kx, ky, kz], axis=1).astype(np.float64)
    world_axis = 2 - axis_data
    idx[:, world_axis] += t
    sp = np.asarray(grid.spacing, dtype=np.float64)
    return grid.world_min + idx * (stride * sp)


def extract_isosurface_points(
    grid: VolumeGrid,
    isovalue: float,
    stride: int = 1,
    max_points: int | None = None,
    seed: int = 0,
) -> PointCloud:
    """Collect isovalue crossings on lattice edges as an oriented point cloud.

    Walks the (optionally strided) lattice and emits the linear interpolation
    point of every sign change along x, then y, then z edges, each block in C
    order, so the output order is a pure function of the inputs. Normals are
    normalized central-difference gradients; a zero gradient falls back to
    (0, 0, 1). If ``max_points`` is exceeded, a seeded uniform subsample is
    drawn and re-sorted into extraction order.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    lo, hi = grid.value_range
    if not (lo < isovalue < hi):
        # No edge can straddle a value outside the open data range.
        return PointCloud(
            positions=np.empty((0, 3), dtype=np.float64),
            normals=np.empty((0, 3), dtype=np.float64),
        )
    vals = grid.data[::stride, ::stride, ::stride]
    parts = [
        _axis_crossings(vals, isovalue, 2, stride, grid),
        _axis_crossings(vals, isovalue, 1, stride, grid),
        _axis_crossings(vals, isovalue, 0, stride, grid),
    ]
    positions = np.concatenate(parts, axis=0)
    if max_points is not None and positions.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(positions.shape[0], size=max_points, replace=False))
        positions = positions[keep]
    if positions.shape[0] == 0:
        return PointCloud(
            positions=np.empty((0, 3), dtype=np.float64),
            normals=np.empty((0, 3), dtype=np.float64),
        )
    g = gradient_central(grid, positions)
    norms = np.linalg.norm(g, axis=1)
    ok = norms > 1e-12
    normals = np.empty_like(g)
    normals[ok] = g[ok] / norms[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return PointCloud(positions=positions, normals=normals)


def save_point_cloud(path: str, cloud: PointCloud) -> None:
    """Write a point cloud as magic + version + count + f32 positions + f32 normals."""
    n = cloud.count
    with open(path, "wb") as fh:
        fh.write(_POINTS_MAGIC)
        fh.write(struct.pack("<IQ", _POINTS_VERSION, n))
        fh.write(np.ascontiguousarray(cloud.positions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cloud.normals, dtype="<f4").tobytes())


def load_point_cloud(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _POINTS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_POINTS_MAGIC!r}")
    version, n = struct.unpack_from("<IQ", blob, 4)
    if version != _POINTS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = 4 + struct.calcsize("<IQ")
    want = body + 2 * n * 3 * 4
    if len(blob) != want:
        raise ValueError(f"{path}: expected {want} bytes for {n} points, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", offset=body)
    positions = flat[: n * 3].reshape(n, 3).astype(np.float64)
    normals = flat[n * 3 :].reshape(n, 3).astype(np.float64)
    return PointCloud(positions=positions, normals=normals)

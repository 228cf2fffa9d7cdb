"""Shared fixtures: analytic volumes and small training datasets."""

from __future__ import annotations

import numpy as np
import pytest

from isosplat.camera import OrbitSpec, make_orbit
from isosplat.images import quantize8
from isosplat.raycast import raycast_isosurface
from isosplat.training import TrainDataset
from isosplat.volume import VolumeGrid, extract_isosurface_points


def distance_field(n: int, spacing: float = 1.0) -> VolumeGrid:
    """n^3 grid holding the Euclidean distance to the lattice center."""
    c = (n - 1) / 2.0
    ax = np.arange(n, dtype=np.float64)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    data = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2) * spacing
    return VolumeGrid(dims=(n, n, n), spacing=(spacing,) * 3,
                      origin=(0.0, 0.0, 0.0), data=data)


def orbit_for_grid(grid: VolumeGrid, count: int, resolution: int) -> OrbitSpec:
    """Inward orbit framing the whole volume: radius 1.5 x half-diagonal."""
    lo = np.asarray(grid.world_min)
    hi = np.asarray(grid.world_max)
    center = tuple((lo + hi) / 2.0)
    radius = 1.5 * float(np.linalg.norm(hi - lo) / 2.0)
    return OrbitSpec(count=count, center=center, radius=radius,
                     width=resolution, height=resolution)


def build_dataset(grid: VolumeGrid, isovalue: float, views: int,
                  resolution: int, max_points: int) -> TrainDataset:
    """Extract points and raycast ground truth, images stored as f32 like PNG loads."""
    points = extract_isosurface_points(grid, isovalue, max_points=max_points, seed=0)
    cams = make_orbit(orbit_for_grid(grid, views, resolution))
    imgs = np.stack([
        quantize8(raycast_isosurface(grid, isovalue, c)).astype(np.float32)
        for c in cams
    ])
    return TrainDataset(cameras=cams, images=imgs, points=points)


@pytest.fixture(scope="session")
def sphere_grid() -> VolumeGrid:
    return distance_field(64)


@pytest.fixture(scope="session")
def sphere_points(sphere_grid):
    return extract_isosurface_points(sphere_grid, 20.0, max_points=3000, seed=0)


@pytest.fixture(scope="session")
def sphere_dataset(sphere_grid) -> TrainDataset:
    """The desk-scale benchmark scene: 64^3 sphere, 64 views at 128^2."""
    return build_dataset(sphere_grid, 20.0, views=64, resolution=128, max_points=3000)


@pytest.fixture(scope="session")
def tiny_dataset() -> TrainDataset:
    """Small, fast scene for loop-level tests: 16^3 sphere, 4 views at 32^2."""
    return build_dataset(distance_field(16), 5.0, views=4, resolution=32, max_points=48)

"""Pinhole cameras and deterministic orbit generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Golden-angle increment used by the sphere orbit.
_GOLDEN = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class Camera:
    """World-to-camera pose plus pinhole intrinsics.

    ``rotation`` maps world to camera coordinates (rows are the camera axes in
    world space); ``translation`` completes q = R p + t. Camera space looks
    down +z with image v growing downward. Pixel centers sit at integer
    coordinates: u = fx * x / z + cx.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max error {err:.3g})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation must be right-handed")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def position(self) -> np.ndarray:
        """Camera center in world space."""
        return -self.rotation.T @ self.translation


def look_at(
    position: np.ndarray,
    target: np.ndarray,
    up: np.ndarray,
    fov_y: float,
    width: int,
    height: int,
) -> Camera:
    """Build a camera at ``position`` looking at ``target``.

    The view axis is z = normalize(target - position); x = normalize(z x up)
    and y = z x x complete a right-handed frame with v growing downward. When
    the view axis is parallel to ``up``, the up hint falls back to (1,0,0) and
    then (0,1,0).
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - position
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera position coincides with target")
    z = z / nz
    for candidate in (np.asarray(up, dtype=np.float64),
                      np.array([1.0, 0.0, 0.0]),
                      np.array([0.0, 1.0, 0.0])):
        x = np.cross(z, candidate)
        nx = np.linalg.norm(x)
        if nx > 1e-8:
            x = x / nx
            break
    else:  # pragma: no cover - second fallback always succeeds
        raise ValueError("degenerate up vector")
    y = np.cross(z, x)
    rotation = np.stack([x, y, z], axis=0)
    translation = -rotation @ position
    f = height / (2.0 * math.tan(fov_y / 2.0))
    return Camera(
        rotation=rotation,
        translation=translation,
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


@dataclass(frozen=True)
class OrbitSpec:
    """Parameters for a deterministic orbit of inward-looking cameras."""

    count: int = 448
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_y: float = math.radians(60.0)
    width: int = 512
    height: int = 512
    pattern: str = "fibonacci"

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError("fov_y must lie in (0, pi)")
        if self.pattern not in ("fibonacci", "ring"):
            raise ValueError(f"unknown orbit pattern {self.pattern!r}")


def make_orbit(spec: OrbitSpec) -> list[Camera]:
    """Place ``spec.count`` cameras on a sphere around the center, all looking in.

    The fibonacci pattern spreads directions near-uniformly over the whole
    sphere (z_i = 1 - 2(i + 0.5)/n with golden-angle azimuth). The ring
    pattern spaces them evenly on the circle perpendicular to ``up``.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    n = spec.count
    dirs = np.empty((n, 3), dtype=np.float64)
    if spec.pattern == "fibonacci":
        for i in range(n):
            z = 1.0 - 2.0 * (i + 0.5) / n
            r = math.sqrt(max(0.0, 1.0 - z * z))
            th = _GOLDEN * i
            dirs[i] = (r * math.cos(th), r * math.sin(th), z)
    else:
        up = np.asarray(spec.up, dtype=np.float64)
        up = up / np.linalg.norm(up)
        seed = np.array([1.0, 0.0, 0.0])
        if abs(np.dot(seed, up)) > 0.9:
            seed = np.array([0.0, 1.0, 0.0])
        e1 = np.cross(up, seed)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(up, e1)
        for i in range(n):
            th = 2.0 * math.pi * i / n
            dirs[i] = math.cos(th) * e1 + math.sin(th) * e2
    cams = []
    for i in range(n):
        pos = center + spec.radius * dirs[i]
        cams.append(look_at(pos, center, spec.up, spec.fov_y, spec.width, spec.height))
    return cams


def world_to_pixel(cam: Camera, point: np.ndarray):
    """Project world points to (u, v, depth). Depth is camera-space z.

    Accepts (3,) or (N, 3). Points at or behind the camera plane get their
    (possibly infinite) perspective result; callers cull on depth <= 0.
    """
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    q = p.reshape(-1, 3) @ cam.rotation.T + cam.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * q[:, 0] / q[:, 2] + cam.cx
        v = cam.fy * q[:, 1] / q[:, 2] + cam.cy
    depth = q[:, 2]
    if single:
        return float(u[0]), float(v[0]), float(depth[0])
    return u, v, depth


def save_cameras(path: str, cameras: list[Camera]) -> None:
    """Write cameras to JSON (rotation row-major, full float precision)."""
    payload = [
        {
            "rotation": cam.rotation.tolist(),
            "translation": cam.translation.tolist(),
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
        }
        for cam in cameras
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_cameras(path: str) -> list[Camera]:
    with open(path) as fh:
        payload = json.load(fh)
    return [
        Camera(
            rotation=np.asarray(item["rotation"], dtype=np.float64),
            translation=np.asarray(item["translation"], dtype=np.float64),
            fx=float(item["fx"]),
            fy=float(item["fy"]),
            cx=float(item["cx"]),
            cy=float(item["cy"]),
            width=int(item["width"]),
            height=int(item["height"]),
        )
        for item in payload
    ]

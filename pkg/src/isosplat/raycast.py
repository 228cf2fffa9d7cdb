"""Ground-truth isosurface renderer: first-hit raycasting with headlight shading."""

from __future__ import annotations

import json
import os

import numpy as np
from numba import njit

from .camera import Camera
from .images import save_png
from .volume import VolumeGrid

DEFAULT_ALBEDO = (0.87, 0.80, 0.66)
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


@njit(cache=True, nogil=True)
def _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py, pz):
    """Clamped trilinear sample, identical math to the array sampler."""
    vx = (px - ox) / sx
    vy = (py - oy) / sy
    vz = (pz - oz) / sz
    if vx < 0.0:
        vx = 0.0
    elif vx > nx - 1.0:
        vx = nx - 1.0
    if vy < 0.0:
        vy = 0.0
    elif vy > ny - 1.0:
        vy = ny - 1.0
    if vz < 0.0:
        vz = 0.0
    elif vz > nz - 1.0:
        vz = nz - 1.0
    x0 = int(vx)
    y0 = int(vy)
    z0 = int(vz)
    if x0 > nx - 2:
        x0 = nx - 2
    if y0 > ny - 2:
        y0 = ny - 2
    if z0 > nz - 2:
        z0 = nz - 2
    if x0 < 0:
        x0 = 0
    if y0 < 0:
        y0 = 0
    if z0 < 0:
        z0 = 0
    fx = vx - x0
    fy = vy - y0
    fz = vz - z0
    c000 = data[z0, y0, x0]
    c100 = data[z0, y0, x0 + 1]
    c010 = data[z0, y0 + 1, x0]
    c110 = data[z0, y0 + 1, x0 + 1]
    c001 = data[z0 + 1, y0, x0]
    c101 = data[z0 + 1, y0, x0 + 1]
    c011 = data[z0 + 1, y0 + 1, x0]
    c111 = data[z0 + 1, y0 + 1, x0 + 1]
    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    return c0 + (c1 - c0) * fz


@njit(cache=True, nogil=True)
def _grad_axis(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py, pz, axis,
               wminx, wminy, wminz, wmaxx, wmaxy, wmaxz):
    if axis == 0:
        h = sx
        lo_ok = px - h >= wminx - 1e-12
        hi_ok = px + h <= wmaxx + 1e-12
        fh = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px + h if hi_ok else px, py, pz)
        fl = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px - h if lo_ok else px, py, pz)
    elif axis == 1:
        h = sy
        lo_ok = py - h >= wminy - 1e-12
        hi_ok = py + h <= wmaxy + 1e-12
        fh = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py + h if hi_ok else py, pz)
        fl = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py - h if lo_ok else py, pz)
    else:
        h = sz
        lo_ok = pz - h >= wminz - 1e-12
        hi_ok = pz + h <= wmaxz + 1e-12
        fh = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py, pz + h if hi_ok else pz)
        fl = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, px, py, pz - h if lo_ok else pz)
    denom = h * ((1.0 if hi_ok else 0.0) + (1.0 if lo_ok else 0.0))
    if denom <= 0.0:
        return 0.0
    return (fh - fl) / denom


@njit(cache=True, nogil=True)
def _render(data, nx, ny, nz, ox, oy, oz, sx, sy, sz,
            iso, rot, cam_pos, fx, fy, cx, cy, width, height,
            step, refine_steps, albedo, background, out):
    wminx, wminy, wminz = ox, oy, oz
    wmaxx = ox + (nx - 1.0) * sx
    wmaxy = oy + (ny - 1.0) * sy
    wmaxz = oz + (nz - 1.0) * sz
    for py in range(height):
        for px in range(width):
            dcx = (px - cx) / fx
            dcy = (py - cy) / fy
            inv = 1.0 / np.sqrt(dcx * dcx + dcy * dcy + 1.0)
            dcx *= inv
            dcy *= inv
            dcz = inv
            # World direction: columns of the rotation are the camera axes.
            dx = rot[0, 0] * dcx + rot[1, 0] * dcy + rot[2, 0] * dcz
            dy = rot[0, 1] * dcx + rot[1, 1] * dcy + rot[2, 1] * dcz
            dz = rot[0, 2] * dcx + rot[1, 2] * dcy + rot[2, 2] * dcz
            t0 = -1e30
            t1 = 1e30
            hit_box = True
            for axis in range(3):
                if axis == 0:
                    o, d, lo, hi = cam_pos[0], dx, wminx, wmaxx
                elif axis == 1:
                    o, d, lo, hi = cam_pos[1], dy, wminy, wmaxy
                else:
                    o, d, lo, hi = cam_pos[2], dz, wminz, wmaxz
                if abs(d) < 1e-15:
                    if o < lo or o > hi:
                        hit_box = False
                        break
                else:
                    ta = (lo - o) / d
                    tb = (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if not hit_box or t1 < t0:
                out[py, px, 0] = background[0]
                out[py, px, 1] = background[1]
                out[py, px, 2] = background[2]
                continue
            if t0 < 0.0:
                t0 = 0.0
            fa = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz,
                      cam_pos[0] + t0 * dx, cam_pos[1] + t0 * dy, cam_pos[2] + t0 * dz) - iso
            ta = t0
            found = False
            t_hit = 0.0
            t = t0
            while t < t1:
                t = t + step
                if t > t1:
                    t = t1
                fb = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz,
                          cam_pos[0] + t * dx, cam_pos[1] + t * dy, cam_pos[2] + t * dz) - iso
                if fa * fb < 0.0 or fb == 0.0:
                    tb_ = t
                    fa_ = fa
                    fb_ = fb
                    ta_ = ta
                    for _ in range(refine_steps):
                        tm = 0.5 * (ta_ + tb_)
                        fm = _tri(data, nx, ny, nz, ox, oy, oz, sx, sy, sz,
                                  cam_pos[0] + tm * dx, cam_pos[1] + tm * dy,
                                  cam_pos[2] + tm * dz) - iso
                        if fa_ * fm < 0.0:
                            tb_ = tm
                            fb_ = fm
                        else:
                            ta_ = tm
                            fa_ = fm
                    # Close from the final bracket with its linear zero crossing.
                    if fb_ != fa_:
                        t_hit = ta_ + (tb_ - ta_) * (-fa_) / (fb_ - fa_)
                    else:
                        t_hit = 0.5 * (ta_ + tb_)
                    found = True
                    break
                fa = fb
                ta = t
                if t >= t1:
                    break
            if not found:
                out[py, px, 0] = background[0]
                out[py, px, 1] = background[1]
                out[py, px, 2] = background[2]
                continue
            hx = cam_pos[0] + t_hit * dx
            hy = cam_pos[1] + t_hit * dy
            hz = cam_pos[2] + t_hit * dz
            gx = _grad_axis(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, hx, hy, hz, 0,
                            wminx, wminy, wminz, wmaxx, wmaxy, wmaxz)
            gy = _grad_axis(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, hx, hy, hz, 1,
                            wminx, wminy, wminz, wmaxx, wmaxy, wmaxz)
            gz = _grad_axis(data, nx, ny, nz, ox, oy, oz, sx, sy, sz, hx, hy, hz, 2,
                            wminx, wminy, wminz, wmaxx, wmaxy, wmaxz)
            gn = np.sqrt(gx * gx + gy * gy + gz * gz)
            if gn < 1e-12:
                nxv, nyv, nzv = 0.0, 0.0, 1.0
            else:
                nxv, nyv, nzv = gx / gn, gy / gn, gz / gn
            ndd = nxv * dx + nyv * dy + nzv * dz
            if ndd > 0.0:
                nxv, nyv, nzv = -nxv, -nyv, -nzv
                ndd = -ndd
            lam = -ndd
            if lam < 0.0:
                lam = 0.0
            for c in range(3):
                v = albedo[c] * lam
                if v < 0.0:
                    v = 0.0
                elif v > 1.0:
                    v = 1.0
                out[py, px, c] = v


def raycast_isosurface(
    grid: VolumeGrid,
    isovalue: float,
    cam: Camera,
    albedo: tuple[float, float, float] = DEFAULT_ALBEDO,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
    step_scale: float = 0.5,
    refine_steps: int = 8,
) -> np.ndarray:
    """Render the isosurface seen by ``cam`` to a float64 (H, W, 3) image.

    Rays march through the volume bounding box at a fixed step of
    ``step_scale`` times the smallest voxel spacing; a sign change brackets
    the surface, which is then refined by bisection. Shading is a headlight
    Lambertian: albedo times the incidence cosine against the gradient
    normal, flipped to face the ray. Missed rays get the background color.
    """
    if step_scale <= 0.0:
        raise ValueError("step_scale must be positive")
    lo, hi = grid.value_range
    if not (lo < isovalue < hi):
        # No crossing exists anywhere, so every ray misses.
        out = np.empty((cam.height, cam.width, 3), dtype=np.float64)
        out[:] = np.asarray(background, dtype=np.float64)
        return out
    nx, ny, nz = grid.dims
    out = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    step = step_scale * float(min(grid.spacing))
    _render(
        grid.data, nx, ny, nz,
        float(grid.origin[0]), float(grid.origin[1]), float(grid.origin[2]),
        float(grid.spacing[0]), float(grid.spacing[1]), float(grid.spacing[2]),
        float(isovalue), cam.rotation, cam.position,
        float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
        cam.width, cam.height, step, refine_steps,
        np.asarray(albedo, dtype=np.float64),
        np.asarray(background, dtype=np.float64),
        out,
    )
    return out


def generate_ground_truth(
    grid: VolumeGrid,
    isovalue: float,
    cameras: list[Camera],
    out_dir: str,
    albedo: tuple[float, float, float] = DEFAULT_ALBEDO,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
    step_scale: float = 0.5,
) -> dict:
    """Render every camera to ``out_dir`` and write a manifest of the views.

    Returns the manifest {"views": [{"image": filename, "camera_index": i},
    ...]}, identical to what lands in ``manifest.json``.
    """
    os.makedirs(out_dir, exist_ok=True)
    views = []
    for i, cam in enumerate(cameras):
        img = raycast_isosurface(grid, isovalue, cam, albedo, background, step_scale)
        name = f"view_{i:04d}.png"
        save_png(os.path.join(out_dir, name), img)
        views.append({"image": name, "camera_index": i})
    manifest = {"views": views}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest

"""Differentiable tile-based splat rendering: projection, forward, backward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .camera import Camera
from .gaussians import GaussianCloud

TILE_SIZE = 16


@dataclass(frozen=True)
class ProjectedSplat:
    """One screen-space Gaussian, as seen by the compositor."""

    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    tile_span: tuple[tuple[int, int], tuple[int, int]]


@dataclass
class SplatBatch:
    """Column-wise storage for the projected splats of one view.

    ``cov2d`` and ``conic`` are packed symmetric (a, b, c). ``indices`` are
    rows of the source cloud (global ids when projecting a shard).
    ``tile_min``/``tile_max`` are inclusive tile rectangles.
    """

    indices: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    tile_min: np.ndarray
    tile_max: np.ndarray
    width: int
    height: int
    tile_size: int
    tiles_x: int
    tiles_y: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __getitem__(self, i: int) -> ProjectedSplat:
        a, b, c = self.cov2d[i]
        return ProjectedSplat(
            gaussian_index=int(self.indices[i]),
            mean2d=self.mean2d[i].copy(),
            cov2d=np.array([[a, b], [b, c]]),
            depth=float(self.depth[i]),
            color=self.color[i].copy(),
            opacity=float(self.opacity[i]),
            tile_span=(
                (int(self.tile_min[i, 0]), int(self.tile_min[i, 1])),
                (int(self.tile_max[i, 0]), int(self.tile_max[i, 1])),
            ),
        )


@dataclass
class RenderAux:
    """Side outputs of a forward render, consumed by backward and densification.

    Per-splat arrays align with the batch rows that produced the render;
    ``grad_norm`` is filled by the backward pass.
    """

    t_final: np.ndarray
    contrib_count: np.ndarray
    indices: np.ndarray
    touch_count: np.ndarray
    grad_norm: np.ndarray
    width: int
    height: int
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class ParamGradients:
    """Dense loss gradients for every cloud parameter row."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray


def _f64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64)


def project(
    cloud: GaussianCloud,
    cam: Camera,
    tile_size: int = TILE_SIZE,
    indices: np.ndarray | None = None,
) -> SplatBatch:
    """EWA-project a cloud (or shard) into screen space, culling off-view rows.

    Kept are Gaussians with camera depth above the near plane whose 3-sigma
    box touches the image. ``indices`` relabels rows with global ids when the
    cloud is a shard; batch order follows cloud order.
    """
    n = cloud.count
    if indices is None:
        indices = np.arange(n, dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (n,):
            raise ValueError(f"indices shape {indices.shape} != ({n},)")
    tiles_x = (cam.width + tile_size - 1) // tile_size
    tiles_y = (cam.height + tile_size - 1) // tile_size
    flag = np.zeros(n, dtype=np.uint8)
    mean2d = np.empty((n, 2), dtype=np.float64)
    cov2d = np.empty((n, 3), dtype=np.float64)
    conic = np.empty((n, 3), dtype=np.float64)
    depth = np.empty(n, dtype=np.float64)
    color = np.empty((n, 3), dtype=np.float64)
    opacity = np.empty(n, dtype=np.float64)
    tiles = np.empty((n, 4), dtype=np.int32)
    if n:
        K._project_kernel(
            _f64(cloud.positions), _f64(cloud.log_scales), _f64(cloud.rotations),
            _f64(cloud.opacity_logits), _f64(cloud.sh_coeffs), cloud.degree,
            cam.rotation, cam.translation, cam.position,
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
            cam.width, cam.height, tile_size, tiles_x, tiles_y,
            flag, mean2d, cov2d, conic, depth, color, opacity, tiles)
    keep = flag.astype(bool)
    return SplatBatch(
        indices=indices[keep],
        mean2d=mean2d[keep],
        cov2d=cov2d[keep],
        conic=conic[keep],
        depth=depth[keep],
        color=color[keep],
        opacity=opacity[keep],
        tile_min=tiles[keep][:, 0:2],
        tile_max=tiles[keep][:, 2:4],
        width=cam.width,
        height=cam.height,
        tile_size=tile_size,
        tiles_x=tiles_x,
        tiles_y=tiles_y,
    )


def sort_order(batch: SplatBatch) -> np.ndarray:
    """The canonical compositing permutation: ascending (depth, index)."""
    return np.lexsort((batch.indices, batch.depth))


def build_tile_lists(
    sorted_tile_min: np.ndarray,
    sorted_tile_max: np.ndarray,
    own_tiles: np.ndarray,
    tiles_x: int,
    tiles_y: int,
) -> tuple[np.ndarray, np.ndarray]:
    """CSR tile lists over ``own_tiles`` for splats given in sorted order.

    Returns (offsets, entries): entries are sorted-splat rows, per tile in
    compositing order.
    """
    n_tiles = tiles_x * tiles_y
    tile_slot = np.full(n_tiles, -1, dtype=np.int32)
    tile_slot[own_tiles] = np.arange(own_tiles.shape[0], dtype=np.int32)
    rects = np.concatenate([sorted_tile_min, sorted_tile_max], axis=1).astype(np.int32)
    counts = np.zeros(own_tiles.shape[0], dtype=np.int64)
    if rects.shape[0]:
        K._count_tile_entries(rects, tile_slot, tiles_x, counts)
    offsets = np.zeros(own_tiles.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    entries = np.empty(offsets[-1], dtype=np.int32)
    cursor = np.zeros(own_tiles.shape[0], dtype=np.int64)
    if rects.shape[0]:
        K._fill_tile_entries(rects, tile_slot, tiles_x, offsets, cursor, entries)
    return offsets, entries


def forward_on_tiles(
    sorted_arrays: dict,
    own_tiles: np.ndarray,
    offsets: np.ndarray,
    entries: np.ndarray,
    width: int,
    height: int,
    tiles_x: int,
    tile_size: int,
    background: np.ndarray,
    image: np.ndarray,
    t_final: np.ndarray,
    n_contrib: np.ndarray,
    touched: np.ndarray,
) -> None:
    """Composite the given tiles into preallocated canvases."""
    K._forward_tiles(
        own_tiles, offsets, entries,
        sorted_arrays["mean2d"], sorted_arrays["conic"],
        sorted_arrays["color"], sorted_arrays["opacity"],
        tiles_x, tile_size, width, height, background,
        image, t_final, n_contrib, touched)


def backward_on_tiles(
    sorted_arrays: dict,
    own_tiles: np.ndarray,
    offsets: np.ndarray,
    entries: np.ndarray,
    width: int,
    height: int,
    tiles_x: int,
    tile_size: int,
    background: np.ndarray,
    dl_dimage: np.ndarray,
) -> dict:
    """Per-(tile, splat) gradient subtotals, scratch rows aligned with entries."""
    e = entries.shape[0]
    scratch = {
        "dmean": np.zeros((e, 2), dtype=np.float64),
        "dconic": np.zeros((e, 3), dtype=np.float64),
        "dcolor": np.zeros((e, 3), dtype=np.float64),
        "dopac": np.zeros(e, dtype=np.float64),
    }
    K._backward_tiles(
        own_tiles, offsets, entries,
        sorted_arrays["mean2d"], sorted_arrays["conic"],
        sorted_arrays["color"], sorted_arrays["opacity"],
        tiles_x, tile_size, width, height, background,
        _f64(dl_dimage),
        scratch["dmean"], scratch["dconic"], scratch["dcolor"], scratch["dopac"])
    return scratch


def chain_to_params(
    cloud: GaussianCloud,
    cam: Camera,
    flags: np.ndarray,
    acc_dmean: np.ndarray,
    acc_dconic: np.ndarray,
    acc_dcolor: np.ndarray,
    acc_dopac: np.ndarray,
) -> ParamGradients:
    """2D splat gradients -> 3D parameter gradients, one chain per flagged row."""
    n = cloud.count
    k = (cloud.degree + 1) ** 2
    dpos = np.zeros((n, 3), dtype=np.float64)
    dls = np.zeros((n, 3), dtype=np.float64)
    drot = np.zeros((n, 4), dtype=np.float64)
    dlogit = np.zeros(n, dtype=np.float64)
    dsh = np.zeros((n, k, 3), dtype=np.float64)
    if n:
        K._chain_kernel(
            _f64(cloud.positions), _f64(cloud.log_scales), _f64(cloud.rotations),
            _f64(cloud.opacity_logits), _f64(cloud.sh_coeffs), cloud.degree,
            cam.rotation, cam.translation, cam.position,
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
            flags, acc_dmean, acc_dconic, acc_dcolor, acc_dopac,
            dpos, dls, drot, dlogit, dsh)
    dt = cloud.positions.dtype
    return ParamGradients(
        positions=dpos.astype(dt),
        log_scales=dls.astype(dt),
        rotations=drot.astype(dt),
        opacity_logits=dlogit.astype(dt),
        sh_coeffs=dsh.astype(dt),
    )


def _sorted_arrays(batch: SplatBatch, order: np.ndarray) -> dict:
    return {
        "mean2d": batch.mean2d[order],
        "conic": batch.conic[order],
        "color": batch.color[order],
        "opacity": batch.opacity[order],
        "tile_min": batch.tile_min[order],
        "tile_max": batch.tile_max[order],
    }


def render_forward(
    batch: SplatBatch,
    width: int,
    height: int,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
    tile_size: int = TILE_SIZE,
    dtype=np.float32,
) -> tuple[np.ndarray, RenderAux, np.ndarray]:
    """Composite a projected batch front-to-back over the full image.

    Splats sort globally by (depth, index); per pixel, alpha contributions
    accumulate until transmittance would drop below the stop threshold, then
    the background fills what remains. Returns the image, auxiliary buffers,
    and the sort order the backward pass must reuse.
    """
    if width != batch.width or height != batch.height or tile_size != batch.tile_size:
        raise ValueError("render dims must match the projecting camera")
    order = sort_order(batch)
    sa = _sorted_arrays(batch, order)
    own_tiles = np.arange(batch.tiles_x * batch.tiles_y, dtype=np.int32)
    offsets, entries = build_tile_lists(
        sa["tile_min"], sa["tile_max"], own_tiles, batch.tiles_x, batch.tiles_y)
    image = np.zeros((height, width, 3), dtype=dtype)
    t_final = np.ones((height, width), dtype=np.float64)
    n_contrib = np.zeros((height, width), dtype=np.int32)
    touched_sorted = np.zeros(len(batch), dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64)
    forward_on_tiles(sa, own_tiles, offsets, entries, width, height,
                     batch.tiles_x, tile_size, bg, image, t_final,
                     n_contrib, touched_sorted)
    touched = np.zeros(len(batch), dtype=np.int64)
    touched[order] = touched_sorted
    aux = RenderAux(
        t_final=t_final,
        contrib_count=n_contrib,
        indices=batch.indices.copy(),
        touch_count=touched,
        grad_norm=np.zeros(len(batch), dtype=np.float64),
        width=width,
        height=height,
        cache={
            "sorted": sa,
            "own_tiles": own_tiles,
            "offsets": offsets,
            "entries": entries,
            "order": order,
            "background": bg,
            "tiles_x": batch.tiles_x,
            "tile_size": tile_size,
        },
    )
    return image, aux, order


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    batch: SplatBatch,
    order: np.ndarray,
    aux: RenderAux,
    dl_dimage: np.ndarray,
) -> ParamGradients:
    """Analytic gradients of the forward render for every cloud parameter.

    Subtotals accumulate per (tile, splat) and fold in ascending tile order,
    then each splat's 2D gradient chains through projection back to its 3D
    parameters. ``order`` and ``aux`` must come from the matching forward
    call. Densification statistics (2D position gradient norms) land in
    ``aux.grad_norm``.
    """
    cache = aux.cache
    if not cache or cache.get("order") is None:
        raise ValueError("aux does not carry forward-pass context")
    if order.shape != cache["order"].shape or not np.array_equal(order, cache["order"]):
        raise ValueError("sort order does not match the forward pass")
    if dl_dimage.shape != (aux.height, aux.width, 3):
        raise ValueError(
            f"dL/dImage shape {dl_dimage.shape} != {(aux.height, aux.width, 3)}")
    if len(batch) != order.shape[0] or np.any(aux.indices != batch.indices):
        raise ValueError("batch does not match the forward pass")
    m = len(batch)
    scratch = backward_on_tiles(
        cache["sorted"], cache["own_tiles"], cache["offsets"], cache["entries"],
        aux.width, aux.height, cache["tiles_x"], cache["tile_size"],
        cache["background"], dl_dimage)
    acc_dmean = np.zeros((m, 2), dtype=np.float64)
    acc_dconic = np.zeros((m, 3), dtype=np.float64)
    acc_dcolor = np.zeros((m, 3), dtype=np.float64)
    acc_dopac = np.zeros(m, dtype=np.float64)
    if m:
        K._reduce_scratch(cache["entries"],
                          scratch["dmean"], scratch["dconic"],
                          scratch["dcolor"], scratch["dopac"],
                          acc_dmean, acc_dconic, acc_dcolor, acc_dopac)
    # Sorted rows back to batch rows, then batch rows to cloud rows.
    b_dmean = np.zeros_like(acc_dmean)
    b_dconic = np.zeros_like(acc_dconic)
    b_dcolor = np.zeros_like(acc_dcolor)
    b_dopac = np.zeros_like(acc_dopac)
    b_dmean[order] = acc_dmean
    b_dconic[order] = acc_dconic
    b_dcolor[order] = acc_dcolor
    b_dopac[order] = acc_dopac
    aux.grad_norm[:] = np.hypot(b_dmean[:, 0], b_dmean[:, 1])
    n = cloud.count
    flags = np.zeros(n, dtype=np.uint8)
    full_dmean = np.zeros((n, 2), dtype=np.float64)
    full_dconic = np.zeros((n, 3), dtype=np.float64)
    full_dcolor = np.zeros((n, 3), dtype=np.float64)
    full_dopac = np.zeros(n, dtype=np.float64)
    rows = batch.indices
    flags[rows] = 1
    full_dmean[rows] = b_dmean
    full_dconic[rows] = b_dconic
    full_dcolor[rows] = b_dcolor
    full_dopac[rows] = b_dopac
    return chain_to_params(cloud, cam, flags, full_dmean, full_dconic,
                           full_dcolor, full_dopac)

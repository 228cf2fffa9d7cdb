"""Multi-worker training runtime over in-process channels.

Workers are threads that communicate only through per-pair queues and a phase
barrier; there is no shared mutable state. Every point where data from more
than one worker meets imposes a canonical order (global depth/index sort for
splats, ascending tile id for gradients, worker rank for gathers), which makes
the run bitwise reproducible for any worker count. W=1 executes the same
worker code inline and is the reference the multi-worker path must match.
"""

from __future__ import annotations

import math
import queue as queue_mod
import threading
import time
import traceback

import numpy as np

from .distributed import (
    GradChunk,
    GradMessage,
    ProtocolError,
    ShardMap,
    partition_gaussians,
    partition_pixels,
    rebalance,
    reduce_gradients_fused,
    route_rows,
)
from .gaussians import GaussianCloud, init_from_points
from .metrics import loss_l1_dssim
from .optim import adam_init, adam_step, position_lr
from .rasterizer import (
    backward_on_tiles,
    build_tile_lists,
    chain_to_params,
    forward_on_tiles,
    project,
)
from .training import (
    SPLIT_EXTENT_FRACTION,
    EvalRecord,
    TrainConfig,
    TrainDataset,
    TrainReport,
    TrainStats,
    densify_and_prune,
    eval_pair,
)

PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")
_BATCH_COLS = ("indices", "mean2d", "conic", "depth", "color", "opacity",
               "tile_min", "tile_max")


class _Aborted(Exception):
    """Internal: the run was torn down by another worker's failure."""


class _Mailboxes:
    """One FIFO per (src, dst) pair; receives poll so teardown cannot hang."""

    def __init__(self, workers: int):
        self.queues = [[queue_mod.SimpleQueue() for _ in range(workers)]
                       for _ in range(workers)]
        self.fail_event = threading.Event()

    def send(self, src: int, dst: int, tag: str, payload) -> None:
        self.queues[src][dst].put((tag, payload))

    def recv(self, src: int, dst: int, tag: str):
        q = self.queues[src][dst]
        while True:
            try:
                got, payload = q.get(timeout=0.05)
            except queue_mod.Empty:
                if self.fail_event.is_set():
                    raise _Aborted()
                continue
            if got != tag:
                raise ProtocolError(f"expected {tag!r} from worker {src}, got {got!r}")
            return payload


class _Shard:
    """One worker's parameter rows, optimizer slice, and densify stats.

    Row order always matches ``ids`` ascending; that invariant is what lets
    owner lookups use searchsorted.
    """

    def __init__(self, ids: np.ndarray, params: dict):
        self.ids = ids
        self.params = params
        self.state = adam_init(params)
        self.stats = TrainStats.zeros(ids.shape[0])

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    def cloud(self, degree: int) -> GaussianCloud:
        return GaussianCloud(degree=degree, **self.params)

    def local_rows(self, global_ids: np.ndarray) -> np.ndarray:
        rows = np.searchsorted(self.ids, global_ids)
        if rows.size and ((rows >= self.n).any()
                          or (self.ids[rows] != global_ids).any()):
            raise ProtocolError("row lookup for ids this worker does not own")
        return rows


class _RunContext:
    def __init__(self, dataset: TrainDataset, config: TrainConfig, workers: int,
                 shard_map: ShardMap, shards: list[_Shard], schedule: list[int]):
        self.dataset = dataset
        self.config = config
        self.workers = workers
        self.init_map = shard_map
        self.shards = shards
        self.schedule = schedule
        self.mail = _Mailboxes(workers)
        self.barrier = threading.Barrier(workers)
        self.background = np.asarray(config.background, dtype=np.float64)
        self.part = partition_pixels(dataset.width, dataset.height,
                                     config.tile_size, workers)
        res = config.resolution if config.resolution is not None else dataset.width
        self.grad_threshold = config.effective_grad_threshold(res)
        self.split_threshold = (config.split_threshold
                                if config.split_threshold is not None
                                else SPLIT_EXTENT_FRACTION * dataset.scene_extent)
        self.resolution = res
        self.fail_lock = threading.Lock()
        self.fail_info: tuple[int, str] | None = None
        self.result_cloud: GaussianCloud | None = None
        self.result_report: TrainReport | None = None

    def fail(self, worker: int, message: str) -> None:
        with self.fail_lock:
            if self.fail_info is None:
                self.fail_info = (worker, message)
        self.mail.fail_event.set()
        self.barrier.abort()

    def sync(self) -> None:
        try:
            self.barrier.wait()
        except threading.BrokenBarrierError:
            raise _Aborted() from None


def _tile_rect(tile_id: int, tiles_x: int, tile_size: int,
               width: int, height: int) -> tuple[int, int, int, int]:
    ty, tx = divmod(tile_id, tiles_x)
    x0 = tx * tile_size
    y0 = ty * tile_size
    return x0, y0, min(x0 + tile_size, width), min(y0 + tile_size, height)


def _pack_tiles(canvas: np.ndarray, tiles: np.ndarray, tiles_x: int,
                tile_size: int, width: int, height: int) -> np.ndarray:
    parts = []
    for tid in tiles:
        x0, y0, x1, y1 = _tile_rect(int(tid), tiles_x, tile_size, width, height)
        parts.append(canvas[y0:y1, x0:x1].ravel())
    if not parts:
        return np.empty(0, dtype=canvas.dtype)
    return np.concatenate(parts)


def _unpack_tiles(canvas: np.ndarray, tiles: np.ndarray, tiles_x: int,
                  tile_size: int, width: int, height: int,
                  flat: np.ndarray) -> None:
    pos = 0
    for tid in tiles:
        x0, y0, x1, y1 = _tile_rect(int(tid), tiles_x, tile_size, width, height)
        size = (y1 - y0) * (x1 - x0) * 3
        canvas[y0:y1, x0:x1] = flat[pos:pos + size].reshape(y1 - y0, x1 - x0, 3)
        pos += size


def _forward_view(ctx: _RunContext, w: int, shard: _Shard, cam,
                  timings: dict | None) -> dict:
    """Project, route, and composite one view; returns the full canvas plus
    the per-tile context the backward pass needs. All workers must call this
    in lockstep."""
    cfg = ctx.config
    W = ctx.workers
    ts = cfg.tile_size
    part = ctx.part
    tiles_x, tiles_y = part.tiles_x, part.tiles_y

    t0 = time.perf_counter()
    batch = project(shard.cloud(cfg.sh_degree), cam, ts, indices=shard.ids)
    proj_rows = shard.local_rows(batch.indices)
    ctx.sync()
    t1 = time.perf_counter()

    mask = route_rows(batch.tile_min, batch.tile_max, W, tiles_x)
    parts: list[dict | None] = [None] * W
    for dst in range(W):
        rows = np.nonzero(mask[:, dst])[0] if len(batch) else np.empty(0, np.int64)
        payload = {c: getattr(batch, c)[rows] for c in _BATCH_COLS}
        if dst == w:
            parts[w] = payload
        else:
            ctx.mail.send(w, dst, "splats", payload)
    for src in range(W):
        if src != w:
            parts[src] = ctx.mail.recv(src, w, "splats")
    merged = {c: np.concatenate([p[c] for p in parts]) for c in _BATCH_COLS}
    order = np.lexsort((merged["indices"], merged["depth"]))
    ms = {c: merged[c][order] for c in _BATCH_COLS}
    ctx.sync()
    t2 = time.perf_counter()

    own_tiles = part.tiles_of(w)
    offsets, entries = build_tile_lists(ms["tile_min"], ms["tile_max"],
                                        own_tiles, tiles_x, tiles_y)
    h, wd = ctx.dataset.height, ctx.dataset.width
    canvas = np.zeros((h, wd, 3), dtype=np.float32)
    t_final = np.ones((h, wd), dtype=np.float64)
    n_contrib = np.zeros((h, wd), dtype=np.int32)
    touched = np.zeros(ms["indices"].shape[0], dtype=np.int64)
    forward_on_tiles(ms, own_tiles, offsets, entries, wd, h, tiles_x, ts,
                     ctx.background, canvas, t_final, n_contrib, touched)
    if W > 1:
        frag = _pack_tiles(canvas, own_tiles, tiles_x, ts, wd, h)
        for dst in range(W):
            if dst != w:
                ctx.mail.send(w, dst, "frag", frag)
        for src in range(W):
            if src != w:
                flat = ctx.mail.recv(src, w, "frag")
                _unpack_tiles(canvas, part.tiles_of(src), tiles_x, ts, wd, h, flat)
    ctx.sync()
    t3 = time.perf_counter()
    if timings is not None:
        timings["project_s"] = t1 - t0
        timings["route_s"] = t2 - t1
        timings["composite_s"] = t3 - t2
    return {
        "batch": batch,
        "proj_rows": proj_rows,
        "ms": ms,
        "own_tiles": own_tiles,
        "offsets": offsets,
        "entries": entries,
        "canvas": canvas,
        "tiles_x": tiles_x,
    }


def _grad_messages(ctx: _RunContext, w: int, smap: ShardMap, fv: dict,
                   scratch: dict) -> list[GradMessage]:
    """Split this worker's per-tile gradient subtotals by parameter owner."""
    W = ctx.workers
    ms = fv["ms"]
    offsets, entries, own_tiles = fv["offsets"], fv["entries"], fv["own_tiles"]
    dest_of = smap.owner[ms["indices"]] if ms["indices"].size else \
        np.empty(0, dtype=np.int32)
    chunks: list[list[GradChunk]] = [[] for _ in range(W)]
    for k in range(own_tiles.shape[0]):
        e0, e1 = int(offsets[k]), int(offsets[k + 1])
        if e0 == e1:
            continue
        rows = entries[e0:e1]
        gidx = ms["indices"][rows]
        dsts = dest_of[rows]
        tid = int(own_tiles[k])
        for dst in np.unique(dsts):
            sel = np.nonzero(dsts == dst)[0]
            chunks[dst].append(GradChunk(
                tile_id=tid,
                indices=gidx[sel],
                dmean2d=scratch["dmean"][e0:e1][sel],
                dconic=scratch["dconic"][e0:e1][sel],
                dcolor=scratch["dcolor"][e0:e1][sel],
                dopacity=scratch["dopac"][e0:e1][sel],
            ))
    return [GradMessage(producer=w, destination=dst, chunks=chunks[dst])
            for dst in range(W)]


def _gather_rank_order(ctx: _RunContext, w: int, tag: str, payload) -> list:
    """All-gather: returns every worker's payload indexed by rank."""
    W = ctx.workers
    out: list = [None] * W
    out[w] = payload
    for dst in range(W):
        if dst != w:
            ctx.mail.send(w, dst, tag, payload)
    for src in range(W):
        if src != w:
            out[src] = ctx.mail.recv(src, w, tag)
    return out


def _ranks(values: np.ndarray) -> np.ndarray:
    r = np.empty(values.shape[0], dtype=np.int64)
    r[np.argsort(values)] = np.arange(values.shape[0], dtype=np.int64)
    return r


def _densify_step(ctx: _RunContext, w: int, shard: _Shard, smap: ShardMap,
                  iteration: int) -> tuple[_Shard, ShardMap]:
    """Shard-local densify/prune, then a globally agreed id reassignment.

    New ids order the survivors as a single worker would: all kept rows by
    ascending old id, then all clones by parent id, then split children in
    parent order. Every worker derives the same owner map from the gathered
    per-class id lists, so no central coordinator is involved.
    """
    cfg = ctx.config
    W = ctx.workers
    new_cloud, mapping = densify_and_prune(
        shard.cloud(cfg.sh_degree), shard.stats, cfg, iteration,
        grad_threshold=ctx.grad_threshold,
        split_threshold=ctx.split_threshold,
        global_ids=shard.ids)
    kept_old = shard.ids[mapping.kept]
    clone_old = shard.ids[mapping.cloned]
    split_old = shard.ids[mapping.split]
    gathered = _gather_rank_order(ctx, w, "densify",
                                  (kept_old, clone_old, split_old))
    kept_all = np.concatenate([g[0] for g in gathered])
    clone_all = np.concatenate([g[1] for g in gathered])
    split_all = np.concatenate([g[2] for g in gathered])
    src_kept = np.repeat(np.arange(W, dtype=np.int32),
                         [g[0].shape[0] for g in gathered])
    src_clone = np.repeat(np.arange(W, dtype=np.int32),
                          [g[1].shape[0] for g in gathered])
    src_split = np.repeat(np.arange(W, dtype=np.int32),
                          [g[2].shape[0] for g in gathered])
    n_kept, n_clone, n_split = kept_all.shape[0], clone_all.shape[0], split_all.shape[0]
    kept_new = _ranks(kept_all)
    clone_new = n_kept + _ranks(clone_all)
    split_rank = _ranks(split_all)
    child_base = n_kept + n_clone
    child_pairs = np.empty((n_split, 2), dtype=np.int64)
    child_pairs[:, 0] = child_base + 2 * split_rank
    child_pairs[:, 1] = child_base + 2 * split_rank + 1
    n_new = n_kept + n_clone + 2 * n_split

    owner = np.empty(n_new, dtype=np.int32)
    owner[kept_new] = src_kept
    owner[clone_new] = src_clone
    owner[child_pairs[:, 0]] = src_split
    owner[child_pairs[:, 1]] = src_split
    lists = []
    for u in range(W):
        lists.append(np.sort(np.concatenate([
            kept_new[src_kept == u],
            clone_new[src_clone == u],
            child_pairs[src_split == u].ravel(),
        ])))
    new_map = ShardMap(workers=W, owner=owner, lists=lists)
    new_map.validate()

    off_k = int(np.sum([g[0].shape[0] for g in gathered[:w]]))
    off_c = int(np.sum([g[1].shape[0] for g in gathered[:w]]))
    off_s = int(np.sum([g[2].shape[0] for g in gathered[:w]]))
    my_ids = np.concatenate([
        kept_new[off_k:off_k + kept_old.shape[0]],
        clone_new[off_c:off_c + clone_old.shape[0]],
        child_pairs[off_s:off_s + split_old.shape[0]].ravel(),
    ])
    if not np.array_equal(my_ids, new_map.lists[w]):
        raise ProtocolError("densify id reassignment lost shard alignment")
    params = {name: getattr(new_cloud, name) for name in PARAM_NAMES}
    new_shard = _Shard(my_ids, params)
    # Kept rows carry their optimizer moments; new rows start cold.
    kept_n = mapping.kept.shape[0]
    for name in PARAM_NAMES:
        for key in ("m", "v"):
            old = shard.state[name][key]
            fresh = np.zeros_like(params[name])
            fresh[:kept_n] = old[mapping.kept]
            new_shard.state[name][key] = fresh
    return new_shard, new_map


def _rebalance_step(ctx: _RunContext, w: int, shard: _Shard,
                    smap: ShardMap) -> tuple[_Shard, ShardMap]:
    plan, new_map = rebalance(smap, smap.sizes)
    if not plan:
        return shard, new_map
    outgoing: dict[int, list[int]] = {}
    incoming_srcs: dict[int, int] = {}
    for g, src, dst in plan:
        if src == w:
            outgoing.setdefault(dst, []).append(g)
        if dst == w:
            incoming_srcs[src] = incoming_srcs.get(src, 0) + 1
    send_rows = []
    for dst in sorted(outgoing):
        gids = np.array(sorted(outgoing[dst]), dtype=np.int64)
        rows = shard.local_rows(gids)
        payload = {
            "ids": gids,
            "params": {n: shard.params[n][rows] for n in PARAM_NAMES},
            "m": {n: shard.state[n]["m"][rows] for n in PARAM_NAMES},
            "v": {n: shard.state[n]["v"][rows] for n in PARAM_NAMES},
        }
        ctx.mail.send(w, dst, "move", payload)
        send_rows.append(rows)
    ids = shard.ids
    params = shard.params
    state = shard.state
    if send_rows:
        drop = np.concatenate(send_rows)
        keep = np.ones(shard.n, dtype=bool)
        keep[drop] = False
        ids = ids[keep]
        params = {n: params[n][keep] for n in PARAM_NAMES}
        state = {n: {k: state[n][k][keep] for k in ("m", "v")} for n in PARAM_NAMES}
    add = []
    for src in sorted(incoming_srcs):
        add.append(ctx.mail.recv(src, w, "move"))
    if add:
        ids = np.concatenate([ids] + [p["ids"] for p in add])
        params = {n: np.concatenate([params[n]] + [p["params"][n] for p in add])
                  for n in PARAM_NAMES}
        state = {n: {k: np.concatenate([state[n][k]] + [p[k][n] for p in add])
                     for k in ("m", "v")} for n in PARAM_NAMES}
    order = np.argsort(ids)
    new_shard = _Shard(ids[order], {n: params[n][order] for n in PARAM_NAMES})
    for n in PARAM_NAMES:
        for k in ("m", "v"):
            new_shard.state[n][k] = state[n][k][order]
    if not np.array_equal(new_shard.ids, new_map.lists[w]):
        raise ProtocolError("rebalance moves lost shard alignment")
    if new_shard.n > math.ceil(new_map.total / ctx.workers):
        raise AssertionError("rebalance left an over-full shard")
    return new_shard, new_map


def _evaluate(ctx: _RunContext, w: int, shard: _Shard, iteration: int,
              n_global: int, wall_s: float) -> EvalRecord | None:
    """Render every dataset view and (on worker 0) average the metrics."""
    losses, psnrs, ssims = [], [], []
    for v in range(ctx.dataset.view_count):
        fv = _forward_view(ctx, w, shard, ctx.dataset.cameras[v], None)
        if w == 0:
            ref = ctx.dataset.images[v]
            losses.append(loss_l1_dssim(fv["canvas"], ref,
                                        ctx.config.lambda_dssim)[0])
            p, s = eval_pair(fv["canvas"], ref)
            psnrs.append(p)
            ssims.append(s)
    if w != 0:
        return None
    return EvalRecord(
        iteration=iteration,
        loss=float(np.mean(losses)),
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        wall_s=wall_s,
        gaussians=n_global,
    )


def _worker_run(ctx: _RunContext, w: int) -> None:
    cfg = ctx.config
    W = ctx.workers
    shard = ctx.shards[w]
    smap = ShardMap(workers=W, owner=ctx.init_map.owner.copy(),
                    lists=[l.copy() for l in ctx.init_map.lists])
    stop_densify = cfg.effective_densify_stop()
    records: list[EvalRecord] = []
    losses: list[float] = []
    phase_rows: list[dict] = []
    train_wall = 0.0

    rec = _evaluate(ctx, w, shard, 0, smap.total, 0.0)
    if rec is not None:
        records.append(rec)

    for it in range(1, cfg.iterations + 1):
        iter_t0 = time.perf_counter()
        timings: dict = {"iteration": it}
        view = ctx.schedule[it - 1]
        cam = ctx.dataset.cameras[view]
        ref = ctx.dataset.images[view]

        fv = _forward_view(ctx, w, shard, cam, timings)
        loss, dimg = loss_l1_dssim(fv["canvas"], ref, cfg.lambda_dssim)

        tb0 = time.perf_counter()
        scratch = backward_on_tiles(
            fv["ms"], fv["own_tiles"], fv["offsets"], fv["entries"],
            ctx.dataset.width, ctx.dataset.height, fv["tiles_x"],
            cfg.tile_size, ctx.background, dimg)
        ctx.sync()
        tb1 = time.perf_counter()

        msgs = _grad_messages(ctx, w, smap, fv, scratch)
        inbox = [msgs[w]]
        for dst in range(W):
            if dst != w:
                ctx.mail.send(w, dst, "grads", msgs[dst])
        for src in range(W):
            if src != w:
                inbox.append(ctx.mail.recv(src, w, "grads"))
        acc = reduce_gradients_fused(inbox, smap)[w]
        proj = fv["proj_rows"]
        shard.stats.seen[proj] += 1
        # Densify pressure is measured in viewport units (screen spans 2):
        # pixel-space position gradients scale by half the image size, which
        # keeps the threshold meaningful across render resolutions.
        shard.stats.grad_accum[proj] += np.hypot(
            acc["dmean2d"][proj, 0] * (0.5 * ctx.dataset.width),
            acc["dmean2d"][proj, 1] * (0.5 * ctx.dataset.height))
        flags = np.zeros(shard.n, dtype=np.uint8)
        flags[proj] = 1
        pg = chain_to_params(shard.cloud(cfg.sh_degree), cam, flags,
                             acc["dmean2d"], acc["dconic"], acc["dcolor"],
                             acc["dopacity"])
        ctx.sync()
        tb2 = time.perf_counter()

        grads = {name: getattr(pg, name) for name in PARAM_NAMES}
        lrs = {
            # Position steps are specified in scene-relative units, so the
            # scheduled rate scales by the camera extent of the scene.
            "positions": ctx.dataset.scene_extent
            * position_lr(cfg.lr_position, it, cfg.iterations,
                          cfg.lr_position_final),
            "log_scales": cfg.lr_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "sh_coeffs": cfg.lr_sh,
        }
        adam_step(shard.params, grads, shard.state, it, lrs)
        ctx.sync()
        tb3 = time.perf_counter()

        if (cfg.densify and cfg.densify_start <= it <= stop_densify
                and it % cfg.densify_interval == 0):
            shard, smap = _densify_step(ctx, w, shard, smap, it)
            ctx.sync()
            if cfg.rebalance and W > 1:
                shard, smap = _rebalance_step(ctx, w, shard, smap)
                ctx.sync()

        iter_t1 = time.perf_counter()
        if w == 0:
            losses.append(float(loss))
            train_wall += iter_t1 - iter_t0
            timings["backward_s"] = tb1 - tb0
            timings["reduce_s"] = tb2 - tb1
            timings["step_s"] = tb3 - tb2
            phase_rows.append(timings)

        eval_due = it == cfg.iterations or (
            cfg.eval_interval > 0 and it % cfg.eval_interval == 0)
        if eval_due:
            rec = _evaluate(ctx, w, shard, it, smap.total, train_wall)
            if rec is not None and (not records or records[-1].iteration != it):
                records.append(rec)

    # Checkpoint: concatenation over shards in global id order.
    if w == 0:
        pieces = [(shard.ids, shard.params)]
        for src in range(1, W):
            pieces.append(ctx.mail.recv(src, 0, "ckpt"))
        all_ids = np.concatenate([p[0] for p in pieces])
        order = np.argsort(all_ids)
        if not np.array_equal(all_ids[order],
                              np.arange(all_ids.shape[0], dtype=np.int64)):
            raise ProtocolError("gathered checkpoint ids do not cover 0..N")
        merged = {
            name: np.concatenate([p[1][name] for p in pieces])[order]
            for name in PARAM_NAMES
        }
        cloud = GaussianCloud(degree=cfg.sh_degree, **merged)
        cloud.validate()
        ctx.result_cloud = cloud
        ctx.result_report = TrainReport(
            workers=W,
            resolution=ctx.resolution,
            records=records,
            iteration_losses=losses,
            total_wall_s=train_wall,
            phase_rows=phase_rows,
        )
    else:
        ctx.mail.send(w, 0, "ckpt", (shard.ids, shard.params))


def _worker_main(ctx: _RunContext, w: int) -> None:
    try:
        _worker_run(ctx, w)
    except _Aborted:
        pass
    except BaseException:
        ctx.fail(w, traceback.format_exc())


def _build_schedule(iterations: int, n_views: int, seed: int) -> list[int]:
    """Deterministic epoch shuffle: a fresh permutation of the views per epoch."""
    out: list[int] = []
    epoch = 0
    while len(out) < iterations:
        rng = np.random.default_rng((int(seed), int(epoch)))
        out.extend(int(v) for v in rng.permutation(n_views))
        epoch += 1
    return out[:iterations]


def run_training(dataset: TrainDataset, config: TrainConfig,
                 workers: int = 1) -> tuple[GaussianCloud, TrainReport]:
    """Train a Gaussian cloud against the dataset's reference views.

    ``workers`` shards the model across that many in-process workers; loss
    trajectories, eval records, and the final checkpoint are bitwise
    identical for any worker count, densification included.
    """
    config.validate()
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if config.resolution is not None and config.resolution != dataset.width:
        raise ValueError(
            f"config resolution {config.resolution} != dataset width "
            f"{dataset.width}; regenerate the views at the target resolution")
    cloud0 = init_from_points(dataset.points, degree=config.sh_degree)
    n = cloud0.count
    smap = partition_gaussians(n, workers)
    shards = []
    for wk in range(workers):
        ids = smap.lists[wk]
        params = {name: getattr(cloud0, name)[ids].copy() for name in PARAM_NAMES}
        shards.append(_Shard(ids.copy(), params))
    schedule = _build_schedule(config.iterations, dataset.view_count, config.seed)
    ctx = _RunContext(dataset, config, workers, smap, shards, schedule)
    if workers == 1:
        _worker_main(ctx, 0)
    else:
        threads = [threading.Thread(target=_worker_main, args=(ctx, wk),
                                    name=f"trainer-{wk}") for wk in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if ctx.fail_info is not None:
        wk, tb = ctx.fail_info
        raise RuntimeError(f"worker {wk} failed; run aborted\n{tb}")
    if ctx.result_cloud is None or ctx.result_report is None:
        raise RuntimeError("training produced no result")
    return ctx.result_cloud, ctx.result_report

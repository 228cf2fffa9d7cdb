"""Sharding, splat routing, fused gradient reduction, and rebalancing.

Everything here is deterministic data-plane logic: given the same inputs the
outputs are bitwise identical regardless of worker scheduling or message
arrival order. The runtime loop that wires these ops to threads and channels
lives in ``engine``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class ProtocolError(RuntimeError):
    """A message violated the exchange contract (bad owner, duplicate tile)."""


@dataclass
class ShardMap:
    """Assignment of Gaussian rows to workers.

    ``lists[w]`` holds worker w's global ids sorted ascending; ``owner`` is
    the inverse map. Per-worker lists partition 0..n.
    """

    workers: int
    owner: np.ndarray
    lists: list[np.ndarray]

    @classmethod
    def from_lists(cls, lists: list[np.ndarray], n: int) -> "ShardMap":
        owner = np.full(n, -1, dtype=np.int32)
        for w, ids in enumerate(lists):
            owner[ids] = w
        m = cls(workers=len(lists), owner=owner, lists=[np.asarray(l, dtype=np.int64)
                                                        for l in lists])
        m.validate()
        return m

    @property
    def total(self) -> int:
        return self.owner.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [int(l.shape[0]) for l in self.lists]

    def validate(self) -> None:
        n = self.total
        if self.workers < 1 or len(self.lists) != self.workers:
            raise ValueError("worker count does not match shard lists")
        seen = np.zeros(n, dtype=bool)
        for w, ids in enumerate(self.lists):
            if ids.size and (np.diff(ids) <= 0).any():
                raise ValueError(f"shard {w} ids not strictly ascending")
            if ids.size and (ids[0] < 0 or ids[-1] >= n):
                raise ValueError(f"shard {w} ids out of range")
            if seen[ids].any():
                raise ValueError("shard lists overlap")
            seen[ids] = True
            if not (self.owner[ids] == w).all():
                raise ValueError("owner array disagrees with shard lists")
        if not seen.all():
            raise ValueError("shard lists do not cover every row")


def partition_gaussians(n: int, workers: int,
                        strategy: str = "contiguous-balanced") -> ShardMap:
    """Contiguous shards with sizes differing by at most one."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if n < 0:
        raise ValueError("n must be >= 0")
    if strategy != "contiguous-balanced":
        raise ValueError(f"unknown strategy {strategy!r}")
    base, rem = divmod(n, workers)
    lists = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < rem else 0)
        lists.append(np.arange(start, start + size, dtype=np.int64))
        start += size
    return ShardMap.from_lists(lists, n)


@dataclass
class PixelPartition:
    """Round-robin assignment of image tiles to workers, row-major tile order."""

    width: int
    height: int
    tile_size: int
    workers: int
    tiles_x: int
    tiles_y: int
    assignment: np.ndarray

    @property
    def tile_count(self) -> int:
        return self.tiles_x * self.tiles_y

    def tiles_of(self, worker: int) -> np.ndarray:
        return np.nonzero(self.assignment == worker)[0].astype(np.int32)


def partition_pixels(width: int, height: int, tile_size: int,
                     workers: int) -> PixelPartition:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if width < 1 or height < 1 or tile_size < 1:
        raise ValueError("image and tile dims must be positive")
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n = tiles_x * tiles_y
    return PixelPartition(
        width=width, height=height, tile_size=tile_size, workers=workers,
        tiles_x=tiles_x, tiles_y=tiles_y,
        assignment=(np.arange(n, dtype=np.int64) % workers).astype(np.int32),
    )


def route_rows(tile_min: np.ndarray, tile_max: np.ndarray,
               workers: int, tiles_x: int) -> np.ndarray:
    """(n, W) membership mask: row i reaches worker w iff its tile rect
    touches a tile with linear id congruent to w."""
    n = tile_min.shape[0]
    mask = np.zeros((n, workers), dtype=np.uint8)
    if n:
        rects = np.concatenate([tile_min, tile_max], axis=1).astype(np.int32)
        K._route_mask(rects, tiles_x, workers, mask)
    return mask


def route_splats(splats, part: PixelPartition) -> list[list]:
    """Per-destination splat lists; each list keeps (depth, index) order."""
    out: list[list] = [[] for _ in range(part.workers)]
    decorated = sorted(splats, key=lambda s: (s.depth, s.gaussian_index))
    for s in decorated:
        (x0, y0), (x1, y1) = s.tile_span
        dests = set()
        for ty in range(y0, y1 + 1):
            base = ty * part.tiles_x
            for tx in range(x0, x1 + 1):
                dests.add(int(part.assignment[base + tx]))
            if len(dests) == part.workers:
                break
        for d in sorted(dests):
            out[d].append(s)
    return out


@dataclass
class GradChunk:
    """One producing tile's gradient rows: all parameter tensors together."""

    tile_id: int
    indices: np.ndarray
    dmean2d: np.ndarray
    dconic: np.ndarray
    dcolor: np.ndarray
    dopacity: np.ndarray


@dataclass
class GradMessage:
    """The single per-(producer, destination) gradient message of an iteration."""

    producer: int
    destination: int
    chunks: list[GradChunk] = field(default_factory=list)


def reduce_gradients_fused(
    messages: list[GradMessage],
    shard_map: ShardMap,
) -> dict[int, dict[str, np.ndarray]]:
    """Sum routed gradients at each owner in ascending producing-tile order.

    Output rows align with ``shard_map.lists[owner]``. Because every tile is
    produced by exactly one worker and chunks merge sorted by tile id, the
    result is bitwise independent of message arrival order. Indices not owned
    by the destination, or a tile contributed twice, raise ``ProtocolError``.
    """
    per_dest: dict[int, list[GradChunk]] = {}
    pairs = set()
    for msg in messages:
        key = (msg.producer, msg.destination)
        if key in pairs:
            raise ProtocolError(f"duplicate message for pair {key}")
        pairs.add(key)
        per_dest.setdefault(msg.destination, []).extend(msg.chunks)
    out: dict[int, dict[str, np.ndarray]] = {}
    for dest, chunks in per_dest.items():
        if not 0 <= dest < shard_map.workers:
            raise ProtocolError(f"unknown destination worker {dest}")
        owned = shard_map.lists[dest]
        n = owned.shape[0]
        acc = {
            "dmean2d": np.zeros((n, 2), dtype=np.float64),
            "dconic": np.zeros((n, 3), dtype=np.float64),
            "dcolor": np.zeros((n, 3), dtype=np.float64),
            "dopacity": np.zeros(n, dtype=np.float64),
        }
        tiles_seen = set()
        for chunk in sorted(chunks, key=lambda c: c.tile_id):
            if chunk.tile_id in tiles_seen:
                raise ProtocolError(f"tile {chunk.tile_id} contributed twice")
            tiles_seen.add(chunk.tile_id)
            idx = np.asarray(chunk.indices, dtype=np.int64)
            rows = np.searchsorted(owned, idx)
            bad = (rows >= n) | (owned[np.minimum(rows, n - 1)] != idx) if n else \
                np.ones(idx.shape, dtype=bool)
            if bad.any():
                raise ProtocolError(
                    f"indices {idx[bad][:4].tolist()} not owned by worker {dest}")
            acc["dmean2d"][rows] += chunk.dmean2d
            acc["dconic"][rows] += chunk.dconic
            acc["dcolor"][rows] += chunk.dcolor
            acc["dopacity"][rows] += chunk.dopacity
        out[dest] = acc
    return out


def rebalance(shard_map: ShardMap,
              counts: list[int]) -> tuple[list[tuple[int, int, int]], ShardMap]:
    """Migration plan evening shard sizes to within one row.

    The plan lists (gaussian index, from, to) moves: each over-full shard
    gives up its lowest-id excess rows, and moves are emitted lowest index
    first. Returns the plan together with the resulting map.
    """
    if list(counts) != shard_map.sizes:
        raise ValueError("counts disagree with the shard map")
    w = shard_map.workers
    n = shard_map.total
    base, rem = divmod(n, w)
    targets = [base + (1 if i < rem else 0) for i in range(w)]
    pool = []
    for src in range(w):
        excess = shard_map.sizes[src] - targets[src]
        if excess > 0:
            pool.extend((int(g), src) for g in shard_map.lists[src][:excess])
    pool.sort()
    plan: list[tuple[int, int, int]] = []
    cursor = 0
    for dst in range(w):
        deficit = targets[dst] - shard_map.sizes[dst]
        for _ in range(max(deficit, 0)):
            g, src = pool[cursor]
            cursor += 1
            plan.append((g, src, dst))
    new_lists = []
    moved_from: dict[int, set[int]] = {}
    moved_to: dict[int, list[int]] = {}
    for g, src, dst in plan:
        moved_from.setdefault(src, set()).add(g)
        moved_to.setdefault(dst, []).append(g)
    for u in range(w):
        ids = [int(g) for g in shard_map.lists[u] if int(g) not in
               moved_from.get(u, ())]
        ids.extend(moved_to.get(u, ()))
        new_lists.append(np.array(sorted(ids), dtype=np.int64))
    return plan, ShardMap.from_lists(new_lists, n)


def estimate_min_workers(n_gaussians: int, per_worker_capacity: int) -> int:
    """Fewest workers whose combined capacity covers the model."""
    if per_worker_capacity <= 0:
        raise ValueError("per-worker capacity must be positive")
    if n_gaussians < 0:
        raise ValueError("gaussian count must be >= 0")
    return max(1, math.ceil(n_gaussians / per_worker_capacity))


def train_distributed(dataset, config, workers: int):
    """Sharded training over in-process workers; W=1 degenerates to the
    single-worker loop bit for bit."""
    from .engine import run_training
    return run_training(dataset, config, workers=workers)

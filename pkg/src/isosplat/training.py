"""Training configuration, reports, dataset loading, and densification."""

from __future__ import annotations

import configparser
import json
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .camera import Camera, load_cameras
from .gaussians import GaussianCloud
from .images import load_png, quantize8
from .metrics import psnr, ssim
from .volume import PointCloud, load_point_cloud

BASE_RESOLUTION = 512.0
SPLIT_SCALE_SHRINK = 1.6
SPLIT_EXTENT_FRACTION = 0.01


@dataclass
class TrainConfig:
    """Hyperparameters and run controls for training.

    ``densify_stop`` defaults to half the iteration count; ``split_threshold``
    (world scale separating clone from split) defaults to 1% of the scene
    extent; ``resolution`` defaults to the dataset image width. The gradient
    threshold for densification scales by resolution/512.
    """

    iterations: int = 2000
    lambda_dssim: float = 0.2
    lr_position: float = 1.6e-4
    lr_position_final: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    densify: bool = True
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int | None = None
    grad_threshold: float = 2e-4
    opacity_prune: float = 0.005
    scale_prune: float = math.inf
    split_threshold: float | None = None
    rebalance: bool = True
    seed: int = 0
    resolution: int | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eval_interval: int = 0
    sh_degree: int = 1
    tile_size: int = 16

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        for name in ("grad_threshold", "opacity_prune", "scale_prune"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_position", "lr_sh", "lr_opacity", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be >= 0")

    def effective_densify_stop(self) -> int:
        return self.iterations // 2 if self.densify_stop is None else self.densify_stop

    def effective_grad_threshold(self, resolution: int) -> float:
        return self.grad_threshold * (resolution / BASE_RESOLUTION)

    @classmethod
    def from_sources(
        cls,
        path: str | None = None,
        overrides: dict[str, str] | None = None,
    ) -> "TrainConfig":
        """Defaults, then config-file values, then explicit overrides."""
        values: dict[str, str] = {}
        if path is not None:
            parser = configparser.ConfigParser()
            with open(path) as fh:
                parser.read_file(fh)
            if parser.has_section("train"):
                values.update(dict(parser.items("train")))
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            cfg = replace(cfg, **{key: _parse_field(cls, key, raw)})
        cfg.validate()
        return cfg

    def to_file(self, path: str) -> None:
        parser = configparser.ConfigParser()
        parser.add_section("train")
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            if isinstance(val, tuple):
                val = ",".join(repr(float(v)) for v in val)
            parser.set("train", f.name, str(val))
        with open(path, "w") as fh:
            parser.write(fh)


def _parse_field(cls, key: str, raw):
    if not isinstance(raw, str):
        return raw
    defaults = cls()
    current = getattr(defaults, key)
    if key in ("densify_stop", "split_threshold", "resolution"):
        return None if raw.lower() in ("none", "") else (
            int(raw) if key in ("densify_stop", "resolution") else float(raw))
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [float(p) for p in raw.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{key}: expected three comma-separated values")
        return tuple(parts)
    return raw


@dataclass
class EvalRecord:
    iteration: int
    loss: float
    psnr: float
    ssim: float
    wall_s: float
    gaussians: int


@dataclass
class TrainReport:
    """Per-eval-point records plus run totals.

    Wall-clock fields are measurements and vary run to run; every other field
    is a deterministic function of the inputs. ``deterministic_equal``
    compares exactly that reproducible subset.
    """

    workers: int
    resolution: int
    records: list[EvalRecord] = field(default_factory=list)
    iteration_losses: list[float] = field(default_factory=list)
    total_wall_s: float = 0.0
    phase_rows: list[dict] = field(default_factory=list)

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(f"# workers={self.workers} resolution={self.resolution} "
                     f"total_wall_s={self.total_wall_s!r}\n")
            fh.write("iteration,loss,psnr,ssim,wall_s,gaussians\n")
            for r in self.records:
                fh.write(f"{r.iteration},{r.loss!r},{r.psnr!r},{r.ssim!r},"
                         f"{r.wall_s!r},{r.gaussians}\n")
            f = self.final
            fh.write(f"summary,{f.loss!r},{f.psnr!r},{f.ssim!r},{f.wall_s!r},{f.gaussians}\n")

    @classmethod
    def read_csv(cls, path: str) -> "TrainReport":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        meta = {}
        for tok in lines[0].lstrip("# ").split():
            k, v = tok.split("=", 1)
            meta[k] = v
        records = []
        for ln in lines[2:]:
            if not ln or ln.startswith("summary,"):
                continue
            it, loss, p, s, w, g = ln.split(",")
            records.append(EvalRecord(int(it), float(loss), float(p), float(s),
                                      float(w), int(g)))
        return cls(
            workers=int(meta["workers"]),
            resolution=int(meta["resolution"]),
            records=records,
            total_wall_s=float(meta["total_wall_s"]),
        )

    def write_trace_csv(self, path: str) -> None:
        cols = ["iteration", "project_s", "route_s", "composite_s",
                "backward_s", "reduce_s", "step_s"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.phase_rows:
                fh.write(",".join(repr(row[c]) if c != "iteration" else str(row[c])
                                  for c in cols) + "\n")


def deterministic_equal(a: TrainReport, b: TrainReport) -> bool:
    """Bitwise equality of everything except wall-clock measurements."""
    if a.workers != b.workers or a.resolution != b.resolution:
        return False
    if len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.records, b.records):
        if (ra.iteration, ra.gaussians) != (rb.iteration, rb.gaussians):
            return False
        if (ra.loss, ra.psnr, ra.ssim) != (rb.loss, rb.psnr, rb.ssim):
            return False
    return a.iteration_losses == b.iteration_losses


@dataclass
class TrainDataset:
    """Reference views plus the point cloud that seeds the model."""

    cameras: list[Camera]
    images: np.ndarray
    points: PointCloud

    def __post_init__(self) -> None:
        if len(self.cameras) == 0:
            raise ValueError("dataset has no views")
        if self.images.shape[0] != len(self.cameras):
            raise ValueError("one image per camera required")

    @property
    def view_count(self) -> int:
        return len(self.cameras)

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def scene_extent(self) -> float:
        pos = np.stack([c.position for c in self.cameras])
        centroid = pos.mean(axis=0)
        ext = float(np.linalg.norm(pos - centroid, axis=1).max())
        return ext if ext > 0 else 1.0


def load_dataset(views_dir: str, cameras_path: str, points_path: str) -> TrainDataset:
    """Assemble a dataset from a ground-truth view dir, cameras JSON, and points."""
    with open(os.path.join(views_dir, "manifest.json")) as fh:
        manifest = json.load(fh)["views"]
    cameras_all = load_cameras(cameras_path)
    cams = []
    imgs = []
    for entry in manifest:
        cams.append(cameras_all[entry["camera_index"]])
        imgs.append(load_png(os.path.join(views_dir, entry["image"])).astype(np.float32))
    return TrainDataset(
        cameras=cams,
        images=np.stack(imgs),
        points=load_point_cloud(points_path),
    )


@dataclass
class TrainStats:
    """Densification accumulators: summed 2D gradient norms and view counts."""

    grad_accum: np.ndarray
    seen: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "TrainStats":
        return cls(grad_accum=np.zeros(n, dtype=np.float64),
                   seen=np.zeros(n, dtype=np.int64))


@dataclass
class DensifyMapping:
    """Row bookkeeping of one densify/prune event on the original index space."""

    kept: np.ndarray
    cloned: np.ndarray
    split: np.ndarray
    pruned: np.ndarray

    @property
    def identity(self) -> bool:
        return (self.cloned.size == 0 and self.split.size == 0
                and self.pruned.size == 0)


def densify_and_prune(
    cloud: GaussianCloud,
    stats: TrainStats,
    config: TrainConfig,
    iteration: int,
    grad_threshold: float,
    split_threshold: float,
    global_ids: np.ndarray | None = None,
) -> tuple[GaussianCloud, DensifyMapping]:
    """Clone, split, and prune by accumulated gradient statistics.

    Rows whose mean 2D gradient norm exceeds ``grad_threshold`` are cloned
    when small (max activated scale <= ``split_threshold``) or replaced by two
    children with scales shrunk by 1.6 and positions drawn inside the parent.
    Rows with activated opacity below the prune threshold, or world scale
    above ``scale_prune``, are dropped. Child sampling is seeded by
    (config seed, iteration, parent global id), so results do not depend on
    how rows are sharded. New row order: kept, then clones, then children.
    """
    n = cloud.count
    if global_ids is None:
        global_ids = np.arange(n, dtype=np.int64)
    avg = stats.grad_accum / np.maximum(stats.seen, 1)
    scales = np.exp(cloud.log_scales.astype(np.float64))
    max_scale = scales.max(axis=1)
    opacity = 1.0 / (1.0 + np.exp(-cloud.opacity_logits.astype(np.float64)))
    prune = opacity < config.opacity_prune
    if np.isfinite(config.scale_prune):
        prune |= max_scale > config.scale_prune
    hot = (avg > grad_threshold) & ~prune
    split = hot & (max_scale > split_threshold)
    clone = hot & ~split
    keep = ~(prune | split)
    kept_rows = np.nonzero(keep)[0]
    clone_rows = np.nonzero(clone)[0]
    split_rows = np.nonzero(split)[0]
    prune_rows = np.nonzero(prune)[0]

    def gather(name):
        arr = getattr(cloud, name)
        return [arr[kept_rows], arr[clone_rows]]

    parts = {name: gather(name) for name in
             ("positions", "log_scales", "rotations", "opacity_logits", "sh_coeffs")}
    if split_rows.size:
        from .gaussians import quat_to_rotation
        child_pos = np.empty((2 * split_rows.size, 3), dtype=np.float64)
        for j, row in enumerate(split_rows):
            rng = np.random.default_rng(
                (int(config.seed), int(iteration), int(global_ids[row])))
            offs = rng.standard_normal((2, 3)) * scales[row]
            rot = quat_to_rotation(cloud.rotations[row].astype(np.float64))
            base = cloud.positions[row].astype(np.float64)
            child_pos[2 * j] = base + rot @ offs[0]
            child_pos[2 * j + 1] = base + rot @ offs[1]
        dt = cloud.positions.dtype
        rep = np.repeat(split_rows, 2)
        parts["positions"].append(child_pos.astype(dt))
        parts["log_scales"].append(
            (cloud.log_scales[rep].astype(np.float64)
             - math.log(SPLIT_SCALE_SHRINK)).astype(dt))
        parts["rotations"].append(cloud.rotations[rep])
        parts["opacity_logits"].append(cloud.opacity_logits[rep])
        parts["sh_coeffs"].append(cloud.sh_coeffs[rep])
    new_cloud = GaussianCloud(
        positions=np.concatenate(parts["positions"]),
        log_scales=np.concatenate(parts["log_scales"]),
        rotations=np.concatenate(parts["rotations"]),
        opacity_logits=np.concatenate(parts["opacity_logits"]),
        sh_coeffs=np.concatenate(parts["sh_coeffs"]),
        degree=cloud.degree,
    )
    mapping = DensifyMapping(kept=kept_rows, cloned=clone_rows,
                             split=split_rows, pruned=prune_rows)
    return new_cloud, mapping


def eval_pair(render: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """PSNR and SSIM on 8-bit round-trips of both images."""
    a = quantize8(np.asarray(render, dtype=np.float64))
    b = quantize8(np.asarray(ref, dtype=np.float64))
    return psnr(a, b), ssim(a, b)


def train_single(dataset: TrainDataset, config: TrainConfig):
    """Single-worker training; the oracle the distributed runtime must match."""
    from .engine import run_training
    return run_training(dataset, config, workers=1)

"""Desk-scale distributed Gaussian-splat training for isosurface visualization."""

from .bench import (
    BenchGrid,
    BenchResult,
    compute_speedup,
    emit_tables,
    format_speedup,
    run_bench,
)
from .camera import Camera, OrbitSpec, look_at, load_cameras, make_orbit, save_cameras, world_to_pixel
from .distributed import (
    GradChunk,
    GradMessage,
    PixelPartition,
    ProtocolError,
    ShardMap,
    estimate_min_workers,
    partition_gaussians,
    partition_pixels,
    rebalance,
    reduce_gradients_fused,
    route_splats,
    train_distributed,
)
from .gaussians import (
    GaussianCloud,
    covariance3d,
    eval_color,
    init_from_points,
    load_checkpoint,
    quat_to_rotation,
    save_checkpoint,
)
from .metrics import loss_l1_dssim, psnr, ssim
from .rasterizer import (
    ParamGradients,
    ProjectedSplat,
    RenderAux,
    SplatBatch,
    project,
    render_backward,
    render_forward,
)
from .raycast import generate_ground_truth, raycast_isosurface
from .training import (
    DensifyMapping,
    EvalRecord,
    TrainConfig,
    TrainDataset,
    TrainReport,
    TrainStats,
    densify_and_prune,
    deterministic_equal,
    load_dataset,
    train_single,
)
from .volume import (
    PointCloud,
    VolumeGrid,
    extract_isosurface_points,
    gradient_central,
    load_point_cloud,
    load_raw,
    sample_trilinear,
    save_point_cloud,
)

__version__ = "0.1.0"

__all__ = [
    "BenchGrid",
    "BenchResult",
    "Camera",
    "DensifyMapping",
    "EvalRecord",
    "GaussianCloud",
    "GradChunk",
    "GradMessage",
    "OrbitSpec",
    "ParamGradients",
    "PixelPartition",
    "PointCloud",
    "ProjectedSplat",
    "ProtocolError",
    "RenderAux",
    "ShardMap",
    "SplatBatch",
    "TrainConfig",
    "TrainDataset",
    "TrainReport",
    "TrainStats",
    "VolumeGrid",
    "compute_speedup",
    "covariance3d",
    "densify_and_prune",
    "deterministic_equal",
    "emit_tables",
    "estimate_min_workers",
    "eval_color",
    "extract_isosurface_points",
    "format_speedup",
    "generate_ground_truth",
    "gradient_central",
    "init_from_points",
    "load_cameras",
    "load_checkpoint",
    "load_dataset",
    "load_point_cloud",
    "load_raw",
    "look_at",
    "loss_l1_dssim",
    "make_orbit",
    "partition_gaussians",
    "partition_pixels",
    "project",
    "psnr",
    "quat_to_rotation",
    "raycast_isosurface",
    "rebalance",
    "reduce_gradients_fused",
    "render_backward",
    "render_forward",
    "route_splats",
    "run_bench",
    "sample_trilinear",
    "save_cameras",
    "save_checkpoint",
    "save_point_cloud",
    "ssim",
    "train_distributed",
    "train_single",
    "world_to_pixel",
]

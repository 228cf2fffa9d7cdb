"""Command line: volume -> points -> cameras -> views -> training -> tables.

Exit codes: 0 success, 1 usage error (bad flags or arguments), 2 runtime
failure. All subcommands are deterministic for a fixed --seed. Output paths
default into $ISOSPLAT_OUTPUT_DIR (or the working directory).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import statistics
import sys
import traceback
from dataclasses import fields

import numpy as np

from .bench import (
    BenchGrid,
    compute_speedup,
    emit_tables,
    format_speedup,
    run_bench,
    write_quality_csv,
    write_timing_csv,
)
from .camera import OrbitSpec, load_cameras, make_orbit, save_cameras
from .distributed import train_distributed
from .gaussians import load_checkpoint, save_checkpoint
from .images import load_png, save_png
from .metrics import psnr, ssim
from .rasterizer import project, render_forward
from .raycast import DEFAULT_ALBEDO, generate_ground_truth
from .training import TrainConfig, load_dataset
from .volume import extract_isosurface_points, load_raw, save_point_cloud

ENV_OUTPUT_DIR = "ISOSPLAT_OUTPUT_DIR"
_CONFIG_FLAG_FIELDS = [f.name for f in fields(TrainConfig)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract wants 1 with usage on stderr.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _floats(n: int):
    def parse(text: str) -> tuple[float, ...]:
        parts = [float(p) for p in text.split(",")]
        if len(parts) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated values")
        return tuple(parts)
    return parse


def _ints(n: int):
    def parse(text: str) -> tuple[int, ...]:
        parts = [int(p) for p in text.split(",")]
        if len(parts) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated values")
        return tuple(parts)
    return parse


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",")]


def _out_path(explicit: str | None, default_name: str) -> str:
    if explicit:
        return explicit
    return os.path.join(os.environ.get(ENV_OUTPUT_DIR, "."), default_name)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _add_volume_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--volume", required=True, help="headerless raw volume file")
    p.add_argument("--dims", required=True, type=_ints(3), help="nx,ny,nz")
    p.add_argument("--dtype", required=True, choices=("u8", "u16", "f32", "f64"))
    p.add_argument("--spacing", type=_floats(3), default=(1.0, 1.0, 1.0))
    p.add_argument("--origin", type=_floats(3), default=(0.0, 0.0, 0.0))
    p.add_argument("--endianness", choices=("little", "big"), default="little")
    p.add_argument("--isovalue", required=True, type=float)


def _load_volume(args):
    return load_raw(args.volume, args.dims, args.dtype, args.spacing,
                    args.endianness, args.origin)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="training config file ([train] section)")
    for name in _CONFIG_FLAG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}",
                       metavar="V", help=argparse.SUPPRESS)


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    for name in _CONFIG_FLAG_FIELDS:
        val = getattr(args, f"cfg_{name}", None)
        if val is not None:
            overrides[name] = val
    return TrainConfig.from_sources(getattr(args, "config", None), overrides)


def _cmd_extract(args) -> int:
    grid = _load_volume(args)
    cloud = extract_isosurface_points(grid, args.isovalue, stride=args.stride,
                                      max_points=args.max_points, seed=args.seed)
    if cloud.count == 0:
        raise RuntimeError("no isosurface crossings at this isovalue")
    out = _out_path(args.output, "points.sspc")
    _ensure_parent(out)
    save_point_cloud(out, cloud)
    print(f"extracted {cloud.count} surface points -> {out}")
    return 0


def _cmd_cameras(args) -> int:
    spec = OrbitSpec(count=args.count, center=args.center, radius=args.radius,
                     up=args.up, fov_y=math.radians(args.fov_deg),
                     width=args.width, height=args.height, pattern=args.pattern)
    cams = make_orbit(spec)
    out = _out_path(args.output, "cameras.json")
    _ensure_parent(out)
    save_cameras(out, cams)
    print(f"wrote {len(cams)} cameras -> {out}")
    return 0


def _cmd_groundtruth(args) -> int:
    grid = _load_volume(args)
    cams = load_cameras(args.cameras)
    out_dir = _out_path(args.output, "views")
    generate_ground_truth(grid, args.isovalue, cams, out_dir,
                          albedo=args.albedo, background=args.background,
                          step_scale=args.step_scale)
    print(f"rendered {len(cams)} reference views -> {out_dir}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    dataset = load_dataset(args.views, args.cameras, args.points)
    cloud, report = train_distributed(dataset, cfg, args.workers)
    ckpt = _out_path(args.checkpoint, "model.ssgc")
    _ensure_parent(ckpt)
    save_checkpoint(ckpt, cloud)
    report_path = _out_path(args.report, "train_report.csv")
    _ensure_parent(report_path)
    report.write_csv(report_path)
    if args.trace:
        _ensure_parent(args.trace)
        report.write_trace_csv(args.trace)
    f = report.final
    print(f"trained {f.gaussians} gaussians over {cfg.iterations} iterations "
          f"({args.workers} workers): loss={f.loss:.5f} psnr={f.psnr:.2f} "
          f"ssim={f.ssim:.4f}")
    print(f"checkpoint -> {ckpt}\nreport -> {report_path}")
    return 0


def _cmd_render(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    cams = load_cameras(args.cameras)
    out_dir = _out_path(args.output, "renders")
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for i, cam in enumerate(cams):
        batch = project(cloud, cam, args.tile_size)
        img, _aux, _order = render_forward(batch, cam.width, cam.height,
                                           background=args.background,
                                           tile_size=args.tile_size)
        name = f"view_{i:04d}.png"
        save_png(os.path.join(out_dir, name), np.asarray(img, dtype=np.float64))
        manifest.append({"image": name, "camera_index": i})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"views": manifest}, fh, indent=1)
        fh.write("\n")
    print(f"rendered {len(cams)} views -> {out_dir}")
    return 0


def _list_pngs(dir_path: str) -> list[str]:
    return sorted(n for n in os.listdir(dir_path) if n.endswith(".png"))


def _cmd_metrics(args) -> int:
    names_a = _list_pngs(args.dir_a)
    names_b = _list_pngs(args.dir_b)
    if names_a != names_b:
        raise RuntimeError(
            f"image sets differ: {sorted(set(names_a) ^ set(names_b))}")
    if not names_a:
        raise RuntimeError("no PNG images to compare")
    out = _out_path(args.output, "metrics.csv")
    _ensure_parent(out)
    ps, ss = [], []
    with open(out, "w") as fh:
        fh.write("image,psnr,ssim\n")
        for name in names_a:
            a = load_png(os.path.join(args.dir_a, name))
            b = load_png(os.path.join(args.dir_b, name))
            p = psnr(a, b)
            s = ssim(a, b)
            ps.append(p)
            ss.append(s)
            fh.write(f"{name},{p!r},{s!r}\n")
        fh.write(f"mean,{float(np.mean(ps))!r},{float(np.mean(ss))!r}\n")
    print(f"compared {len(names_a)} image pairs -> {out} "
          f"(mean psnr={np.mean(ps):.2f}, mean ssim={np.mean(ss):.4f})")
    return 0


def _cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    grid_vol = _load_volume(args)
    out_dir = _out_path(args.output_dir, "bench")
    os.makedirs(out_dir, exist_ok=True)
    points = extract_isosurface_points(grid_vol, args.isovalue,
                                       stride=args.stride,
                                       max_points=args.max_points,
                                       seed=cfg.seed)
    if points.count == 0:
        raise RuntimeError("no isosurface crossings at this isovalue")
    points_path = os.path.join(out_dir, "points.sspc")
    save_point_cloud(points_path, points)
    lo = np.asarray(grid_vol.world_min)
    hi = np.asarray(grid_vol.world_max)
    center = args.center if args.center is not None else tuple((lo + hi) / 2.0)
    radius = args.radius if args.radius is not None else \
        1.5 * float(np.linalg.norm(hi - lo) / 2.0)

    def factory(res: int):
        spec = OrbitSpec(count=args.views, center=center, radius=radius,
                         fov_y=math.radians(args.fov_deg), width=res,
                         height=res, pattern=args.pattern)
        cams = make_orbit(spec)
        gt_dir = os.path.join(out_dir, f"gt_{res}")
        cam_path = os.path.join(out_dir, f"cameras_{res}.json")
        save_cameras(cam_path, cams)
        generate_ground_truth(grid_vol, args.isovalue, cams, gt_dir,
                              step_scale=args.step_scale)
        return load_dataset(gt_dir, cam_path, points_path)

    cells = [(res, w) for res in args.resolutions for w in args.workers_list]
    grid = BenchGrid(cells=cells, iterations=cfg.iterations, reps=args.reps)
    result = run_bench(factory, grid, cfg, capacity=args.capacity)
    timing_path = os.path.join(out_dir, "timing.csv")
    quality_path = os.path.join(out_dir, "quality.csv")
    write_timing_csv(timing_path, result.timing_rows)
    write_quality_csv(quality_path, result.reports)
    t_table, q_table = emit_tables(result.reports, result.timing_rows,
                                   infeasible=tuple(result.infeasible),
                                   units=args.units)
    with open(os.path.join(out_dir, "timing_table.csv"), "w") as fh:
        fh.write(t_table)
    with open(os.path.join(out_dir, "quality_table.csv"), "w") as fh:
        fh.write(q_table)
    print(t_table, end="")
    medians = {}
    for w, res, _rep, wall in result.timing_rows:
        medians.setdefault((w, res), []).append(wall)
    for res in args.resolutions:
        base = medians.get((1, res))
        best_w = max(args.workers_list)
        par = medians.get((best_w, res))
        if base and par and best_w > 1:
            ratio = compute_speedup(statistics.median(base), statistics.median(par))
            print(f"resolution {res}: {best_w}-worker speedup "
                  f"{ratio:.3f} ({format_speedup(ratio)})")
    print(f"bench outputs -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isosplat",
                     description="isosurface splat training pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("extract", help="volume -> oriented surface point cloud")
    _add_volume_flags(p)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--max-points", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="output .sspc path")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("cameras", help="orbit camera set -> JSON")
    p.add_argument("--count", type=int, default=448)
    p.add_argument("--center", type=_floats(3), default=(0.0, 0.0, 0.0))
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--up", type=_floats(3), default=(0.0, 0.0, 1.0))
    p.add_argument("--fov-deg", type=float, default=60.0)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--pattern", choices=("fibonacci", "ring"), default="fibonacci")
    p.add_argument("--output", help="output cameras.json path")
    p.set_defaults(func=_cmd_cameras)

    p = sub.add_parser("groundtruth", help="raycast reference views")
    _add_volume_flags(p)
    p.add_argument("--cameras", required=True)
    p.add_argument("--albedo", type=_floats(3), default=DEFAULT_ALBEDO)
    p.add_argument("--background", type=_floats(3), default=(1.0, 1.0, 1.0))
    p.add_argument("--step-scale", type=float, default=0.5)
    p.add_argument("--output", help="output view directory")
    p.set_defaults(func=_cmd_groundtruth)

    p = sub.add_parser("train", help="fit gaussians to reference views")
    p.add_argument("--points", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--views", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--checkpoint", help="output .ssgc path")
    p.add_argument("--report", help="output report CSV path")
    p.add_argument("--trace", help="optional per-iteration phase timing CSV")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="checkpoint + cameras -> PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--background", type=_floats(3), default=(1.0, 1.0, 1.0))
    p.add_argument("--tile-size", type=int, default=16)
    p.add_argument("--output", help="output render directory")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two image dirs")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--output", help="output metrics CSV path")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("bench", help="timing/quality grid over workers x resolution")
    _add_volume_flags(p)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--max-points", type=int, default=None)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--center", type=_floats(3), default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--fov-deg", type=float, default=60.0)
    p.add_argument("--pattern", choices=("fibonacci", "ring"), default="fibonacci")
    p.add_argument("--step-scale", type=float, default=0.5)
    p.add_argument("--resolutions", type=_int_list, default=[128])
    p.add_argument("--workers-list", type=_int_list, default=[1, 2])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--capacity", type=int, default=None,
                   help="per-worker row capacity; cells needing more workers print X")
    p.add_argument("--units", choices=("seconds", "minutes"), default="seconds")
    p.add_argument("--output-dir")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError(parser.format_usage())
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - map any failure to exit 2
        print(f"isosplat: error: {exc}", file=sys.stderr)
        if os.environ.get("ISOSPLAT_DEBUG"):
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())

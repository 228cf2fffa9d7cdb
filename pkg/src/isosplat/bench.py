"""Benchmark harness: timing/quality grids over (resolution, workers) cells."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

import numpy as np

from .distributed import estimate_min_workers
from .engine import run_training
from .training import TrainConfig, TrainDataset, TrainReport


@dataclass
class BenchGrid:
    """Cells to measure: (resolution, workers) pairs, each run ``reps`` times."""

    cells: list[tuple[int, int]]
    iterations: int = 200
    reps: int = 3

    def validate(self) -> None:
        if not self.cells:
            raise ValueError("bench grid has no cells")
        for res, w in self.cells:
            if res < 16:
                raise ValueError(f"resolution {res} too small to train against")
            if w < 1:
                raise ValueError("worker counts must be >= 1")
        if self.iterations < 1 or self.reps < 1:
            raise ValueError("iterations and reps must be >= 1")


@dataclass
class BenchResult:
    timing_rows: list[tuple[int, int, int, float]]
    reports: list[TrainReport]
    infeasible: list[tuple[int, int]]


def compute_speedup(t_baseline: float, t_parallel: float) -> float:
    """Wall-clock ratio baseline/parallel."""
    if t_baseline <= 0 or t_parallel <= 0:
        raise ValueError("times must be positive")
    return t_baseline / t_parallel


def format_speedup(ratio: float) -> str:
    return f"{ratio:.1f}x"


def run_bench(dataset_for_resolution, grid: BenchGrid, config: TrainConfig,
              capacity: int | None = None) -> BenchResult:
    """Train every feasible grid cell and collect timing and quality rows.

    ``dataset_for_resolution(res)`` supplies (and may regenerate) the views at
    each resolution; that cost is excluded from the timings, as is evaluation
    inside training. A cell is infeasible when the seed model needs more
    workers than the cell grants under ``capacity`` rows per worker.
    """
    grid.validate()
    timing_rows: list[tuple[int, int, int, float]] = []
    reports: list[TrainReport] = []
    infeasible: list[tuple[int, int]] = []
    resolutions = sorted({res for res, _ in grid.cells})
    for res in resolutions:
        dataset: TrainDataset = dataset_for_resolution(res)
        if dataset.width != res:
            raise ValueError(f"dataset factory returned width {dataset.width} "
                             f"for resolution {res}")
        cfg = replace(config, iterations=grid.iterations, resolution=None)
        cells = sorted((w for r, w in grid.cells if r == res))
        for w in cells:
            if capacity is not None and \
                    estimate_min_workers(dataset.points.count, capacity) > w:
                infeasible.append((res, w))
                continue
            cell_report = None
            for rep in range(grid.reps):
                _, rep_report = run_training(dataset, cfg, workers=w)
                timing_rows.append((w, res, rep, rep_report.total_wall_s))
                if cell_report is None:
                    cell_report = rep_report
            reports.append(cell_report)
    return BenchResult(timing_rows=timing_rows, reports=reports,
                       infeasible=infeasible)


def write_timing_csv(path: str, rows: list[tuple[int, int, int, float]]) -> None:
    """Per-rep rows plus one median aggregate row per (workers, resolution)."""
    cells: dict[tuple[int, int], list[float]] = {}
    with open(path, "w") as fh:
        fh.write("workers,resolution,rep,wall_s\n")
        for w, res, rep, wall in rows:
            fh.write(f"{w},{res},{rep},{wall!r}\n")
            cells.setdefault((w, res), []).append(wall)
        for (w, res), walls in cells.items():
            fh.write(f"{w},{res},median,{statistics.median(walls)!r}\n")


def read_timing_csv(path: str):
    """(rep rows, median rows) as written by ``write_timing_csv``."""
    rep_rows, medians = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "workers,resolution,rep,wall_s":
            raise ValueError(f"unexpected timing header {header!r}")
        for ln in fh:
            w, res, rep, wall = ln.strip().split(",")
            if rep == "median":
                medians.append((int(w), int(res), float(wall)))
            else:
                rep_rows.append((int(w), int(res), int(rep), float(wall)))
    return rep_rows, medians


def write_quality_csv(path: str, reports: list[TrainReport]) -> None:
    with open(path, "w") as fh:
        fh.write("workers,resolution,psnr,ssim\n")
        for r in reports:
            f = r.final
            fh.write(f"{r.workers},{r.resolution},{f.psnr!r},{f.ssim!r}\n")


def read_quality_csv(path: str) -> list[tuple[int, int, float, float]]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "workers,resolution,psnr,ssim":
            raise ValueError(f"unexpected quality header {header!r}")
        for ln in fh:
            w, res, p, s = ln.strip().split(",")
            out.append((int(w), int(res), float(p), float(s)))
    return out


def _median_walls(timing_rows) -> dict[tuple[int, int], float]:
    cells: dict[tuple[int, int], list[float]] = {}
    for w, res, _rep, wall in timing_rows:
        cells.setdefault((w, res), []).append(wall)
    return {k: statistics.median(v) for k, v in cells.items()}


def emit_tables(
    reports: list[TrainReport],
    timing_rows: list[tuple[int, int, int, float]] | None = None,
    infeasible: tuple[tuple[int, int], ...] = (),
    units: str = "seconds",
) -> tuple[str, str]:
    """Worker-by-resolution timing and quality tables as CSV text.

    Rows are worker counts, columns resolutions. Cells declared infeasible
    print "X"; a cell that is neither measured nor declared raises with the
    full list of holes. Timing cells are the per-cell median wall, in seconds
    or minutes per ``units``; quality cells are "psnr/ssim".
    """
    if units not in ("seconds", "minutes"):
        raise ValueError("units must be 'seconds' or 'minutes'")
    scale = 1.0 if units == "seconds" else 1.0 / 60.0
    have = {(r.workers, r.resolution): r for r in reports}
    walls = _median_walls(timing_rows) if timing_rows else {
        (r.workers, r.resolution): r.total_wall_s for r in reports}
    # Infeasible cells arrive as (resolution, workers); measured cells win.
    marked = {(w, res) for res, w in infeasible} - set(have)
    workers = sorted({w for w, _ in have} | {w for w, _ in marked})
    resolutions = sorted({r for _, r in have} | {r for _, r in marked})
    missing = [(w, r) for w in workers for r in resolutions
               if (w, r) not in have and (w, r) not in marked]
    if missing:
        raise ValueError(f"ragged bench grid; missing cells (workers, resolution): "
                         f"{missing}")
    header = "workers," + ",".join(str(r) for r in resolutions)
    timing_lines = [header]
    quality_lines = [header]
    for w in workers:
        t_cells, q_cells = [], []
        for res in resolutions:
            if (w, res) in marked:
                t_cells.append("X")
                q_cells.append("X")
            else:
                rep = have[(w, res)]
                t_cells.append(repr(walls[(w, res)] * scale))
                q_cells.append(f"{rep.final.psnr!r}/{rep.final.ssim!r}")
        timing_lines.append(f"{w}," + ",".join(t_cells))
        quality_lines.append(f"{w}," + ",".join(q_cells))
    return "\n".join(timing_lines) + "\n", "\n".join(quality_lines) + "\n"


def read_table_csv(text: str) -> dict:
    """Parse an emitted table back into {(workers, resolution): cell}.

    Timing cells come back as floats, quality cells as (psnr, ssim) tuples,
    and "X" cells as None.
    """
    lines = [ln for ln in text.strip().split("\n") if ln]
    cols = lines[0].split(",")
    if cols[0] != "workers":
        raise ValueError(f"unexpected table header {lines[0]!r}")
    resolutions = [int(c) for c in cols[1:]]
    out = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        w = int(parts[0])
        for res, cell in zip(resolutions, parts[1:]):
            if cell == "X":
                out[(w, res)] = None
            elif "/" in cell:
                p, s = cell.split("/")
                out[(w, res)] = (float(p), float(s))
            else:
                out[(w, res)] = float(cell)
    return out

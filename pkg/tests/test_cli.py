"""Command line coverage: pipeline chain, exit codes, defaults, bench command."""

import json
import os

import numpy as np
import pytest

from isosplat.bench import read_table_csv, read_timing_csv
from isosplat.cli import main
from isosplat.gaussians import load_checkpoint
from isosplat.images import load_png
from isosplat.training import TrainConfig, TrainReport
from isosplat.volume import load_point_cloud

from conftest import distance_field


@pytest.fixture(scope="module")
def volume_path(tmp_path_factory) -> str:
    grid = distance_field(16)
    path = tmp_path_factory.mktemp("vol") / "sphere.raw"
    path.write_bytes(grid.data.astype("<f4").tobytes())
    return str(path)


def vol_flags(volume_path: str) -> list[str]:
    return ["--volume", volume_path, "--dims", "16,16,16", "--dtype", "f32",
            "--isovalue", "5.0"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, volume_path):
    """Run the whole chain once; individual tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("chain")
    paths = {key: str(root / name) for key, name in [
        ("points", "points.sspc"), ("cameras", "cameras.json"),
        ("views", "views"), ("checkpoint", "model.ssgc"),
        ("report", "report.csv"), ("trace", "trace.csv"),
        ("renders", "renders"), ("metrics", "metrics.csv")]}
    codes = [
        main(["extract", *vol_flags(volume_path), "--max-points", "48",
              "--output", paths["points"]]),
        main(["cameras", "--count", "4", "--center", "7.5,7.5,7.5",
              "--radius", "19.5", "--width", "32", "--height", "32",
              "--output", paths["cameras"]]),
        main(["groundtruth", *vol_flags(volume_path),
              "--cameras", paths["cameras"], "--output", paths["views"]]),
        main(["train", "--points", paths["points"],
              "--cameras", paths["cameras"], "--views", paths["views"],
              "--workers", "2", "--iterations", "4", "--eval-interval", "2",
              "--checkpoint", paths["checkpoint"], "--report", paths["report"],
              "--trace", paths["trace"]]),
        main(["render", "--checkpoint", paths["checkpoint"],
              "--cameras", paths["cameras"], "--output", paths["renders"]]),
        main(["metrics", paths["views"], paths["renders"],
              "--output", paths["metrics"]]),
    ]
    return paths, codes


class TestPipelineChain:
    def test_every_step_exits_zero(self, pipeline):
        _, codes = pipeline
        assert codes == [0, 0, 0, 0, 0, 0]

    def test_point_cloud_artifact(self, pipeline):
        paths, _ = pipeline
        cloud = load_point_cloud(paths["points"])
        assert 0 < cloud.count <= 48
        assert np.all(np.isfinite(cloud.positions))

    def test_report_artifact(self, pipeline):
        paths, _ = pipeline
        report = TrainReport.read_csv(paths["report"])
        assert report.workers == 2
        assert report.resolution == 32
        assert [r.iteration for r in report.records] == [0, 2, 4]
        assert report.total_wall_s > 0.0

    def test_checkpoint_artifact(self, pipeline):
        paths, _ = pipeline
        cloud = load_checkpoint(paths["checkpoint"])
        assert cloud.count == load_point_cloud(paths["points"]).count
        assert np.all(np.isfinite(cloud.positions))
        assert np.all(np.isfinite(cloud.sh_coeffs))

    def test_trace_artifact(self, pipeline):
        paths, _ = pipeline
        lines = open(paths["trace"]).read().strip().split("\n")
        assert lines[0] == ("iteration,project_s,route_s,composite_s,"
                            "backward_s,reduce_s,step_s")
        assert len(lines) == 1 + 4

    def test_render_artifacts(self, pipeline):
        paths, _ = pipeline
        names = sorted(n for n in os.listdir(paths["renders"])
                       if n.endswith(".png"))
        assert names == [f"view_{i:04d}.png" for i in range(4)]
        img = load_png(os.path.join(paths["renders"], names[0]))
        assert img.shape == (32, 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        manifest = json.load(open(os.path.join(paths["renders"],
                                               "manifest.json")))
        assert [v["camera_index"] for v in manifest["views"]] == [0, 1, 2, 3]

    def test_metrics_artifact(self, pipeline):
        paths, _ = pipeline
        lines = open(paths["metrics"]).read().strip().split("\n")
        assert lines[0] == "image,psnr,ssim"
        rows = [ln.split(",") for ln in lines[1:]]
        assert [r[0] for r in rows] == [f"view_{i:04d}.png" for i in range(4)] \
            + ["mean"]
        for _, p, s in rows:
            assert np.isfinite(float(p)) and -1.0 <= float(s) <= 1.0

    def test_metrics_self_comparison_is_perfect(self, pipeline, tmp_path):
        paths, _ = pipeline
        out = str(tmp_path / "self.csv")
        assert main(["metrics", paths["views"], paths["views"],
                     "--output", out]) == 0
        rows = open(out).read().strip().split("\n")[1:]
        for row in rows:
            _, p, s = row.split(",")
            assert float(p) == 100.0
            assert float(s) == 1.0


class TestExitCodes:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["cameras", "--bogus", "1"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_flag_value(self):
        assert main(["cameras", "--count", "many"]) == 1

    def test_missing_required_flag(self):
        assert main(["train", "--points", "p.sspc"]) == 1

    def test_runtime_error_missing_input(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["metrics", str(a), str(b)]) == 2
        assert capsys.readouterr().err.startswith("isosplat: error:")

    def test_runtime_error_no_crossings(self, volume_path, tmp_path, capsys):
        args = vol_flags(volume_path)
        args[args.index("--isovalue") + 1] = "999.0"
        code = main(["extract", *args,
                     "--output", str(tmp_path / "points.sspc")])
        assert code == 2
        assert "isosplat: error:" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        assert "--workers" in capsys.readouterr().out


class TestDefaultsAndConfig:
    def test_env_var_output_dir(self, tmp_path, monkeypatch):
        out_dir = tmp_path / "outputs"
        monkeypatch.setenv("ISOSPLAT_OUTPUT_DIR", str(out_dir))
        assert main(["cameras", "--count", "2", "--width", "32",
                     "--height", "32"]) == 0
        assert (out_dir / "cameras.json").is_file()

    def test_config_file_values_apply(self, pipeline, tmp_path):
        paths, _ = pipeline
        cfg_path = str(tmp_path / "train.cfg")
        TrainConfig(iterations=3, eval_interval=0).to_file(cfg_path)
        report_path = str(tmp_path / "report.csv")
        assert main(["train", "--points", paths["points"],
                     "--cameras", paths["cameras"], "--views", paths["views"],
                     "--config", cfg_path,
                     "--checkpoint", str(tmp_path / "m.ssgc"),
                     "--report", report_path]) == 0
        assert TrainReport.read_csv(report_path).final.iteration == 3

    def test_flags_beat_config_file(self, pipeline, tmp_path):
        paths, _ = pipeline
        cfg_path = str(tmp_path / "train.cfg")
        TrainConfig(iterations=3, eval_interval=0).to_file(cfg_path)
        report_path = str(tmp_path / "report.csv")
        assert main(["train", "--points", paths["points"],
                     "--cameras", paths["cameras"], "--views", paths["views"],
                     "--config", cfg_path, "--iterations", "2",
                     "--checkpoint", str(tmp_path / "m.ssgc"),
                     "--report", report_path]) == 0
        assert TrainReport.read_csv(report_path).final.iteration == 2

    def test_unknown_config_key_is_runtime_error(self, pipeline, tmp_path,
                                                 capsys):
        paths, _ = pipeline
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("[train]\nbogus = 1\n")
        assert main(["train", "--points", paths["points"],
                     "--cameras", paths["cameras"], "--views", paths["views"],
                     "--config", str(cfg_path)]) == 2
        assert "bogus" in capsys.readouterr().err


class TestBenchCommand:
    def test_grid_outputs(self, volume_path, tmp_path, capsys):
        out = tmp_path / "bench"
        assert main(["bench", *vol_flags(volume_path), "--max-points", "48",
                     "--views", "2", "--resolutions", "32",
                     "--workers-list", "1,2", "--reps", "2",
                     "--iterations", "2", "--output-dir", str(out)]) == 0
        for name in ("points.sspc", "cameras_32.json", "timing.csv",
                     "quality.csv", "timing_table.csv", "quality_table.csv"):
            assert (out / name).is_file(), name
        assert len(list((out / "gt_32").glob("*.png"))) == 2
        rep_rows, medians = read_timing_csv(str(out / "timing.csv"))
        assert len(rep_rows) == 4 and len(medians) == 2
        table = read_table_csv((out / "timing_table.csv").read_text())
        assert set(table) == {(1, 32), (2, 32)}
        quality = read_table_csv((out / "quality_table.csv").read_text())
        psnr_1, ssim_1 = quality[(1, 32)]
        assert quality[(2, 32)] == (psnr_1, ssim_1)
        stdout = capsys.readouterr().out
        assert "resolution 32: 2-worker speedup" in stdout
        assert f"bench outputs -> {out}" in stdout

    def test_capacity_marks_cells_infeasible(self, volume_path, tmp_path,
                                             capsys):
        out = tmp_path / "bench"
        assert main(["bench", *vol_flags(volume_path), "--max-points", "48",
                     "--views", "2", "--resolutions", "32",
                     "--workers-list", "1,2", "--reps", "1",
                     "--iterations", "1", "--capacity", "1",
                     "--output-dir", str(out)]) == 0
        table = read_table_csv((out / "timing_table.csv").read_text())
        assert table[(1, 32)] is None and table[(2, 32)] is None
        assert "speedup" not in capsys.readouterr().out

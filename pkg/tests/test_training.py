"""Config handling, report IO, densification rules, and the training loop."""

import math

import numpy as np
import pytest

from isosplat.engine import _build_schedule, run_training
from isosplat.gaussians import init_from_points
from isosplat.training import (
    DensifyMapping,
    EvalRecord,
    TrainConfig,
    TrainReport,
    TrainStats,
    densify_and_prune,
    deterministic_equal,
    train_single,
)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def small_cloud(n: int, scale: float = 0.1, opacity: float = 0.5):
    from isosplat.gaussians import GaussianCloud

    rng = np.random.default_rng(7)
    positions = rng.uniform(0.0, 10.0, (n, 3)).astype(np.float32)
    return GaussianCloud(
        positions=positions,
        log_scales=np.full((n, 3), np.log(scale), dtype=np.float32),
        rotations=np.tile(np.float32([1, 0, 0, 0]), (n, 1)),
        opacity_logits=np.full(n, np.float32(logit(opacity))),
        sh_coeffs=np.zeros((n, 4, 3), dtype=np.float32),
        degree=1,
    )


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.iterations == 2000
        assert cfg.lambda_dssim == 0.2
        assert cfg.lr_position == 1.6e-4
        assert cfg.lr_sh == 2.5e-3
        assert cfg.lr_opacity == 5e-2
        assert cfg.lr_scale == 5e-3
        assert cfg.lr_rotation == 1e-3
        assert cfg.densify_interval == 100
        assert cfg.densify_start == 500
        assert cfg.grad_threshold == 2e-4
        assert cfg.opacity_prune == 0.005

    def test_densify_stop_defaults_to_half_run(self):
        assert TrainConfig(iterations=2000).effective_densify_stop() == 1000
        assert TrainConfig(iterations=2000, densify_stop=800).effective_densify_stop() == 800

    def test_grad_threshold_scales_with_resolution(self):
        cfg = TrainConfig()
        assert cfg.effective_grad_threshold(512) == pytest.approx(2e-4)
        assert cfg.effective_grad_threshold(128) == pytest.approx(5e-5)
        assert cfg.effective_grad_threshold(1024) == pytest.approx(4e-4)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"iterations": -1},
            {"lambda_dssim": 1.5},
            {"grad_threshold": -1e-4},
            {"lr_position": 0.0},
            {"densify_interval": 0},
            {"sh_degree": 2},
            {"tile_size": 0},
            {"eval_interval": -1},
        ],
    )
    def test_validate_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()

    def test_file_and_override_precedence(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("[train]\niterations = 700\nlambda_dssim = 0.3\n")
        cfg = TrainConfig.from_sources(str(path), {"iterations": "900"})
        assert cfg.iterations == 900
        assert cfg.lambda_dssim == 0.3
        assert cfg.lr_position == 1.6e-4

    def test_config_file_round_trip(self, tmp_path):
        cfg = TrainConfig(iterations=123, lambda_dssim=0.35, densify=False,
                          background=(0.0, 0.25, 1.0), seed=9,
                          scale_prune=2.5, split_threshold=0.07)
        path = tmp_path / "cfg.ini"
        cfg.to_file(str(path))
        loaded = TrainConfig.from_sources(str(path))
        assert loaded == cfg

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(OSError):
            TrainConfig.from_sources(str(tmp_path / "absent.cfg"))


class TestTrainReportIO:
    @staticmethod
    def sample_report() -> TrainReport:
        return TrainReport(
            workers=2,
            resolution=128,
            records=[
                EvalRecord(0, 0.31640625, 14.969871538, 0.6123, 0.0, 3000),
                EvalRecord(100, 0.1017152361, 19.1111387, 0.8120001, 4.25, 3107),
            ],
            iteration_losses=[0.3, 0.25],
            total_wall_s=4.75,
        )

    def test_csv_round_trip_is_lossless(self, tmp_path):
        report = self.sample_report()
        path = tmp_path / "report.csv"
        report.write_csv(str(path))
        loaded = TrainReport.read_csv(str(path))
        assert loaded.workers == report.workers
        assert loaded.resolution == report.resolution
        assert loaded.total_wall_s == report.total_wall_s
        assert len(loaded.records) == len(report.records)
        for a, b in zip(loaded.records, report.records):
            assert (a.iteration, a.loss, a.psnr, a.ssim, a.wall_s, a.gaussians) == (
                b.iteration, b.loss, b.psnr, b.ssim, b.wall_s, b.gaussians)

    def test_csv_layout(self, tmp_path):
        path = tmp_path / "report.csv"
        self.sample_report().write_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[1] == "iteration,loss,psnr,ssim,wall_s,gaussians"
        assert lines[-1].startswith("summary,")
        assert len(lines) == 2 + 2 + 1

    def test_trace_csv(self, tmp_path):
        report = self.sample_report()
        report.phase_rows = [
            {"iteration": 1, "project_s": 0.01, "route_s": 0.002,
             "composite_s": 0.03, "backward_s": 0.04, "reduce_s": 0.001,
             "step_s": 0.005},
        ]
        path = tmp_path / "trace.csv"
        report.write_trace_csv(str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == ("iteration,project_s,route_s,composite_s,"
                            "backward_s,reduce_s,step_s")
        assert len(lines) == 2
        assert lines[1].startswith("1,")

    def test_deterministic_equal_semantics(self):
        a = self.sample_report()
        b = self.sample_report()
        assert deterministic_equal(a, b)
        b.total_wall_s = 99.0
        b.records[1].wall_s = 77.0
        assert deterministic_equal(a, b)
        b.records[1].loss += 1e-16
        assert deterministic_equal(a, b) == (a.records[1].loss == b.records[1].loss)
        c = self.sample_report()
        c.records[1].psnr += 1e-9
        assert not deterministic_equal(a, c)


class TestSchedule:
    def test_epoch_is_a_permutation(self):
        sched = _build_schedule(10, 5, seed=3)
        assert len(sched) == 10
        assert sorted(sched[:5]) == [0, 1, 2, 3, 4]
        assert sorted(sched[5:]) == [0, 1, 2, 3, 4]

    def test_deterministic_and_epoch_varying(self):
        a = _build_schedule(64, 16, seed=1)
        b = _build_schedule(64, 16, seed=1)
        assert a == b
        epochs = [a[i * 16:(i + 1) * 16] for i in range(4)]
        assert any(epochs[0] != e for e in epochs[1:])

    def test_truncates_mid_epoch(self):
        sched = _build_schedule(7, 5, seed=0)
        assert len(sched) == 7


class TestDensifyAndPrune:
    CFG = TrainConfig(seed=0)

    def test_identity_when_nothing_triggers(self):
        cloud = small_cloud(5)
        stats = TrainStats.zeros(5)
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 600,
                                         grad_threshold=1.0, split_threshold=1.0)
        assert mapping.identity
        assert out.count == 5
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(mapping.kept, np.arange(5))

    def test_low_opacity_row_pruned(self):
        cloud = small_cloud(4)
        cloud.opacity_logits[2] = logit(0.001)
        stats = TrainStats.zeros(4)
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 600,
                                         grad_threshold=1.0, split_threshold=1.0)
        assert out.count == 3
        np.testing.assert_array_equal(mapping.pruned, [2])
        np.testing.assert_array_equal(mapping.kept, [0, 1, 3])
        np.testing.assert_array_equal(out.positions, cloud.positions[[0, 1, 3]])

    def test_three_hot_small_rows_cloned(self):
        cloud = small_cloud(6, scale=0.05)
        stats = TrainStats.zeros(6)
        stats.seen[:] = 10
        hot = [1, 3, 4]
        stats.grad_accum[hot] = 10 * 2e-3
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 600,
                                         grad_threshold=1e-3, split_threshold=1.0)
        assert out.count == 9
        np.testing.assert_array_equal(mapping.cloned, hot)
        assert mapping.split.size == 0 and mapping.pruned.size == 0
        np.testing.assert_array_equal(out.positions[:6], cloud.positions)
        np.testing.assert_array_equal(out.positions[6:], cloud.positions[hot])

    def test_hot_large_row_split_into_two(self):
        cloud = small_cloud(3, scale=0.5)
        stats = TrainStats.zeros(3)
        stats.seen[:] = 5
        stats.grad_accum[1] = 5 * 1e-2
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 700,
                                         grad_threshold=1e-3, split_threshold=0.2)
        assert out.count == 4
        np.testing.assert_array_equal(mapping.split, [1])
        np.testing.assert_array_equal(mapping.kept, [0, 2])
        children = out.log_scales[2:]
        np.testing.assert_allclose(
            children, np.tile(cloud.log_scales[1] - np.log(1.6), (2, 1)),
            rtol=1e-6)
        assert not np.array_equal(out.positions[2], out.positions[3])
        np.testing.assert_array_equal(out.rotations[2:], cloud.rotations[[1, 1]])
        np.testing.assert_array_equal(out.opacity_logits[2:],
                                      cloud.opacity_logits[[1, 1]])

    def test_child_positions_seeded_by_parent_global_id(self):
        # A shard holding only the splitting row must produce bitwise the
        # same children as the full cloud, keyed by the parent's global id.
        full = small_cloud(6, scale=0.5)
        stats = TrainStats.zeros(6)
        stats.seen[:] = 1
        stats.grad_accum[4] = 1.0
        out_full, _ = densify_and_prune(full, stats, self.CFG, 900,
                                        grad_threshold=1e-3, split_threshold=0.2)

        from isosplat.gaussians import GaussianCloud
        rows = np.array([4])
        shard = GaussianCloud(
            positions=full.positions[rows], log_scales=full.log_scales[rows],
            rotations=full.rotations[rows],
            opacity_logits=full.opacity_logits[rows],
            sh_coeffs=full.sh_coeffs[rows], degree=full.degree)
        sstats = TrainStats(grad_accum=stats.grad_accum[rows].copy(),
                            seen=stats.seen[rows].copy())
        out_shard, _ = densify_and_prune(shard, sstats, self.CFG, 900,
                                         grad_threshold=1e-3,
                                         split_threshold=0.2,
                                         global_ids=np.array([4]))
        np.testing.assert_array_equal(out_full.positions[5:], out_shard.positions[0:])

    def test_prune_beats_densify(self):
        cloud = small_cloud(3)
        cloud.opacity_logits[0] = logit(0.001)
        stats = TrainStats.zeros(3)
        stats.seen[:] = 1
        stats.grad_accum[0] = 100.0
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 600,
                                         grad_threshold=1e-3, split_threshold=1.0)
        assert out.count == 2
        np.testing.assert_array_equal(mapping.pruned, [0])
        assert mapping.cloned.size == 0 and mapping.split.size == 0

    def test_oversized_rows_pruned_by_scale(self):
        cloud = small_cloud(3, scale=0.1)
        cloud.log_scales[1, 2] = np.log(5.0)
        cfg = TrainConfig(scale_prune=1.0)
        out, mapping = densify_and_prune(cloud, TrainStats.zeros(3), cfg, 600,
                                         grad_threshold=1.0, split_threshold=1.0)
        assert out.count == 2
        np.testing.assert_array_equal(mapping.pruned, [1])

    def test_row_layout_kept_then_clones_then_children(self):
        cloud = small_cloud(5, scale=0.05)
        cloud.log_scales[3] = np.log(0.5)
        stats = TrainStats.zeros(5)
        stats.seen[:] = 1
        stats.grad_accum[[1, 3]] = 1.0
        out, mapping = densify_and_prune(cloud, stats, self.CFG, 600,
                                         grad_threshold=1e-3, split_threshold=0.2)
        # kept: 0,1,2,4 then clone of 1, then two children of 3
        assert out.count == 7
        np.testing.assert_array_equal(mapping.kept, [0, 1, 2, 4])
        np.testing.assert_array_equal(mapping.cloned, [1])
        np.testing.assert_array_equal(mapping.split, [3])
        np.testing.assert_array_equal(out.positions[:4], cloud.positions[[0, 1, 2, 4]])
        np.testing.assert_array_equal(out.positions[4], cloud.positions[1])


class TestTrainSingle:
    def test_zero_iterations_reports_initial_eval_only(self, tiny_dataset):
        cfg = TrainConfig(iterations=0, seed=0)
        cloud, report = train_single(tiny_dataset, cfg)
        assert len(report.records) == 1
        assert report.records[0].iteration == 0
        assert report.iteration_losses == []
        init = init_from_points(tiny_dataset.points, degree=cfg.sh_degree)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(cloud, name),
                                          getattr(init, name))

    def test_two_runs_bitwise_identical(self, tiny_dataset):
        cfg = TrainConfig(iterations=6, eval_interval=3, seed=11)
        cloud_a, rep_a = train_single(tiny_dataset, cfg)
        cloud_b, rep_b = train_single(tiny_dataset, cfg)
        assert deterministic_equal(rep_a, rep_b)
        np.testing.assert_array_equal(cloud_a.positions, cloud_b.positions)
        np.testing.assert_array_equal(cloud_a.sh_coeffs, cloud_b.sh_coeffs)

    def test_eval_cadence(self, tiny_dataset):
        cfg = TrainConfig(iterations=8, eval_interval=4, seed=0)
        _, report = train_single(tiny_dataset, cfg)
        assert [r.iteration for r in report.records] == [0, 4, 8]
        assert len(report.iteration_losses) == 8
        assert report.workers == 1
        assert report.resolution == tiny_dataset.width

    def test_final_eval_always_recorded(self, tiny_dataset):
        cfg = TrainConfig(iterations=5, eval_interval=0, seed=0)
        _, report = train_single(tiny_dataset, cfg)
        assert [r.iteration for r in report.records] == [0, 5]

    def test_gaussian_count_fixed_without_densify(self, tiny_dataset):
        cfg = TrainConfig(iterations=4, eval_interval=2, densify=False, seed=0)
        cloud, report = train_single(tiny_dataset, cfg)
        counts = {r.gaussians for r in report.records}
        assert counts == {cloud.count}

    def test_resolution_mismatch_rejected(self, tiny_dataset):
        cfg = TrainConfig(iterations=1, resolution=64)
        with pytest.raises(ValueError, match="resolution"):
            train_single(tiny_dataset, cfg)

    def test_loss_improves_over_short_run(self, tiny_dataset):
        cfg = TrainConfig(iterations=40, seed=0)
        _, report = train_single(tiny_dataset, cfg)
        assert report.final.loss < report.records[0].loss

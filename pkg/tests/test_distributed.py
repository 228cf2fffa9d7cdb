"""Sharding, routing, fused reduction, rebalancing, and worker transparency."""

import itertools

import numpy as np
import pytest

import isosplat.engine as engine
from isosplat.distributed import (
    GradChunk,
    GradMessage,
    ProtocolError,
    ShardMap,
    estimate_min_workers,
    partition_gaussians,
    partition_pixels,
    rebalance,
    reduce_gradients_fused,
    route_rows,
    route_splats,
    train_distributed,
)
from isosplat.rasterizer import (
    ProjectedSplat,
    backward_on_tiles,
    build_tile_lists,
    chain_to_params,
    project,
    render_backward,
    render_forward,
    sort_order,
)
from isosplat.training import TrainConfig, deterministic_equal, train_single

from oracles import BG, make_camera, random_cloud


class TestPartitionGaussians:
    def test_four_million_over_four_workers(self):
        smap = partition_gaussians(4_000_000, 4)
        assert smap.sizes == [1_000_000] * 4
        for w, ids in enumerate(smap.lists):
            assert ids[0] == w * 1_000_000
            assert ids[-1] == (w + 1) * 1_000_000 - 1

    def test_single_worker_owns_all(self):
        smap = partition_gaussians(7, 1)
        np.testing.assert_array_equal(smap.lists[0], np.arange(7))
        np.testing.assert_array_equal(smap.owner, 0)

    def test_ten_over_three(self):
        smap = partition_gaussians(10, 3)
        assert smap.sizes == [4, 3, 3]
        np.testing.assert_array_equal(smap.lists[0], [0, 1, 2, 3])
        np.testing.assert_array_equal(smap.lists[1], [4, 5, 6])
        np.testing.assert_array_equal(smap.lists[2], [7, 8, 9])

    @pytest.mark.parametrize("n,w", [(0, 1), (0, 5), (1, 4), (17, 5), (100, 7)])
    def test_balanced_partition_properties(self, n, w):
        smap = partition_gaussians(n, w)
        sizes = smap.sizes
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1
        seen = np.concatenate(smap.lists) if n else np.empty(0, dtype=np.int64)
        np.testing.assert_array_equal(np.sort(seen), np.arange(n))
        for wk, ids in enumerate(smap.lists):
            np.testing.assert_array_equal(smap.owner[ids], wk)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            partition_gaussians(10, 0)
        with pytest.raises(ValueError):
            partition_gaussians(-1, 2)
        with pytest.raises(ValueError):
            partition_gaussians(10, 2, strategy="striped")


class TestPartitionPixels:
    def test_full_scale_grid(self):
        part = partition_pixels(512, 512, 16, 4)
        assert part.tile_count == 1024
        for w in range(4):
            assert part.tiles_of(w).shape[0] == 256

    def test_single_worker(self):
        part = partition_pixels(64, 64, 16, 1)
        np.testing.assert_array_equal(part.assignment, 0)

    @pytest.mark.parametrize("w,h,ts,workers", [
        (33, 17, 16, 4), (128, 64, 16, 3), (16, 16, 16, 2), (100, 100, 16, 5),
    ])
    def test_round_robin_row_major(self, w, h, ts, workers):
        part = partition_pixels(w, h, ts, workers)
        n = part.tile_count
        assert n == ((w + ts - 1) // ts) * ((h + ts - 1) // ts)
        np.testing.assert_array_equal(part.assignment,
                                      np.arange(n) % workers)
        counts = np.bincount(part.assignment, minlength=workers)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == n

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            partition_pixels(64, 64, 16, 0)
        with pytest.raises(ValueError):
            partition_pixels(0, 64, 16, 1)


def make_splat(index, depth, span):
    return ProjectedSplat(
        gaussian_index=index,
        mean2d=np.zeros(2),
        cov2d=np.eye(2),
        depth=depth,
        color=np.zeros(3),
        opacity=0.5,
        tile_span=span,
    )


class TestRouteSplats:
    def test_full_span_reaches_every_worker(self):
        part = partition_pixels(64, 64, 16, 4)
        splat = make_splat(0, 1.0, ((0, 0), (3, 3)))
        lists = route_splats([splat], part)
        assert all(len(lst) == 1 for lst in lists)

    def test_empty_span_reaches_none(self):
        part = partition_pixels(64, 64, 16, 4)
        splat = make_splat(0, 1.0, ((1, 1), (0, 0)))
        lists = route_splats([splat], part)
        assert all(len(lst) == 0 for lst in lists)

    def test_two_tile_span_maps_by_modulo(self):
        # Tiles 5 and 6 on a 4-wide tile grid belong to workers 1 and 2
        # under round-robin assignment.
        part = partition_pixels(64, 64, 16, 4)
        splat = make_splat(3, 2.0, ((1, 1), (2, 1)))
        lists = route_splats([splat], part)
        delivered = [w for w, lst in enumerate(lists) if lst]
        assert delivered == [1, 2]

    def test_destination_lists_keep_global_depth_order(self):
        part = partition_pixels(64, 64, 16, 2)
        splats = [
            make_splat(2, 5.0, ((0, 0), (3, 3))),
            make_splat(7, 1.0, ((0, 0), (3, 3))),
            make_splat(1, 5.0, ((0, 0), (3, 3))),
            make_splat(0, 3.0, ((0, 0), (3, 3))),
        ]
        lists = route_splats(splats, part)
        for lst in lists:
            keys = [(s.depth, s.gaussian_index) for s in lst]
            assert keys == sorted(keys)
            assert keys == [(1.0, 7), (3.0, 0), (5.0, 1), (5.0, 2)]

    def test_route_rows_matches_splat_view(self):
        cam = make_camera()
        cloud = random_cloud(np.random.default_rng(5), 30)
        batch = project(cloud, cam)
        part = partition_pixels(cam.width, cam.height, batch.tile_size, 3)
        mask = route_rows(batch.tile_min, batch.tile_max, 3, batch.tiles_x)
        lists = route_splats([batch[i] for i in range(len(batch))], part)
        member = np.zeros((len(batch), 3), dtype=np.uint8)
        for w, lst in enumerate(lists):
            for s in lst:
                row = int(np.nonzero(batch.indices == s.gaussian_index)[0][0])
                member[row, w] = 1
        np.testing.assert_array_equal(mask, member)


def chunk_for(owner_ids, tile_id, rows, value):
    k = len(rows)
    return GradChunk(
        tile_id=tile_id,
        indices=np.asarray(owner_ids)[rows],
        dmean2d=np.full((k, 2), value, dtype=np.float64),
        dconic=np.full((k, 3), value, dtype=np.float64),
        dcolor=np.full((k, 3), value, dtype=np.float64),
        dopacity=np.full(k, value, dtype=np.float64),
    )


class TestReduceGradientsFused:
    def test_single_producer_verbatim(self):
        smap = partition_gaussians(6, 2)
        chunk = chunk_for(smap.lists[0], tile_id=4, rows=[0, 2], value=1.25)
        out = reduce_gradients_fused(
            [GradMessage(producer=1, destination=0, chunks=[chunk])], smap)
        acc = out[0]
        np.testing.assert_array_equal(acc["dopacity"], [1.25, 0.0, 1.25])
        np.testing.assert_array_equal(acc["dmean2d"][2], [1.25, 1.25])
        np.testing.assert_array_equal(acc["dcolor"][1], 0.0)

    def test_two_producers_sum_in_tile_order(self):
        smap = partition_gaussians(1, 1)
        m_a = GradMessage(0, 0, [chunk_for([0], 3, [0], 0.5)])
        m_b = GradMessage(1, 0, [chunk_for([0], 7, [0], 0.25)])
        fwd = reduce_gradients_fused([m_a, m_b], smap)[0]
        rev = reduce_gradients_fused([m_b, m_a], smap)[0]
        assert fwd["dopacity"][0] == 0.75
        for key in fwd:
            np.testing.assert_array_equal(fwd[key], rev[key])

    def test_canonical_order_despite_cancellation(self):
        # (1e16 + 1) - 1e16 = 0 but (1e16 - 1e16) + 1 = 1: only a fixed
        # ascending-tile summation makes all arrival orders agree.
        smap = partition_gaussians(1, 1)
        msgs = [
            GradMessage(0, 0, [chunk_for([0], 0, [0], 1e16)]),
            GradMessage(1, 0, [chunk_for([0], 1, [0], 1.0)]),
            GradMessage(2, 0, [chunk_for([0], 2, [0], -1e16)]),
        ]
        expected = (0.0 + 1e16 + 1.0) + -1e16
        for perm in itertools.permutations(msgs):
            out = reduce_gradients_fused(list(perm), smap)[0]
            assert out["dopacity"][0] == expected

    def test_arrival_order_invariance_random(self):
        rng = np.random.default_rng(17)
        smap = partition_gaussians(40, 3)
        msgs = []
        tile = 0
        for producer in range(3):
            for dest in range(3):
                chunks = []
                for _ in range(2):
                    rows = np.sort(rng.choice(smap.sizes[dest],
                                              size=4, replace=False))
                    chunks.append(chunk_for(smap.lists[dest], tile, rows,
                                            float(rng.standard_normal())))
                    tile += 1
                msgs.append(GradMessage(producer, dest, chunks))
        baseline = reduce_gradients_fused(msgs, smap)
        for _ in range(20):
            shuffled = list(msgs)
            rng.shuffle(shuffled)
            out = reduce_gradients_fused(shuffled, smap)
            for dest in baseline:
                for key in baseline[dest]:
                    np.testing.assert_array_equal(out[dest][key],
                                                  baseline[dest][key])

    def test_unowned_index_rejected(self):
        smap = partition_gaussians(6, 2)
        chunk = chunk_for([5], 0, [0], 1.0)
        with pytest.raises(ProtocolError, match="not owned"):
            reduce_gradients_fused([GradMessage(0, 0, [chunk])], smap)

    def test_duplicate_tile_rejected(self):
        smap = partition_gaussians(4, 1)
        msgs = [
            GradMessage(0, 0, [chunk_for(smap.lists[0], 2, [0], 1.0)]),
            GradMessage(1, 0, [chunk_for(smap.lists[0], 2, [1], 1.0)]),
        ]
        with pytest.raises(ProtocolError, match="twice"):
            reduce_gradients_fused(msgs, smap)

    def test_duplicate_pair_rejected(self):
        smap = partition_gaussians(4, 1)
        msgs = [
            GradMessage(0, 0, [chunk_for(smap.lists[0], 2, [0], 1.0)]),
            GradMessage(0, 0, [chunk_for(smap.lists[0], 3, [1], 1.0)]),
        ]
        with pytest.raises(ProtocolError, match="duplicate message"):
            reduce_gradients_fused(msgs, smap)

    def test_unknown_destination_rejected(self):
        smap = partition_gaussians(4, 1)
        msg = GradMessage(0, 3, [chunk_for(smap.lists[0], 0, [0], 1.0)])
        with pytest.raises(ProtocolError, match="unknown destination"):
            reduce_gradients_fused([msg], smap)

    def test_three_worker_reduction_matches_single_backward(self):
        # Distributed screen-space gradients, reassembled across owners and
        # chained to parameters, must reproduce render_backward bitwise.
        cam = make_camera()
        cloud = random_cloud(np.random.default_rng(55), 100)
        batch = project(cloud, cam)
        order = sort_order(batch)
        img, aux, order_pub = render_forward(batch, cam.width, cam.height, BG,
                                             dtype=np.float64)
        np.testing.assert_array_equal(order, order_pub)
        rng = np.random.default_rng(56)
        dl = rng.uniform(-1.0, 1.0, img.shape)
        reference = render_backward(cloud, cam, batch, order_pub, aux, dl)

        sa = {name: getattr(batch, name)[order] for name in
              ("mean2d", "conic", "color", "opacity", "tile_min", "tile_max")}
        sorted_ids = batch.indices[order]
        part = partition_pixels(cam.width, cam.height, batch.tile_size, 3)
        smap = partition_gaussians(cloud.count, 3)
        bg = np.asarray(BG, dtype=np.float64)
        messages = []
        for producer in range(3):
            own = part.tiles_of(producer)
            offsets, entries = build_tile_lists(sa["tile_min"], sa["tile_max"],
                                                own, batch.tiles_x, batch.tiles_y)
            scratch = backward_on_tiles(sa, own, offsets, entries, cam.width,
                                        cam.height, batch.tiles_x,
                                        batch.tile_size, bg, dl)
            chunks = [[] for _ in range(3)]
            for k in range(own.shape[0]):
                e0, e1 = int(offsets[k]), int(offsets[k + 1])
                if e0 == e1:
                    continue
                rows = entries[e0:e1]
                gidx = sorted_ids[rows]
                dests = smap.owner[gidx]
                for dst in np.unique(dests):
                    sel = np.nonzero(dests == dst)[0]
                    chunks[dst].append(GradChunk(
                        tile_id=int(own[k]),
                        indices=gidx[sel],
                        dmean2d=scratch["dmean"][e0:e1][sel],
                        dconic=scratch["dconic"][e0:e1][sel],
                        dcolor=scratch["dcolor"][e0:e1][sel],
                        dopacity=scratch["dopac"][e0:e1][sel],
                    ))
            messages.extend(GradMessage(producer, dst, chunks[dst])
                            for dst in range(3))
        reduced = reduce_gradients_fused(messages, smap)
        dmean = np.concatenate([reduced[w]["dmean2d"] for w in range(3)])
        dconic = np.concatenate([reduced[w]["dconic"] for w in range(3)])
        dcolor = np.concatenate([reduced[w]["dcolor"] for w in range(3)])
        dopac = np.concatenate([reduced[w]["dopacity"] for w in range(3)])
        flags = np.zeros(cloud.count, dtype=np.uint8)
        flags[batch.indices] = 1
        assembled = chain_to_params(cloud, cam, flags, dmean, dconic,
                                    dcolor, dopac)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(assembled, name),
                                          getattr(reference, name))


class TestRebalance:
    def test_balanced_map_is_noop(self):
        smap = partition_gaussians(12, 3)
        plan, out = rebalance(smap, smap.sizes)
        assert plan == []
        for a, b in zip(out.lists, smap.lists):
            np.testing.assert_array_equal(a, b)

    def test_ten_two_moves_four_lowest_first(self):
        smap = ShardMap.from_lists(
            [np.arange(10, dtype=np.int64), np.array([10, 11])], 12)
        plan, out = rebalance(smap, [10, 2])
        assert plan == [(0, 0, 1), (1, 0, 1), (2, 0, 1), (3, 0, 1)]
        assert out.sizes == [6, 6]
        np.testing.assert_array_equal(out.lists[0], [4, 5, 6, 7, 8, 9])
        np.testing.assert_array_equal(out.lists[1], [0, 1, 2, 3, 10, 11])

    def test_conserves_index_multiset(self):
        lists = [np.array([0, 3, 4, 7, 9, 11, 12]), np.array([1, 2]),
                 np.array([5, 6, 8, 10])]
        smap = ShardMap.from_lists([l.astype(np.int64) for l in lists], 13)
        plan, out = rebalance(smap, [7, 2, 4])
        assert max(out.sizes) - min(out.sizes) <= 1
        np.testing.assert_array_equal(np.sort(np.concatenate(out.lists)),
                                      np.arange(13))
        for g, src, dst in plan:
            assert g in lists[src]
            assert g in out.lists[dst]

    def test_count_mismatch_rejected(self):
        smap = partition_gaussians(10, 2)
        with pytest.raises(ValueError):
            rebalance(smap, [9, 1])


class TestEstimateMinWorkers:
    def test_production_scale_examples(self):
        assert estimate_min_workers(18_000_000, 11_200_000) == 2
        assert estimate_min_workers(4_000_000, 11_200_000) == 1

    def test_zero_model_needs_one_worker(self):
        assert estimate_min_workers(0, 11_200_000) == 1

    def test_exact_multiple(self):
        assert estimate_min_workers(22_400_000, 11_200_000) == 2
        assert estimate_min_workers(22_400_001, 11_200_000) == 3

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            estimate_min_workers(100, 0)
        with pytest.raises(ValueError):
            estimate_min_workers(-1, 10)


class TestTrainDistributed:
    def test_single_worker_degenerates_to_train_single(self, tiny_dataset):
        cfg = TrainConfig(iterations=6, eval_interval=3, seed=4)
        cloud_a, rep_a = train_single(tiny_dataset, cfg)
        cloud_b, rep_b = train_distributed(tiny_dataset, cfg, workers=1)
        assert deterministic_equal(rep_a, rep_b)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(cloud_a, name),
                                          getattr(cloud_b, name))

    @pytest.mark.parametrize("workers", [2, 3])
    def test_transparency_without_densify(self, tiny_dataset, workers):
        cfg = TrainConfig(iterations=12, eval_interval=6, densify=False, seed=0)
        cloud_1, rep_1 = train_single(tiny_dataset, cfg)
        cloud_w, rep_w = train_distributed(tiny_dataset, cfg, workers=workers)
        assert rep_w.workers == workers
        assert rep_1.iteration_losses == rep_w.iteration_losses
        for ra, rb in zip(rep_1.records, rep_w.records):
            assert (ra.iteration, ra.loss, ra.psnr, ra.ssim, ra.gaussians) == (
                rb.iteration, rb.loss, rb.psnr, rb.ssim, rb.gaussians)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(cloud_1, name),
                                          getattr(cloud_w, name))

    def test_transparency_through_densify_and_rebalance(self, tiny_dataset):
        cfg = TrainConfig(iterations=30, densify_start=10, densify_interval=10,
                          densify_stop=30, grad_threshold=1e-9,
                          eval_interval=10, seed=0)
        cloud_1, rep_1 = train_single(tiny_dataset, cfg)
        cloud_2, rep_2 = train_distributed(tiny_dataset, cfg, workers=2)
        assert rep_1.iteration_losses == rep_2.iteration_losses
        counts_1 = [r.gaussians for r in rep_1.records]
        counts_2 = [r.gaussians for r in rep_2.records]
        assert counts_1 == counts_2
        assert counts_1[-1] > counts_1[0]
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh_coeffs"):
            np.testing.assert_array_equal(getattr(cloud_1, name),
                                          getattr(cloud_2, name))

    def test_worker_failure_aborts_with_diagnostic(self, tiny_dataset,
                                                   monkeypatch):
        import threading

        real = engine.loss_l1_dssim

        def exploding(render, ref, lam):
            if threading.current_thread().name == "trainer-1":
                raise RuntimeError("injected fault")
            return real(render, ref, lam)

        monkeypatch.setattr(engine, "loss_l1_dssim", exploding)
        cfg = TrainConfig(iterations=3, seed=0)
        with pytest.raises(RuntimeError, match="worker 1 failed"):
            train_distributed(tiny_dataset, cfg, workers=2)

    def test_invalid_worker_count(self, tiny_dataset):
        with pytest.raises(ValueError):
            train_distributed(tiny_dataset, TrainConfig(iterations=1), workers=0)

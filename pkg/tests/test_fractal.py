import math

import numpy as np
import pytest

from brownlab import fractal, grid, rng
from brownlab.errors import EstimateError


def walk(steps, seed):
    return fractal.sample_walk(steps, seed)


class TestFrontier:
    def test_segment_frontier_is_everything(self):
        m = grid.rasterize([np.array([[-0.5, 0.0], [0.5, 0.0]])], 0.05, 20)
        front = fractal.frontier_cells(m)
        assert set(map(tuple, front.cells)) == \
            set(map(tuple, np.argwhere(m.occupied) - 20))

    def test_solid_block_frontier_is_ring(self):
        side = 21
        occ = np.zeros((side, side), dtype=bool)
        occ[6:15, 6:15] = True
        m = grid.LatticeMask(0.1, 10, occ)
        front = fractal.frontier_cells(m).to_bool_grid()
        expect = occ.copy()
        expect[7:14, 7:14] = False
        assert np.array_equal(front, expect)

    def test_matches_definition_scan(self):
        p = walk(4000, 3)
        cell, extent = fractal.grid_matched_to(p, 256)
        m = grid.rasterize([p.points], cell, extent)
        front = fractal.frontier_cells(m).to_bool_grid()
        lab = grid.flood_outside(m)
        out = lab.labels == grid.OUTSIDE
        side = 2 * extent + 1
        for i in range(side):
            for j in range(side):
                if not m.occupied[i, j]:
                    assert not front[i, j]
                    continue
                adj = False
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < side and 0 <= jj < side and out[ii, jj]:
                        adj = True
                assert front[i, j] == adj

    def test_subset_and_adjacency_invariant(self):
        p = walk(3000, 4)
        cell, extent = fractal.grid_matched_to(p, 256)
        m = grid.rasterize([p.points], cell, extent)
        front = fractal.frontier_cells(m)
        occ = set(map(tuple, np.argwhere(m.occupied) - extent))
        assert set(map(tuple, front.cells)) <= occ


class TestPioneer:
    def test_straight_path_every_cell_is_pioneer(self):
        pts = np.stack([np.linspace(0, 1.0, 200), np.zeros(200)], axis=1)
        p = fractal.sample_walk.__wrapped__ if False else None
        from brownlab import paths
        path = paths.PlanarPath(pts, 0.05)
        pio = fractal.pioneer_cells(path, 16, 0.05, 30)
        m = grid.rasterize([pts], 0.05, 30)
        assert set(map(tuple, pio.cells)) == \
            set(map(tuple, np.argwhere(m.occupied) - 30))

    def test_subset_of_occupied(self):
        p = walk(5000, 5)
        cell, extent = fractal.grid_matched_to(p, 256)
        pio = fractal.pioneer_cells(p, 32, cell, extent)
        m = grid.rasterize([p.points], cell, extent)
        occ = set(map(tuple, np.argwhere(m.occupied) - extent))
        assert set(map(tuple, pio.cells)) <= occ

    def test_checkpoint_nesting(self):
        p = walk(20000, 6)
        cell, extent = fractal.grid_matched_to(p, 512)
        coarse = fractal.pioneer_cells(p, 64, cell, extent)
        fine = fractal.pioneer_cells(p, 256, cell, extent)
        exact = fractal.pioneer_cells(p, 0, cell, extent)
        assert fine.contains(coarse)
        assert exact.contains(fine)

    def test_matches_per_step_oracle(self):
        p = walk(300, 7)
        cell, extent = fractal.grid_matched_to(p, 192)
        pts = p.points
        side = 2 * extent + 1
        occ = np.zeros((side, side), dtype=bool)
        oracle = set()
        for t in range(1, len(pts)):
            sc = grid.supercover_cells(pts[t - 1:t + 1], cell)
            fresh = [(i, j) for i, j in sc if not occ[i + extent, j + extent]]
            occ[sc[:, 0] + extent, sc[:, 1] + extent] = True
            m = grid.LatticeMask(cell, extent, occ)
            fs = set(map(tuple, fractal.frontier_cells(m).cells))
            for c in fresh:
                if c in fs:
                    oracle.add(c)
        mine = set(map(tuple,
                       fractal.pioneer_cells(p, len(pts) - 1, cell,
                                             extent).cells))
        assert mine == oracle


class TestBoxCount:
    def test_single_cell(self):
        cs = fractal.CellSet.from_cells([(3, -2)], 0.1, 16)
        table = fractal.box_count(cs, [1, 2, 4, 8, 16])
        assert table.counts == [1, 1, 1, 1, 1]

    def test_full_block_exact(self):
        L = 16
        cells = [(i, j) for i in range(L) for j in range(L)]
        cs = fractal.CellSet.from_cells(cells, 0.1, 32)
        table = fractal.box_count(cs, [1, 2, 4, 8])
        # block spans indices [0,16): boxes aligned at the array corner,
        # which sits at cell index -extent; alignment offset is 0 mod s when
        # extent % s == 0
        assert table.counts[0] == L * L

    def test_matches_hash_oracle(self):
        g = np.random.default_rng(8)
        pts = g.integers(-30, 31, size=(200, 2))
        cs = fractal.CellSet.from_cells(pts, 0.1, 32)
        table = fractal.box_count(cs, [1, 2, 4, 8])
        for s, count in zip(table.box_sizes, table.counts):
            boxes = {(i // s, j // s) for i, j in cs.cells}
            assert count == len(boxes)

    def test_counts_invariants_enforced(self):
        with pytest.raises(ValueError):
            fractal.BoxCountTable([1, 2], [3, 5])
        with pytest.raises(ValueError):
            fractal.BoxCountTable([1, 2], [50, 2])  # violates N(s) <= 4N(2s)

    def test_rejects_bad_sizes(self):
        cs = fractal.CellSet.from_cells([(0, 0)], 0.1, 16)
        with pytest.raises(ValueError):
            fractal.box_count(cs, [3])
        with pytest.raises(ValueError):
            fractal.box_count(cs, [64])


class TestFitDimension:
    def test_straight_line_dimension(self):
        cells = [(i, 0) for i in range(-200, 201)]
        cs = fractal.CellSet.from_cells(cells, 0.1, 256)
        table = fractal.box_count(cs, [1, 2, 4, 8, 16, 32, 64, 128])
        fit = fractal.fit_dimension(table, 2)
        assert abs(-fit.slope - 1.0) <= 0.05

    def test_full_block_dimension(self):
        cells = [(i, j) for i in range(-128, 128) for j in range(-128, 128)]
        cs = fractal.CellSet.from_cells(cells, 0.1, 200)
        table = fractal.box_count(cs, [1, 2, 4, 8, 16, 32, 64, 128])
        fit = fractal.fit_dimension(table, 2)
        assert abs(-fit.slope - 2.0) <= 0.02

    def test_needs_enough_scales(self):
        cs = fractal.CellSet.from_cells([(0, 0), (5, 3)], 0.1, 16)
        table = fractal.box_count(cs, [1, 2, 4, 8, 16])
        with pytest.raises(EstimateError):
            fractal.fit_dimension(table, 2)  # 5 - 4 = 1 scale left

    def test_brownian_frontier_benchmark(self):
        run = fractal.frontier_dimension_run(200_000, 1024, 7)
        assert abs(-run.fit.slope - 4 / 3) <= 0.15

    def test_window_shift_stability(self):
        run = fractal.frontier_dimension_run(200_000, 1024, 7)
        sizes = run.table.box_sizes
        counts = run.table.counts
        # windows shifted by one dyadic scale
        w1 = fractal.fit_dimension(
            fractal.BoxCountTable(sizes[1:-3], counts[1:-3]), 0)
        w2 = fractal.fit_dimension(
            fractal.BoxCountTable(sizes[2:-2], counts[2:-2]), 0)
        assert abs(w1.slope - w2.slope) < 0.1


class TestExports:
    def test_boxcount_csv(self, tmp_path):
        t = fractal.BoxCountTable([1, 2], [5, 2])
        fractal.write_boxcount_csv(t, tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_text() == "box_size,count\n1,5\n2,2\n"

    def test_dimension_json(self, tmp_path):
        import json
        cells = [(i, 0) for i in range(-100, 101)]
        cs = fractal.CellSet.from_cells(cells, 0.1, 128)
        table = fractal.box_count(cs, [1, 2, 4, 8, 16, 32, 64])
        fit = fractal.fit_dimension(table, 1)
        fractal.write_dimension_json(fit, tmp_path / "d.json")
        payload = json.loads((tmp_path / "d.json").read_text())
        assert set(payload) == {"dimension", "stderr", "window"}

    def test_cellset_csv_sorted(self, tmp_path):
        cs = fractal.CellSet.from_cells([(2, 1), (-1, 3), (2, 0)], 0.1, 8)
        fractal.write_cellset_csv(cs, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().strip().split("\n")
        assert lines == ["ix,iy", "-1,3", "2,0", "2,1"]

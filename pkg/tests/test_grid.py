import math

import numpy as np
import pytest
from scipy import stats

from brownlab import grid, paths, rng
from brownlab.errors import (
    ConvergenceError,
    GeometryError,
    MalformedDomainError,
    SwallowedPointError,
)


def stream(i=0):
    return rng.stream(777, rng.TAG_WALK, i)


def segment_cells_oracle(p1, p2, cs):
    """All cells the segment intersects, by Liang-Barsky clipping."""
    lo = np.floor(np.minimum(p1, p2) / cs + 0.5).astype(int) - 1
    hi = np.floor(np.maximum(p1, p2) / cs + 0.5).astype(int) + 1
    (x1, y1), (x2, y2) = p1, p2
    dx, dy = x2 - x1, y2 - y1
    out = set()
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            xmin, xmax = cs * (i - 0.5), cs * (i + 0.5)
            ymin, ymax = cs * (j - 0.5), cs * (j + 0.5)
            t0, t1 = 0.0, 1.0
            ok = True
            for pp, q in ((-dx, x1 - xmin), (dx, xmax - x1),
                          (-dy, y1 - ymin), (dy, ymax - y1)):
                if pp == 0:
                    if q < 0:
                        ok = False
                        break
                else:
                    r = q / pp
                    if pp < 0:
                        if r > t1:
                            ok = False
                            break
                        if r > t0:
                            t0 = r
                    else:
                        if r < t0:
                            ok = False
                            break
                        if r < t1:
                            t1 = r
            if ok and t0 <= t1:
                out.add((i, j))
    return out


class TestSupercover:
    def test_matches_exact_clipping_oracle(self):
        g = np.random.default_rng(42)
        for _ in range(500):
            p = g.uniform(-3, 3, size=(2, 2))
            cs = g.uniform(0.05, 0.8)
            cells = set(map(tuple, grid.supercover_cells(p, cs)))
            assert cells == segment_cells_oracle(p[0], p[1], cs)

    def test_chain_is_four_connected(self):
        g = np.random.default_rng(1)
        for _ in range(100):
            p = g.uniform(-2, 2, size=(4, 2))
            ch = grid.cell_chain(p, 0.1)
            steps = np.abs(np.diff(ch, axis=0)).sum(axis=1)
            assert np.all(steps >= 1)
            # corner hits may insert the two cells in either order
            assert np.all(steps <= 2)


class TestRasterize:
    def test_empty_list(self):
        m = grid.rasterize([], 0.1, 10)
        assert m.occupied.sum() == 0

    def test_horizontal_segment_count(self):
        for L in (0.5, 1.0, 2.3):
            m = grid.rasterize([np.array([[0.0, 0.0], [L, 0.0]])], 0.1, 40)
            row = m.occupied[:, 40]
            expect = math.ceil(L / 0.1)
            assert abs(int(row.sum()) - expect) <= 1
            assert m.occupied.sum() == row.sum()

    def test_single_path_is_connected(self):
        from scipy import ndimage
        for i in range(10):
            p = paths.run_to_radius((0.0, 0.0), 1.0, 0.04, stream(i))
            m = grid.rasterize([p.points], 0.05, 30)
            _, n = ndimage.label(m.occupied, structure=grid._FOUR_CONN)
            assert n == 1

    def test_outside_extent_raises(self):
        with pytest.raises(GeometryError):
            grid.rasterize([np.array([[0.0, 0.0], [5.0, 0.0]])], 0.1, 10)


def union_find_partition(free):
    """Independent 4-connectivity partition by union-find."""
    side = free.shape[0]
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for i in range(side):
        for j in range(side):
            if free[i, j]:
                parent[(i, j)] = (i, j)
    for i in range(side):
        for j in range(side):
            if free[i, j]:
                if i + 1 < side and free[i + 1, j]:
                    union((i, j), (i + 1, j))
                if j + 1 < side and free[i, j + 1]:
                    union((i, j), (i, j + 1))
    groups = {}
    for cell in parent:
        groups.setdefault(find(cell), set()).add(cell)
    return set(frozenset(g) for g in groups.values())


class TestFloodOutside:
    def test_empty_mask(self):
        m = grid.LatticeMask(0.1, 8)
        lab = grid.flood_outside(m)
        assert lab.n_enclosed == 0
        assert np.all(lab.labels == grid.OUTSIDE)

    def test_circle_has_one_enclosed_component(self):
        theta = np.linspace(0, 2 * math.pi, 400)
        ring = np.stack([0.7 * np.cos(theta), 0.7 * np.sin(theta)], axis=1)
        m = grid.rasterize([ring], 0.05, 20)
        lab = grid.flood_outside(m)
        assert lab.n_enclosed == 1
        assert lab.label_at((0, 0)) == 1

    def test_matches_union_find_oracle(self):
        g = np.random.default_rng(3)
        for _ in range(10):
            occ = g.random((21, 21)) < 0.4
            m = grid.LatticeMask(0.1, 10, occ)
            lab = grid.flood_outside(m)
            mine = {}
            for i in range(21):
                for j in range(21):
                    if not occ[i, j]:
                        mine.setdefault(lab.labels[i, j], set()).add((i, j))
            # partitions must agree as set-of-sets except outside may merge
            oracle = union_find_partition(~occ)
            mine_sets = set(frozenset(s) for s in mine.values())
            # outside (label 0) is the union of all border-touching components
            border = set()
            for comp in oracle:
                if any(i in (0, 20) or j in (0, 20) for i, j in comp):
                    border |= comp
            oracle2 = set(frozenset(c) for c in oracle
                          if not any(i in (0, 20) or j in (0, 20)
                                     for i, j in c))
            if border:
                oracle2.add(frozenset(border))
            assert mine_sets == oracle2


class TestDisconnects:
    def test_empty_mask_false(self):
        m = grid.LatticeMask(0.1, 10)
        assert not grid.disconnects(m, (0.0, 0.0))

    def test_ring_disconnects_origin(self):
        theta = np.linspace(0, 2 * math.pi, 400)
        ring = np.stack([0.7 * np.cos(theta), 0.7 * np.sin(theta)], axis=1)
        m = grid.rasterize([ring], 0.05, 20)
        assert grid.disconnects(m, (0.0, 0.0))

    def test_swallowed_point_raises(self):
        m = grid.rasterize([np.array([[0.0, 0.0], [0.3, 0.0]])], 0.05, 10)
        with pytest.raises(SwallowedPointError):
            grid.disconnects(m, (0.1, 0.0))

    def test_agrees_with_labels(self):
        g = np.random.default_rng(4)
        for _ in range(10):
            occ = g.random((21, 21)) < 0.35
            occ[10, 10] = False
            m = grid.LatticeMask(0.1, 10, occ)
            lab = grid.flood_outside(m)
            expect = lab.label_at((0, 0)) != grid.OUTSIDE
            assert grid.disconnects(m, (0.0, 0.0)) == expect


class TestSolveDirichlet:
    def test_empty_mask_is_one(self):
        m = grid.LatticeMask(0.1, 12)
        f = grid.solve_dirichlet(m, 1.0, 1e-4)
        free = ~(f.blocked | f.absorbing)
        assert np.all(f.values[free] >= 1.0 - 1e-2)

    def test_logarithmic_potential(self):
        # single blocked cell at the origin: logarithmic potential with the
        # lattice effective radius cs*exp(-(2*gamma + ln 8)/2) ~ cs/5.04
        # (the potential-kernel constant of the square lattice)
        cs = 0.02
        m = grid.rasterize([np.array([[0.0, 0.0], [0.0, 1e-9]])], cs, 60)
        f = grid.solve_dirichlet(m, 1.0, 1e-7, omega="auto",
                                 max_sweeps=600_000)
        r_eff = cs * math.exp(-(2 * 0.5772156649 + math.log(8.0)) / 2)
        for r in (10 * cs, 0.3, 0.5):
            expect = math.log(r / r_eff) / math.log(1.0 / r_eff)
            got = f.value_at(m.cell_of((r, 0.0)))
            assert abs(got - expect) / expect < 0.05, (r, got, expect)

    def test_tolerance_contract_and_max_principle(self):
        p = paths.run_to_radius((0.0, 0.0), 0.8, 0.03, stream(5))
        m = grid.rasterize([p.points], 0.04, 30)
        f = grid.solve_dirichlet(m, 1.0, 1e-3)
        assert grid.dirichlet_residual(f) <= 1e-3
        assert np.all(f.values >= 0.0) and np.all(f.values <= 1.0)
        assert np.all(f.values[m.occupied] == 0.0)

    def test_tolerance_validation(self):
        m = grid.LatticeMask(0.1, 10)
        with pytest.raises(ValueError):
            grid.solve_dirichlet(m, 1.0, 1e-2)

    def test_nonconvergence_carries_residual(self):
        p = paths.run_to_radius((0.0, 0.0), 0.8, 0.03, stream(6))
        m = grid.rasterize([p.points], 0.04, 30)
        with pytest.raises(ConvergenceError) as err:
            grid.solve_dirichlet(m, 1.0, 1e-3, max_sweeps=2)
        assert err.value.residual is not None
        assert err.value.residual > 1e-3

    def test_monte_carlo_cross_check(self):
        # radial slit: field values match one-off walk hit fractions
        slit = np.stack([np.linspace(0.2, 0.9, 100),
                         np.zeros(100)], axis=1)
        cs = 0.05
        m = grid.rasterize([slit], cs, 25)
        f = grid.solve_dirichlet(m, 1.0, 1e-6, omega="auto",
                                 max_sweeps=400_000)
        g = np.random.default_rng(11)
        probes = [(-0.5, 0.0), (0.0, 0.5), (0.4, 0.3), (0.0, -0.6),
                  (-0.2, -0.2)]
        walks = 4000
        for px, py in probes:
            cell = m.cell_of((px, py))
            hit = 0
            n = m.extent
            for _ in range(walks):
                i, j = cell
                while True:
                    r = g.integers(0, 4)
                    if r == 0:
                        i += 1
                    elif r == 1:
                        i -= 1
                    elif r == 2:
                        j += 1
                    else:
                        j -= 1
                    if m.occupied[i + n, j + n]:
                        break
                    if (i * i + j * j) * cs * cs >= 1.0:
                        hit += 1
                        break
            p_mc = hit / walks
            u = f.value_at(cell)
            sigma = math.sqrt(max(p_mc * (1 - p_mc), 1e-9) / walks)
            assert abs(p_mc - u) <= 4 * sigma, (px, py, p_mc, u)

    def test_refinement_stability(self):
        # halving the cell changes probe values of the log-potential by <= 5%
        vals = {}
        for cs in (0.04, 0.02):
            m = grid.rasterize([np.array([[0.0, 0.0], [0.0, 1e-9]])], cs, int(1.2 / cs))
            f = grid.solve_dirichlet(m, 1.0, 1e-7, omega="auto",
                                     max_sweeps=600_000)
            vals[cs] = f.value_at(m.cell_of((0.5, 0.0)))
        assert abs(vals[0.04] - vals[0.02]) / vals[0.02] <= 0.05


class TestSupOverCircle:
    def test_constant_field(self):
        m = grid.LatticeMask(0.1, 12)
        f = grid.solve_dirichlet(m, 1.0, 1e-4)
        # all free cells converge to 1; sup over an interior circle is ~1
        assert grid.sup_over_circle(f, 0.5) == pytest.approx(1.0, abs=1e-2)

    def test_all_blocked_circle_is_zero(self):
        theta = np.linspace(0, 2 * math.pi, 600)
        ring = np.stack([0.5 * np.cos(theta), 0.5 * np.sin(theta)], axis=1)
        m = grid.rasterize([ring], 0.05, 20)
        f = grid.solve_dirichlet(m, 0.9, 1e-4)
        assert grid.sup_over_circle(f, 0.5) == 0.0

    def test_matches_scan_oracle(self):
        p = paths.run_to_radius((0.0, 0.0), 0.8, 0.03, stream(7))
        m = grid.rasterize([p.points], 0.05, 22)
        f = grid.solve_dirichlet(m, 1.0, 1e-4)
        radius = 0.6
        n = m.extent
        cs = m.cell_size
        best = 0.0
        for i in range(-n, n + 1):
            for j in range(-n, n + 1):
                cx, cy = abs(i * cs), abs(j * cs)
                h = cs / 2
                near = math.hypot(max(cx - h, 0), max(cy - h, 0))
                far = math.hypot(cx + h, cy + h)
                if near <= radius <= far and not m.occupied[i + n, j + n]:
                    best = max(best, f.values[i + n, j + n])
        assert grid.sup_over_circle(f, radius) == pytest.approx(best)


class TestHTransformWalk:
    def _rect_field(self, w=20):
        """Uniform field on a box whose whole boundary ring absorbs."""
        side = 2 * w + 5
        n = side // 2
        vals = np.ones((side, side))
        blocked = np.zeros((side, side), dtype=bool)
        absorbing = np.ones((side, side), dtype=bool)
        absorbing[n - w:n + w + 1, n - w:n + w + 1] = False
        return grid.ScalarField(1.0, n, vals, blocked, absorbing)

    def test_uniform_field_walk_is_unconditioned(self):
        f = self._rect_field()
        # uniform field: every step is a plain 1/4 choice until absorption
        counts = np.zeros(4)
        for i in range(200):
            p = grid.h_transform_walk(f, f, (0, 0), stream(100 + i))
            d = np.diff(p.points, axis=0)
            counts[0] += np.sum((d[:, 0] > 0) & (d[:, 1] == 0))
            counts[1] += np.sum((d[:, 0] < 0) & (d[:, 1] == 0))
            counts[2] += np.sum((d[:, 1] > 0) & (d[:, 0] == 0))
            counts[3] += np.sum((d[:, 1] < 0) & (d[:, 0] == 0))
        total = counts.sum()
        chi2 = float(np.sum((counts - total / 4) ** 2 / (total / 4)))
        assert chi2 < stats.chi2.ppf(0.999, 3)

    def test_never_enters_zero_field(self):
        p = paths.run_to_radius((0.5, 0.0), 0.9, 0.03, stream(8))
        m = grid.rasterize([p.points], 0.05, 25)
        f = grid.solve_dirichlet(m, 1.0, 1e-6, omega="auto",
                                 max_sweeps=200_000)
        start = grid.start_cell_near(f, (-0.5, 0.0))
        n = f.extent
        for i in range(20):
            walk = grid.h_transform_walk(f, f, start, stream(300 + i))
            for x, y in walk.points:
                ci, cj = int(round(x / f.cell_size)), int(round(y / f.cell_size))
                assert f.values[ci + n, cj + n] > 0.0

    def test_exit_distribution_vs_rejection_oracle(self):
        # 40x40 box, absorbing bottom target, killing side/top walls
        side = 44
        n = side // 2
        w = 20
        role = np.full((side, side), 1, dtype=np.uint8)
        role[n - w:n + w, n - w:n + w] = 0
        u = np.zeros((side, side))
        u[n - w - 1, n - w:n + w] = 1.0  # bottom band (low i side)
        res, sweeps = grid.relax_roles(u, role, 1e-12, omega=1.9,
                                       max_sweeps=200_000)
        blocked = role.astype(bool) & (u == 0.0)
        absorbing = u == 1.0
        f = grid.ScalarField(1.0, n, u, blocked, absorbing)
        start = (5, 3)  # arbitrary interior cell (centered coords)
        nwalks = 100_000
        states = rng.walk_states(99, rng.TAG_WALK, 0, nwalks)
        hazard = np.zeros((side, side), dtype=bool)
        ei, ej, _ = grid._h_walk_exits(f.values, f.absorbing, hazard,
                                       start[0] + n, start[1] + n,
                                       states, 10_000_000)
        assert np.all(ei >= 0)
        cond = np.bincount(ej, minlength=side)

        # rejection oracle: plain walks, keep only bottom exits
        ones = np.ones((side, side))
        absorb_all = role.astype(bool)
        states2 = rng.walk_states(98, rng.TAG_WALK, 1, 4 * nwalks)
        ei2, ej2, _ = grid._h_walk_exits(ones, absorb_all, hazard,
                                         start[0] + n, start[1] + n,
                                         states2, 10_000_000)
        keep = ei2 == n - w - 1
        rej = np.bincount(ej2[keep], minlength=side)

        p = cond / cond.sum()
        q = rej / rej.sum()
        tv = 0.5 * np.abs(p - q).sum()
        assert tv <= 0.02, f"total variation {tv:.4f}"

    def test_malformed_domain(self):
        side = 9
        vals = np.zeros((side, side))
        blocked = np.ones((side, side), dtype=bool)
        absorbing = np.zeros((side, side), dtype=bool)
        f = grid.ScalarField(1.0, 4, vals, blocked, absorbing)
        with pytest.raises(MalformedDomainError):
            grid.start_cell_near(f, (0.0, 0.0))
        with pytest.raises(MalformedDomainError):
            grid.h_transform_walk(f, f, (0, 0), stream())


class TestStripDensity:
    def test_leading_order_value(self):
        # at x = s = pi/2, y = 3: (2/pi) e^-3 (1 + delta), |delta| <= e^-3
        v = grid.strip_exit_density(complex(math.pi / 2, 3.0), math.pi / 2)
        lead = (2 / math.pi) * math.exp(-3.0)
        assert abs(v / lead - 1.0) <= math.exp(-3.0)

    def test_reflection_symmetry(self):
        for x, y, s in ((0.7, 1.3, 2.0), (2.0, 0.5, 0.4)):
            a = grid.strip_exit_density(complex(x, y), s, terms=40)
            b = grid.strip_exit_density(complex(math.pi - x, y), math.pi - s,
                                        terms=40)
            assert a == pytest.approx(b, rel=1e-12, abs=1e-300)

    def test_truncation_bound(self):
        z = complex(1.0, 0.8)
        s = 2.0
        for terms in (8, 16, 32):
            coarse = grid.strip_exit_density(z, s, terms=terms)
            fine = grid.strip_exit_density(z, s, terms=terms * 8)
            assert abs(fine - coarse) <= grid.strip_truncation_bound(terms, 0.8)

    def test_rejects_nonpositive_height(self):
        with pytest.raises(ValueError):
            grid.strip_exit_density(complex(1.0, 0.0), 1.0)
        with pytest.raises(ValueError):
            grid.strip_exit_density(complex(1.0, -2.0), 1.0)

    def test_nonnegative_with_even_default_terms(self):
        g = np.random.default_rng(7)
        for _ in range(200):
            x = g.uniform(0.05, math.pi - 0.05)
            y = g.uniform(0.15, 5.0)
            s = g.uniform(0.05, math.pi - 0.05)
            assert grid.strip_exit_density(complex(x, y), s) >= 0.0

    def test_quadrature_matches_monte_carlo(self):
        y0 = 1.5
        prob = grid.strip_bottom_exit_probability(complex(math.pi / 2, y0))
        frac = grid.strip_unconditioned_bottom_fraction(
            y0, walks=30_000, res=48, seed=5)
        sigma = math.sqrt(prob * (1 - prob) / 30_000)
        # lattice discretization adds a small bias on top of MC noise
        assert abs(frac - prob) <= 4 * sigma + 0.01

    def test_conditioned_exits_match_series(self):
        y0 = 2.0
        walks = 30_000
        samples, start = grid.strip_exit_samples(
            y0, walks=walks, res=64, seed=6, return_start=True)
        bins = 16
        edges = np.linspace(0, math.pi, bins + 1)
        counts, _ = np.histogram(samples, bins=edges)
        p = grid.strip_bin_predictions(start, 64, edges)
        sigma = np.sqrt(p * (1 - p) / walks)
        z = (counts / walks - p) / sigma
        assert np.all(np.abs(z) <= 4.0), z


class TestExports:
    def test_field_round_trip(self, tmp_path):
        m = grid.LatticeMask(0.1, 6)
        f = grid.solve_dirichlet(m, 0.5, 1e-4)
        path = tmp_path / "f.blf"
        grid.save_field(f, path)
        g = grid.load_field(path)
        assert np.array_equal(f.values, g.values)
        assert g.extent == f.extent and g.cell_size == f.cell_size

    def test_mask_round_trip(self, tmp_path):
        occ = np.random.default_rng(2).random((13, 13)) < 0.3
        m = grid.LatticeMask(0.25, 6, occ)
        path = tmp_path / "m.blm"
        grid.save_mask(m, path)
        m2 = grid.load_mask(path)
        assert np.array_equal(m.occupied, m2.occupied)

    def test_pgm_header(self, tmp_path):
        m = grid.LatticeMask(0.1, 4)
        path = tmp_path / "m.pgm"
        grid.to_pgm(m, path)
        data = path.read_bytes()
        assert data.startswith(b"P5 9 9 255\n")
        assert len(data) == len(b"P5 9 9 255\n") + 81

"""Acceptance suite: one test per criterion, run at the stated scales.

Each test prints a PASS/FAIL line with the measured value before asserting,
so a full run doubles as the validation report.  These are long runs
(roughly an hour in total); everything is seeded and deterministic.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from brownlab import annulus, exponents, fractal, grid, operator, rng

SEED = 20_240_817


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


class TestCriterion1ClosedForms:
    def test_closed_form_suite(self):
        t0 = time.time()
        checks = [
            (exponents.xi_formula(2, 0), 2 / 3),
            (exponents.xi_formula(1, 1), 5 / 4),
            (exponents.xi_formula(2, 1), 2.0),
            (exponents.eta_formula(1), 1 / 4),
            (exponents.dimension_formulas()["frontier"], 4 / 3),
            (exponents.dimension_formulas()["pioneer"], 7 / 4),
            (exponents.dimension_formulas()["double_frontier"],
             (1 + math.sqrt(97)) / 24),
        ]
        worst = max(abs(a - b) for a, b in checks)
        elapsed = time.time() - t0
        ok = worst <= 1e-12 and elapsed < 1.0
        assert report("1 closed forms",
                      ok, f"worst |err|={worst:.2e}, {elapsed:.3f}s")


class TestCriterion2StripDensity:
    def test_series_vs_conditioned_walks(self):
        walks = 100_000
        res = 64
        bins = 32
        samples, start = grid.strip_exit_samples(3.0, walks=walks, res=res,
                                                 seed=SEED, return_start=True)
        edges = np.linspace(0.0, math.pi, bins + 1)
        counts, _ = np.histogram(samples, bins=edges)
        p = grid.strip_bin_predictions(start, res, edges)
        sigma = np.sqrt(p * (1 - p) / walks)
        z = (counts / walks - p) / sigma
        tv = 0.5 * float(np.abs(counts / walks - p).sum())
        ok = bool(np.all(np.abs(z) <= 3.0) and tv <= 0.03)
        assert report("2 strip density (walks)", ok,
                      f"max|z|={np.max(np.abs(z)):.2f}, tv={tv:.4f}")

    def test_leading_order_form(self):
        x = s = math.pi / 2
        worst = 0.0
        for y in (2.0, 3.0, 4.0):
            h = grid.strip_exit_density(complex(x, y), s)
            ratio = h * (math.pi / 2) * math.exp(y) / (math.sin(x) * math.sin(s))
            rel = abs(ratio - 1.0) / math.exp(-y)
            worst = max(worst, rel)
        ok = worst <= 3.0
        assert report("2 strip density (leading order)", ok,
                      f"worst |ratio-1|/e^-y = {worst:.3f}")


class TestCriterion3Eta1:
    def test_eta1(self):
        fit = exponents.estimate_eta(1, [2, 3, 4, 5, 6, 7], 20_000,
                                     rng_stream=SEED)
        err = abs(fit.xi_hat - 0.25)
        ok = err <= 0.05
        assert report("3 eta_1", ok,
                      f"eta1={fit.xi_hat:.4f} +- {fit.stderr:.4f}, "
                      f"|err|={err:.4f} (tol 0.05)")


class TestCriterion4Eta2:
    def test_eta2(self):
        fit = exponents.estimate_eta(2, [2, 3, 4, 5], 20_000,
                                     rng_stream=SEED + 1)
        err = abs(fit.xi_hat - 2 / 3)
        ok = err <= 0.10
        assert report("4 eta_2", ok,
                      f"eta2={fit.xi_hat:.4f} +- {fit.stderr:.4f}, "
                      f"|err|={err:.4f} (tol 0.10)")


class TestCriterion5QnFits:
    def test_xi_11(self):
        ests = exponents.estimate_qn_sweep(1, 1.0, [2, 3, 4, 5], 800,
                                           rng_stream=SEED + 2)
        fit = exponents.fit_exponent(ests)
        err = abs(fit.xi_hat - 1.25)
        ok = err <= 0.15
        assert report("5 xi(1,1) decay fit", ok,
                      f"xi={fit.xi_hat:.4f} +- {fit.stderr:.4f}, "
                      f"|err|={err:.4f} (tol 0.15)")

    def test_xi_21(self):
        ests = exponents.estimate_qn_sweep(2, 1.0, [2, 3, 4, 5], 800,
                                           rng_stream=SEED + 3)
        fit = exponents.fit_exponent(ests)
        err = abs(fit.xi_hat - 2.0)
        ok = err <= 0.20
        assert report("5 xi(2,1) decay fit", ok,
                      f"xi={fit.xi_hat:.4f} +- {fit.stderr:.4f}, "
                      f"|err|={err:.4f} (tol 0.20)")


EIGEN_PARAMS = operator.ConfigParams(resolution=32)


class TestCriterion6Eigenvalue:
    @pytest.mark.parametrize("lam,target", [
        (1.0, 2.0),
        (0.5, 1.4595),
        (0.0, 2 / 3),
    ])
    def test_eigen(self, lam, target):
        inner = 48 if lam > 0 else 0
        res = operator.power_iterate(lam, 22, 192, inner, SEED + int(10 * lam),
                                     params=EIGEN_PARAMS)
        err = abs(res.xi_hat - target)
        ok = err <= 0.15
        assert report(f"6 eigenvalue lambda={lam:g}", ok,
                      f"xi={res.xi_hat:.4f} +- {res.stderr:.4f}, "
                      f"target={target:.4f}, |err|={err:.4f} (tol 0.15)")


class TestCriterion7Dimensions:
    def test_frontier_dimension(self):
        run = fractal.frontier_dimension_run(1_000_000, 2048, SEED + 7)
        dim = -run.fit.slope
        err = abs(dim - 4 / 3)
        ok = err <= 0.15
        assert report("7 frontier dimension", ok,
                      f"dim={dim:.4f} +- {run.fit.stderr:.4f}, "
                      f"cells={run.cells}, |err|={err:.4f} (tol 0.15)")

    def test_pioneer_dimension(self):
        run = fractal.pioneer_dimension_run(1_000_000, 2048, 128, SEED + 7)
        dim = -run.fit.slope
        err = abs(dim - 7 / 4)
        ok = err <= 0.15
        assert report("7 pioneer dimension", ok,
                      f"dim={dim:.4f} +- {run.fit.stderr:.4f}, "
                      f"cells={run.cells}, checkpoints=128, "
                      f"|err|={err:.4f} (tol 0.15)")


class TestCriterion8Properties:
    def test_max_principle_on_solves(self):
        worst = 0.0
        for i in range(3):
            from brownlab import paths
            p = paths.run_to_radius((0.0, 0.0), 0.8, 0.03,
                                    rng.stream(SEED, rng.TAG_WALK, 900 + i))
            m = grid.rasterize([p.points], 0.04, 30)
            f = grid.solve_dirichlet(m, 1.0, 1e-4, omega="auto")
            assert np.all(f.values >= 0.0) and np.all(f.values <= 1.0)
            worst = max(worst, grid.dirichlet_residual(f))
        ok = worst <= 1e-4
        assert report("8a discrete maximum principle", ok,
                      f"worst residual={worst:.2e}")

    def test_subadditivity(self):
        q = {}
        se = {}
        for n in (1, 2, 3, 4):
            est = exponents.estimate_qn(2, 1.0, n, 500,
                                        rng_stream=SEED + 20 + n)
            q[n], se[n] = est.mean, est.std_error
        oks = []
        details = []
        for a, b in ((1, 1), (1, 2), (2, 2)):
            lhs = math.log(q[a + b])
            rhs = math.log(q[a]) + math.log(q[b])
            slack = 3 * (se[a] / q[a] + se[b] / q[b] + se[a + b] / q[a + b])
            oks.append(lhs <= rhs + slack)
            details.append(f"({a},{b}): {lhs:.3f} <= {rhs:.3f}+{slack:.3f}")
        ok = all(oks)
        assert report("8b subadditivity", ok, "; ".join(details))

    def test_zero_weight_iff_disconnection(self):
        cfg = operator.make_config("gamma_plus_radial", EIGEN_PARAMS)
        agree = 0
        total = 200
        for i in range(total):
            res, ext = operator.extend_config(
                cfg, 0.0, 0, rng.stream(SEED + 30, rng.TAG_ARMS, i),
                return_mask=True)
            blocked = operator.extension_blocked(ext, EIGEN_PARAMS.origin_cap)
            agree += int((res.weight(0.0) == 0.0) == blocked)
        ok = agree == total
        assert report("8c zero weight iff disconnection", ok,
                      f"{agree}/{total} agree")

    def test_semigroup_consistency(self):
        # two chained one-unit extensions against one two-unit extension
        cfg = operator.make_config("gamma_plus_radial", EIGEN_PARAMS)
        lam = 1.0
        n_samples = 120
        chain = np.zeros(n_samples)
        for s in range(n_samples):
            acc = 1.0
            c = cfg
            for t in range(2):
                r = operator.extend_config(
                    c, lam, 48, rng.stream(SEED + 31, rng.TAG_ARMS,
                                           s * 2 + t))
                w = r.weight(lam)
                if w <= 0:
                    acc = 0.0
                    break
                acc *= w
                c = r.next
            chain[s] = acc

        params = EIGEN_PARAMS
        e2 = operator.E_RADIUS ** 2
        big_extent = int(math.ceil(e2 * params.resolution)) + 2
        direct = np.zeros(n_samples)
        h = grid.solve_dirichlet(cfg.mask, 1.0, tolerance=1e-6, omega="auto")
        start = grid.start_cell_near(h, (0.0, 0.0))
        nn = cfg.mask.extent
        for s in range(n_samples):
            states = rng.walk_states(SEED + 32, rng.TAG_ARMS, s, 2)
            arm_a = operator.sample_arm(cfg.alpha.points[-1], e2,
                                        params.arm_step, states[0])
            arm_b = operator.sample_arm(cfg.beta.points[-1], e2,
                                        params.arm_step, states[1])
            side = 2 * big_extent + 1
            occ = np.zeros((side, side), dtype=bool)
            for pts in (cfg.alpha.points, cfg.beta.points, arm_a, arm_b):
                pts = np.ascontiguousarray(pts)
                grid._mark_cart_polyline(occ, pts, pts.shape[0],
                                         params.resolution, big_extent)
            ext = grid.LatticeMask(params.cell, big_extent, occ)
            v = grid.solve_dirichlet(ext, e2, tolerance=1e-9, omega="auto")
            st = rng.walk_states(SEED + 33, rng.TAG_INNER, s, 48)
            hazard = ext.occupied[big_extent - nn:big_extent + nn + 1,
                                  big_extent - nn:big_extent + nn + 1]
            ei, ej, hit = grid._h_walk_exits(
                h.values, h.absorbing, hazard,
                start[0] + nn, start[1] + nn, st, 10_000_000)
            okw = (hit == 0) & (ei >= 0)
            contrib = np.zeros(48)
            if np.any(okw):
                contrib[okw] = v.values[ei[okw] + big_extent - nn,
                                        ej[okw] + big_extent - nn]
            direct[s] = contrib.mean()

        mc, md = chain.mean(), direct.mean()
        sigma = math.sqrt(chain.var(ddof=1) / n_samples
                          + direct.var(ddof=1) / n_samples)
        ok = abs(mc - md) <= 3 * sigma
        assert report("8d semigroup two-step consistency", ok,
                      f"chained={mc:.4f}, direct={md:.4f}, sigma={sigma:.4f}")

    def test_delta_composition(self):
        cfg = operator.make_config("gamma_plus_radial", EIGEN_PARAMS)
        route_a = operator.sample_delta_summaries(cfg, 3, 2, 64, 1.0,
                                                  SEED + 34,
                                                  inner_samples=24, tag=1)
        mid = operator.final_configs_of_delta(cfg, 3, 1, 64, 1.0, SEED + 35,
                                              inner_samples=24, tag=2)
        parts = [operator.sample_delta_summaries(
            c, 2, 1, 5, 1.0, SEED + 36, inner_samples=24, tag=10 + j)
            for j, c in enumerate(mid[::5][:13])]
        route_b = np.concatenate(parts)
        stat, p = stats.ks_2samp(route_a, route_b)
        ok = p >= 0.01
        assert report("8e weighted-marginal composition", ok,
                      f"KS stat={stat:.3f}, p={p:.3f}")

    def test_mirror_marginal(self):
        n = 24_000
        from brownlab import paths
        g1 = rng.stream(SEED + 37, rng.TAG_WALK, 0)
        exits1, _ = paths.run_batch_to_radius(
            np.tile([[1.0, 0.0]], (n, 1)), math.e, 1 / 16, g1)
        ang1 = np.arctan2(exits1[:, 1], exits1[:, 0])
        sample = []
        for i in range(2500):
            res = operator.mirror_couple((1.0, 0.0), (-1.0, 0.0), math.e,
                                         rng.stream(SEED + 38, 0, i),
                                         step_size=1 / 16)
            x, y = res.path_a.points[-1]
            sample.append(math.atan2(y, x))
        c1, edges = np.histogram(ang1, bins=18, range=(-math.pi, math.pi))
        c2, _ = np.histogram(sample, bins=edges)
        k1 = math.sqrt(c2.sum() / c1.sum())
        k2 = 1 / k1
        chi2 = float(np.sum((k1 * c1 - k2 * c2) ** 2 /
                            np.maximum(c1 + c2, 1)))
        dof = int(np.count_nonzero(c1 + c2)) - 1
        crit = stats.chi2.ppf(0.99, dof)
        ok = chi2 < crit
        assert report("8f mirror-coupling marginal", ok,
                      f"chi2={chi2:.1f} < {crit:.1f} (dof {dof})")

    def test_coupling_decay_trend(self):
        a = operator.make_config("gamma_plus_radial", EIGEN_PARAMS)
        b = operator.make_config("sampled", EIGEN_PARAMS,
                                 rng_stream=rng.stream(SEED + 39, 0, 0))
        particles = 128
        ns = [3, 6, 9, 12]
        mismatch = []
        for n in ns:
            rep = operator.weighted_coupling_experiment(
                a, b, n, 1.0, particles, SEED + 40, inner_samples=24)
            mismatch.append(max(1.0 - rep.match_fraction_Xm,
                                0.5 / particles))
        slope, _, stderr = exponents.ols_line(
            [float(n) for n in ns], [math.log(m) for m in mismatch])
        trend_ok = all(b2 <= a2 + 0.1 for a2, b2 in zip(mismatch,
                                                        mismatch[1:]))
        ok = slope + 2 * stderr < 0 and trend_ok
        assert report("8g coupling mismatch decay", ok,
                      f"mismatch={[f'{m:.3f}' for m in mismatch]}, "
                      f"log-slope={slope:.3f} +- {stderr:.3f}")

    def test_determinism(self, tmp_path):
        from brownlab import cli
        args = ["estimate", "xi", "--k", "1", "--lambda", "1", "--scales",
                "1..3", "--samples", "25", "--seed", "11", "--theta-cells",
                "64"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        same_csv = (tmp_path / "a.csv").read_bytes() == \
            (tmp_path / "b.csv").read_bytes()
        r1 = operator.power_iterate(0.0, 6, 100, 0, 123, params=EIGEN_PARAMS)
        r2 = operator.power_iterate(0.0, 6, 100, 0, 123, params=EIGEN_PARAMS)
        same_trace = r1.per_step_log_means == r2.per_step_log_means
        ok = same_csv and same_trace
        assert report("8h determinism under seed reuse", ok,
                      f"csv={same_csv}, trace={same_trace}")

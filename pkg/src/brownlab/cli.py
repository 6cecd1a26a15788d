"""Command-line entry point for reproducible estimator runs.

Every estimate writes a CSV (raw numbers), a JSON (fit summary), and a PNG
(figure) under a common prefix, prints a one-line summary with the z-score
against the closed-form target, and is byte-deterministic given the seed.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import annulus, exponents, fractal, operator, report
from .errors import BrownlabError

DEFAULT_SEED = 20_240_817


def _parse_scales(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok]


def _out_prefix(args, name):
    base = args.out
    if base is None:
        outdir = os.environ.get("BROWNLAB_OUT", "runs")
        os.makedirs(outdir, exist_ok=True)
        return os.path.join(outdir, name)
    d = os.path.dirname(base)
    if d:
        os.makedirs(d, exist_ok=True)
    return base


def _summary(name, value, stderr, target):
    z = (value - target) / stderr if stderr > 0 else float("inf")
    line = (f"{name}={value:.6f} stderr={stderr:.6f} "
            f"target={target:.6f} z={z:+.2f}")
    print(line)
    return z


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# formula

def _positive_float(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _nonnegative_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return v


def cmd_formula(args):
    if args.k is not None:
        lam = args.lam if args.lam is not None else 0.0
        print(f"xi({args.k:g},{lam:g}) = {exponents.xi_formula(args.k, lam):.12f}")
    print("k   eta_k")
    for k in range(1, 7):
        print(f"{k}   {exponents.eta_formula(k):.12f}")
    if args.dims or args.k is None:
        dims = exponents.dimension_formulas()
        print(f"frontier dimension        {dims['frontier']:.12f}")
        print(f"pioneer dimension         {dims['pioneer']:.12f}")
        print(f"double-point frontier dim {dims['double_frontier']:.12f}")
    return 0


# ---------------------------------------------------------------------------
# estimate subcommands

def _annulus_params(args):
    kw = {}
    if getattr(args, "theta_cells", None):
        kw["theta_cells"] = args.theta_cells
    return annulus.AnnulusParams(**kw) if kw else None


def cmd_estimate_xi(args):
    scales = _parse_scales(args.scales)
    prefix = _out_prefix(args, f"xi_k{args.k}_l{args.lam:g}")
    ests = exponents.estimate_qn_sweep(
        args.k, args.lam, scales, args.samples,
        grid_params=_annulus_params(args), rng_stream=args.seed)
    fit = exponents.fit_exponent(ests)
    target = exponents.xi_formula(args.k, args.lam)
    exponents.write_qn_csv(ests, prefix + ".csv")
    payload = exponents.fit_to_json(fit)
    payload["target"] = target
    _write_json(prefix + ".json", payload)
    report.save_decay_fit(fit, target, prefix + ".png",
                          f"avoidance decay: k={args.k}, lambda={args.lam:g}")
    _summary("xi_hat", fit.xi_hat, fit.stderr, target)
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def cmd_estimate_eta(args):
    scales = _parse_scales(args.scales)
    prefix = _out_prefix(args, f"eta_k{args.k}")
    fit = exponents.estimate_eta(args.k, scales, args.samples,
                                 grid_params=_annulus_params(args),
                                 rng_stream=args.seed)
    target = exponents.eta_formula(args.k)
    exponents.write_qn_csv(fit.estimates, prefix + ".csv")
    payload = exponents.fit_to_json(fit)
    payload["target"] = target
    _write_json(prefix + ".json", payload)
    report.save_decay_fit(fit, target, prefix + ".png",
                          f"non-disconnection decay: k={args.k}")
    _summary("eta_hat", fit.xi_hat, fit.stderr, target)
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def cmd_estimate_eigen(args):
    prefix = _out_prefix(args, f"eigen_l{args.lam:g}")
    params = operator.ConfigParams(resolution=args.resolution)
    result = operator.power_iterate(args.lam, args.steps, args.particles,
                                    args.inner_samples, args.seed,
                                    params=params)
    target = exponents.xi_formula(2, args.lam)
    operator.write_trace_csv(result, prefix + ".csv")
    _write_json(prefix + ".json", {
        "xi_hat": result.xi_hat,
        "stderr": result.stderr,
        "lambda": args.lam,
        "target": target,
        "particles": args.particles,
        "steps": args.steps,
    })
    report.save_power_trace(result, target, prefix + ".png",
                            f"eigenvalue iteration: lambda={args.lam:g}")
    _summary("xi_hat", result.xi_hat, result.stderr, target)
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def _dimension_common(args, run, target, prefix, title):
    fractal.write_boxcount_csv(run.table, prefix + ".csv")
    fractal.write_dimension_json(run.fit, prefix + ".json",
                                 window=run.fit.scales)
    report.save_boxcount(run.table, run.fit, target, prefix + ".png", title)
    _summary("dimension", -run.fit.slope, run.fit.stderr, target)
    print(f"pioneer/frontier cells: {run.cells}")
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def cmd_estimate_frontier(args):
    prefix = _out_prefix(args, "frontier_dim")
    run = fractal.frontier_dimension_run(args.steps, args.grid, args.seed)
    target = exponents.dimension_formulas()["frontier"]
    return _dimension_common(args, run, target, prefix, "frontier box counts")


def cmd_estimate_pioneer(args):
    prefix = _out_prefix(args, "pioneer_dim")
    run = fractal.pioneer_dimension_run(args.steps, args.grid,
                                        args.checkpoints, args.seed)
    target = exponents.dimension_formulas()["pioneer"]
    print(f"checkpoint density: {args.checkpoints} over {args.steps} steps")
    return _dimension_common(args, run, target, prefix, "pioneer box counts")


def cmd_estimate_strip(args):
    from . import grid as _grid

    prefix = _out_prefix(args, f"strip_y{args.y:g}")
    x0 = args.x if args.x is not None else math.pi / 2
    samples, (sx, sy) = _grid.strip_exit_samples(
        args.y, x0, walks=args.walks, res=args.resolution, seed=args.seed,
        return_start=True)
    edges = np.linspace(0.0, math.pi, args.bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts, _ = np.histogram(samples, bins=edges)
    total = counts.sum()
    width = edges[1] - edges[0]
    mc_density = counts / (total * width)
    p_bin = _grid.strip_bin_predictions((sx, sy), args.resolution, edges)
    series_density = p_bin / width
    sigma = np.sqrt(np.maximum(p_bin * (1 - p_bin), 1e-300) / total)
    zscores = (counts / total - p_bin) / sigma
    tv = 0.5 * float(np.sum(np.abs(counts / total - p_bin)))
    norm = _grid.strip_bottom_exit_probability(complex(sx, sy))
    with open(prefix + ".csv", "w") as fh:
        fh.write("bin_center,mc_density,series_density,z\n")
        for c, m, s, z in zip(centers, mc_density, series_density, zscores):
            fh.write(f"{c:.12g},{m:.12g},{s:.12g},{z:.12g}\n")
    _write_json(prefix + ".json", {
        "bins": args.bins,
        "walks": args.walks,
        "tv_distance": tv,
        "max_abs_z": float(np.max(np.abs(zscores))),
        "bottom_exit_probability": norm,
    })
    report.save_density_comparison(centers, mc_density, series_density,
                                   prefix + ".png")
    print(f"tv_distance={tv:.6f} max|z|={float(np.max(np.abs(zscores))):.2f} "
          f"bins={args.bins} walks={args.walks}")
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def cmd_estimate_separation(args):
    prefix = _out_prefix(args, f"separation_l{args.lam:g}")
    params = operator.ConfigParams(resolution=args.resolution)
    configs = [operator.make_config("gamma_plus_radial", params)]
    labels = ["radial seed"]
    for i in range(args.configs - 1):
        from . import rng as _rng
        configs.append(operator.make_config(
            "sampled", params, rng_stream=_rng.stream(args.seed,
                                                      _rng.TAG_INIT, 7000 + i)))
        labels.append(f"sampled {i}")
    ratios = []
    for i, cfg in enumerate(configs):
        ratios.append(operator.separation_ratio(
            args.lam, args.samples, [cfg], args.seed + i,
            inner_samples=args.inner_samples))
    with open(prefix + ".csv", "w") as fh:
        fh.write("config,ratio\n")
        for lab, r in zip(labels, ratios):
            fh.write(f"{lab},{r:.12g}\n")
    _write_json(prefix + ".json", {
        "min_ratio": min(ratios),
        "lambda": args.lam,
        "samples": args.samples,
    })
    report.save_ratio_bars(labels, ratios, prefix + ".png")
    print(f"min_ratio={min(ratios):.6f} over {len(configs)} configurations")
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


def cmd_estimate_couple(args):
    prefix = _out_prefix(args, "couple")
    params = operator.ConfigParams(resolution=args.resolution)
    from . import rng as _rng
    a = operator.make_config("gamma_plus_radial", params)
    b = operator.make_config("sampled", params,
                             rng_stream=_rng.stream(args.seed, _rng.TAG_INIT,
                                                    8000))
    ns = _parse_scales(args.ns)
    rows = []
    for n in ns:
        rep = operator.weighted_coupling_experiment(
            a, b, n, args.lam, args.particles, args.seed,
            inner_samples=args.inner_samples)
        rows.append((n, rep.match_fraction_Xm,
                     rep.summary_discrepancies["boundary_overlap"]))
        print(f"n={n}: match={rep.match_fraction_Xm:.3f} "
              f"overlap={rep.summary_discrepancies['boundary_overlap']:.3f}")
    with open(prefix + ".csv", "w") as fh:
        fh.write("n,match_fraction,boundary_overlap\n")
        for n, m, o in rows:
            fh.write(f"{n},{m:.12g},{o:.12g}\n")
    mismatch = [max(1.0 - m, 0.5 / args.particles) for _, m, _ in rows]
    slope, _, sl_err = exponents.ols_line([float(n) for n, _, _ in rows],
                                          list(np.log(mismatch)))
    _write_json(prefix + ".json", {
        "ns": ns,
        "mismatch": mismatch,
        "log_mismatch_slope": slope,
        "slope_stderr": sl_err,
    })
    report.save_coupling_decay([n for n, _, _ in rows], mismatch,
                               prefix + ".png")
    print(f"log-mismatch slope {slope:+.4f} +- {sl_err:.4f}")
    print(f"wrote {prefix}.csv {prefix}.json {prefix}.png")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_common(sp):
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED,
                    help="master seed (fixed default for reproducibility)")
    sp.add_argument("--out", type=str, default=None,
                    help="output path prefix (default: $BROWNLAB_OUT/<name>)")
    sp.add_argument("--config", type=str, default=None,
                    help="JSON file of flag defaults; flags override it")


def build_parser():
    p = argparse.ArgumentParser(
        prog="brownlab",
        description="Monte Carlo laboratory for planar Brownian intersection "
                    "and disconnection exponents.",
    )
    p._brownlab_leaves = []
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("formula", help="closed-form exponents and dimensions")
    f.add_argument("--k", type=_positive_float, default=None)
    f.add_argument("--lambda", dest="lam", type=_nonnegative_float,
                   default=None)
    f.add_argument("--dims", action="store_true")
    f.set_defaults(func=cmd_formula)

    est = sub.add_parser("estimate", help="Monte Carlo estimators")
    esub = est.add_subparsers(dest="estimator", required=True)

    xi = esub.add_parser("xi", help="intersection exponent via decay fit")
    xi.add_argument("--k", type=int, default=1, choices=(1, 2, 3))
    xi.add_argument("--lambda", dest="lam", type=float, default=1.0)
    xi.add_argument("--scales", type=str, default="2..5")
    xi.add_argument("--samples", type=int, default=400)
    xi.add_argument("--theta-cells", type=int, default=None)
    _add_common(xi)
    xi.set_defaults(func=cmd_estimate_xi)

    eta = esub.add_parser("eta", help="disconnection exponent via decay fit")
    eta.add_argument("--k", type=int, default=1)
    eta.add_argument("--scales", type=str, default="2..7")
    eta.add_argument("--samples", type=int, default=20000)
    eta.add_argument("--theta-cells", type=int, default=None)
    _add_common(eta)
    eta.set_defaults(func=cmd_estimate_eta)

    eig = esub.add_parser("eigen", help="leading eigenvalue by reweighted "
                                        "particle iteration")
    eig.add_argument("--lambda", dest="lam", type=float, default=1.0)
    eig.add_argument("--particles", type=int, default=192)
    eig.add_argument("--steps", type=int, default=22)
    eig.add_argument("--inner-samples", type=int, default=48)
    eig.add_argument("--resolution", type=int, default=32)
    _add_common(eig)
    eig.set_defaults(func=cmd_estimate_eigen)

    fr = esub.add_parser("frontier-dim", help="frontier box-counting dimension")
    fr.add_argument("--steps", type=int, default=1_000_000)
    fr.add_argument("--grid", type=int, default=2048)
    _add_common(fr)
    fr.set_defaults(func=cmd_estimate_frontier)

    pi = esub.add_parser("pioneer-dim", help="pioneer box-counting dimension")
    pi.add_argument("--steps", type=int, default=1_000_000)
    pi.add_argument("--grid", type=int, default=2048)
    pi.add_argument("--checkpoints", type=int, default=128)
    _add_common(pi)
    pi.set_defaults(func=cmd_estimate_pioneer)

    st = esub.add_parser("strip-density", help="half-strip exit density "
                                               "series vs conditioned walks")
    st.add_argument("--y", type=float, default=3.0)
    st.add_argument("--x", type=float, default=None)
    st.add_argument("--bins", type=int, default=32)
    st.add_argument("--walks", type=int, default=100_000)
    st.add_argument("--resolution", type=int, default=64)
    _add_common(st)
    st.set_defaults(func=cmd_estimate_strip)

    se = esub.add_parser("separation", help="weighted fraction of extensions "
                                            "landing well-separated")
    se.add_argument("--lambda", dest="lam", type=float, default=1.0)
    se.add_argument("--samples", type=int, default=200)
    se.add_argument("--configs", type=int, default=5)
    se.add_argument("--inner-samples", type=int, default=48)
    se.add_argument("--resolution", type=int, default=32)
    _add_common(se)
    se.set_defaults(func=cmd_estimate_separation)

    co = esub.add_parser("couple", help="coupled reweighted ensembles and "
                                        "matched-class fractions")
    co.add_argument("--lambda", dest="lam", type=float, default=1.0)
    co.add_argument("--ns", type=str, default="3,6,9,12")
    co.add_argument("--particles", type=int, default=128)
    co.add_argument("--inner-samples", type=int, default=32)
    co.add_argument("--resolution", type=int, default=32)
    _add_common(co)
    co.set_defaults(func=cmd_estimate_couple)

    p._brownlab_leaves = [f, xi, eta, eig, fr, pi, st, se, co]
    return p


def _apply_config_file(parser, argv):
    """Seed parser defaults from --config JSON; explicit flags override.

    Defaults are installed on every subparser (a subparser's own defaults
    would otherwise clobber values set on the main parser).
    """
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return
    with open(argv[idx + 1]) as fh:
        values = json.load(fh)
    renames = {"lambda": "lam"}
    clean = {renames.get(k, k).replace("-", "_"): v for k, v in values.items()}
    parser.set_defaults(**clean)
    for leaf in parser._brownlab_leaves:
        leaf.set_defaults(**clean)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"bad config file: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrownlabError as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

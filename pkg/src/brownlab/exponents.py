"""Closed-form exponents and their Monte Carlo estimators.

The closed forms are the validation targets; the estimators measure decay
rates of avoidance and non-disconnection probabilities across annuli of
log-width one and extrapolate by least squares on log means.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import annulus, rng as _rng
from .errors import EstimateError


def xi_formula(k, lam):
    """Intersection exponent between a bundle of k walks and one walk with
    weight lambda: ((sqrt(24k+1) + sqrt(24*lam+1) - 2)^2 - 4) / 48."""
    if k <= 0:
        raise ValueError("k must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    a = math.sqrt(24.0 * k + 1.0)
    b = math.sqrt(24.0 * lam + 1.0)
    return ((a + b - 2.0) ** 2 - 4.0) / 48.0


def eta_formula(k):
    """Disconnection exponent for k walks: ((sqrt(24k+1) - 1)^2 - 4) / 48,
    evaluated as the zero-weight intersection exponent so the two formulas
    agree to the last bit."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return xi_formula(k, 0.0)


def dimension_formulas():
    """Fractal dimensions implied by the disconnection exponents."""
    return {
        "frontier": 2.0 - eta_formula(2),
        "pioneer": 2.0 - eta_formula(1),
        "double_frontier": 2.0 - eta_formula(4),
    }


@dataclass
class QnEstimate:
    """Mean of the avoidance supremum to the lambda at one scale."""

    n: int
    lam: float
    mean: float
    std_error: float
    samples: int
    swallowed: int
    k: int

    def __post_init__(self):
        if not 0.0 <= self.mean <= 1.0:
            raise ValueError("mean must lie in [0, 1]")
        if self.std_error < 0.0:
            raise ValueError("std_error must be >= 0")


@dataclass
class ExponentFit:
    """Ordinary least squares on (scale, log mean) with delta-method errors."""

    scales: list
    log_means: list
    slope: float
    intercept: float
    stderr: float
    samples_per_scale: int
    per_scale_stderr: list = field(default_factory=list)
    estimates: list = field(default_factory=list, repr=False)

    @property
    def xi_hat(self):
        return -self.slope


def ols_line(x, y):
    """Slope, intercept, and residual-based slope standard error."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    xbar = x.mean()
    ybar = y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    if sxx == 0.0:
        raise EstimateError("degenerate abscissas in fit")
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = ybar - slope * xbar
    if n > 2:
        resid = y - (intercept + slope * x)
        s2 = float(np.sum(resid ** 2) / (n - 2))
        stderr = math.sqrt(s2 / sxx)
    else:
        stderr = 0.0
    return slope, intercept, stderr


def fit_exponent(estimates):
    """Least-squares decay fit over scales; the estimated exponent is the
    negated slope, with its standard error propagated from the per-scale
    errors by the delta method.

    Requires at least 3 scales and strictly positive means (a zero mean is
    reported with its scale).
    """
    ests = sorted(estimates, key=lambda e: e.n)
    if len(ests) < 3:
        raise EstimateError("need at least 3 scales to fit")
    zero = [e.n for e in ests if e.mean <= 0.0]
    if zero:
        raise EstimateError(f"zero mean at scale(s) {zero}; cannot take logs")
    x = np.array([e.n for e in ests], dtype=np.float64)
    y = np.log([e.mean for e in ests])
    slope, intercept, _ = ols_line(x, y)
    # delta method: Var(log mean) = (stderr/mean)^2, propagated through the
    # OLS weights.
    xbar = x.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    w = (x - xbar) / sxx
    per_scale = [e.std_error / e.mean for e in ests]
    var = float(np.sum((w * per_scale) ** 2))
    return ExponentFit(
        scales=[int(e.n) for e in ests],
        log_means=[float(v) for v in y],
        slope=slope,
        intercept=float(intercept),
        stderr=math.sqrt(var),
        samples_per_scale=min(e.samples for e in ests),
        per_scale_stderr=per_scale,
        estimates=list(ests),
    )


def estimate_qn(k, lam, n, samples, grid_params=None, rng_stream=0):
    """Monte Carlo mean of the avoidance supremum to the lambda at scale n.

    k walks (fixed, maximally separated unit-circle starts) run to radius
    e^n; the supremum over free unit-circle cells of the probability of
    reaching radius e^n without touching the sausage is raised to `lam` and
    averaged.  Samples whose unit circle is fully blocked count as swallowed
    and contribute 0.
    """
    seed = _rng.seed_from(rng_stream)
    values, swallowed = annulus.qn_sample_values(
        k, lam, n, samples, seed, params=grid_params, tag=n,
    )
    mean = float(values.mean())
    std_error = float(values.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return QnEstimate(n=n, lam=lam, mean=mean, std_error=std_error,
                      samples=samples, swallowed=swallowed, k=k)


def estimate_qn_sweep(k, lam, scales, samples, grid_params=None, rng_stream=0):
    """estimate_qn over several scales with per-scale derived streams."""
    seed = _rng.seed_from(rng_stream)
    return [
        estimate_qn(k, lam, n, samples, grid_params=grid_params,
                    rng_stream=_rng.stream(seed, _rng.TAG_INIT, 1000 + n))
        for n in scales
    ]


def estimate_eta(k, rho_scales, samples, grid_params=None, rng_stream=0):
    """Decay fit of the non-disconnection probability for k walks.

    For each scale rho, k walks run from the origin to radius e^rho and the
    point at unit distance is tested for separation from infinity by flood
    fill; swallowed probes count as disconnected.  Returns the least-squares
    fit of log P(not disconnected) against rho (the exponent estimate is
    -slope).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seed = _rng.seed_from(rng_stream)
    ests = []
    for rho in rho_scales:
        n_open, _, _ = annulus.disconnection_sample_counts(
            k, float(rho), samples, _rng.stream(seed, _rng.TAG_INIT, 2000 + rho),
            params=grid_params, from_origin=True, tag=rho,
        )
        p = n_open / samples
        se = math.sqrt(max(p * (1.0 - p), 1e-300) / samples)
        ests.append(QnEstimate(n=rho, lam=0.0, mean=p, std_error=se,
                               samples=samples, swallowed=0, k=k))
    return fit_exponent(ests)


@dataclass
class OneArmReport:
    """Submultiplicativity diagnostics for single-walk non-disconnection."""

    rho_scales: list
    probabilities: list
    std_errors: list
    fit: ExponentFit
    decreasing: bool
    submultiplicative_pairs: list  # (rho1, rho2, ok, slack)


def one_arm_annulus_bound_check(rho_scales, samples, rng_stream=0,
                                grid_params=None):
    """Empirical check that crossing-without-disconnection probabilities are
    decreasing and submultiplicative within noise, plus their decay fit."""
    seed = _rng.seed_from(rng_stream)
    rhos = sorted(set(int(r) for r in rho_scales))
    pairs = [(1, 1), (1, 2), (2, 2)]
    needed = sorted(set(rhos) | {a for a, _ in pairs} | {b for _, b in pairs}
                    | {a + b for a, b in pairs})
    p = {}
    se = {}
    for rho in needed:
        n_open, _, _ = annulus.disconnection_sample_counts(
            1, float(rho), samples, _rng.stream(seed, _rng.TAG_INIT, 3000 + rho),
            params=grid_params, from_origin=False, tag=rho,
        )
        p[rho] = n_open / samples
        se[rho] = math.sqrt(max(p[rho] * (1.0 - p[rho]), 1e-300) / samples)
    ests = [QnEstimate(n=r, lam=0.0, mean=p[r], std_error=se[r],
                       samples=samples, swallowed=0, k=1) for r in rhos]
    fit = fit_exponent(ests)
    seq = [p[r] for r in rhos]
    decreasing = all(seq[i + 1] <= seq[i] + 3.0 * (se[rhos[i]] + se[rhos[i + 1]])
                     for i in range(len(seq) - 1))
    sub = []
    for a, b in pairs:
        lhs = p[a + b]
        rhs = p[a] * p[b]
        rel = (se[a] / max(p[a], 1e-12) + se[b] / max(p[b], 1e-12)
               + se[a + b] / max(p[a + b], 1e-12))
        ok = lhs <= rhs * (1.0 + 3.0 * rel)
        sub.append((a, b, bool(ok), float(rhs * (1.0 + 3.0 * rel) - lhs)))
    return OneArmReport(
        rho_scales=rhos,
        probabilities=seq,
        std_errors=[se[r] for r in rhos],
        fit=fit,
        decreasing=decreasing,
        submultiplicative_pairs=sub,
    )


# ---------------------------------------------------------------------------
# Run artifacts

def write_qn_csv(estimates, path):
    """CSV schema: n,lambda,k,mean,std_error,samples,swallowed."""
    with open(path, "w") as fh:
        fh.write("n,lambda,k,mean,std_error,samples,swallowed\n")
        for e in estimates:
            fh.write(f"{e.n},{e.lam:.12g},{e.k},{e.mean:.12g},"
                     f"{e.std_error:.12g},{e.samples},{e.swallowed}\n")


def fit_to_json(fit):
    return {
        "slope": fit.slope,
        "intercept": fit.intercept,
        "stderr": fit.stderr,
        "xi_hat": fit.xi_hat,
        "scales": fit.scales,
    }


def write_fit_json(fit, path):
    with open(path, "w") as fh:
        json.dump(fit_to_json(fit), fh, indent=2, sort_keys=True)
        fh.write("\n")

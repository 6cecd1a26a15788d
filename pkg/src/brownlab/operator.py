"""Configuration space and the one-annulus extension operator.

A configuration is a pair of paths from the origin to the unit circle inside
the closed disk, together with its access domain: the unique free component
of the punctured disk whose boundary reaches both the origin and the circle.
One extension step attaches Brownian arms to the path endpoints out to radius
e, weighs the result by the avoidance probability of a conditioned witness
walk, and rescales by 1/e back onto the unit frame.  Iterating this map with
reweighting drives all the eigenvalue and coupling experiments here.

The witness weight Z is estimated without an outer Monte Carlo layer: the
conditioned walk is sampled only up to the unit circle, and the remaining
unconditioned leg is integrated exactly by a Dirichlet solve on the extended
sausage (same mean, far less variance).
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from . import grid as _grid
from . import paths as _paths
from . import rng as _rng
from .errors import (
    EnsembleExtinctError,
    EstimateError,
    MalformedDomainError,
    NotInGammaError,
    StepBudgetExceeded,
)
from .grid import _FOUR_CONN, _xs_step

E_RADIUS = math.e


@dataclass(frozen=True)
class ConfigParams:
    """Working frame for configurations: a centered square grid covering
    radius e at `resolution` cells per unit length.

    arm_step_cells sets the walk skeleton spacing in cells.  Skeleton
    coarseness and sausage thickness bias the witness weight in opposite
    directions; one cell per step is where the eigenvalue estimates sit on
    the closed forms.

    origin_cap is the radius (in cells) of the unresolved ball at the
    origin: access corridors pinch below one cell near their endpoint on the
    way to the origin, so the access domain, the conditioned-walk start, and
    the survival verdict all treat that ball as open.  The survival test in
    the pre-rescale frame uses the equivalent physical radius (origin_cap
    times e).
    """

    resolution: int = 32
    arm_step_cells: float = 1.0
    origin_cap: float = 1.5
    h_tol: float = 1e-6
    v_tol: float = 1e-9
    solver_omega: object = "auto"

    @property
    def cell(self):
        return 1.0 / self.resolution

    @property
    def extent(self):
        return int(math.ceil(E_RADIUS * self.resolution)) + 2

    @property
    def arm_step(self):
        return self.arm_step_cells / self.resolution


# ---------------------------------------------------------------------------
# Sampling kernels

@njit(cache=True)
def _arm_walk(out, x0, y0, stop_radius, sigma, s0, s1):
    """Gaussian walk from (x0, y0) to the stopping circle, written into
    `out`.  Returns the number of points used, or 0 on overflow."""
    cap = out.shape[0]
    x = x0
    y = y0
    out[0, 0] = x
    out[0, 1] = y
    m = 1
    r2stop = stop_radius * stop_radius
    while m < cap:
        s0, s1, u1 = _xs_step(s0, s1)
        s0, s1, u2 = _xs_step(s0, s1)
        rad = sigma * math.sqrt(-2.0 * math.log(1.0 - u1))
        ang = 2.0 * math.pi * u2
        x += rad * math.cos(ang)
        y += rad * math.sin(ang)
        out[m, 0] = x
        out[m, 1] = y
        m += 1
        if x * x + y * y >= r2stop:
            return m
    return 0


@njit(cache=True)
def _decimate_mask(pts, min_spacing, keep):
    n = pts.shape[0]
    keep[0] = True
    ax = pts[0, 0]
    ay = pts[0, 1]
    for i in range(1, n):
        dx = pts[i, 0] - ax
        dy = pts[i, 1] - ay
        if dx * dx + dy * dy >= min_spacing * min_spacing:
            keep[i] = True
            ax = pts[i, 0]
            ay = pts[i, 1]
        else:
            keep[i] = False
    keep[n - 1] = True


def sample_arm(start, stop_radius, sigma, state):
    """Brownian arm from `start` to the stopping circle as a point array."""
    x0, y0 = _paths.as_xy(start)
    expected = max((stop_radius ** 2 - (x0 * x0 + y0 * y0)), 1.0) / (2.0 * sigma * sigma)
    cap = int(4 * expected) + 4096
    for _ in range(8):
        out = np.empty((cap, 2), dtype=np.float64)
        m = _arm_walk(out, x0, y0, stop_radius, sigma, state[0], state[1])
        if m > 0:
            return out[:m].copy()
        cap *= 4
    raise StepBudgetExceeded("arm walk overflowed its buffer repeatedly")


def _decimate(pts, min_spacing):
    keep = np.empty(pts.shape[0], dtype=np.bool_)
    _decimate_mask(pts, min_spacing, keep)
    return pts[keep]


# ---------------------------------------------------------------------------
# Configurations

class Config:
    """A path pair with its identified access domain on the working grid."""

    __slots__ = ("alpha", "beta", "mask", "o_mask", "ring_cells",
                 "boundary_angle", "params", "_labels")

    def __init__(self, alpha, beta, mask, o_mask, ring_cells, boundary_angle,
                 params):
        self.alpha = alpha
        self.beta = beta
        self.mask = mask
        self.o_mask = o_mask
        self.ring_cells = ring_cells
        self.boundary_angle = boundary_angle
        self.params = params
        self._labels = None

    @property
    def labels(self):
        """Full flood-fill labels of the working mask (computed lazily)."""
        if self._labels is None:
            self._labels = _grid.flood_outside(self.mask)
        return self._labels


def _path_to_unit_circle(points, step_size, cell):
    """Validate the path-pair member contract and wrap as a PlanarPath."""
    path = points if isinstance(points, _paths.PlanarPath) else \
        _paths.PlanarPath(points, step_size)
    pts = path.points
    norms = np.hypot(pts[:, 0], pts[:, 1])
    if norms[0] > 0.75 * cell:
        raise NotInGammaError("path must start at the origin cell")
    if not (1.0 <= norms[-1] <= 1.0 + 8.0 * path.step_size + cell):
        raise NotInGammaError("path must end just past the unit circle")
    if norms[:-1].max(initial=0.0) >= 1.0 + 8.0 * path.step_size + cell:
        raise NotInGammaError("path leaves the closed unit disk")
    return path


def _gamma_analysis(mask, params):
    """Identify the access domain of a rasterized pair.

    Returns (o_mask, ring_cells, boundary_angle).  Raises NotInGammaError
    when no free component of the disk touches both the origin cell and the
    unit circle (the pair disconnects its own base point).

    Two lattice artifacts are absorbed here.  Continuum pairs have a unique
    access component almost surely (independent paths cross densely near
    their common start), but rasterized, rescaled pairs lose that fine
    structure, so several corridors may survive; the one approaching the
    origin closest (then largest) stands in for the continuum domain.  And
    a corridor pinched below one cell near the origin seals the origin cell
    itself even though the continuum domain still has the origin on its
    boundary, so access is accepted from within params.origin_cap cells
    (where the conditioned walk starts anyway).
    """
    res = params.resolution
    n = mask.extent
    cs = mask.cell_size
    half = res + 3
    lo, hi = n - half, n + half + 1
    occ = mask.occupied[lo:hi, lo:hi]
    ax = (np.arange(lo, hi) - n) * cs
    norms = np.hypot(ax[:, None], ax[None, :])
    disk_free = (~occ) & (norms <= 1.0 + 1.5 * cs)
    lab, nlab = ndimage.label(disk_free, structure=_FOUR_CONN)
    if nlab == 0:
        raise NotInGammaError("no free cells in the disk; not in Gamma")
    c = half  # origin cell index in the cropped frame
    access_ids = set(np.unique(lab[(norms >= 1.0) & (lab > 0)]).tolist())
    if not access_ids:
        raise NotInGammaError("no component reaches the circle; not in Gamma")
    cell_dist = np.hypot(ax[:, None] / cs, ax[None, :] / cs)
    best = None  # (distance to origin, -area, id)
    for q in access_ids:
        sel = lab == q
        d = float(cell_dist[sel].min())
        if d > params.origin_cap:
            continue
        entry = (d, -int(np.sum(sel)), q)
        if best is None or entry < best:
            best = entry
    if best is None:
        raise NotInGammaError(
            "no access component near the origin; not in Gamma")
    oid = best[2]
    o_small = lab == oid
    o_mask = np.zeros_like(mask.occupied)
    o_mask[lo:hi, lo:hi] = o_small
    ring_sel = o_small & (norms >= 1.0 - 0.5 * cs)
    ring_idx = np.nonzero(ring_sel)
    gx = ax[ring_idx[0]]
    gy = ax[ring_idx[1]]
    if gx.size:
        mean_vec = complex(np.cos(np.arctan2(gy, gx)).sum(),
                           np.sin(np.arctan2(gy, gx)).sum())
        boundary_angle = math.atan2(mean_vec.imag, mean_vec.real)
    else:
        boundary_angle = 0.0
    flat = (ring_idx[0] + lo) * (2 * n + 1) + (ring_idx[1] + lo)
    return o_mask, np.sort(flat.astype(np.int64)), boundary_angle


def build_config(alpha, beta, params=None):
    """Rasterize a path pair on the working grid and identify its access
    domain; raises NotInGammaError when the pair is not a configuration."""
    if params is None:
        params = ConfigParams()
    cell = params.cell
    a = _path_to_unit_circle(alpha, params.arm_step, cell)
    b = _path_to_unit_circle(beta, params.arm_step, cell)
    mask = _grid.rasterize([a.points, b.points], cell, params.extent)
    o_mask, ring_cells, boundary_angle = _gamma_analysis(mask, params)
    return Config(a, b, mask, o_mask, ring_cells, boundary_angle, params)


def _radial_points(angle, params):
    cell = params.cell
    rr = np.arange(0.0, 1.0 + cell, 0.5 * cell)
    if rr[-1] < 1.0:
        rr = np.append(rr, 1.0 + 0.25 * cell)
    pts = np.stack([rr * math.cos(angle), rr * math.sin(angle)], axis=1)
    return pts


def make_config(kind, params=None, rng_stream=0, alpha=None, beta=None,
                max_tries=500):
    """Construct a configuration.

    kind='gamma_plus_radial': two radial segments at angles 3*pi/4 and
    5*pi/4 (a well-separated seed).
    kind='sampled': two Brownian paths from the origin to the unit circle,
    resampled until the pair is a valid configuration.
    kind='explicit': wrap the provided alpha and beta.
    """
    if params is None:
        params = ConfigParams()
    if kind == "gamma_plus_radial":
        a = _radial_points(3.0 * math.pi / 4.0, params)
        b = _radial_points(5.0 * math.pi / 4.0, params)
        return build_config(a, b, params)
    if kind == "explicit":
        if alpha is None or beta is None:
            raise ValueError("explicit kind needs alpha and beta")
        return build_config(alpha, beta, params)
    if kind == "sampled":
        seed = _rng.seed_from(rng_stream)
        step = params.arm_step
        for trial in range(max_tries):
            g = _rng.stream(seed, _rng.TAG_INIT, trial)
            a = _paths.run_to_radius((0.0, 0.0), 1.0, step, g)
            b = _paths.run_to_radius((0.0, 0.0), 1.0, step, g)
            try:
                return build_config(a, b, params)
            except NotInGammaError:
                continue
        raise NotInGammaError(f"no valid sampled pair in {max_tries} tries")
    raise ValueError(f"unknown config kind {kind!r}")


def is_in_gamma_plus(config):
    """Well-separated class: both path tails (after first reaching radius
    e^(-1/2)) stay in the left half of the annulus [e^-1, 1], and the right
    half-annulus channel consists entirely of free access-domain cells."""
    r_half = math.exp(-0.5)
    for path in (config.alpha, config.beta):
        norms = path.norms()
        idx = _paths._first_circle_hit(norms, r_half)
        if idx is None:
            return False
        tail = path.points[idx:]
        tnorm = norms[idx:]
        if np.any(tnorm < math.exp(-1.0) - 1e-12):
            return False
        if np.any(tail[:, 0] > 1e-12):
            return False
    # channel: log-radius in (-1/2, 0), angle in (-pi/2, pi/2)
    params = config.params
    n = config.mask.extent
    cs = config.mask.cell_size
    ax = np.arange(-n, n + 1) * cs
    xs = ax[:, None]
    ys = ax[None, :]
    norms = np.hypot(xs, ys)
    sel = (norms > r_half) & (norms < 1.0) & (xs > 0.0) & (np.abs(ys) < xs)
    return bool(np.all(config.o_mask[sel]))


def in_X_m(a, b, m):
    """Matched-pair class: both configs downcrossing-free at depth m, path
    tails beyond radius e^-m identical as cell chains, and identical free
    boundary arcs on the unit circle."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if a.ring_cells.shape != b.ring_cells.shape or \
            not np.array_equal(a.ring_cells, b.ring_cells):
        return False
    r = math.exp(-m)
    cs = a.mask.cell_size
    for pa, pb in ((a.alpha, b.alpha), (a.beta, b.beta)):
        ia = _paths._first_circle_hit(pa.norms(), r)
        ib = _paths._first_circle_hit(pb.norms(), r)
        if ia is None or ib is None:
            return False
        ca = _grid.cell_chain(pa.points[ia:], cs)
        cb = _grid.cell_chain(pb.points[ib:], cs)
        if ca.shape != cb.shape or not np.array_equal(ca, cb):
            return False
    if not (_paths.in_Y_m(a, m) and _paths.in_Y_m(b, m)):
        return False
    return True


# ---------------------------------------------------------------------------
# Extension and the witness weight

@dataclass
class ExtendResult:
    """One extension step: the rescaled configuration (None when the
    extension left the configuration space), the witness weight Z, and
    psi = -log Z (None when degenerate, never a float sentinel)."""

    next: object
    Z: float
    psi: object
    degenerate: bool

    def weight(self, lam):
        if self.degenerate:
            return 0.0
        if lam == 0.0:
            return 1.0
        return self.Z ** lam


def compute_Z(config, extended_mask, inner_samples, rng_stream,
              return_detail=False):
    """Witness avoidance probability for an extended sausage.

    The witness is a walk from the origin conditioned to leave the access
    domain through the unit circle, continued by an unconditioned walk to
    radius e.  The conditioned leg is sampled (`inner_samples` walks); the
    unconditioned leg is integrated exactly: each sampled exit contributes
    the solved probability of reaching radius e from there without touching
    the extended sausage.  Touching any extended-sausage cell on the way to
    the circle counts as failure, so both failure modes are captured.
    """
    params = config.params
    seed = _rng.seed_from(rng_stream)
    if extension_blocked(extended_mask, params.origin_cap):
        # no free route from the origin to radius e: the weight vanishes
        # exactly, not merely to solver precision
        return (0.0, None) if return_detail else 0.0
    h = _grid.solve_dirichlet(config.mask, 1.0, tolerance=params.h_tol,
                              omega=params.solver_omega)
    n = config.mask.extent
    try:
        start = _grid.start_cell_near(h, (0.0, 0.0))
    except MalformedDomainError:
        return (0.0, None) if return_detail else 0.0
    if math.hypot(start[0], start[1]) > 2.0 * params.origin_cap + 2.0:
        # positive-field cells exist but none near the origin: blocked
        return (0.0, None) if return_detail else 0.0
    v = _grid.solve_dirichlet(extended_mask, E_RADIUS, tolerance=params.v_tol,
                              omega=params.solver_omega)
    states = _rng.walk_states(seed, _rng.TAG_INNER, 0, inner_samples)
    hazard = extended_mask.occupied
    max_steps = 4000 * (2 * params.resolution) ** 2
    exit_i, exit_j, hit = _grid._h_walk_exits(
        h.values, h.absorbing, hazard, start[0] + n, start[1] + n, states,
        max_steps,
    )
    ok = (hit == 0) & (exit_i >= 0)
    contrib = np.zeros(inner_samples, dtype=np.float64)
    if np.any(ok):
        contrib[ok] = v.values[exit_i[ok], exit_j[ok]]
    z = float(contrib.mean())
    if return_detail:
        return z, {"h": h, "v": v, "exit_ok": ok, "contrib": contrib}
    return z


def extension_blocked(extended_mask, origin_cap=1.5):
    """Deterministic test that the extended sausage cuts the origin region
    off from radius e (flood-fill route).

    The origin region is the ball matching the rescaled frame's unresolved
    origin (origin_cap rescaled cells, i.e. origin_cap*e cells here):
    corridors pinched below one cell may seal the origin cell itself
    without disconnecting the configuration.
    """
    labels = _grid.flood_outside(extended_mask)
    n = extended_mask.extent
    cap = int(math.ceil(origin_cap * E_RADIUS))
    lab = labels.labels[n - cap:n + cap + 1, n - cap:n + cap + 1]
    ax = np.arange(-cap, cap + 1)
    near = np.hypot(ax[:, None], ax[None, :]) <= origin_cap * E_RADIUS
    return not np.any((lab == _grid.OUTSIDE) & near)


def extend_config(config, lam, inner_samples, rng_stream, return_mask=False):
    """One extension step: attach Brownian arms to both endpoints out to
    radius e, weigh, and rescale by 1/e.

    Degenerate outcomes (the extension disconnects the origin from radius e,
    or leaves the configuration space) carry Z = 0 and no next state.  With
    inner_samples == 0 or lam == 0, Z is the survival indicator (convention
    0^0 = 0: zero weight exactly on degenerate extensions).
    return_mask=True additionally returns the extended-sausage mask.
    """
    params = config.params
    seed = _rng.seed_from(rng_stream)
    states = _rng.walk_states(seed, _rng.TAG_ARMS, 0, 2)
    sigma = params.arm_step
    arm_a = sample_arm(config.alpha.points[-1], E_RADIUS, sigma, states[0])
    arm_b = sample_arm(config.beta.points[-1], E_RADIUS, sigma, states[1])
    cell = params.cell
    ext_occ = config.mask.occupied.copy()
    _grid._mark_cart_polyline(ext_occ, arm_a, arm_a.shape[0],
                              params.resolution, params.extent)
    _grid._mark_cart_polyline(ext_occ, arm_b, arm_b.shape[0],
                              params.resolution, params.extent)
    extended = _grid.LatticeMask(cell, params.extent, ext_occ)
    inv_e = 1.0 / E_RADIUS
    next_config = None
    try:
        pa = _decimate(np.concatenate([config.alpha.points, arm_a]) * inv_e,
                       cell / 3.0)
        pb = _decimate(np.concatenate([config.beta.points, arm_b]) * inv_e,
                       cell / 3.0)
        step = max(params.arm_step,
                   float(np.hypot(*np.diff(pa, axis=0).T).max()) / 8.0,
                   float(np.hypot(*np.diff(pb, axis=0).T).max()) / 8.0)
        next_config = build_config(
            _paths.PlanarPath(pa, step), _paths.PlanarPath(pb, step), params)
    except NotInGammaError:
        next_config = None
    if next_config is None:
        result = ExtendResult(next=None, Z=0.0, psi=None, degenerate=True)
    elif lam == 0.0 or inner_samples == 0:
        result = ExtendResult(next=next_config, Z=1.0, psi=0.0,
                              degenerate=False)
    else:
        z = compute_Z(config, extended, inner_samples,
                      _rng.stream(seed, _rng.TAG_INNER, 1))
        psi = -math.log(z) if z > 0.0 else None
        result = ExtendResult(next=next_config, Z=z, psi=psi, degenerate=False)
    if return_mask:
        return result, extended
    return result


# ---------------------------------------------------------------------------
# Power iteration and chained estimates

def systematic_indices(weights, u):
    """Systematic resampling: one uniform offset, equally spaced picks."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0.0:
        raise EnsembleExtinctError("all weights vanished")
    cum = np.cumsum(w) / total
    n = w.size
    picks = (u + np.arange(n)) / n
    return np.searchsorted(cum, picks, side="left")


@dataclass
class PowerIterationResult:
    xi_hat: float
    stderr: float
    per_step_log_means: list
    ess: list
    trace: list  # (step, mean_weight, ess, xi_running)


def power_iterate(lam, steps, particles, inner_samples, rng_stream,
                  params=None, seed_config=None):
    """Leading-eigenvalue estimate of the extension operator by particle
    reweighting: iterate extension over an ensemble, resample by the
    weights, and average the per-step log mean weight over the second half
    (the first half is burn-in)."""
    if steps < 5:
        raise ValueError("steps must be >= 5")
    if particles < 100:
        raise ValueError("particles must be >= 100")
    if params is None:
        params = ConfigParams()
    seed = _rng.seed_from(rng_stream)
    if seed_config is None:
        seed_config = make_config("gamma_plus_radial", params)
    ensemble = [seed_config] * particles
    log_means = []
    ess_trace = []
    trace = []
    for t in range(steps):
        results = [
            extend_config(ensemble[i], lam, inner_samples,
                          _rng.stream(seed, _rng.TAG_ARMS, t * particles + i))
            for i in range(particles)
        ]
        w = np.array([r.weight(lam) for r in results])
        mean_w = float(w.mean())
        if mean_w <= 0.0:
            raise EnsembleExtinctError(
                f"ensemble extinct at step {t}; increase particles")
        ess = float(w.sum() ** 2 / np.sum(w ** 2))
        u = float(_rng.stream(seed, _rng.TAG_RESAMPLE, t).random())
        idx = systematic_indices(w, u)
        ensemble = [results[j].next for j in idx]
        log_means.append(math.log(mean_w))
        ess_trace.append(ess)
        burn = (t + 1) // 2
        xi_running = -float(np.mean(log_means[burn:]))
        trace.append((t, mean_w, ess, xi_running))
    window = log_means[steps // 2:]
    xi_hat = -float(np.mean(window))
    stderr = float(np.std(window, ddof=1) / math.sqrt(len(window)))
    return PowerIterationResult(
        xi_hat=xi_hat, stderr=stderr, per_step_log_means=log_means,
        ess=ess_trace, trace=trace,
    )


def estimate_Rn(config, n, lam, samples, rng_stream, params=None,
                inner_samples=64):
    """Eigenvalue-normalized expectation of the n-step weight from a fixed
    configuration: e^{n xi} times the mean of the product of step weights
    over independent n-step chains (degenerate chains contribute 0)."""
    from .exponents import xi_formula

    seed = _rng.seed_from(rng_stream)
    vals = np.zeros(samples, dtype=np.float64)
    for s in range(samples):
        cfg = config
        acc = 1.0
        for t in range(n):
            res = extend_config(cfg, lam, inner_samples,
                                _rng.stream(seed, _rng.TAG_ARMS, s * n + t))
            wgt = res.weight(lam)
            if wgt <= 0.0:
                acc = 0.0
                break
            acc *= wgt
            cfg = res.next
        vals[s] = acc
    return float(math.exp(n * xi_formula(2, lam)) * vals.mean())


def separation_ratio(lam, samples, configs, rng_stream, params=None,
                     inner_samples=64):
    """Minimum over the supplied configurations of the weighted fraction of
    extensions landing in the well-separated class."""
    if not configs:
        raise ValueError("configs must be nonempty")
    seed = _rng.seed_from(rng_stream)
    ratios = []
    for ci, cfg in enumerate(configs):
        num = 0.0
        den = 0.0
        for s in range(samples):
            res = extend_config(cfg, lam, inner_samples,
                                _rng.stream(seed, _rng.TAG_ARMS,
                                            ci * samples + s))
            w = res.weight(lam)
            den += w
            if w > 0.0 and res.next is not None and is_in_gamma_plus(res.next):
                num += w
        if den <= 0.0:
            raise EstimateError(f"zero denominator for config {ci}")
        ratios.append(num / den)
    return min(ratios)


# ---------------------------------------------------------------------------
# Mirror coupling

@dataclass
class MirrorCoupleResult:
    path_a: _paths.PlanarPath
    path_b: _paths.PlanarPath
    coalesced: bool


def _mirror_direction(a, b):
    mx, my = a[0] + b[0], a[1] + b[1]
    norm = math.hypot(mx, my)
    if norm < 1e-12:
        return (-a[1], a[0])
    return (mx / norm, my / norm)


def mirror_couple(start_a, start_b, stop_radius, rng_stream, step_size=1.0 / 64):
    """Two walks from the unit circle coupled by reflection across their
    bisector line until they meet within one step, identical afterwards.
    Each marginal is an unbiased walk."""
    ax, ay = _paths.as_xy(start_a)
    bx, by = _paths.as_xy(start_b)
    if abs(math.hypot(ax, ay) - 1.0) > 1e-9 or abs(math.hypot(bx, by) - 1.0) > 1e-9:
        raise ValueError("both starts must lie on the unit circle")
    seed = _rng.seed_from(rng_stream)
    g = _rng.stream(seed, _rng.TAG_WALK, 0)
    ux, uy = _mirror_direction((ax, ay), (bx, by))

    def reflect(p):
        d = p[:, 0] * ux + p[:, 1] * uy
        return np.stack([2 * d * ux - p[:, 0], 2 * d * uy - p[:, 1]], axis=1)

    pts_a = [np.array([[ax, ay]])]
    pos = np.array([ax, ay])
    coalesced = math.hypot(ax - bx, ay - by) <= step_size
    coalesce_idx = 0 if coalesced else None
    total = 1
    block = 512
    while True:
        steps = g.normal(0.0, step_size, size=(block, 2))
        seg = pos + np.cumsum(steps, axis=0)
        norms = np.hypot(seg[:, 0], seg[:, 1])
        hit = np.nonzero(norms >= stop_radius)[0]
        end = hit[0] + 1 if hit.size else block
        seg = seg[:end]
        if coalesce_idx is None:
            refl = reflect(seg)
            dist = np.hypot(seg[:, 0] - refl[:, 0], seg[:, 1] - refl[:, 1])
            met = np.nonzero(dist <= step_size)[0]
            if met.size and (not hit.size or met[0] <= hit[0]):
                coalesce_idx = total + int(met[0])
        pts_a.append(seg)
        total += end
        pos = seg[-1]
        if hit.size:
            break
        if total > 5e8:
            raise StepBudgetExceeded("mirror coupling ran too long")
    a_pts = np.concatenate(pts_a, axis=0)
    if coalesce_idx is None:
        b_pts = reflect(a_pts)
        coalesced = False
    else:
        b_pts = a_pts.copy()
        b_pts[:coalesce_idx + 1] = reflect(a_pts[:coalesce_idx + 1])
        coalesced = True
    b_pts[0] = (bx, by)
    return MirrorCoupleResult(
        path_a=_paths.PlanarPath(a_pts, step_size),
        path_b=_paths.PlanarPath(b_pts, step_size),
        coalesced=coalesced,
    )


# ---------------------------------------------------------------------------
# Weighted-path coupling experiment

@dataclass
class CouplingReport:
    n: int
    match_fraction_Xm: float
    summary_discrepancies: dict


def _sort_by_summary(ensemble):
    order = sorted(range(len(ensemble)),
                   key=lambda i: (ensemble[i].boundary_angle, i))
    return [ensemble[i] for i in order]


def coupling_match(a, b, m):
    """Coupling-achievable part of the matched-pair class: identical tail
    cell chains beyond radius e^-m and identical free boundary arcs.

    The full matched class additionally demands downcrossing-free
    regularity of both members; at the small depths desk-scale horizons
    allow, almost no Brownian pair is that regular, so the regularity factor
    would mask the coupling signal this experiment measures (it is ~0 for
    matched and mismatched pairs alike).
    """
    if a.ring_cells.shape != b.ring_cells.shape or \
            not np.array_equal(a.ring_cells, b.ring_cells):
        return False
    r = math.exp(-m)
    cs = a.mask.cell_size
    for pa, pb in ((a.alpha, b.alpha), (a.beta, b.beta)):
        ia = _paths._first_circle_hit(pa.norms(), r)
        ib = _paths._first_circle_hit(pb.norms(), r)
        if ia is None or ib is None:
            return False
        ca = _grid.cell_chain(pa.points[ia:], cs)
        cb = _grid.cell_chain(pb.points[ib:], cs)
        if ca.shape != cb.shape or not np.array_equal(ca, cb):
            return False
    return True


def weighted_coupling_experiment(a, b, n, lam, particles, rng_stream,
                                 inner_samples=32):
    """Evolve two reweighted ensembles from configurations a and b with
    shared extension randomness and rank-aligned resampling, then measure
    the fraction of rank-paired particles matched at depth ceil(n/3).

    match_fraction_Xm counts pairs whose tails and boundary arcs coincide;
    the fraction additionally satisfying the downcrossing-regularity class
    is reported under summary_discrepancies["full_class_fraction"].
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    seed = _rng.seed_from(rng_stream)
    ens_a = [a] * particles
    ens_b = [b] * particles
    psi_a = psi_b = 0.0
    for t in range(n):
        ens_a = _sort_by_summary(ens_a)
        ens_b = _sort_by_summary(ens_b)
        res_a = []
        res_b = []
        for i in range(particles):
            stream_id = t * particles + i
            res_a.append(extend_config(
                ens_a[i], lam, inner_samples,
                _rng.stream(seed, _rng.TAG_ARMS, stream_id)))
            res_b.append(extend_config(
                ens_b[i], lam, inner_samples,
                _rng.stream(seed, _rng.TAG_ARMS, stream_id)))
        w_a = np.array([r.weight(lam) for r in res_a])
        w_b = np.array([r.weight(lam) for r in res_b])
        if w_a.sum() <= 0 or w_b.sum() <= 0:
            raise EnsembleExtinctError(
                f"coupling ensemble extinct at step {t}; increase particles")
        u = float(_rng.stream(seed, _rng.TAG_RESAMPLE, t).random())
        ens_a = [res_a[j].next for j in systematic_indices(w_a, u)]
        ens_b = [res_b[j].next for j in systematic_indices(w_b, u)]
        pa = [-math.log(r.Z) for r in res_a if not r.degenerate and r.Z > 0]
        pb = [-math.log(r.Z) for r in res_b if not r.degenerate and r.Z > 0]
        psi_a = float(np.mean(pa)) if pa else float("inf")
        psi_b = float(np.mean(pb)) if pb else float("inf")
    ens_a = _sort_by_summary(ens_a)
    ens_b = _sort_by_summary(ens_b)
    m = max(1, math.ceil(n / 3))
    matches = sum(1 for ca, cb in zip(ens_a, ens_b)
                  if coupling_match(ca, cb, m))
    full = sum(1 for ca, cb in zip(ens_a, ens_b) if in_X_m(ca, cb, m))
    overlaps = []
    for ca, cb in zip(ens_a, ens_b):
        sa = set(ca.ring_cells.tolist())
        sb = set(cb.ring_cells.tolist())
        union = len(sa | sb)
        overlaps.append(len(sa & sb) / union if union else 1.0)
    return CouplingReport(
        n=n,
        match_fraction_Xm=matches / particles,
        summary_discrepancies={
            "mean_psi_gap": abs(psi_a - psi_b),
            "boundary_overlap": float(np.mean(overlaps)),
            "full_class_fraction": full / particles,
        },
    )


def sample_delta_summaries(config, horizon, prefix, particles, lam,
                           rng_stream, inner_samples=32, tag=0):
    """Summary statistics (the step weight Z, a continuous functional of the
    state) of the prefix-step lineages surviving a reweighted evolution to
    `horizon`.

    Realizes the weighted prefix marginal by genealogy: evolve with
    resampling, then trace each final particle back to its step-`prefix`
    ancestor.
    """
    if not 0 < prefix <= horizon:
        raise ValueError("need 0 < prefix <= horizon")
    seed = _rng.seed_from(rng_stream)
    ensemble = [config] * particles
    ancestry = []
    stats = []
    for t in range(horizon):
        results = [
            extend_config(ensemble[i], lam, inner_samples,
                          _rng.stream(seed, _rng.TAG_ARMS,
                                      (tag * horizon + t) * particles + i))
            for i in range(particles)
        ]
        w = np.array([r.weight(lam) for r in results])
        if w.sum() <= 0:
            raise EnsembleExtinctError(f"extinct at step {t}")
        u = float(_rng.stream(seed, _rng.TAG_RESAMPLE, tag * horizon + t).random())
        idx = systematic_indices(w, u)
        ancestry.append(idx)
        stats.append([r.Z for r in results])
        ensemble = [results[j].next for j in idx]
    # trace back from final slots to their step-(prefix-1) extension results
    current = np.arange(particles)
    for t in range(horizon - 1, prefix - 1, -1):
        current = ancestry[t][current]
    return np.array([stats[prefix - 1][j] for j in current])


def final_configs_of_delta(config, horizon, prefix, particles, lam,
                           rng_stream, inner_samples=32, tag=0):
    """Prefix-step configurations (with genealogical multiplicity) of a
    reweighted evolution; the ensemble realization of the weighted prefix
    marginal."""
    seed = _rng.seed_from(rng_stream)
    ensemble = [config] * particles
    ancestry = []
    snapshots = []
    for t in range(horizon):
        results = [
            extend_config(ensemble[i], lam, inner_samples,
                          _rng.stream(seed, _rng.TAG_ARMS,
                                      (tag * horizon + t) * particles + i))
            for i in range(particles)
        ]
        w = np.array([r.weight(lam) for r in results])
        if w.sum() <= 0:
            raise EnsembleExtinctError(f"extinct at step {t}")
        u = float(_rng.stream(seed, _rng.TAG_RESAMPLE, tag * horizon + t).random())
        idx = systematic_indices(w, u)
        ancestry.append(idx)
        snapshots.append([r.next for r in results])
        ensemble = [results[j].next for j in idx]
    current = np.arange(particles)
    for t in range(horizon - 1, prefix - 1, -1):
        current = ancestry[t][current]
    return [snapshots[prefix - 1][j] for j in current]


# ---------------------------------------------------------------------------
# Snapshots and traces

_SNAP_MAGIC = b"BLC1"


def save_config(config, path):
    """Two path records plus the grid header."""
    pa = _paths.to_binary(config.alpha)
    pb = _paths.to_binary(config.beta)
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<idd", config.params.resolution,
                             config.alpha.step_size, config.beta.step_size))
        fh.write(struct.pack("<QQ", len(pa), len(pb)))
        fh.write(pa)
        fh.write(pb)


def load_config(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _SNAP_MAGIC:
            raise ValueError("not a config snapshot")
        resolution, step_a, step_b = struct.unpack("<idd", fh.read(20))
        la, lb = struct.unpack("<QQ", fh.read(16))
        pa = _paths.from_binary(fh.read(la), step_a)
        pb = _paths.from_binary(fh.read(lb), step_b)
    return build_config(pa, pb, ConfigParams(resolution=resolution))


def write_trace_csv(result, path):
    """CSV schema: step,mean_weight,ess,xi_running."""
    with open(path, "w") as fh:
        fh.write("step,mean_weight,ess,xi_running\n")
        for step, mw, ess, xr in result.trace:
            fh.write(f"{step},{mw:.12g},{ess:.12g},{xr:.12g}\n")

"""Log-polar lattice machinery for scale estimators.

The decay estimators need uniform *relative* resolution across several
e-folds of radius.  A square grid cannot resolve both the unit scale and
radius e^7 at once, so sausages live on a cylinder lattice in coordinates
(rho, theta) = (log|z|, arg z) with square cells of side h = 2*pi/theta_cells.
Harmonic functions keep the flat 4-neighbor stencil in these coordinates, and
fixed cell size in (rho, theta) means a fixed fraction of the local scale at
every radius.

Planar Brownian motion maps to a time-changed Brownian motion on the cylinder
(conformal invariance of the log map), so walks are sampled directly in chart
coordinates with Gaussian increments of `sigma_cells` cells per step; only
sub-step wiggles are lost, uniformly at every scale.  Everything below the
lattice bottom is unresolved: marks there are dropped (a fixed-scale
truncation that shifts constants, never decay rates) and walks reflect one
extra log-unit further down so excursions return with a spread-out angle.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange
from scipy import ndimage

from . import rng as _rng
from .errors import ConvergenceError, GeometryError
from .grid import _FOUR_CONN, _xs_step


@dataclass(frozen=True)
class AnnulusParams:
    """Knobs for the cylinder estimators.

    theta_cells fixes the relative resolution (cells per 2*pi of angle and
    per unit of log-radius); sigma_cells is the walk step in cells.  Depths
    say how far below the reference circle the lattice extends.
    """

    theta_cells: int = 128
    sigma_cells: float = 0.5
    qn_depth: float = 4.0
    start_log_radius: float = -2.0
    start_pad: float = 0.25
    one_arm_depth: float = 5.0
    reflect_pad: float = 1.0
    omega: float = 1.95
    solve_soft_tol: float = 1e-8
    solve_hard_tol: float = 1e-12
    solve_rel_tol: float = 1e-3
    batch: int = 256
    max_cells: int = 3_000_000

    def __post_init__(self):
        if self.theta_cells % 2:
            raise ValueError("theta_cells must be even (red-black coloring)")

    @property
    def h(self):
        return 2.0 * math.pi / self.theta_cells

    def with_theta_cells(self, k):
        return replace(self, theta_cells=k)


# ---------------------------------------------------------------------------
# Chart-space marking and walking (positions in cell units)

@njit(cache=True, inline="always")
def _mark_cell(occ, r, c):
    # Sub-cutoff structure is dropped; overshoot past the stopping band lands
    # in the top row.
    R = occ.shape[0]
    if r < 0:
        return
    if r >= R:
        r = R - 1
    occ[r, c] = 1


@njit(cache=True, inline="always")
def _wrap_col(cf, K):
    c = cf % K
    if c < 0:
        c += K
    return c


@njit(cache=True)
def _mark_chart_segment(occ, K, u1, v1, u2, v2):
    """Mark cells crossed by the chart-straight segment (u1,v1)->(u2,v2).

    Subdivided to under half a cell; diagonal moves resolve through the
    orthogonal neighbor whose boundary is crossed first (both on a corner).
    """
    du = u2 - u1
    dv = v2 - v1
    d = abs(du)
    if abs(dv) > d:
        d = abs(dv)
    nsub = 1 + int(d / 0.45)
    r_prev = int(math.floor(u1))
    cf_prev = int(math.floor(v1))
    up = u1
    vp = v1
    _mark_cell(occ, r_prev, _wrap_col(cf_prev, K))
    for i in range(1, nsub + 1):
        t = i / nsub
        u = u1 + du * t
        v = v1 + dv * t
        r = int(math.floor(u))
        cf = int(math.floor(v))
        if r != r_prev or cf != cf_prev:
            if r != r_prev and cf != cf_prev:
                ustar = float(max(r_prev, r))
                vstar = float(max(cf_prev, cf))
                ddu = u - up
                ddv = v - vp
                tu = (ustar - up) / ddu if ddu != 0.0 else 2.0
                tv = (vstar - vp) / ddv if ddv != 0.0 else 2.0
                if tu < tv - 1e-9:
                    _mark_cell(occ, r, _wrap_col(cf_prev, K))
                elif tv < tu - 1e-9:
                    _mark_cell(occ, r_prev, _wrap_col(cf, K))
                else:
                    _mark_cell(occ, r, _wrap_col(cf_prev, K))
                    _mark_cell(occ, r_prev, _wrap_col(cf, K))
            _mark_cell(occ, r, _wrap_col(cf, K))
        r_prev = r
        cf_prev = cf
        up = u
        vp = v


@njit(cache=True)
def _chart_walk(occ, K, u0, v0, u_top, u_ref, sigma, s0, s1, max_steps):
    """Gaussian chart walk from (u0, v0), marked into occ, stopped at the
    first point with u >= u_top, reflected at u_ref.  Returns
    (u, v, steps, reached)."""
    u = u0
    v = v0
    for step in range(max_steps):
        if u >= u_top:
            return u, v, step, True
        s0, s1, x1 = _xs_step(s0, s1)
        s0, s1, x2 = _xs_step(s0, s1)
        rad = sigma * math.sqrt(-2.0 * math.log(1.0 - x1))
        ang = 2.0 * math.pi * x2
        nu = u + rad * math.cos(ang)
        nv = v + rad * math.sin(ang)
        if nu < u_ref:
            nu = 2.0 * u_ref - nu
        _mark_chart_segment(occ, K, u, v, nu, nv)
        u = nu
        v = nv
    return u, v, max_steps, False


@njit(cache=True)
def _record_chart_walk(out, u0, v0, u_top, u_ref, sigma, s0, s1):
    """Record the chart skeleton of one walk; returns the used length (0 if
    the capacity of `out` was insufficient)."""
    u = u0
    v = v0
    out[0, 0] = u
    out[0, 1] = v
    m = 1
    cap = out.shape[0]
    while m < cap:
        if u >= u_top:
            return m
        s0, s1, x1 = _xs_step(s0, s1)
        s0, s1, x2 = _xs_step(s0, s1)
        rad = sigma * math.sqrt(-2.0 * math.log(1.0 - x1))
        ang = 2.0 * math.pi * x2
        u = u + rad * math.cos(ang)
        v = v + rad * math.sin(ang)
        if u < u_ref:
            u = 2.0 * u_ref - u
        out[m, 0] = u
        out[m, 1] = v
        m += 1
    return 0


@njit(cache=True)
def _mark_chart_polyline(occ, K, pts, count):
    for i in range(count - 1):
        _mark_chart_segment(occ, K, pts[i, 0], pts[i, 1],
                            pts[i + 1, 0], pts[i + 1, 1])


@njit(cache=True, parallel=True)
def _mark_walks_batch(occs, starts, u_top, u_ref, sigma, states, max_steps,
                      fails):
    """Mark k walks per sample into occs[sample]; starts is (n, k, 2)."""
    n = occs.shape[0]
    k = starts.shape[1]
    K = occs.shape[2]
    for s in prange(n):
        for w in range(k):
            _, _, _, reached = _chart_walk(
                occs[s], K, starts[s, w, 0], starts[s, w, 1], u_top, u_ref,
                sigma, states[s * k + w, 0], states[s * k + w, 1], max_steps,
            )
            if not reached:
                fails[s] = 1


# ---------------------------------------------------------------------------
# Cylinder Dirichlet solve (reach the top band before the sausage)

@njit(cache=True)
def _cyl_sweeps(u, fixed, omega, nsweeps):
    R, K = u.shape
    for _ in range(nsweeps):
        for parity in range(2):
            for r in range(R):
                c0 = (parity ^ (r & 1)) & 1
                for c in range(c0, K, 2):
                    if fixed[r, c] == 0:
                        up = u[r + 1, c] if r + 1 < R else u[r, c]
                        down = u[r - 1, c] if r > 0 else u[r, c]
                        left = u[r, c - 1] if c > 0 else u[r, K - 1]
                        right = u[r, c + 1] if c + 1 < K else u[r, 0]
                        avg = 0.25 * (up + down + left + right)
                        u[r, c] += omega * (avg - u[r, c])


@njit(cache=True)
def _cyl_residual(u, fixed):
    R, K = u.shape
    best = 0.0
    for r in range(R):
        for c in range(K):
            if fixed[r, c] == 0:
                up = u[r + 1, c] if r + 1 < R else u[r, c]
                down = u[r - 1, c] if r > 0 else u[r, c]
                left = u[r, c - 1] if c > 0 else u[r, K - 1]
                right = u[r, c + 1] if c + 1 < K else u[r, 0]
                res = abs(0.25 * (up + down + left + right) - u[r, c])
                if res > best:
                    best = res
    return best


@njit(cache=True)
def _solve_one(occ, row0, omega, soft_tol, hard_tol, rel_tol, max_sweeps):
    """SOR iteration until the row-0 supremum stabilizes.

    Returns (sup over free row0 cells, residual, sweeps, converged flag).
    The bottom row reflects; the top row absorbs at value one.
    """
    R, K = occ.shape
    fixed = occ.copy()
    u = np.empty((R, K), dtype=np.float64)
    for r in range(R):
        val = (r + 0.5) / R
        for c in range(K):
            if occ[r, c]:
                u[r, c] = 0.0
            else:
                u[r, c] = val
    for c in range(K):
        fixed[R - 1, c] = 1
        if occ[R - 1, c] == 0:
            u[R - 1, c] = 1.0
    done = 0
    prev_sup = -1.0
    stable = 0
    while True:
        step = 64
        if done + step > max_sweeps:
            step = max_sweeps - done
        if step <= 0:
            res = _cyl_residual(u, fixed)
            return prev_sup, res, done, False
        _cyl_sweeps(u, fixed, omega, step)
        done += step
        res = _cyl_residual(u, fixed)
        sup = 0.0
        for c in range(K):
            if occ[row0, c] == 0 and u[row0, c] > sup:
                sup = u[row0, c]
        if res <= hard_tol:
            return sup, res, done, True
        if res <= soft_tol:
            scale = sup if sup > 1e-300 else 1e-300
            if abs(sup - prev_sup) <= rel_tol * scale:
                stable += 1
                if stable >= 2:
                    return sup, res, done, True
            else:
                stable = 0
        prev_sup = sup


@njit(cache=True, parallel=True)
def _solve_batch(occs, row0, omega, soft_tol, hard_tol, rel_tol, max_sweeps,
                 sups, residuals, flags):
    n = occs.shape[0]
    for s in prange(n):
        sup, res, _, ok = _solve_one(occs[s], row0, omega, soft_tol, hard_tol,
                                     rel_tol, max_sweeps)
        sups[s] = sup
        residuals[s] = res
        flags[s] = 1 if ok else 0


# ---------------------------------------------------------------------------
# Cylinder grid wrapper (single-sample API, used by tests and small runs)

class CylinderGrid:
    """Occupancy rows over [rho_min, rho_top] with periodic theta.

    Row r covers rho in [rho_min + r*h, rho_min + (r+1)*h); the top row is
    the absorbing band at the stopping radius.
    """

    def __init__(self, rho_top, depth, params):
        h = params.h
        K = params.theta_cells
        nrows = int(math.ceil(depth / h))
        rho_min = rho_top - nrows * h
        R = nrows + 1
        if R * K > params.max_cells:
            raise GeometryError(
                f"cylinder of {R}x{K} cells exceeds the configured budget; "
                f"grid too small for this radius"
            )
        self.params = params
        self.h = h
        self.K = K
        self.rho_min = rho_min
        self.rho_top = rho_top
        self.rows = R
        self.u_top = float(nrows)
        self.occ = np.zeros((R, K), dtype=np.uint8)

    def chart_of(self, rho, theta):
        return ((rho - self.rho_min) / self.h, theta / self.h)

    def row_of(self, rho):
        return int(math.floor((rho - self.rho_min) / self.h))

    def col_of(self, theta):
        return _wrap_col(int(math.floor(theta / self.h)), self.K)

    def seal_below(self, rho):
        """Occupy every cell strictly below `rho` (all angles)."""
        r = self.row_of(rho)
        self.occ[:max(r, 0), :] = 1

    @property
    def u_reflect(self):
        return -self.params.reflect_pad / self.h

    def default_max_steps(self):
        span = self.u_top - self.u_reflect
        return int(64.0 * span * span / (self.params.sigma_cells ** 2)) + 100_000

    def mark_walk(self, rho0, theta0, state, max_steps=None):
        if max_steps is None:
            max_steps = self.default_max_steps()
        u0, v0 = self.chart_of(rho0, theta0)
        u, v, steps, reached = _chart_walk(
            self.occ, self.K, u0, v0, self.u_top, self.u_reflect,
            self.params.sigma_cells, state[0], state[1], max_steps,
        )
        if not reached:
            raise GeometryError(
                f"walk did not reach the stop radius in {max_steps} steps")
        return (self.rho_min + u * self.h, v * self.h, steps)

    def mark_points_physical(self, pts):
        """Mark a physical-coordinate polyline (n, 2) onto the cylinder."""
        pts = np.asarray(pts, dtype=np.float64)
        rho = 0.5 * np.log(pts[:, 0] ** 2 + pts[:, 1] ** 2)
        theta = np.unwrap(np.arctan2(pts[:, 1], pts[:, 0]))
        chart = np.stack([(rho - self.rho_min) / self.h, theta / self.h],
                         axis=1)
        chart = np.ascontiguousarray(chart)
        _mark_chart_polyline(self.occ, self.K, chart, chart.shape[0])

    def mark_chart_points(self, chart):
        chart = np.ascontiguousarray(chart, dtype=np.float64)
        _mark_chart_polyline(self.occ, self.K, chart, chart.shape[0])


def merged_components(occ):
    """4-connected labels of free cells with the theta seam identified."""
    free = occ == 0
    lab, nlab = ndimage.label(free, structure=_FOUR_CONN)
    if nlab <= 1:
        return lab
    parent = np.arange(nlab + 1, dtype=np.int64)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    left = lab[:, 0]
    right = lab[:, -1]
    for a, b in zip(left, right):
        if a > 0 and b > 0:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra
    lut = np.array([find(i) for i in range(nlab + 1)], dtype=np.int64)
    return lut[lab]


def open_to_top(occ, probe=None):
    """Connectivity verdict on the cylinder: 'open', 'closed' or 'swallowed'.

    probe=(row, col) tests that cell; probe=None treats the whole bottom row
    as one super-node (the unresolved region below the cutoff connects its
    free cells).
    """
    merged = merged_components(occ)
    top = merged[-1, :]
    top_ids = np.unique(top[top > 0])
    if probe is None:
        bottom = merged[0, :]
        ids = np.unique(bottom[bottom > 0])
        if ids.size == 0:
            return "swallowed"
        return "open" if np.intersect1d(ids, top_ids).size else "closed"
    r, c = probe
    pid = merged[r, c]
    if pid == 0:
        return "swallowed"
    return "open" if pid in top_ids else "closed"


def solve_reach_top(grid, omega=None, max_sweeps=None, tol=None):
    """Per-cell probability of reaching the top band before the sausage."""
    params = grid.params
    if omega is None:
        omega = params.omega
    if max_sweeps is None:
        max_sweeps = 600 * max(grid.rows, grid.K)
    if tol is None:
        tol = params.solve_soft_tol
    occ = grid.occ
    R, K = occ.shape
    fixed = occ.copy()
    fixed[-1, :] = 1
    u = np.empty((R, K), dtype=np.float64)
    ramp = (np.arange(R, dtype=np.float64) + 0.5) / R
    u[:] = ramp[:, None]
    u[occ == 1] = 0.0
    u[-1, occ[-1, :] == 0] = 1.0
    sweeps = 0
    while _cyl_residual(u, fixed) > tol:
        if sweeps >= max_sweeps:
            raise ConvergenceError("cylinder field solve did not converge",
                                   residual=_cyl_residual(u, fixed),
                                   sweeps=sweeps)
        _cyl_sweeps(u, fixed, omega, 64)
        sweeps += 64
    return u


# ---------------------------------------------------------------------------
# Sample drivers

def _start_angles(k):
    """k maximally separated angles on the circle (antipodal for k=2)."""
    return [2.0 * math.pi * i / k for i in range(k)]


def disconnection_sample_counts(k, rho_target, samples, seed, params=None,
                                from_origin=True, tag=0):
    """Counts (open, closed, swallowed) over independent sausage samples.

    from_origin=True: k walks started at radius e^start_log_radius with that
    disk sealed (walks from the origin surround their start at every smaller
    scale), probe cell at unit distance from the origin.
    from_origin=False: one walk from the unit circle, tested for
    disconnection of the origin (bottom super-node).
    """
    if params is None:
        params = AnnulusParams()
    seed = _rng.seed_from(seed)
    if from_origin:
        depth = rho_target - params.start_log_radius + params.start_pad
    else:
        depth = rho_target + params.one_arm_depth
        k = 1
    n_open = n_closed = n_swallowed = 0
    done = 0
    batch_idx = 0
    proto = CylinderGrid(rho_target, depth, params)
    seal_row = proto.row_of(params.start_log_radius) if from_origin else 0
    probe = (proto.row_of(0.0), proto.col_of(0.0)) if from_origin else None
    u_start = ((params.start_log_radius - proto.rho_min) / proto.h
               if from_origin else (0.0 - proto.rho_min) / proto.h)
    max_steps = proto.default_max_steps()
    while done < samples:
        todo = min(params.batch, samples - done)
        states = _rng.walk_states(seed, _rng.TAG_WALK, (tag << 16) | batch_idx,
                                  todo * k)
        gang = _rng.stream(seed, _rng.TAG_INIT, (tag << 16) | batch_idx)
        thetas = gang.uniform(0.0, 2.0 * math.pi, size=(todo, k))
        occs = np.zeros((todo, proto.rows, proto.K), dtype=np.uint8)
        if from_origin and seal_row > 0:
            occs[:, :seal_row, :] = 1
        starts = np.empty((todo, k, 2), dtype=np.float64)
        starts[:, :, 0] = u_start
        starts[:, :, 1] = thetas / proto.h
        fails = np.zeros(todo, dtype=np.uint8)
        _mark_walks_batch(occs, starts, proto.u_top, proto.u_reflect,
                          params.sigma_cells, states, max_steps, fails)
        if np.any(fails):
            raise GeometryError("a walk exhausted its step budget")
        for i in range(todo):
            verdict = open_to_top(occs[i], probe=probe)
            if verdict == "open":
                n_open += 1
            elif verdict == "closed":
                n_closed += 1
            else:
                n_swallowed += 1
        done += todo
        batch_idx += 1
    return n_open, n_closed, n_swallowed


def qn_sample_values(k, lam, n, samples, seed, params=None, tag=0):
    """Per-sample avoidance suprema for the subadditive sequence.

    Each sample draws k walks from maximally separated unit-circle starts to
    radius e^n, rasterizes them, and reads the supremum over free
    unit-circle cells of the probability of reaching the top band.  Returns
    (values, swallowed): values holds sup^lam per sample with swallowed
    samples contributing 0; lam == 0 applies the 0^0 = 0 convention, i.e.
    the indicator {sup > 0} evaluated by flood fill.
    """
    if params is None:
        params = AnnulusParams()
    seed = _rng.seed_from(seed)
    if k not in (1, 2, 3):
        raise ValueError("k must be one of 1, 2, 3")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    depth = n + params.qn_depth
    proto = CylinderGrid(float(n), depth, params)
    row0 = proto.row_of(0.0)
    angles = np.array(_start_angles(k))
    values = np.zeros(samples, dtype=np.float64)
    swallowed = 0
    done = 0
    batch_idx = 0
    max_steps = proto.default_max_steps()
    while done < samples:
        todo = min(params.batch, samples - done)
        states = _rng.walk_states(seed, _rng.TAG_WALK, (tag << 16) | batch_idx,
                                  todo * k)
        occs = np.zeros((todo, proto.rows, proto.K), dtype=np.uint8)
        starts = np.empty((todo, k, 2), dtype=np.float64)
        starts[:, :, 0] = (0.0 - proto.rho_min) / proto.h
        starts[:, :, 1] = angles[None, :] / proto.h
        fails = np.zeros(todo, dtype=np.uint8)
        _mark_walks_batch(occs, starts, proto.u_top, proto.u_reflect,
                          params.sigma_cells, states, max_steps, fails)
        if np.any(fails):
            raise GeometryError("a walk exhausted its step budget")
        free0 = occs[:, row0, :] == 0
        any_free = np.any(free0, axis=1)
        swallowed += int(np.sum(~any_free))
        if lam == 0.0:
            for i in range(todo):
                if not any_free[i]:
                    continue
                merged = merged_components(occs[i])
                top_ids = np.unique(merged[-1, :])
                top_ids = top_ids[top_ids > 0]
                row_ids = np.unique(merged[row0, :][free0[i]])
                if np.intersect1d(row_ids, top_ids).size:
                    values[done + i] = 1.0
        else:
            sups = np.zeros(todo, dtype=np.float64)
            residuals = np.zeros(todo, dtype=np.float64)
            flags = np.zeros(todo, dtype=np.uint8)
            max_sweeps = 600 * max(proto.rows, proto.K)
            _solve_batch(occs, row0, params.omega, params.solve_soft_tol,
                         params.solve_hard_tol, params.solve_rel_tol,
                         max_sweeps, sups, residuals, flags)
            if not np.all(flags == 1):
                worst = float(residuals[flags == 0].max())
                raise ConvergenceError(
                    f"{int(np.sum(flags == 0))} cylinder solves stalled "
                    f"(worst residual {worst:.3e})",
                    residual=worst,
                )
            sups = np.clip(sups, 0.0, 1.0)
            sups[~any_free] = 0.0
            values[done:done + todo] = sups ** lam
        done += todo
        batch_idx += 1
    return values, swallowed


def record_walk_chart(rho_start, theta_start, rho_stop, seed, params=None,
                      capacity=6_000_000, reflect_floor=None, tag=0):
    """Chart skeleton (u, v in cell units relative to rho_min=0 at the start
    frame) of one walk run to rho_stop; used by shared-sample diagnostics.

    Returns (points, h): points[:, 0]*h + rho_start recovers log-radius...
    """
    if params is None:
        params = AnnulusParams()
    h = params.h
    state = _rng.walk_states(seed, _rng.TAG_WALK, tag, 1)[0]
    out = np.empty((capacity, 2), dtype=np.float64)
    u_top = (rho_stop - rho_start) / h
    if reflect_floor is None:
        reflect_floor = rho_start - params.reflect_pad
    u_ref = (reflect_floor - rho_start) / h
    m = _record_chart_walk(out, 0.0, theta_start / h, u_top, u_ref,
                           params.sigma_cells, state[0], state[1])
    if m == 0:
        raise GeometryError("walk skeleton exceeded capacity")
    return out[:m].copy(), h

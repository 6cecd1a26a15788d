"""Square-lattice computations.

Rasterization of polylines into one-cell-thick obstacle masks, connectivity
labelling, a red-black Gauss-Seidel Dirichlet solver for hit probabilities,
Doob-conditioned lattice walks, and the half-strip exit-density series.

Grids are centered: a mask of extent N spans cell indices [-N, N]^2, and cell
(i, j) covers the square of side `cell_size` centered at (i*cs, j*cs).
"""

import math
import struct

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .errors import (
    ConvergenceError,
    GeometryError,
    MalformedDomainError,
    StepBudgetExceeded,
    SwallowedPointError,
)
from .paths import PlanarPath, as_xy

OUTSIDE = 0
OBSTACLE = -1

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


class LatticeMask:
    """Bit-per-cell occupancy on a centered square grid."""

    __slots__ = ("cell_size", "extent", "occupied")

    def __init__(self, cell_size, extent, occupied=None):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if extent < 1:
            raise ValueError("extent must be >= 1")
        side = 2 * extent + 1
        if occupied is None:
            occupied = np.zeros((side, side), dtype=bool)
        else:
            occupied = np.asarray(occupied, dtype=bool)
            if occupied.shape != (side, side):
                raise ValueError("occupied must be (2*extent+1)^2")
            occupied = occupied.copy()
        occupied.setflags(write=False)
        self.cell_size = float(cell_size)
        self.extent = int(extent)
        self.occupied = occupied

    def cell_of(self, point):
        x, y = as_xy(point)
        cs = self.cell_size
        return (int(math.floor(x / cs + 0.5)), int(math.floor(y / cs + 0.5)))

    def in_bounds(self, cell):
        i, j = cell
        return abs(i) <= self.extent and abs(j) <= self.extent

    def is_occupied(self, cell):
        i, j = cell
        return bool(self.occupied[i + self.extent, j + self.extent])

    def center_norms(self):
        """Distance from the origin of every cell center, as an array."""
        n = self.extent
        ax = np.arange(-n, n + 1) * self.cell_size
        return np.hypot(ax[:, None], ax[None, :])


class ScalarField:
    """Real value per cell on the same grid as a LatticeMask.

    `blocked` marks absorbing zero cells, `absorbing` the target band pinned
    at one; both are kept so conditioned walks know where to stop.
    """

    __slots__ = ("cell_size", "extent", "values", "blocked", "absorbing",
                 "residual", "sweeps")

    def __init__(self, cell_size, extent, values, blocked, absorbing,
                 residual=0.0, sweeps=0):
        self.cell_size = float(cell_size)
        self.extent = int(extent)
        values = np.asarray(values, dtype=np.float64).copy()
        values.setflags(write=False)
        self.values = values
        blocked = np.asarray(blocked, dtype=bool).copy()
        blocked.setflags(write=False)
        self.blocked = blocked
        absorbing = np.asarray(absorbing, dtype=bool).copy()
        absorbing.setflags(write=False)
        self.absorbing = absorbing
        self.residual = float(residual)
        self.sweeps = int(sweeps)

    def value_at(self, cell):
        i, j = cell
        return float(self.values[i + self.extent, j + self.extent])


class RegionLabels:
    """Per-cell component labels: OBSTACLE (-1), OUTSIDE (0), or an
    enclosed-component id 1..n_enclosed."""

    __slots__ = ("cell_size", "extent", "labels", "n_enclosed")

    def __init__(self, cell_size, extent, labels, n_enclosed):
        labels = np.asarray(labels, dtype=np.int32).copy()
        labels.setflags(write=False)
        self.cell_size = float(cell_size)
        self.extent = int(extent)
        self.labels = labels
        self.n_enclosed = int(n_enclosed)

    def label_at(self, cell):
        i, j = cell
        return int(self.labels[i + self.extent, j + self.extent])


def _as_points(path_like):
    if isinstance(path_like, PlanarPath):
        return path_like.points
    return np.asarray(path_like, dtype=np.float64)


def supercover_cells(points, cell_size):
    """Cells intersected by a polyline, as an (m, 2) integer array.

    Consecutive cells along the traversal are 4-adjacent: corner crossings
    resolve to the cell the segment actually passes through (both on an
    exact corner hit).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, 2) array")
    cs = float(cell_size)
    seg = np.diff(pts, axis=0)
    if len(seg) == 0:
        cell = np.floor(pts / cs + 0.5).astype(np.int64)
        return cell
    lens = np.hypot(seg[:, 0], seg[:, 1])
    nsub = np.maximum(1, np.ceil(lens / (0.45 * cs)).astype(np.int64))
    total = int(nsub.sum())
    segidx = np.repeat(np.arange(len(seg)), nsub)
    starts = np.concatenate(([0], np.cumsum(nsub)[:-1]))
    rank = np.arange(total) - np.repeat(starts, nsub)
    t = rank / nsub[segidx]
    samples = pts[segidx] + seg[segidx] * t[:, None]
    samples = np.concatenate([samples, pts[-1:]], axis=0)

    cells = np.floor(samples / cs + 0.5).astype(np.int64)
    d = np.diff(cells, axis=0)
    diag = (np.abs(d[:, 0]) == 1) & (np.abs(d[:, 1]) == 1)
    if not np.any(diag):
        return cells
    # Resolve each diagonal move through the orthogonal neighbor whose
    # boundary the segment crosses first; an exact corner hit contributes
    # both.
    idx = np.nonzero(diag)[0]
    p1 = samples[idx]
    p2 = samples[idx + 1]
    c1 = cells[idx]
    c2 = cells[idx + 1]
    bx = cs * (np.minimum(c1[:, 0], c2[:, 0]) + 0.5)
    by = cs * (np.minimum(c1[:, 1], c2[:, 1]) + 0.5)
    dx = p2[:, 0] - p1[:, 0]
    dy = p2[:, 1] - p1[:, 1]
    tx = (bx - p1[:, 0]) / dx
    ty = (by - p1[:, 1]) / dy
    x_first = np.stack([c2[:, 0], c1[:, 1]], axis=1)
    y_first = np.stack([c1[:, 0], c2[:, 1]], axis=1)
    eps = 1e-12
    xf = tx < ty - eps
    yf = ty < tx - eps
    corner = ~(xf | yf)
    positions = np.concatenate([
        idx[xf] + 1, idx[yf] + 1, idx[corner] + 1, idx[corner] + 1,
    ])
    values = np.concatenate([
        x_first[xf], y_first[yf], x_first[corner], y_first[corner],
    ])
    order = np.argsort(positions, kind="stable")
    return np.insert(cells, positions[order], values[order], axis=0)


def cell_chain(points, cell_size):
    """Ordered supercover cells with consecutive duplicates removed."""
    cells = supercover_cells(points, cell_size)
    if cells.shape[0] <= 1:
        return cells
    keep = np.ones(cells.shape[0], dtype=bool)
    keep[1:] = np.any(np.diff(cells, axis=0) != 0, axis=1)
    return cells[keep]


@njit(cache=True, inline="always")
def _mark_cart_cell(occ, i, j):
    side = occ.shape[0]
    if i < 0:
        i = 0
    elif i >= side:
        i = side - 1
    if j < 0:
        j = 0
    elif j >= side:
        j = side - 1
    occ[i, j] = True


@njit(cache=True)
def _mark_cart_polyline(occ, pts, count, inv_cell, extent):
    """Jitted supercover marking of a polyline into a centered occupancy
    array (same cell rule as supercover_cells; edge marks clamp)."""
    for seg in range(count - 1):
        x1 = pts[seg, 0]
        y1 = pts[seg, 1]
        x2 = pts[seg + 1, 0]
        y2 = pts[seg + 1, 1]
        dxs = x2 - x1
        dys = y2 - y1
        d = math.hypot(dxs, dys) * inv_cell
        nsub = 1 + int(d / 0.45)
        ip = int(math.floor(x1 * inv_cell + 0.5))
        jp = int(math.floor(y1 * inv_cell + 0.5))
        xp = x1
        yp = y1
        _mark_cart_cell(occ, ip + extent, jp + extent)
        for t in range(1, nsub + 1):
            f = t / nsub
            x = x1 + dxs * f
            y = y1 + dys * f
            i = int(math.floor(x * inv_cell + 0.5))
            j = int(math.floor(y * inv_cell + 0.5))
            if i != ip or j != jp:
                if i != ip and j != jp:
                    bx = (max(ip, i) - 0.5) / inv_cell
                    by = (max(jp, j) - 0.5) / inv_cell
                    ddx = x - xp
                    ddy = y - yp
                    tx = (bx - xp) / ddx if ddx != 0.0 else 2.0
                    ty = (by - yp) / ddy if ddy != 0.0 else 2.0
                    if tx < ty - 1e-12:
                        _mark_cart_cell(occ, i + extent, jp + extent)
                    elif ty < tx - 1e-12:
                        _mark_cart_cell(occ, ip + extent, j + extent)
                    else:
                        _mark_cart_cell(occ, i + extent, jp + extent)
                        _mark_cart_cell(occ, ip + extent, j + extent)
                _mark_cart_cell(occ, i + extent, j + extent)
            ip = i
            jp = j
            xp = x
            yp = y


def rasterize(paths, cell_size, extent):
    """One-cell-thick occupancy of a list of polylines.

    Every path segment is covered by a 4-connected chain of occupied cells.
    Geometry outside the grid raises GeometryError.
    """
    side = 2 * extent + 1
    occ = np.zeros((side, side), dtype=bool)
    bound = extent * cell_size
    for p in paths:
        pts = _as_points(p)
        if pts.size == 0:
            continue
        if np.max(np.abs(pts)) > bound:
            raise GeometryError(
                f"path reaches {np.max(np.abs(pts)):.6g}, beyond grid half-width "
                f"{bound:.6g}"
            )
        cells = supercover_cells(pts, cell_size)
        occ[cells[:, 0] + extent, cells[:, 1] + extent] = True
    return LatticeMask(cell_size, extent, occ)


def mark_cells(mask, cells):
    """New mask with extra occupied cells (m, 2) added."""
    occ = mask.occupied.copy()
    occ[cells[:, 0] + mask.extent, cells[:, 1] + mask.extent] = True
    return LatticeMask(mask.cell_size, mask.extent, occ)


def flood_outside(mask):
    """Label cells 4-reachable from the grid border as OUTSIDE; remaining
    free cells get consecutive enclosed-component ids."""
    free = ~mask.occupied
    lab, _ = ndimage.label(free, structure=_FOUR_CONN)
    border = np.concatenate([lab[0, :], lab[-1, :], lab[:, 0], lab[:, -1]])
    border_ids = np.unique(border[border > 0])
    out = np.full(mask.occupied.shape, OBSTACLE, dtype=np.int32)
    if border_ids.size:
        out[np.isin(lab, border_ids)] = OUTSIDE
    enclosed_ids = np.setdiff1d(np.unique(lab[lab > 0]), border_ids)
    for new_id, old in enumerate(enclosed_ids, start=1):
        out[lab == old] = new_id
    return RegionLabels(mask.cell_size, mask.extent, out, len(enclosed_ids))


def disconnects(mask, point, labels=None):
    """True iff `point` is separated from the grid border by occupied cells.

    A point landing on an occupied cell raises SwallowedPointError; callers
    count those samples separately.
    """
    cell = mask.cell_of(point)
    if not mask.in_bounds(cell):
        raise GeometryError(f"point {point!r} outside grid")
    if mask.is_occupied(cell):
        raise SwallowedPointError("point swallowed by sausage")
    if labels is None:
        labels = flood_outside(mask)
    return labels.label_at(cell) != OUTSIDE


# ---------------------------------------------------------------------------
# Relaxation solver

_FREE = 0
_FIXED = 1


@njit(cache=True, parallel=True)
def _sor_sweeps(u, role, omega, nsweeps):
    # Red-black ordering: within one parity every row only reads the other
    # parity, so rows relax independently.
    n0, n1 = u.shape
    for _ in range(nsweeps):
        for parity in range(2):
            for i in prange(1, n0 - 1):
                j0 = 1 + (((i + 1) ^ parity) & 1)
                for j in range(j0, n1 - 1, 2):
                    if role[i, j] == _FREE:
                        avg = 0.25 * (u[i - 1, j] + u[i + 1, j]
                                      + u[i, j - 1] + u[i, j + 1])
                        u[i, j] += omega * (avg - u[i, j])


@njit(cache=True, parallel=True)
def _max_residual(u, role):
    n0, n1 = u.shape
    best = 0.0
    for i in prange(1, n0 - 1):
        row_best = 0.0
        for j in range(1, n1 - 1):
            if role[i, j] == _FREE:
                r = abs(0.25 * (u[i - 1, j] + u[i + 1, j]
                                + u[i, j - 1] + u[i, j + 1]) - u[i, j])
                if r > row_best:
                    row_best = r
        best = max(best, row_best)
    return best


def auto_omega(shape):
    """Near-optimal over-relaxation factor for a rectangular grid."""
    n = max(shape)
    return 2.0 / (1.0 + math.sin(math.pi / n))


def relax_roles(u, role, tolerance, omega=1.5, max_sweeps=None):
    """Red-black Gauss-Seidel relaxation of `u` on role==_FREE cells.

    Mutates u in place; returns (residual, sweeps).  Boundary rows/columns
    must be fixed.  omega='auto' picks the near-optimal factor for the grid.
    Raises ConvergenceError at the sweep cap.  Residual checks back off
    geometrically so their cost stays logarithmic.
    """
    n = max(u.shape)
    if omega == "auto":
        omega = auto_omega(u.shape)
    if max_sweeps is None:
        max_sweeps = 10 * n * n
    u64 = u
    role8 = role
    done = 0
    chunk = 8
    res = _max_residual(u64, role8)
    while res > tolerance:
        if done >= max_sweeps:
            raise ConvergenceError(
                f"residual {res:.3e} > {tolerance:.3e} after {done} sweeps",
                residual=res, sweeps=done,
            )
        step = min(chunk, max_sweeps - done)
        _sor_sweeps(u64, role8, omega, step)
        done += step
        res = _max_residual(u64, role8)
        chunk = min(2 * chunk, 256)
    return res, done


def solve_dirichlet(mask, outer_circle_radius, tolerance=1e-3, omega=1.5,
                    max_sweeps=None):
    """Hit probability of the outer circle before the mask, per cell.

    u = 0 on occupied cells, u = 1 on free cells at or beyond the outer
    circle, and on every free interior cell the residual |u - mean of the 4
    neighbors| is at most `tolerance`.  The converged field realizes
    P[simple walk reaches the outer circle before any occupied cell].
    """
    if not 0.0 < tolerance <= 1e-3:
        raise ValueError("tolerance must lie in (0, 1e-3]")
    n = mask.extent
    cs = mask.cell_size
    if outer_circle_radius > n * cs:
        raise GeometryError("outer circle does not fit inside the grid")
    norms = mask.center_norms()
    beyond = norms >= outer_circle_radius
    role = np.full(mask.occupied.shape, _FREE, dtype=np.uint8)
    role[mask.occupied] = _FIXED
    role[beyond] = _FIXED
    u = np.ones(mask.occupied.shape, dtype=np.float64)
    u[mask.occupied] = 0.0

    # Solve on the bounding box of the disk; everything beyond is fixed.
    half = min(n, int(math.ceil(outer_circle_radius / cs)) + 2)
    lo, hi = n - half, n + half + 1
    uv = np.ascontiguousarray(u[lo:hi, lo:hi])
    rv = np.ascontiguousarray(role[lo:hi, lo:hi])
    if max_sweeps is None:
        max_sweeps = 10 * (2 * n + 1) ** 2
    residual, sweeps = relax_roles(uv, rv, tolerance, omega, max_sweeps)
    u[lo:hi, lo:hi] = uv

    free = role == _FREE
    # The exact solution obeys the maximum principle; the iterate may sit a
    # solver-error away from it (residual times the inverse-Laplacian mass).
    slack = max(1e-9, 0.5 * tolerance * (hi - lo) ** 2)
    assert np.all(u[free] >= -slack) and np.all(u[free] <= 1.0 + slack), \
        "solver left the [0, 1] range"
    np.clip(u, 0.0, 1.0, out=u)
    absorbing = beyond & ~mask.occupied
    return ScalarField(cs, n, u, mask.occupied, absorbing,
                       residual=residual, sweeps=sweeps)


def dirichlet_residual(field):
    """Max |u - 4-neighbor mean| over free interior cells (for asserts)."""
    role = np.full(field.values.shape, _FIXED, dtype=np.uint8)
    role[~(field.blocked | field.absorbing)] = _FREE
    return float(_max_residual(field.values, role))


def sup_over_circle(field, radius):
    """Maximum of the field over free cells intersecting the circle, 0 if
    every such cell is blocked."""
    n = field.extent
    cs = field.cell_size
    if radius > n * cs:
        raise GeometryError("circle does not fit inside the grid")
    ax = np.arange(-n, n + 1) * cs
    cx = np.abs(ax)[:, None]
    cy = np.abs(ax)[None, :]
    h = cs / 2.0
    near = np.hypot(np.maximum(cx - h, 0.0), np.maximum(cy - h, 0.0))
    far = np.hypot(cx + h, cy + h)
    on_circle = (near <= radius) & (radius <= far)
    sel = on_circle & ~field.blocked
    if not np.any(sel):
        return 0.0
    return float(field.values[sel].max())


# ---------------------------------------------------------------------------
# Conditioned walks

@njit(cache=True, inline="always")
def _xs_step(s0, s1):
    # xorshift128+ (Vigna); returns (new s0, new s1, uniform in [0, 1))
    result = s0 + s1
    t = s0 ^ (s0 << np.uint64(23))
    new_s0 = s1
    new_s1 = t ^ s1 ^ (t >> np.uint64(18)) ^ (s1 >> np.uint64(5))
    val = result >> np.uint64(11)
    return new_s0, new_s1, np.float64(val) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _h_walk_single(values, absorbing, i0, j0, s0, s1, max_steps, trail):
    """One conditioned walk; writes visited cells into `trail`.

    Returns (length, exit_flag).  Steps to 4-neighbors with probability
    proportional to the field value there, stopping on the absorbing band.
    """
    i, j = i0, j0
    trail[0, 0] = i
    trail[0, 1] = j
    m = 1
    for _ in range(max_steps):
        w0 = values[i - 1, j]
        w1 = values[i + 1, j]
        w2 = values[i, j - 1]
        w3 = values[i, j + 1]
        tot = w0 + w1 + w2 + w3
        if tot <= 0.0:
            return m, 0
        s0, s1, un = _xs_step(s0, s1)
        r = un * tot
        if r < w0:
            i -= 1
        elif r < w0 + w1:
            i += 1
        elif r < w0 + w1 + w2:
            j -= 1
        else:
            j += 1
        trail[m, 0] = i
        trail[m, 1] = j
        m += 1
        if absorbing[i, j]:
            return m, 1
        if m >= trail.shape[0]:
            return m, 0
    return m, 0


@njit(cache=True)
def _h_walk_exits(values, absorbing, hazard, i0, j0, states, max_steps):
    """Batch of conditioned walks: exit cells plus hazard-contact flags.

    A walk that touches a hazard cell is marked and abandoned (its exit no
    longer matters to the caller).  exit index -1 means no exit (dead end or
    step cap).
    """
    nw = states.shape[0]
    exit_i = np.full(nw, -1, dtype=np.int64)
    exit_j = np.full(nw, -1, dtype=np.int64)
    hit = np.zeros(nw, dtype=np.uint8)
    for w in range(nw):
        s0 = states[w, 0]
        s1 = states[w, 1]
        i, j = i0, j0
        for _ in range(max_steps):
            w0 = values[i - 1, j]
            w1 = values[i + 1, j]
            w2 = values[i, j - 1]
            w3 = values[i, j + 1]
            tot = w0 + w1 + w2 + w3
            if tot <= 0.0:
                break
            s0, s1, un = _xs_step(s0, s1)
            r = un * tot
            if r < w0:
                i -= 1
            elif r < w0 + w1:
                i += 1
            elif r < w0 + w1 + w2:
                j -= 1
            else:
                j += 1
            if hazard[i, j]:
                hit[w] = 1
                break
            if absorbing[i, j]:
                exit_i[w] = i
                exit_j[w] = j
                break
    return exit_i, exit_j, hit


def start_cell_near(field, point=(0.0, 0.0)):
    """Free cell with positive field value nearest to `point`."""
    n = field.extent
    cs = field.cell_size
    x, y = as_xy(point)
    ax = np.arange(-n, n + 1) * cs
    d2 = (ax[:, None] - x) ** 2 + (ax[None, :] - y) ** 2
    ok = (field.values > 0.0) & ~field.blocked & ~field.absorbing
    if not np.any(ok):
        raise MalformedDomainError("no free cell with positive value")
    d2 = np.where(ok, d2, np.inf)
    flat = int(np.argmin(d2))
    i, j = np.unravel_index(flat, d2.shape)
    return (int(i) - n, int(j) - n)


def h_transform_walk(labels, h, start_cell, rng, max_steps=None):
    """Simple random walk conditioned (via the field h) to exit through the
    absorbing band of h; returns the walk as a PlanarPath of cell centers.

    The walk never enters a zero-field cell.  Raises MalformedDomainError if
    no neighbor of the start has positive field value.
    """
    n = h.extent
    i0, j0 = start_cell[0] + n, start_cell[1] + n
    vals = h.values
    if h.absorbing[i0, j0]:
        raise ValueError("start cell already lies in the absorbing band")
    nb = (vals[i0 - 1, j0] + vals[i0 + 1, j0]
          + vals[i0, j0 - 1] + vals[i0, j0 + 1])
    if nb <= 0.0:
        raise MalformedDomainError("start cell has no positive-field neighbor")
    if max_steps is None:
        max_steps = 500 * vals.shape[0] * vals.shape[1]
    cap = max_steps + 1
    trail = np.empty((min(cap, 1 << 22), 2), dtype=np.int64)
    s0, s1 = rng.integers(1, (1 << 64) - 1, size=2, dtype=np.uint64)
    m, ok = _h_walk_single(vals, h.absorbing, i0, j0, s0, s1, max_steps, trail)
    if not ok:
        raise StepBudgetExceeded(f"conditioned walk unfinished after {m} steps")
    cells = trail[:m] - n
    pts = cells * h.cell_size
    return PlanarPath(pts, step_size=h.cell_size)


# ---------------------------------------------------------------------------
# Half-strip exit density

def default_strip_terms(y):
    """Series truncation: max(8, ceil(12/y)) rounded up to even."""
    t = max(8, int(math.ceil(12.0 / y)))
    return t + (t % 2)


def strip_truncation_bound(terms, y):
    """Upper bound on the dropped tail of the exit-density series."""
    return (2.0 / math.pi) * math.exp(-(terms + 1) * y) / (1.0 - math.exp(-y))


def strip_exit_density(z, s, terms=None):
    """Density at s of the bottom-exit position for a walk from z in the
    half-strip (0, pi) x (0, inf), killed on the side walls.

    Separation of variables gives (2/pi) * sum_k sin(kx) sin(ks) e^{-ky};
    the series is truncated at `terms` terms (even by default, which keeps
    partial sums nonnegative in practice).
    """
    if isinstance(z, complex):
        x, y = z.real, z.imag
    else:
        x, y = as_xy(z)
    if y <= 0.0:
        raise ValueError("Im(z) must be positive")
    if not 0.0 < x < math.pi:
        raise ValueError("Re(z) must lie in (0, pi)")
    if not 0.0 < s < math.pi:
        raise ValueError("s must lie in (0, pi)")
    if terms is None:
        terms = default_strip_terms(y)
    if terms < 1:
        raise ValueError("terms must be >= 1")
    k = np.arange(1, terms + 1, dtype=np.float64)
    return float(
        (2.0 / math.pi) * np.sum(np.sin(k * x) * np.sin(k * s) * np.exp(-k * y))
    )


def strip_bottom_exit_probability(z, terms=None):
    """Quadrature of the exit density over s in (0, pi)."""
    if isinstance(z, complex):
        x, y = z.real, z.imag
    else:
        x, y = as_xy(z)
    if terms is None:
        terms = default_strip_terms(y)
    # The s-integral of each term is explicit: int sin(ks) ds = (1-cos(k pi))/k.
    k = np.arange(1, terms + 1, dtype=np.float64)
    weight = (1.0 - np.cos(k * math.pi)) / k
    return float((2.0 / math.pi) * np.sum(np.sin(k * x) * np.exp(-k * y) * weight))


class StripDomain:
    """Rasterized half-strip with an absorbing bottom band.

    Rows index y from -1 (the exit band) upward; columns index x across
    (0, pi).  `height` is the simulated ceiling; conditioned walks almost
    never reach it when it sits several units above the start.
    """

    def __init__(self, res, height):
        self.res = int(res)
        self.height = float(height)
        self.ncol = int(round(math.pi * res))
        self.nrow = int(math.ceil(height * res))
        # Array layout: [row+1, col+1] with a sentinel ring; role arrays sized
        # (nrow+2, ncol+2).
        shape = (self.nrow + 2, self.ncol + 2)
        role = np.full(shape, _FIXED, dtype=np.uint8)
        role[1:-1, 1:-1] = _FREE
        self.role = role
        u = np.zeros(shape, dtype=np.float64)
        u[0, 1:-1] = 1.0  # bottom exit band
        self.u0 = u

    def cell_of(self, x, y):
        col = int(math.floor(x * self.res)) + 1
        row = int(math.floor(y * self.res)) + 1
        return row, col

    def s_of_col(self, col):
        return (col - 1 + 0.5) / self.res

    def solve(self, tolerance=1e-10):
        u = self.u0.copy()
        relax_roles(u, self.role, tolerance, omega=1.9)
        absorbing = np.zeros_like(self.role, dtype=bool)
        absorbing[0, 1:-1] = True
        blocked = self.role == _FIXED
        blocked &= ~absorbing
        field = ScalarField(1.0 / self.res, 0, u, blocked, absorbing)
        # extent is meaningless for the offset strip layout; keep raw arrays.
        return field


def strip_exit_samples(y_start, x_start=math.pi / 2, walks=10_000, res=64,
                       height=None, seed=0, return_start=False):
    """Exit abscissas of `walks` conditioned walks from (x_start, y_start).

    The conditioning field is solved on the rasterized strip; walks step with
    probability proportional to the field and stop on the bottom band.  With
    return_start=True also returns the start cell center (the exact point the
    lattice walks leave from).
    """
    from . import rng as _rng

    if height is None:
        height = y_start + 6.0
    dom = StripDomain(res, height)
    field = dom.solve()
    row, col = dom.cell_of(x_start, y_start)
    if not (0 < row <= dom.nrow and 0 < col <= dom.ncol):
        raise GeometryError("start point outside the simulated strip")
    states = _rng.walk_states(seed, _rng.TAG_WALK, 0, walks)
    hazard = np.zeros_like(field.absorbing)
    exit_i, exit_j, _ = _h_walk_exits(
        field.values, field.absorbing, hazard, row, col, states,
        max_steps=500 * dom.nrow * dom.ncol,
    )
    if np.any(exit_i < 0):
        raise StepBudgetExceeded("some conditioned strip walks did not exit")
    samples = (exit_j - 1 + 0.5) / res
    if return_start:
        start = ((col - 1 + 0.5) / res, (row - 1 + 0.5) / res)
        return samples, start
    return samples


def strip_bin_predictions(start, res, edges):
    """Conditional bin masses predicted by the series on the lattice support.

    The walk exits at cell centers, and bins hold unequal numbers of cells
    (the strip is pi cells wide times res), so the prediction aggregates the
    density over the actual centers falling in each bin.
    """
    sx, sy = start
    ncol = int(round(math.pi * res))
    centers = (np.arange(ncol) + 0.5) / res
    dens = np.array([strip_exit_density(complex(sx, sy), s) for s in centers])
    weights = dens / dens.sum()
    nbins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, centers, side="right") - 1, 0,
                  nbins - 1)
    return np.bincount(idx, weights=weights, minlength=nbins)


def strip_unconditioned_bottom_fraction(y_start, x_start=math.pi / 2,
                                        walks=10_000, res=64, height=None,
                                        seed=0):
    """Fraction of plain lattice walks from z that leave the strip through
    the bottom (Monte Carlo mate of strip_bottom_exit_probability)."""
    from . import rng as _rng

    if height is None:
        height = y_start + 6.0
    dom = StripDomain(res, height)
    shape = dom.role.shape
    values = np.ones(shape)  # uniform field: unconditioned walk
    absorbing = dom.role == _FIXED  # every wall absorbs
    bottom = np.zeros(shape, dtype=bool)
    bottom[0, 1:-1] = True
    row, col = dom.cell_of(x_start, y_start)
    states = _rng.walk_states(seed, _rng.TAG_WALK, 1, walks)
    hazard = np.zeros(shape, dtype=bool)
    exit_i, exit_j, _ = _h_walk_exits(
        values, absorbing, hazard, row, col, states,
        max_steps=500 * dom.nrow * dom.ncol,
    )
    ok = exit_i >= 0
    if not np.all(ok):
        raise StepBudgetExceeded("some strip walks did not exit")
    return float(np.mean(bottom[exit_i, exit_j]))


# ---------------------------------------------------------------------------
# File formats

_FIELD_MAGIC = b"BLF1"
_MASK_MAGIC = b"BLM1"


def save_field(field, path):
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<if", 0, 0))  # reserved
        fh.write(struct.pack("<id", field.extent, field.cell_size))
        fh.write(field.values.astype("<f8").tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FIELD_MAGIC:
            raise ValueError("not a field file")
        fh.read(8)
        extent, cell_size = struct.unpack("<id", fh.read(12))
        side = 2 * extent + 1
        vals = np.frombuffer(fh.read(side * side * 8), dtype="<f8")
    vals = vals.reshape(side, side)
    zeros = np.zeros_like(vals, dtype=bool)
    return ScalarField(cell_size, extent, vals, zeros, zeros)


def save_mask(mask, path):
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack("<id", mask.extent, mask.cell_size))
        fh.write(np.packbits(mask.occupied).tobytes())


def load_mask(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MASK_MAGIC:
            raise ValueError("not a mask file")
        extent, cell_size = struct.unpack("<id", fh.read(12))
        side = 2 * extent + 1
        bits = np.frombuffer(fh.read(), dtype=np.uint8)
    occ = np.unpackbits(bits, count=side * side).reshape(side, side).astype(bool)
    return LatticeMask(cell_size, extent, occ)


def to_pgm(obj, path):
    """Grayscale dump for eyeballing masks and fields."""
    if isinstance(obj, LatticeMask):
        img = np.where(obj.occupied, 0, 255).astype(np.uint8)
    else:
        img = np.clip(obj.values * 255.0, 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode())
        fh.write(img.tobytes())

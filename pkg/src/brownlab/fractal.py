"""Frontier and pioneer-point extraction with box-counting dimensions.

The frontier of a sausage is the set of occupied cells seen from the
unbounded outside; pioneer cells are the walk's cells that were on the
frontier when first laid down (checked at segment-end times, which only
undercounts).  Dimensions come from least-squares slopes of dyadic box
counts.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import grid as _grid
from . import paths as _paths
from . import rng as _rng
from .errors import EstimateError
from .exponents import ExponentFit, ols_line


@dataclass(frozen=True)
class CellSet:
    """Sorted integer cell pairs on a centered grid."""

    cell_size: float
    extent: int
    cells: np.ndarray  # (m, 2) int64, lexicographically sorted

    @staticmethod
    def from_cells(cells, cell_size, extent):
        arr = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if arr.size and np.max(np.abs(arr)) > extent:
            raise ValueError("cells outside extent")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = np.unique(arr[order], axis=0)
        arr.setflags(write=False)
        return CellSet(float(cell_size), int(extent), arr)

    def __len__(self):
        return self.cells.shape[0]

    def to_bool_grid(self):
        side = 2 * self.extent + 1
        g = np.zeros((side, side), dtype=bool)
        if len(self):
            g[self.cells[:, 0] + self.extent, self.cells[:, 1] + self.extent] = True
        return g

    def contains(self, other):
        """Set inclusion of another CellSet on the same grid."""
        mine = set(map(tuple, self.cells))
        return all(tuple(c) in mine for c in other.cells)


@dataclass
class BoxCountTable:
    """Occupied dyadic box counts; sizes in cells, ascending powers of two."""

    box_sizes: list
    counts: list

    def __post_init__(self):
        sizes = list(self.box_sizes)
        if sizes != sorted(sizes):
            raise ValueError("box sizes must be ascending")
        counts = list(self.counts)
        for a, b in zip(counts, counts[1:]):
            if b > a:
                raise ValueError("counts must be non-increasing in box size")
        for a, b in zip(counts, counts[1:]):
            if a > 4 * b:
                raise ValueError("dyadic counts must satisfy N(s) <= 4 N(2s)")


def frontier_cells(mask):
    """Occupied cells 4-adjacent to the outside region."""
    if not np.any(mask.occupied):
        raise ValueError("mask is empty")
    labels = _grid.flood_outside(mask)
    outside = labels.labels == _grid.OUTSIDE
    occ = mask.occupied
    near = np.zeros_like(occ)
    near[1:, :] |= outside[:-1, :]
    near[:-1, :] |= outside[1:, :]
    near[:, 1:] |= outside[:, :-1]
    near[:, :-1] |= outside[:, 1:]
    sel = occ & near
    idx = np.argwhere(sel) - mask.extent
    return CellSet.from_cells(idx, mask.cell_size, mask.extent)


@njit(cache=True)
def _uf_find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@njit(cache=True)
def _reverse_enclosure_times(fv, side, big):
    """Forward time up to which each cell's free region reaches the border.

    fv[z] is the first-visit step of cell z (`big` = never visited).  The
    sausage only grows, so in reverse time the complement only merges:
    activate cells in decreasing first-visit order with a union-find, and
    stamp every cell of a component the moment it links to the border node.
    enc[z] is then the largest forward step at which z is free and connected
    to the outside (-1 if never).
    """
    n = side * side
    out_node = n
    parent = np.arange(n + 1, dtype=np.int64)
    head = np.full(n + 1, -1, dtype=np.int64)   # unstamped chain per root
    tail = np.full(n + 1, -1, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    enc = np.full(n, -2, dtype=np.int64)        # -2: not yet activated
    order = np.argsort(-fv, kind="mergesort")
    pos = 0
    while pos < n:
        a = fv[order[pos]]
        tau = a - 1  # forward time represented once this group is active
        grp_end = pos
        while grp_end < n and fv[order[grp_end]] == a:
            grp_end += 1
        for q in range(pos, grp_end):
            z = order[q]
            enc[z] = -1
            head[z] = z
            tail[z] = z
            i = z // side
            j = z % side
            if i == 0 or i == side - 1 or j == 0 or j == side - 1:
                _uf_link(parent, head, tail, nxt, z, out_node)
            if i > 0 and enc[z - side] != -2:
                _uf_link(parent, head, tail, nxt, z, z - side)
            if i < side - 1 and enc[z + side] != -2:
                _uf_link(parent, head, tail, nxt, z, z + side)
            if j > 0 and enc[z - 1] != -2:
                _uf_link(parent, head, tail, nxt, z, z - 1)
            if j < side - 1 and enc[z + 1] != -2:
                _uf_link(parent, head, tail, nxt, z, z + 1)
        # stamp everything that just became border-connected
        r_out = _uf_find(parent, out_node)
        w = head[r_out]
        while w != -1:
            enc[w] = tau
            w2 = nxt[w]
            nxt[w] = -1
            w = w2
        head[r_out] = -1
        tail[r_out] = -1
        pos = grp_end
    return enc


@njit(cache=True, inline="always")
def _uf_link(parent, head, tail, nxt, a, b):
    ra = _uf_find(parent, a)
    rb = _uf_find(parent, b)
    if ra == rb:
        return
    # keep the border node as its own root so stamping stays anchored there
    if rb == parent.shape[0] - 1:
        ra, rb = rb, ra
    parent[rb] = ra
    if head[rb] != -1:
        if head[ra] == -1:
            head[ra] = head[rb]
            tail[ra] = tail[rb]
        else:
            nxt[tail[ra]] = head[rb]
            tail[ra] = tail[rb]
        head[rb] = -1
        tail[rb] = -1


@njit(cache=True, inline="always")
def _fv_stamp(fv, i, j, step):
    side = fv.shape[0]
    if 0 <= i < side and 0 <= j < side and step < fv[i, j]:
        fv[i, j] = step


@njit(cache=True)
def _first_visit_polyline(fv, pts, inv_cell, extent):
    """Stamp each supercover cell with the index of the first segment that
    covers it (same traversal rule as the plain supercover)."""
    n = pts.shape[0]
    for seg in range(n - 1):
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
        _fv_stamp(fv, ip + extent, jp + extent, seg)
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
                        _fv_stamp(fv, i + extent, jp + extent, seg)
                    elif ty < tx - 1e-12:
                        _fv_stamp(fv, ip + extent, j + extent, seg)
                    else:
                        _fv_stamp(fv, i + extent, jp + extent, seg)
                        _fv_stamp(fv, ip + extent, j + extent, seg)
                _fv_stamp(fv, i + extent, j + extent, seg)
            ip = i
            jp = j
            xp = x
            yp = y


def first_visit_grid(path, cell_size, extent):
    """First-visit segment index per cell of the path's supercover (a large
    sentinel marks never-visited cells)."""
    pts = path.points
    side = 2 * extent + 1
    big = np.int64(1) << 60
    if np.max(np.abs(pts)) > extent * cell_size:
        raise _grid.GeometryError("walk leaves the grid")
    fv = np.full((side, side), big, dtype=np.int64)
    _first_visit_polyline(fv, pts, 1.0 / cell_size, extent)
    return fv, big


def pioneer_cells(path, checkpoints, cell_size, extent):
    """Walk cells lying on the frontier of the sausage at their own time.

    A cell first visited at step t is pioneer when some neighbor is free and
    connected to the unbounded outside at the test time; `checkpoints` sets
    the test times (the end of the enclosing checkpoint segment, matching
    per-checkpoint frontier recomputation exactly), and checkpoints=0 tests
    at the laying step itself.  Growth of the sausage is monotone, so the
    whole family is computed in one reverse-time union-find sweep; finer
    checkpointing only enlarges the set.
    """
    pts = path.points
    n = pts.shape[0]
    if checkpoints != 0 and checkpoints < 2:
        raise ValueError("checkpoints must be >= 2 (or 0 for own-time tests)")
    fv, big = first_visit_grid(path, cell_size, extent)
    side = 2 * extent + 1
    enc = _reverse_enclosure_times(fv.ravel(), side, big).reshape(side, side)
    if checkpoints:
        cuts = np.linspace(0, n - 1, checkpoints + 1).astype(np.int64)
        test = np.full((side, side), -1, dtype=np.int64)
        visited = fv < big
        seg_of = np.clip(np.searchsorted(cuts, fv[visited], side="right") - 1,
                         0, checkpoints - 1)
        # test after the last segment of the enclosing checkpoint window
        test[visited] = cuts[seg_of + 1] - 1
    else:
        test = fv.copy()
        test[fv >= big] = -1
    visited = fv < big
    pio = np.zeros((side, side), dtype=bool)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        # neighbor value at (i+di, j+dj)
        nb_fv = np.roll(fv, (-di, -dj), axis=(0, 1))
        nb_enc = np.roll(enc, (-di, -dj), axis=(0, 1))
        ok = visited & (nb_fv > test) & (nb_enc >= test)
        # roll wraps the border; walk cells never abut the grid edge
        if di == 1:
            ok[-1, :] = False
        elif di == -1:
            ok[0, :] = False
        if dj == 1:
            ok[:, -1] = False
        elif dj == -1:
            ok[:, 0] = False
        pio |= ok
    idx = np.argwhere(pio) - extent
    return CellSet.from_cells(idx, cell_size, extent)


def box_count(cells, sizes):
    """Number of boxes (anchored at cell index 0) containing a member cell."""
    sizes = [int(s) for s in sizes]
    for s in sizes:
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError("box sizes must be powers of two")
        if s > 2 * cells.extent + 1:
            raise ValueError("box size exceeds the grid")
    pts = cells.cells
    stride = 2 * cells.extent + 3
    counts = []
    for s in sorted(sizes):
        if pts.shape[0] == 0:
            counts.append(0)
            continue
        ids = (pts[:, 0] // s) * stride + (pts[:, 1] // s)
        counts.append(int(np.unique(ids).size))
    return BoxCountTable(box_sizes=sorted(sizes), counts=counts)


def fit_dimension(table, discard_extremes=2):
    """Box-counting dimension: negative slope of log counts against log box
    size after discarding the stated number of extreme scales on each end."""
    sizes = np.array(table.box_sizes, dtype=np.float64)
    counts = np.array(table.counts, dtype=np.float64)
    if discard_extremes > 0:
        sizes = sizes[discard_extremes:-discard_extremes or None]
        counts = counts[discard_extremes:-discard_extremes or None]
    if sizes.size < 4:
        raise EstimateError("fewer than 4 usable scales after discards")
    if np.any(counts <= 0):
        raise EstimateError("empty boxes at some scale; cannot take logs")
    x = np.log2(sizes)
    y = np.log2(counts)
    slope, intercept, stderr = ols_line(x, y)
    return ExponentFit(
        scales=[int(s) for s in sizes],
        log_means=[float(v) for v in y],
        slope=slope,
        intercept=intercept,
        stderr=stderr,
        samples_per_scale=1,
    )


def sample_walk(steps, rng_stream, step_size=1.0):
    """Gaussian walk of `steps` increments from the origin."""
    g = _rng.stream(_rng.seed_from(rng_stream), _rng.TAG_WALK, 0)
    inc = g.normal(0.0, step_size, size=(steps, 2))
    pts = np.vstack([[0.0, 0.0], np.cumsum(inc, axis=0)])
    return _paths.PlanarPath(pts, step_size)


def grid_matched_to(path, grid_cells=2048):
    """Cell size such that the path diameter is about a third of the grid.

    Returns (cell_size, extent) with 2*extent+1 ~ grid_cells.
    """
    extent = grid_cells // 2
    pts = path.points
    span = max(
        float(pts[:, 0].max() - pts[:, 0].min()),
        float(pts[:, 1].max() - pts[:, 1].min()),
    )
    center_reach = float(np.max(np.abs(pts)))
    cell = max(3.0 * span, 2.2 * center_reach) / (2 * extent)
    return cell, extent


def default_box_sizes(extent):
    sizes = []
    s = 1
    while s <= extent:
        sizes.append(s)
        s *= 2
    return sizes


@dataclass
class DimensionRun:
    fit: ExponentFit
    table: BoxCountTable
    cells: int
    meta: dict


def frontier_dimension_run(steps, grid_cells, rng_stream, discard_extremes=2):
    """Sample a walk, extract its frontier, and fit the dimension."""
    path = sample_walk(steps, rng_stream)
    cell, extent = grid_matched_to(path, grid_cells)
    mask = _grid.rasterize([path.points], cell, extent)
    front = frontier_cells(mask)
    table = box_count(front, span_box_sizes(front))
    fit = fit_dimension(table, discard_extremes)
    return DimensionRun(fit=fit, table=table, cells=len(front),
                        meta={"steps": steps, "grid": 2 * extent + 1,
                              "kind": "frontier"})


def span_box_sizes(cells):
    """Dyadic box sizes up to the span of the set (larger boxes carry no
    scaling information)."""
    pts = cells.cells
    if pts.shape[0] == 0:
        return [1]
    span = max(
        int(pts[:, 0].max() - pts[:, 0].min()) + 1,
        int(pts[:, 1].max() - pts[:, 1].min()) + 1,
    )
    sizes = []
    s = 1
    while s <= max(span, 1) and s <= cells.extent:
        sizes.append(s)
        s *= 2
    return sizes


def pioneer_dimension_run(steps, grid_cells, checkpoints, rng_stream,
                          discard_extremes=2):
    """Sample a walk and fit the dimension of its pioneer cells."""
    path = sample_walk(steps, rng_stream)
    cell, extent = grid_matched_to(path, grid_cells)
    pio = pioneer_cells(path, checkpoints, cell, extent)
    table = box_count(pio, span_box_sizes(pio))
    fit = fit_dimension(table, discard_extremes)
    return DimensionRun(fit=fit, table=table, cells=len(pio),
                        meta={"steps": steps, "grid": 2 * extent + 1,
                              "checkpoints": checkpoints, "kind": "pioneer"})


def write_boxcount_csv(table, path):
    """CSV schema: box_size,count."""
    with open(path, "w") as fh:
        fh.write("box_size,count\n")
        for s, c in zip(table.box_sizes, table.counts):
            fh.write(f"{s},{c}\n")


def write_dimension_json(fit, path, window=None):
    payload = {
        "dimension": -fit.slope,
        "stderr": fit.stderr,
        "window": window if window is not None else fit.scales,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_cellset_csv(cells, path):
    """Sorted cell-index pairs."""
    with open(path, "w") as fh:
        fh.write("ix,iy\n")
        for i, j in cells.cells:
            fh.write(f"{i},{j}\n")

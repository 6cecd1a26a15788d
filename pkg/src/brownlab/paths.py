"""Planar Brownian path sampling and geometric analysis.

Paths are polylines with independent centered Gaussian coordinate increments
(standard deviation `step_size` per coordinate per step).  No time variable is
tracked; every operation here is about the range of the path.
"""

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import StepBudgetExceeded


@dataclass(frozen=True)
class Point2:
    """A point of the plane."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("Point2 coordinates must be finite")

    def norm(self):
        return math.hypot(self.x, self.y)


def as_xy(point):
    """Coerce a Point2, complex, or (x, y) pair to a float tuple."""
    if isinstance(point, Point2):
        return (point.x, point.y)
    if isinstance(point, complex):
        return (point.real, point.imag)
    x, y = point
    return (float(x), float(y))


class PlanarPath:
    """Polyline approximation of a Brownian trajectory.

    points: (n, 2) float array, immutable once constructed.
    step_size: per-step standard deviation of each coordinate increment;
        consecutive points may be at most 8*step_size apart.
    """

    __slots__ = ("points", "step_size", "_crossing_cache")

    def __init__(self, points, step_size):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must be an (n, 2) array")
        if pts.shape[0] < 2:
            raise ValueError("a path needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("path coordinates must be finite")
        if step_size <= 0:
            raise ValueError("step_size must be positive")
        jumps = np.hypot(*(np.diff(pts, axis=0).T))
        if jumps.size and float(jumps.max()) > 8.0 * step_size:
            raise ValueError(
                f"increment {float(jumps.max()):.6g} exceeds 8*step_size "
                f"({8.0 * step_size:.6g})"
            )
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "step_size", float(step_size))
        object.__setattr__(self, "_crossing_cache", {})

    def __setattr__(self, name, value):
        raise AttributeError("PlanarPath is immutable")

    def __len__(self):
        return self.points.shape[0]

    def norms(self):
        return np.hypot(self.points[:, 0], self.points[:, 1])

    def first_index_at_or_beyond(self, radius):
        """First index with |point| >= radius, or None; cached per radius."""
        cache = self._crossing_cache
        if radius not in cache:
            hits = np.nonzero(self.norms() >= radius)[0]
            cache[radius] = int(hits[0]) if hits.size else None
        return cache[radius]

    @property
    def crossing_cache(self):
        return dict(self._crossing_cache)


@dataclass(frozen=True)
class TailArc:
    """Arc of `parent` from its first entry into the disk of radius e^-m."""

    parent: PlanarPath
    start_index: int
    m: float

    def points(self):
        return self.parent.points[self.start_index:]


def run_to_radius(start, radius, step_size, rng, max_steps=None):
    """Sample a Gaussian-increment walk from `start`, stopped at the circle.

    The returned path ends at the first sampled point with norm >= radius;
    every earlier point has norm < radius.  No interpolation of the crossing
    is attempted, so the overshoot is at most one increment.
    """
    x0, y0 = as_xy(start)
    r0 = math.hypot(x0, y0)
    if radius <= r0:
        raise ValueError("radius must exceed |start|")
    if not 0.0 < step_size <= radius / 20.0:
        raise ValueError("step_size must lie in (0, radius/20]")
    if max_steps is None:
        expected = (radius * radius - r0 * r0) / (2.0 * step_size * step_size)
        max_steps = int(64 * expected) + 4096

    chunks = [np.array([[x0, y0]])]
    pos = np.array([x0, y0])
    taken = 0
    block = 256
    while True:
        if taken >= max_steps:
            raise StepBudgetExceeded(
                f"no crossing of radius {radius:g} within {max_steps} steps"
            )
        block = min(block, max_steps - taken)
        steps = rng.normal(0.0, step_size, size=(block, 2))
        pts = pos + np.cumsum(steps, axis=0)
        norms = np.hypot(pts[:, 0], pts[:, 1])
        hit = np.nonzero(norms >= radius)[0]
        if hit.size:
            chunks.append(pts[: hit[0] + 1])
            break
        chunks.append(pts)
        pos = pts[-1]
        taken += block
        block = min(2 * block, 1 << 16)
    return PlanarPath(np.concatenate(chunks, axis=0), step_size)


def run_batch_to_radius(starts, radius, step_size, rng, max_steps=None):
    """Vectorized stopped walks: final positions and step counts only.

    starts: (n, 2) array.  Returns (exits (n, 2), steps (n,)).
    """
    pos = np.array(starts, dtype=np.float64)
    n = pos.shape[0]
    r0 = np.hypot(pos[:, 0], pos[:, 1])
    if np.any(radius <= r0):
        raise ValueError("radius must exceed every |start|")
    if not 0.0 < step_size <= radius / 20.0:
        raise ValueError("step_size must lie in (0, radius/20]")
    if max_steps is None:
        expected = (radius * radius) / (2.0 * step_size * step_size)
        max_steps = int(256 * expected) + 4096

    exits = np.zeros_like(pos)
    counts = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    taken = 0
    while active.size:
        if taken >= max_steps:
            raise StepBudgetExceeded(
                f"{active.size} walks unfinished after {max_steps} steps"
            )
        pos[active] += rng.normal(0.0, step_size, size=(active.size, 2))
        taken += 1
        done = np.hypot(pos[active, 0], pos[active, 1]) >= radius
        if np.any(done):
            idx = active[done]
            exits[idx] = pos[idx]
            counts[idx] = taken
            active = active[~done]
    return exits, counts


def tail_after_radius(path, m):
    """Tail arc after the first entry of the closed disk of radius e^-m.

    Returns None when the path never reaches that disk (a no-crossing result,
    not an error).  A path started at the origin has index 0 inside every
    disk, so its tail is the whole path.
    """
    if m < 0:
        raise ValueError("m must be nonnegative")
    r = math.exp(-m)
    inside = np.nonzero(path.norms() <= r)[0]
    if not inside.size:
        return None
    return TailArc(parent=path, start_index=int(inside[0]), m=float(m))


def _first_circle_hit(norms, r):
    """First index where the path crosses the circle of radius r.

    A path starting inside hits the circle at its first point with norm >= r;
    a path starting outside hits it at its first point with norm <= r.
    Returns None if the circle is never reached.
    """
    if norms[0] < r:
        hits = np.nonzero(norms >= r)[0]
    else:
        hits = np.nonzero(norms <= r)[0]
    return int(hits[0]) if hits.size else None


def has_downcrossing(path, k, j):
    """True iff the arc after first hitting the circle of radius e^-k
    touches the closed disk of radius e^-j (k < j, so e^-j is inner)."""
    if not k < j:
        raise ValueError("need k < j")
    norms = path.norms()
    i0 = _first_circle_hit(norms, math.exp(-k))
    if i0 is None:
        return False
    return bool(np.any(norms[i0:] <= math.exp(-j)))


def in_Y_m(config, m):
    """Downcrossing-free regularity test for a path pair.

    True iff neither path of the pair has a downcrossing from e^-k to
    e^-(k + m/12) for any k on the grid {0, 1/12, ..., 11m/12}.  The
    continuum range of k is discretized to multiples of 1/12; crossings at
    intermediate k are implied within one grid unit.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if hasattr(config, "alpha"):
        pair = (config.alpha, config.beta)
    else:
        pair = tuple(config)
    gap = m / 12.0
    ks = [i / 12.0 for i in range(11 * m + 1)]
    for path in pair:
        norms = path.norms()
        for k in ks:
            i0 = _first_circle_hit(norms, math.exp(-k))
            if i0 is None:
                continue
            if np.any(norms[i0:] <= math.exp(-(k + gap))):
                return False
    return True


def rescale(path, factor):
    """Multiply every point and the step size by `factor`."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    return PlanarPath(path.points * factor, path.step_size * factor)


def path_distance(a, b):
    """Discrete Frechet distance between two polylines.

    A computable surrogate for the reparameterization metric; used only by
    regression tooling, never inside estimators.
    """
    pa, pb = a.points, b.points
    na, nb = len(pa), len(pb)
    d = np.hypot(
        pa[:, 0, None] - pb[None, :, 0], pa[:, 1, None] - pb[None, :, 1]
    )
    row = np.empty(nb)
    row[0] = d[0, 0]
    for jj in range(1, nb):
        row[jj] = max(row[jj - 1], d[0, jj])
    for ii in range(1, na):
        prev = row.copy()
        row[0] = max(prev[0], d[ii, 0])
        for jj in range(1, nb):
            row[jj] = max(min(prev[jj], prev[jj - 1], row[jj - 1]), d[ii, jj])
    return float(row[-1])


def to_binary(path):
    """Flat little-endian record: u64 count, then count (f64, f64) pairs."""
    buf = io.BytesIO()
    pts = path.points
    buf.write(struct.pack("<Q", pts.shape[0]))
    buf.write(pts.astype("<f8").tobytes())
    return buf.getvalue()


def from_binary(data, step_size):
    (count,) = struct.unpack_from("<Q", data, 0)
    pts = np.frombuffer(data, dtype="<f8", count=2 * count, offset=8)
    return PlanarPath(pts.reshape(count, 2), step_size)


def to_csv(path, stream_or_path):
    """x,y per row, for debugging."""
    close = False
    if isinstance(stream_or_path, (str, bytes)) or hasattr(stream_or_path, "__fspath__"):
        fh = open(stream_or_path, "w")
        close = True
    else:
        fh = stream_or_path
    try:
        for x, y in path.points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    finally:
        if close:
            fh.close()

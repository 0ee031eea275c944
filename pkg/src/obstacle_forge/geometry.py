"""2D computational geometry: convex hull, hull rasterization, minimum-area
enclosing rectangle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain. Returns hull vertices counter-clockwise,
    without collinear points. Works for float or integer input (integer
    input keeps exact arithmetic)."""
    pts = np.asarray(points)
    if len(pts) == 0:
        return pts.reshape(0, 2)
    pts = np.unique(pts.reshape(-1, 2), axis=0)  # lexicographic sort + dedup
    if len(pts) <= 2:
        return pts
    P = [tuple(p) for p in pts.tolist()]
    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(P):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=pts.dtype)


def fill_convex_polygon(hull: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize a convex polygon given in integer (col, row) coordinates.

    A pixel (row, col) is set when the point (col, row) lies inside or on the
    polygon. Integer arithmetic only, so the result is exactly mirror
    symmetric.
    """
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    hull = np.asarray(hull, dtype=np.int64)
    if len(hull) == 0:
        return out
    if len(hull) == 1:
        c, r = hull[0]
        if 0 <= r < h and 0 <= c < w:
            out[r, c] = True
        return out
    rmin, rmax = int(hull[:, 1].min()), int(hull[:, 1].max())
    rows = np.arange(rmin, rmax + 1)
    lo = np.full(len(rows), np.iinfo(np.int64).max)
    hi = np.full(len(rows), np.iinfo(np.int64).min)
    n = len(hull)
    for i in range(n):
        (x1, y1), (x2, y2) = hull[i], hull[(i + 1) % n]
        if y1 == y2:
            sel = rows == y1
            lo[sel] = np.minimum(lo[sel], min(x1, x2))
            hi[sel] = np.maximum(hi[sel], max(x1, x2))
            continue
        ya, yb = min(y1, y2), max(y1, y2)
        sel = (rows >= ya) & (rows <= yb)
        r = rows[sel]
        # x = x1 + (r - y1) (x2 - x1) / (y2 - y1), as an exact rational
        num = x1 * (y2 - y1) + (r - y1) * (x2 - x1)
        den = y2 - y1
        if den < 0:
            num, den = -num, -den
        fl = num // den
        ce = -((-num) // den)
        lo[sel] = np.minimum(lo[sel], ce)
        hi[sel] = np.maximum(hi[sel], fl)
    for r, a, b in zip(rows, lo, hi):
        if a <= b and 0 <= r < h:
            out[r, max(a, 0):min(b, w - 1) + 1] = True
    return out


@dataclass
class Rectangle:
    center: np.ndarray  # (2,)
    length: float  # along `direction`
    width: float
    direction: np.ndarray  # unit vector of the length axis

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def angle(self) -> float:
        return float(np.arctan2(self.direction[1], self.direction[0]))

    def corners(self) -> np.ndarray:
        d = self.direction
        n = np.array([-d[1], d[0]])
        hl, hw = self.length / 2, self.width / 2
        return np.array([self.center + sl * hl * d + sw * hw * n for sl, sw in ((1, 1), (-1, 1), (-1, -1), (1, -1))])


def _rect_for_edge(d, lo_d, hi_d, lo_n, hi_n):
    n = np.array([-d[1], d[0]])
    cd, cn = (lo_d + hi_d) / 2, (lo_n + hi_n) / 2
    return Rectangle(cd * d + cn * n, hi_d - lo_d, hi_n - lo_n, d)


def min_area_rectangle(hull: np.ndarray) -> Rectangle:
    """Minimum-area enclosing rectangle of a CCW convex polygon by rotating
    calipers. One side of the optimum is collinear with a hull edge.

    Vertex projections of a convex polygon onto any direction are cyclically
    unimodal, so each caliper climbs to its extreme from where it stopped
    for the previous edge: amortized O(h). Climbing both ways keeps the
    extremes exact even for edges too short to fix a direction precisely.
    """
    hull = np.asarray(hull, dtype=np.float64)
    n = len(hull)
    if n < 3:
        raise ValueError("need a non-degenerate convex polygon")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    dirs = edges / lengths[:, None]
    # ties (parallel or tiny edges) must not park a caliper short of the extreme
    tol = 8 * np.finfo(float).eps * float(np.abs(hull).max())

    def far(j, vec):
        best, best_val = j, hull[j] @ vec
        for step in (1, -1):
            k, val = j, hull[j] @ vec
            for _ in range(n - 1):
                nk = (k + step) % n
                nv = hull[nk] @ vec
                if nv < val - tol:
                    break
                k, val = nk, max(val, nv)
                if nv > best_val:
                    best, best_val = nk, nv
        return best

    i_max = i_top = i_min = i_bot = 0
    best, best_area = None, np.inf
    for e in range(n):
        d = dirs[e]
        nv = np.array([-d[1], d[0]])
        i_max = far(i_max, d)
        i_top = far(i_top, nv)
        i_min = far(i_min, -d)
        i_bot = far(e, -nv)
        lo_d, hi_d = hull[i_min] @ d, hull[i_max] @ d
        lo_n, hi_n = hull[i_bot] @ nv, hull[i_top] @ nv
        area = (hi_d - lo_d) * (hi_n - lo_n)
        if area < best_area * (1 - 1e-12):
            best_area = area
            best = _rect_for_edge(d, lo_d, hi_d, lo_n, hi_n)
    return best

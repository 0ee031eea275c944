"""Ground segmentation, road world model and on-road anomaly detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import PointCloud, unique_rows


@dataclass
class GroundSplit:
    ground_indices: np.ndarray
    nonground_indices: np.ndarray

    @classmethod
    def from_mask(cls, is_ground: np.ndarray) -> GroundSplit:
        return cls(np.flatnonzero(is_ground), np.flatnonzero(~is_ground))


def _fit_planes(points, inv, n_tiles, *, iterations, inlier_m, max_tilt_deg, rng, seed_band=None):
    """Vectorized RANSAC: one plane hypothesis per tile per iteration, all
    tiles at once. Returns (normal (T,3), offset (T,), valid (T,)).

    Hypotheses are drawn from each tile's lowest ``seed_band`` metres only,
    so the top face of an obstacle cannot outvote the road beneath it;
    scoring uses every point."""
    counts = np.bincount(inv, minlength=n_tiles)
    eligible = np.ones(len(points), dtype=bool)
    if seed_band is not None:
        zmin = np.full(n_tiles, np.inf)
        np.minimum.at(zmin, inv, points[:, 2])
        eligible = points[:, 2] <= zmin[inv] + seed_band
    seed_counts = np.bincount(inv[eligible], minlength=n_tiles)
    order = np.flatnonzero(eligible)[np.argsort(inv[eligible], kind="stable")]
    starts = np.concatenate([[0], np.cumsum(seed_counts)[:-1]])
    cos_tilt = np.cos(np.deg2rad(max_tilt_deg))
    best_score = np.full(n_tiles, -1)
    best_n = np.zeros((n_tiles, 3))
    best_d = np.zeros(n_tiles)
    safe = np.maximum(seed_counts, 1)
    px, py, pz = (np.ascontiguousarray(points[:, k]) for k in range(3))
    for _ in range(iterations):
        picks = [points[order[starts + (rng.random(n_tiles) * safe).astype(np.int64).clip(0, safe - 1)]]
                 for _ in range(3)]
        n = np.cross(picks[1] - picks[0], picks[2] - picks[0])
        norm = np.linalg.norm(n, axis=1)
        ok = (norm > 1e-9) & (counts >= 3) & (seed_counts >= 3)
        n = n / np.where(norm > 0, norm, 1.0)[:, None]
        n *= np.where(n[:, 2] < 0, -1.0, 1.0)[:, None]
        ok &= n[:, 2] >= cos_tilt
        d = -np.sum(n * picks[0], axis=1)
        dist = np.abs(px * n[inv, 0] + py * n[inv, 1] + pz * n[inv, 2] + d[inv])
        score = np.bincount(inv[dist <= inlier_m], minlength=n_tiles)
        score[~ok] = -1
        better = score > best_score
        best_score[better], best_n[better], best_d[better] = score[better], n[better], d[better]
    valid = best_score >= 3
    return best_n, best_d, valid


def tile_index(xy, tile_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Dense 0..T-1 tile index per point and the (T, 2) integer tile keys."""
    keys = np.floor(np.asarray(xy)[:, :2] / tile_m).astype(np.int64)
    tiles, _, inv = unique_rows(keys)
    return inv, tiles


def _plane_z(normal, offset, xy):
    return -(normal[..., 0] * xy[..., 0] + normal[..., 1] * xy[..., 1] + offset) / normal[..., 2]


_CORNERS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def _neighbour_consensus(tiles, normal, offset, valid, tile_m, max_step_m):
    """Replace planes that disagree with their 8-neighbourhood.

    Each neighbour's plane is evaluated at the tile centre and the lower
    median one is the reference. When the tile's own plane departs from
    the reference by more than ``max_step_m`` at any tile corner (a plane
    resting on an obstacle, or tilted across one), or the tile has no
    plane, the reference plane is adopted. Returns updated
    (normal, offset, valid).
    """
    lo = tiles.min(axis=0) - 1
    shape = tuple(tiles.max(axis=0) - lo + 2)
    grid = np.full(shape, -1, dtype=np.int64)
    gi, gj = (tiles - lo).T
    grid[gi, gj] = np.arange(len(tiles))
    centres = (tiles + 0.5) * tile_m
    nbs, zs = [], []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = grid[gi + di, gj + dj]
            ok = nb >= 0
            ok[ok] &= valid[nb[ok]]
            z = np.full(len(tiles), np.nan)
            z[ok] = _plane_z(normal[nb[ok]], offset[nb[ok]], centres[ok])
            nbs.append(np.where(ok, nb, -1))
            zs.append(z)
    nbs = np.stack(nbs, axis=1)
    zs = np.stack(zs, axis=1)
    n_ok = np.sum(np.isfinite(zs), axis=1)
    corners = (tiles[:, None, :] + _CORNERS[None]) * tile_m  # (T, 4, 2)
    normal_out, offset_out, valid_out = normal.copy(), offset.copy(), valid.copy()
    for t in np.flatnonzero(n_ok > 0):
        z = zs[t]
        ok = np.flatnonzero(np.isfinite(z))
        srt = ok[np.argsort(z[ok], kind="stable")]
        src = nbs[t, srt[(len(srt) - 1) // 2]]  # lower median
        if valid[t]:
            own = _plane_z(normal[t], offset[t], corners[t])
            ref = _plane_z(normal[src], offset[src], corners[t])
            if np.max(np.abs(own - ref)) <= max_step_m:
                continue
        normal_out[t], offset_out[t] = normal[src], offset[src]
        valid_out[t] = True
    return normal_out, offset_out, valid_out


def _refine(points, inv, n_tiles, normal, offset, valid, inlier_m, max_tilt_deg):
    """Least-squares z = a + b x + c y over each tile's inliers."""
    dist = np.abs(np.sum(points * normal[inv], axis=1) + offset[inv])
    w = ((dist <= inlier_m) & valid[inv]).astype(np.float64)
    x, y, z = points.T
    cnt = np.bincount(inv, w, n_tiles)
    mx = np.bincount(inv, w * x, n_tiles) / np.maximum(cnt, 1)
    my = np.bincount(inv, w * y, n_tiles) / np.maximum(cnt, 1)
    dx, dy = x - mx[inv], y - my[inv]
    s = lambda v: np.bincount(inv, w * v, n_tiles)  # noqa: E731
    a = np.stack([np.stack([s(dx * dx), s(dx * dy)], -1), np.stack([s(dx * dy), s(dy * dy)], -1)], 1)
    rhs = np.stack([s(dx * z), s(dy * z)], -1)
    det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] ** 2
    good = valid & (cnt >= 3) & (det > 1e-12 * np.maximum(1.0, a[:, 0, 0] * a[:, 1, 1]))
    bc = np.zeros((n_tiles, 2))
    if good.any():
        bc[good] = np.linalg.solve(a[good], rhs[good][..., None])[..., 0]
    mz = np.bincount(inv, w * z, n_tiles) / np.maximum(cnt, 1)
    n_new = np.column_stack([-bc[:, 0], -bc[:, 1], np.ones(n_tiles)])
    n_new /= np.linalg.norm(n_new, axis=1, keepdims=True)
    good &= n_new[:, 2] >= np.cos(np.deg2rad(max_tilt_deg))
    d_new = -(n_new[:, 0] * mx + n_new[:, 1] * my + n_new[:, 2] * mz)
    normal, offset = normal.copy(), offset.copy()
    normal[good], offset[good] = n_new[good], d_new[good]
    return normal, offset


def segment_ground(cloud, tile_m: float = 5.0, inlier_m: float = 0.20, max_tilt_deg: float = 15.0,
                   iterations: int = 30, seed: int = 0, max_step_m: float = 0.5) -> GroundSplit:
    """Tiled RANSAC ground segmentation in the ego frame.

    Tiles with fewer than 3 points are nonground. A tile plane whose height
    disagrees with its neighbours by more than ``max_step_m`` (typically a
    tile holding only an obstacle) takes a neighbour's plane instead; tiles
    with no usable neighbour and no admissible plane fall back to a plane
    fitted over the whole cloud.
    """
    pts = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("segment_ground needs a nonempty cloud")
    rng = np.random.default_rng(seed)
    inv, tiles = tile_index(pts, tile_m)
    n_tiles = len(tiles)
    counts = np.bincount(inv, minlength=n_tiles)
    band = inlier_m + 0.5 * tile_m * np.tan(np.deg2rad(max_tilt_deg))
    kw = dict(iterations=iterations, inlier_m=inlier_m, max_tilt_deg=max_tilt_deg, seed_band=band)
    normal, offset, valid = _fit_planes(pts, inv, n_tiles, rng=rng, **kw)
    normal, offset = _refine(pts, inv, n_tiles, normal, offset, valid, inlier_m, max_tilt_deg)
    normal, offset, valid = _neighbour_consensus(tiles, normal, offset, valid, tile_m, max_step_m)
    fallback = ~valid & (counts >= 3)
    if fallback.any():
        zero = np.zeros(n, dtype=np.int64)
        gn, gd, gv = _fit_planes(pts, zero, 1, rng=rng, **kw)
        if gv[0]:
            gn, gd = _refine(pts, zero, 1, gn, gd, gv, inlier_m, max_tilt_deg)
            normal[fallback], offset[fallback] = gn[0], gd[0]
            valid = valid | fallback
    dist = np.abs(np.sum(pts * normal[inv], axis=1) + offset[inv])
    is_ground = (dist <= inlier_m) & valid[inv] & (counts[inv] >= 3)
    return GroundSplit.from_mask(is_ground)


# -- road world model ------------------------------------------------------

@dataclass
class RoadWorldModel:
    """World-frame grid of accumulated road points."""

    cell_m: float = 0.5
    _chunks: list = field(default_factory=list, repr=False)
    _frames: list = field(default_factory=list, repr=False)
    _cache: tuple | None = field(default=None, repr=False)

    def add(self, points_world, frame_index: int) -> None:
        pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
        if len(pts):
            self._chunks.append(pts)
            self._frames.append(np.full(len(pts), frame_index, dtype=np.int32))
            self._cache = None

    @property
    def points(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.zeros((0, 3))

    @property
    def frames(self) -> np.ndarray:
        return np.concatenate(self._frames) if self._frames else np.zeros(0, dtype=np.int32)

    def __len__(self) -> int:
        return sum(len(c) for c in self._chunks)

    def cell_of(self, xy) -> np.ndarray:
        return np.floor(np.asarray(xy, dtype=np.float64)[..., :2] / self.cell_m).astype(np.int64)

    def cell_counts(self) -> dict[tuple[int, int], int]:
        keys, _, inv = unique_rows(self.cell_of(self.points))
        counts = np.bincount(inv, minlength=len(keys))
        return {tuple(k): int(c) for k, c in zip(keys.tolist(), counts)}

    def occupancy(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense boolean occupancy grid and the cell index of its [0, 0]."""
        if self._cache is None:
            cells = self.cell_of(self.points)
            if len(cells) == 0:
                self._cache = (np.zeros((0, 0), dtype=bool), np.zeros(2, dtype=np.int64))
            else:
                lo = cells.min(axis=0)
                shape = cells.max(axis=0) - lo + 1
                occ = np.zeros(shape, dtype=bool)
                occ[cells[:, 0] - lo[0], cells[:, 1] - lo[1]] = True
                self._cache = (occ, lo)
        return self._cache

    def in_road(self, xy, margin_m: float = 0.0) -> np.ndarray:
        """Whether each (x, y) lies within ``margin_m`` of an occupied cell."""
        occ, lo = self.occupancy()
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        if occ.size == 0:
            return np.zeros(len(xy), dtype=bool)
        r = int(np.ceil(margin_m / self.cell_m))
        if r > 0:
            # pad first: the margin reaches past the occupied bounding box
            occ = np.pad(occ, r)
            lo = lo - r
            yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
            occ = ndimage.binary_dilation(occ, structure=(xx**2 + yy**2) <= r * r)
        c = self.cell_of(xy) - lo
        inside = (c[:, 0] >= 0) & (c[:, 1] >= 0) & (c[:, 0] < occ.shape[0]) & (c[:, 1] < occ.shape[1])
        out = np.zeros(len(xy), dtype=bool)
        out[inside] = occ[c[inside, 0], c[inside, 1]]
        return out


def accumulate(model: RoadWorldModel, ground_points_world, in_road_mask, frame_index: int = 0) -> RoadWorldModel:
    """Add the ground points whose projection fell on a road mask."""
    pts = np.asarray(ground_points_world, dtype=np.float64).reshape(-1, 3)
    keep = np.asarray(in_road_mask, dtype=bool).reshape(len(pts))
    model.add(pts[keep], frame_index)
    return model


# -- anomalies -------------------------------------------------------------

@dataclass
class AnomalyCluster:
    cells: np.ndarray  # (m, 2) integer cell indices
    points: np.ndarray  # world-frame points inside those cells
    frames: np.ndarray  # sorted frame indices that contributed points

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def _phi(dx, dy):
    return np.stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy], axis=-1)


def _shift_matrix(dx: float, dy: float) -> np.ndarray:
    """A such that phi(x + dx, y + dy) = A @ phi(x, y)."""
    return np.array([
        [1, 0, 0, 0, 0, 0],
        [dx, 1, 0, 0, 0, 0],
        [dy, 0, 1, 0, 0, 0],
        [dx * dx, 2 * dx, 0, 1, 0, 0],
        [dx * dy, dy, dx, 0, 1, 0],
        [dy * dy, 0, 2 * dy, 0, 0, 1],
    ], dtype=np.float64)


def fit_cell_surfaces(points, cell_m: float, radius: int = 2, weights=None):
    """Least-squares quadratic z(x, y) per occupied cell over its
    (2r+1) x (2r+1) neighbourhood, in coordinates local to the cell centre.

    Returns (cells (m,2), coefficients (m,6), fitted (m,) bool, point cell
    index (n,)). Neighbourhood moments are summed by shifting per-cell
    moment grids, so the cost is linear in the number of points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    cells_all = np.floor(pts[:, :2] / cell_m).astype(np.int64)
    cells, _, pidx = unique_rows(cells_all)
    m = len(cells)
    centers = (cells + 0.5) * cell_m
    local = pts[:, :2] - centers[pidx]
    phi = _phi(local[:, 0], local[:, 1])
    mom = np.zeros((m, 6, 6))
    rhs = np.zeros((m, 6))
    cnt = np.bincount(pidx, w, m)
    for i in range(6):
        rhs[:, i] = np.bincount(pidx, w * phi[:, i] * pts[:, 2], m)
        for j in range(i, 6):
            mom[:, i, j] = mom[:, j, i] = np.bincount(pidx, w * phi[:, i] * phi[:, j], m)
    lo = cells.min(axis=0) - radius
    shape = tuple(cells.max(axis=0) - lo + radius + 1)
    gi, gj = (cells - lo).T
    g_mom = np.zeros(shape + (6, 6))
    g_rhs = np.zeros(shape + (6,))
    g_cnt = np.zeros(shape)
    g_mom[gi, gj], g_rhs[gi, gj], g_cnt[gi, gj] = mom, rhs, cnt
    n_mom = np.zeros((m, 6, 6))
    n_rhs = np.zeros((m, 6))
    n_cnt = np.zeros(m)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            a = _shift_matrix(di * cell_m, dj * cell_m)
            sm, sr = g_mom[gi + di, gj + dj], g_rhs[gi + di, gj + dj]
            n_mom += a @ sm @ a.T
            n_rhs += sr @ a.T
            n_cnt += g_cnt[gi + di, gj + dj]
    fitted = n_cnt >= 6
    coef = np.zeros((m, 6))
    if fitted.any():
        ev = np.linalg.eigvalsh(n_mom[fitted])
        ok = ev[:, 0] > 1e-10 * np.maximum(ev[:, -1], 1e-300)
        idx = np.flatnonzero(fitted)
        fitted[idx[~ok]] = False
        idx = idx[ok]
        if len(idx):
            coef[idx] = np.linalg.solve(n_mom[idx], n_rhs[idx][..., None])[..., 0]
    return cells, coef, fitted, pidx, phi


def cell_residuals(points, cell_m: float, radius: int = 2, trim_iterations: int = 0,
                   trim_m: float | None = None):
    """Per-cell mean |residual| of the cell's own points against its
    neighbourhood surface. Optional trimming refits the surfaces after
    dropping points whose residual exceeds ``trim_m``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = None
    for it in range(trim_iterations + 1):
        cells, coef, fitted, pidx, phi = fit_cell_surfaces(pts, cell_m, radius, w)
        res = pts[:, 2] - np.sum(phi * coef[pidx], axis=1)
        if it < trim_iterations and trim_m is not None:
            w = (np.abs(res) <= trim_m).astype(np.float64)
    m = len(cells)
    mean_abs = np.bincount(pidx, np.abs(res), m) / np.maximum(np.bincount(pidx, None, m), 1)
    return cells, mean_abs, fitted, pidx, res


def detect_anomalies(model: RoadWorldModel | np.ndarray, residual_threshold: float = 0.15, min_cells: int = 2,
                     cell_m: float | None = None, radius: int = 2, trim_m: float = 0.10,
                     trim_iterations: int = 5, frames: np.ndarray | None = None) -> list[AnomalyCluster]:
    """Cells whose points deviate from the local quadratic road surface.

    The surface of each cell is a least-squares quadratic over its 5 x 5
    cell neighbourhood. Points deviating by more than ``trim_m`` are
    trimmed and the surfaces refit, so that an object covering a good part
    of a neighbourhood does not drag the road surface up with it. The trim
    does not depend on the threshold, which keeps the anomalous set
    monotone in ``residual_threshold``. Cells
    whose own points deviate on average by more than ``residual_threshold``
    are anomalous; 4-connected groups of at least ``min_cells`` cells are
    returned.
    """
    if isinstance(model, RoadWorldModel):
        pts, frames, cell_m = model.points, model.frames, model.cell_m
    else:
        pts = np.asarray(model, dtype=np.float64).reshape(-1, 3)
        cell_m = cell_m or 0.5
        frames = np.zeros(len(pts), dtype=np.int32) if frames is None else np.asarray(frames)
    if len(pts) == 0:
        return []
    cells, mean_abs, fitted, pidx, _ = cell_residuals(pts, cell_m, radius, trim_iterations, trim_m)
    bad = fitted & (mean_abs > residual_threshold)
    if not bad.any():
        return []
    lo = cells[bad].min(axis=0)
    shape = tuple(cells[bad].max(axis=0) - lo + 1)
    grid = np.zeros(shape, dtype=bool)
    bc = cells[bad] - lo
    grid[bc[:, 0], bc[:, 1]] = True
    labels, n = ndimage.label(grid, structure=ndimage.generate_binary_structure(2, 1))
    cell_label = np.zeros(len(cells), dtype=np.int64)
    cell_label[bad] = labels[bc[:, 0], bc[:, 1]]
    point_label = cell_label[pidx]
    out = []
    for k in range(1, n + 1):
        members = np.flatnonzero(cell_label == k)
        if len(members) < min_cells:
            continue
        sel = point_label == k
        out.append(AnomalyCluster(cells[members], pts[sel], np.unique(frames[sel])))
    return out

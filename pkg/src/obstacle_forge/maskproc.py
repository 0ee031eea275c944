"""Road masks to obstacle candidate masks, and the naive depth baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Projection
from .geometry import convex_hull, fill_convex_polygon

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class ObstacleMask2D:
    camera_id: int
    frame_index: int
    rows: np.ndarray
    cols: np.ndarray
    shape: tuple[int, int]

    @property
    def area(self) -> int:
        return len(self.rows)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(u_min, v_min, u_max, v_max), inclusive."""
        return int(self.cols.min()), int(self.rows.min()), int(self.cols.max()), int(self.rows.max())

    @property
    def pixel_set(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def to_array(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def contains(self, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        h, w = self.shape
        keys = np.sort(self.rows.astype(np.int64) * w + self.cols)
        q = rows.astype(np.int64) * w + cols
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; ties go to the first in raster order."""
    labels, n = ndimage.label(binary, structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def boundary_pixels(region: np.ndarray) -> np.ndarray:
    """(col, row) integer coordinates of region pixels with a 4-neighbour
    outside the region."""
    interior = ndimage.binary_erosion(region, structure=FOUR_CONNECTED, border_value=0)
    r, c = np.nonzero(region & ~interior)
    return np.stack([c, r], axis=1)


def road_hull(road: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest road component and its filled convex hull."""
    region = largest_component(np.asarray(road) > 0)
    if not region.any():
        return region, region.copy()
    hull = convex_hull(boundary_pixels(region).astype(np.int64))
    return region, fill_convex_polygon(hull, region.shape) | region


def components_to_masks(binary: np.ndarray, camera_id=0, frame_index=0) -> list[ObstacleMask2D]:
    labels, n = ndimage.label(binary, structure=FOUR_CONNECTED)
    out = []
    for sl_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        rr, cc = np.nonzero(labels[sl] == sl_idx)
        out.append(ObstacleMask2D(camera_id, frame_index, rr + sl[0].start, cc + sl[1].start, binary.shape))
    return out


def extract_obstacle_candidates(road, min_area: int = 9, max_area: int | None = None,
                                camera_id: int = 0, frame_index: int = 0) -> list[ObstacleMask2D]:
    """Obstacle candidates as the gaps between the road mask and its convex hull.

    Components of (hull \\ road) touching the left, right or bottom image
    border are roadside, not obstacles. The top border is allowed so that
    objects near the horizon, which notch the road's far edge, survive.
    """
    road = np.asarray(getattr(road, "pixels", road))
    h, w = road.shape
    if max_area is None:
        max_area = int(0.25 * w * h)
    region, hull = road_hull(road)
    gaps = hull & ~region
    out = []
    for m in components_to_masks(gaps, camera_id, frame_index):
        if not (min_area <= m.area <= max_area):
            continue
        u0, _, u1, v1 = m.bbox
        if u0 == 0 or u1 == w - 1 or v1 == h - 1:
            continue
        out.append(m)
    return out


def naive_depth(mask: ObstacleMask2D, projected: Projection) -> tuple[float, int] | None:
    """Mean depth of the projected points landing on the mask, with support
    count; None without any LiDAR return on the mask."""
    if len(projected) == 0:
        return None
    rows, cols = projected.pixels()
    inside = mask.contains(rows, cols)
    support = int(inside.sum())
    if support == 0:
        return None
    # fsum keeps the mean independent of input order
    return math.fsum(projected.depth[inside].tolist()) / support, support

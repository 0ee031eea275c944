"""Mask/cluster association, entity resolution, cuboid fitting, kinematics
and box emission."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterSet
from .core import Box3D, Projection, RigidTransform, wrap_angle
from .geometry import convex_hull, min_area_rectangle
from .maskproc import ObstacleMask2D
from .track import GENERAL_LABELS, SOURCES, Observation, Track

PRIORITY = {s: i for i, s in enumerate(SOURCES)}  # lower is stronger


def mask_to_clusters(obstacle_masks: list[ObstacleMask2D], clusters: ClusterSet,
                     projections: dict[int, Projection], overlap_frac: float = 0.5) -> list[int]:
    """Clusters with at least ``overlap_frac`` of their in-view projected
    points inside a single obstacle mask of some camera."""
    tagged = set()
    by_cam: dict[int, list[ObstacleMask2D]] = {}
    for m in obstacle_masks:
        by_cam.setdefault(m.camera_id, []).append(m)
    for cam, proj in sorted(projections.items()):
        masks = by_cam.get(cam)
        if not masks or len(proj) == 0:
            continue
        lab = clusters.labels[proj.index]
        keep = lab >= 0
        if not keep.any():
            continue
        ids = np.zeros(masks[0].shape, dtype=np.int64)
        for k, m in enumerate(masks, start=1):
            ids[m.rows, m.cols] = k
        rows, cols = proj.pixels()
        hit = ids[rows[keep], cols[keep]]
        lab = lab[keep]
        in_view = np.bincount(lab, minlength=clusters.k)
        pair = np.zeros((clusters.k, len(masks) + 1), dtype=np.int64)
        np.add.at(pair, (lab, hit), 1)
        best = pair[:, 1:].max(axis=1)
        ok = (in_view > 0) & (best >= overlap_frac * in_view)
        tagged.update(np.flatnonzero(ok).tolist())
    return sorted(tagged)


# -- entity resolution --------------------------------------------------------

def _centroids(t: Track) -> dict[int, np.ndarray]:
    return {o.frame_index: o.centroid for o in t.observations}


def _should_merge(a: Track, b: Track, merge_dist: float) -> bool:
    ca, cb = _centroids(a), _centroids(b)
    common = sorted(set(ca) & set(cb))
    if not common:
        return False
    return max(float(np.linalg.norm(ca[f] - cb[f])) for f in common) < merge_dist


def _rank(t: Track) -> tuple[int, int]:
    return PRIORITY[t.source], t.id


def merge_tracks(members: list[Track]) -> Track:
    """Union of a duplicate group; attributes follow source priority."""
    members = sorted(members, key=_rank)
    head = members[0]
    out = Track(min(t.id for t in members), source=head.source, class_label=head.class_label)
    # per frame, the strongest member's observation wins
    obs: dict[int, Observation] = {}
    for t in members:
        for o in t.observations:
            obs.setdefault(o.frame_index, o)
    out.observations = [obs[f] for f in sorted(obs)]
    for t in sorted(members, key=lambda t: t.id):
        out._chunks.extend(t._chunks)
        out._frames.extend(t._frames)
        out.votes.update(t.votes)
        out.n_projected += t.n_projected
    return out


def resolve_entities(tracks: list[Track], merge_dist: float = 1.0) -> list[Track]:
    """Merge tracks of one physical object found by different paths.

    Merging repeats until no pair qualifies, so the output is a fixed point
    (resolving it again changes nothing).
    """
    current = sorted(tracks, key=lambda t: t.id)
    while True:
        n = len(current)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        merged_any = False
        for i in range(n):
            for j in range(i + 1, n):
                if _should_merge(current[i], current[j], merge_dist):
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
                        merged_any = True
        if not merged_any:
            return current
        groups: dict[int, list[Track]] = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(current[i])
        current = sorted((g[0] if len(g) == 1 else merge_tracks(g) for g in groups.values()), key=lambda t: t.id)


# -- cuboids and kinematics ------------------------------------------------------

@dataclass
class Cuboid:
    center: np.ndarray  # (3,)
    w: float
    h: float
    l: float
    theta: float
    degenerate: bool = False


def fit_cuboid(points, min_extent: float = 0.05) -> Cuboid:
    """Minimum-area BEV rectangle of the hull; theta follows the longer side
    and is reported in (-pi/2, pi/2]. Degenerate inputs fall back to an
    axis-aligned box with theta = 0 and extents floored at ``min_extent``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("fit_cuboid needs points")
    z0, z1 = pts[:, 2].min(), pts[:, 2].max()
    h = max(z1 - z0, min_extent)
    hull = convex_hull(pts[:, :2]) if len(pts) >= 3 else pts[:, :2]
    if len(hull) < 3:
        lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
        ext = np.maximum(hi - lo, min_extent)
        c = np.array([*(lo + hi) / 2, (z0 + z1) / 2])
        l, w = (ext[0], ext[1]) if ext[0] >= ext[1] else (ext[1], ext[0])
        theta = 0.0 if ext[0] >= ext[1] else np.pi / 2
        return Cuboid(c, float(w), float(h), float(l), theta, True)
    rect = min_area_rectangle(hull)
    if rect.length >= rect.width:
        l, w, d = rect.length, rect.width, rect.direction
    else:
        l, w, d = rect.width, rect.length, np.array([-rect.direction[1], rect.direction[0]])
    theta = float(np.arctan2(d[1], d[0]))
    if theta <= -np.pi / 2:
        theta += np.pi
    elif theta > np.pi / 2:
        theta -= np.pi
    c = np.array([rect.center[0], rect.center[1], (z0 + z1) / 2])
    return Cuboid(c, float(max(w, min_extent)), float(h), float(max(l, min_extent)), theta)


def estimate_kinematics(times, positions) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and acceleration of BEV positions sampled at ``times``.

    Velocity: second-order central differences on the (possibly uneven)
    grid, one-sided at the ends. Acceleration: the three-point second
    difference, carried over to the end samples; exact for quadratic motion.
    """
    t = np.asarray(times, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64).reshape(len(t), -1)
    v = np.zeros_like(p)
    a = np.zeros_like(p)
    if len(t) >= 2:
        v = np.gradient(p, t, axis=0, edge_order=1)
    if len(t) >= 3:
        h1 = np.diff(t)[:-1, None]
        h2 = np.diff(t)[1:, None]
        inner = 2 * ((p[2:] - p[1:-1]) / h2 - (p[1:-1] - p[:-2]) / h1) / (h1 + h2)
        a[1:-1] = inner
        a[0], a[-1] = inner[0], inner[-1]
    return v, a


@dataclass
class TrackBoxes:
    track: Track
    cuboid: Cuboid
    centers: np.ndarray  # per observation
    v: np.ndarray
    a: np.ndarray


def supported_points(track: Track, voxel_m: float = 0.2, min_frames: int = 2) -> np.ndarray:
    """Aggregate points whose voxel was hit in at least ``min_frames``
    distinct frames.

    A surface keeps returning while the ego drives by; a stray blob that
    joined the cluster in one frame does not, and a minimum-area rectangle
    would otherwise stretch to enclose it. Falls back to every point when
    the track is too short or too little survives.
    """
    cloud = track.aggregated_cloud
    pts = cloud.xyz
    if min_frames <= 1 or track.lifetime < min_frames or len(pts) == 0:
        return pts
    keys = np.floor(pts / voxel_m).astype(np.int64)
    _, vox = np.unique(keys, axis=0, return_inverse=True)
    vox = vox.ravel()
    pairs = np.unique(np.column_stack([vox, cloud.timestamp.astype(np.int64)]), axis=0)
    n_frames = np.bincount(pairs[:, 0], minlength=vox.max() + 1)
    keep = n_frames[vox] >= min_frames
    return pts[keep] if keep.sum() >= 3 else pts


def pose_track(track: Track, min_extent: float = 0.05, support_voxel_m: float = 0.2,
               min_support_frames: int = 2) -> TrackBoxes:
    """Fit one amodal cuboid on the aggregate and place it in every observed
    frame through that observation's registration."""
    cub = fit_cuboid(supported_points(track, support_voxel_m, min_support_frames), min_extent)
    centers = np.stack([o.transform.inverse().apply(cub.center) for o in track.observations])
    times = np.array([o.time for o in track.observations])
    if track.source == "anomaly":
        v = a = np.zeros((len(times), 2))
    else:
        v, a = estimate_kinematics(times, centers[:, :2])
    return TrackBoxes(track, cub, centers, v, a)


def emit_boxes(tracks: list[Track], min_extent: float = 0.05, support_voxel_m: float = 0.2,
               min_support_frames: int = 2) -> list[Box3D]:
    """One box per surviving track per observed frame, world frame."""
    boxes = []
    for t in tracks:
        tb = pose_track(t, min_extent, support_voxel_m, min_support_frames)
        label = "obstacle" if t.class_label in GENERAL_LABELS else t.class_label
        for o, c, v, a in zip(t.observations, tb.centers, tb.v, tb.a):
            yaw = tb.cuboid.theta + np.arctan2(o.transform.rotation[0, 1], o.transform.rotation[0, 0])
            boxes.append(Box3D(float(c[0]), float(c[1]), float(c[2]), tb.cuboid.w, tb.cuboid.h, tb.cuboid.l,
                               float(wrap_angle(yaw)), (float(v[0]), float(v[1])), (float(a[0]), float(a[1])),
                               t.id, label, o.frame_index))
    boxes.sort(key=lambda b: (b.frame_index, b.id))
    return boxes


def anomaly_track(track_id: int, points, frames, times: dict[int, float]) -> Track:
    """A stationary track from an anomaly cluster: one observation per frame
    that contributed points, all at the cluster centroid."""
    pts = np.asarray(points, dtype=np.float64)
    c = pts.mean(axis=0)
    t = Track(track_id, source="anomaly", class_label="obstacle")
    for f in sorted(int(f) for f in frames):
        t.observations.append(Observation(f, times[f], c, np.zeros(0, dtype=np.int64), RigidTransform.identity()))
    t._chunks.append(pts)
    t._frames.append(np.full(len(pts), t.first_frame))
    t.votes = Counter()
    return t

"""Cluster association, track lifecycle, GICP aggregation, classification."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import f as f_dist

from .core import PointCloud, RigidTransform, unique_rows
from .register import GicpConfig, cost, estimate_covariances, gicp, information

SOURCES = ("instance", "obstacle_mask", "anomaly")
GENERAL_LABELS = ("unknown", "obstacle")


@dataclass
class Cluster:
    """One frame's cluster as seen by the tracker (world frame)."""

    points: np.ndarray
    indices: np.ndarray  # into the frame's cloud
    tagged: bool = False  # fell on an obstacle mask
    votes: Counter = field(default_factory=Counter)  # instance class -> projected points
    n_projected: int = 0  # projected points in view of any camera

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class Observation:
    frame_index: int
    time: float
    centroid: np.ndarray
    point_indices: np.ndarray
    transform: RigidTransform  # cluster (world) -> track aggregate frame
    low_confidence: bool = False
    tagged: bool = False


@dataclass
class Track:
    id: int
    observations: list[Observation] = field(default_factory=list)
    source: str = "instance"
    class_label: str = "unknown"
    misses: int = 0
    votes: Counter = field(default_factory=Counter)
    n_projected: int = 0
    _chunks: list[np.ndarray] = field(default_factory=list, repr=False)
    _frames: list[np.ndarray] = field(default_factory=list, repr=False)
    _target: tuple | None = field(default=None, repr=False)

    @property
    def first_frame(self) -> int:
        return self.observations[0].frame_index

    @property
    def last_frame(self) -> int:
        return self.observations[-1].frame_index

    @property
    def lifetime(self) -> int:
        return len(self.observations)

    @property
    def frames(self) -> list[int]:
        return [o.frame_index for o in self.observations]

    @property
    def aggregated_points(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.zeros((0, 3))

    @property
    def aggregated_cloud(self) -> PointCloud:
        pts = self.aggregated_points
        frames = np.concatenate(self._frames) if self._frames else np.zeros(0)
        return PointCloud(pts, np.zeros(len(pts)), frames.astype(np.float64), self.first_frame if self.observations else 1)

    def observation(self, frame_index: int) -> Observation | None:
        for o in self.observations:
            if o.frame_index == frame_index:
                return o
        return None

    def add(self, obs: Observation, aligned_points: np.ndarray) -> None:
        if self.observations and obs.frame_index <= self.last_frame:
            raise ValueError("observations must be strictly increasing in frame index")
        self.observations.append(obs)
        self._chunks.append(np.asarray(aligned_points, dtype=np.float64))
        self._frames.append(np.full(len(aligned_points), obs.frame_index))
        self._target = None

    def velocity(self, window: int = 10) -> np.ndarray:
        """Horizontal velocity: least-squares slope of the raw cluster
        centroids over the last ``window`` observations.

        Raw centroids, not registered positions, so a registration error
        cannot feed back into association.
        """
        obs = self.observations[-window:]
        return _slope([o.time for o in obs], [o.centroid for o in obs])

    def registered_velocity(self, window: int = 10) -> np.ndarray:
        """Horizontal slope of the registered positions.

        Used for the registration guess. A centroid creeps as the visible
        part of an object changes with the viewpoint, and integrating that
        creep frame after frame would smear the aggregate. Low-confidence
        observations are skipped: their positions are themselves
        extrapolated, and fitting to them would keep any error going.
        """
        obs = [o for o in self.observations if not o.low_confidence][-window:]
        return _slope([o.time for o in obs], [self.position(o) for o in obs])

    def predict_centroid(self, time: float) -> np.ndarray:
        """Constant-velocity extrapolation of the raw cluster centroid."""
        last = self.observations[-1]
        return last.centroid + self.velocity() * (time - last.time)

    def position(self, obs: Observation) -> np.ndarray:
        """Where the aggregate's reference point sits in the world at ``obs``."""
        return obs.transform.inverse().apply(self.observations[0].centroid)

    def predict_transform(self, time: float) -> RigidTransform:
        """Constant-velocity guess of the cluster -> aggregate transform."""
        last = self.observations[-1]
        shift = self.registered_velocity() * (time - last.time)
        # T(p) = T_last(p - shift)
        return RigidTransform(last.transform.rotation, last.transform.translation - last.transform.rotation @ shift)

    def gicp_target(self, config: GicpConfig, voxel_m: float):
        """Voxel-downsampled aggregate with its tree and covariances."""
        if self._target is None:
            pts = voxel_downsample(self.aggregated_points, voxel_m)
            if len(pts) < config.k_neighbors + 1:
                self._target = (pts, None, None)
            else:
                tree = cKDTree(pts)
                self._target = (pts, tree, estimate_covariances(pts, config.k_neighbors, config.cov_epsilon, tree))
        return self._target


def _slope(times, points) -> np.ndarray:
    if len(times) < 2:
        return np.zeros(3)
    t = np.asarray(times, dtype=np.float64)
    c = np.asarray(points, dtype=np.float64)
    tc = t - t.mean()
    den = float(tc @ tc)
    if den == 0:
        return np.zeros(3)
    v = tc @ (c - c.mean(axis=0)) / den
    return np.array([v[0], v[1], 0.0])


def voxel_downsample(points: np.ndarray, voxel_m: float) -> np.ndarray:
    """First point (in input order) of every occupied voxel."""
    if len(points) == 0:
        return points
    _, first, _ = unique_rows(np.floor(points / voxel_m).astype(np.int64))
    return points[np.sort(first)]


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (track id, cluster index)
    unmatched_tracks: list[int]
    unmatched_clusters: list[int]


def associate(tracks: list[Track], centroids, gate: float, time: float | None = None) -> Assignment:
    """Greedy global-minimum matching of predicted track centroids to
    cluster centroids; pairs at or beyond ``gate`` are never formed."""
    if gate <= 0:
        raise ValueError("gate must be positive")
    cents = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if not tracks or len(cents) == 0:
        return Assignment([], [t.id for t in tracks], list(range(len(cents))))
    preds = np.stack([t.predict_centroid(time) if time is not None else t.observations[-1].centroid
                      for t in tracks])
    d = np.linalg.norm(preds[:, None, :] - cents[None, :, :], axis=2)
    ids = np.array([t.id for t in tracks])
    ti, ci = np.nonzero(d < gate)
    order = np.lexsort((ci, ids[ti], d[ti, ci]))
    used_t, used_c, pairs = set(), set(), []
    for k in order:
        a, b = int(ti[k]), int(ci[k])
        if a in used_t or b in used_c:
            continue
        used_t.add(a)
        used_c.add(b)
        pairs.append((int(ids[a]), b))
    pairs.sort()
    return Assignment(pairs, [int(ids[i]) for i in range(len(tracks)) if i not in used_t],
                      [j for j in range(len(cents)) if j not in used_c])


@dataclass
class RegistrationGate:
    """How the tracker trusts a GICP result over its constant-velocity guess.

    Corrections below the ``min_*`` pair are treated as zero. Corrections
    above the ``max_*`` pair are implausible for one frame of an object on
    the road and fall back to the guess (flagged low-confidence). In
    between, a correction must pass an F-test at level ``alpha``.
    """

    voxel_m: float = 0.1
    min_correction_m: float = 0.01
    min_correction_rad: float = 0.002
    max_correction_m: float = 0.3
    max_correction_rad: float = 0.05
    max_tilt_rad: float = 0.02  # road objects neither roll nor pitch much
    alpha: float = 0.01
    min_normal_cos: float = 0.7  # about 45 deg


def _angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)))


def _register(track: Track, cluster: Cluster, time: float, gicp_config: GicpConfig,
              gate: RegistrationGate) -> tuple[RigidTransform, bool]:
    init = track.predict_transform(time)
    need = gicp_config.k_neighbors + 1
    tgt, tree, cov = track.gicp_target(gicp_config, gate.voxel_m)
    src = voxel_downsample(cluster.points, gate.voxel_m)
    if len(src) < need or tree is None:
        return RigidTransform.identity(), True
    src = _compatible(src, tgt, tree, cov, init, gicp_config, gate)
    if len(src) < need:
        # the view shows surfaces the aggregate does not have yet
        return init, True
    # beyond the largest plausible correction a neighbour is another surface
    cfg = replace(gicp_config, max_corr_dist=min(gicp_config.max_corr_dist, gate.max_correction_m))
    res = gicp(src, tgt, cfg, init, tree, cov)
    if res.failed:
        return RigidTransform.identity(), True
    c = cluster.centroid
    shift = float(np.linalg.norm(res.transform.apply(c) - init.apply(c)))
    rot = res.transform.rotation @ init.rotation.T
    angle = _angle(rot)
    if shift < gate.min_correction_m and angle < gate.min_correction_rad:
        # sub-noise corrections only add registration bias
        return init, False
    tilt = float(np.arccos(np.clip(rot[2, 2], -1.0, 1.0)))
    if shift > gate.max_correction_m or angle > gate.max_correction_rad or tilt > gate.max_tilt_rad:
        return init, True
    if not _significant(src, tgt, tree, cov, init, res.transform, cfg, gate.alpha):
        return init, False
    return res.transform, not res.converged


def _normals(cov: np.ndarray) -> np.ndarray:
    return np.linalg.eigh(cov)[1][:, :, 0]


def _compatible(src, tgt, tree, cov_t, init: RigidTransform, cfg: GicpConfig, gate: RegistrationGate) -> np.ndarray:
    """Source points whose surface, under ``init``, faces the same way as
    the aggregate surface nearest to them.

    A face seen for the first time (the side of an object the ego is
    passing) otherwise pairs with the edge of a face already aggregated
    and drags the track sideways.
    """
    dist, nn = tree.query(init.apply(src), distance_upper_bound=min(cfg.max_corr_dist, gate.max_correction_m))
    ok = np.isfinite(dist)
    if ok.sum() < cfg.k_neighbors + 1:
        return src[ok]
    n_s = _normals(estimate_covariances(src, cfg.k_neighbors, cfg.cov_epsilon)) @ init.rotation.T
    n_t = _normals(cov_t[nn[ok]])
    ok[ok] = np.abs(np.sum(n_s[ok] * n_t, axis=1)) >= gate.min_normal_cos
    return src[ok]


def _significant(src, tgt, tree, cov_t, init: RigidTransform, fitted: RigidTransform, cfg: GicpConfig,
                 alpha: float) -> bool:
    """F-test: does the fitted transform lower the GICP cost (same
    correspondences) by more than fitting six parameters to noise would?

    Partial, sparse views leave some directions barely constrained and
    GICP then slides along them; accepting such moves lets the aggregate
    drift and every later frame follows it.
    """
    dist, nn = tree.query(fitted.apply(src), distance_upper_bound=cfg.max_corr_dist)
    ok = np.isfinite(dist)
    n = int(ok.sum())
    if n <= 12:
        return False
    cov_s = estimate_covariances(src, cfg.k_neighbors, cfg.cov_epsilon)[ok]
    s, q = src[ok], tgt[nn[ok]]
    info = information(cov_s, cov_t[nn[ok]], fitted)
    c1 = cost(s, q, info, fitted)
    c0 = cost(s, q, info, init)
    if c1 <= 0:
        return c0 > 0
    f = ((c0 - c1) / 6) / (c1 / (n - 6))
    return bool(f > f_dist.ppf(1 - alpha, 6, n - 6))


def update_tracks(tracks: list[Track], assignment: Assignment, clusters: list[Cluster], frame_index: int,
                  time: float, gicp_config: GicpConfig, *, next_id: int, max_miss: int = 3,
                  gate: RegistrationGate | None = None) -> tuple[list[Track], list[Track], int]:
    """Apply one frame's assignment.

    Returns (active tracks, tracks terminated in this step, next free id).
    """
    gate = gate or RegistrationGate()
    by_id = {t.id: t for t in tracks}
    for tid, ci in assignment.pairs:
        t, c = by_id[tid], clusters[ci]
        tf, low = _register(t, c, time, gicp_config, gate)
        t.add(Observation(frame_index, time, c.centroid, c.indices, tf, low, c.tagged), tf.apply(c.points))
        t.votes.update(c.votes)
        t.n_projected += c.n_projected
        t.misses = 0
    active, ended = [], []
    for tid in assignment.unmatched_tracks:
        by_id[tid].misses += 1
    for t in tracks:
        (ended if t.misses > max_miss else active).append(t)
    for ci in assignment.unmatched_clusters:
        c = clusters[ci]
        t = Track(next_id)
        next_id += 1
        t.add(Observation(frame_index, time, c.centroid, c.indices, RigidTransform.identity(), False, c.tagged),
              c.points)
        t.votes.update(c.votes)
        t.n_projected += c.n_projected
        active.append(t)
    active.sort(key=lambda t: t.id)
    return active, ended, next_id


@dataclass
class Tracker:
    """Sequential owner of the track set."""

    gicp_config: GicpConfig = field(default_factory=GicpConfig)
    gate_m: float = 2.0
    max_miss: int = 3
    registration: RegistrationGate = field(default_factory=RegistrationGate)
    active: list[Track] = field(default_factory=list)
    finished: list[Track] = field(default_factory=list)
    next_id: int = 1

    def step(self, frame_index: int, time: float, clusters: list[Cluster], ego_speed: float = 0.0,
             dt: float = 0.0) -> Assignment:
        gate = self.gate_m + ego_speed * dt
        asg = associate(self.active, [c.centroid for c in clusters], gate, time)
        self.active, ended, self.next_id = update_tracks(
            self.active, asg, clusters, frame_index, time, self.gicp_config, next_id=self.next_id,
            max_miss=self.max_miss, gate=self.registration)
        self.finished.extend(ended)
        return asg

    def all_tracks(self) -> list[Track]:
        return sorted(self.finished + self.active, key=lambda t: t.id)


def classify_track(track: Track, threshold: float = 0.5) -> str:
    """Majority instance class when it covers at least ``threshold`` of the
    track's projected points, else "unknown"."""
    if track.n_projected == 0 or not track.votes:
        return "unknown"
    label, count = sorted(track.votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return label if count >= threshold * track.n_projected else "unknown"


def filter_candidates(tracks: list[Track], min_lifetime: int = 5, max_extent: float = 6.0,
                      road_region=None) -> list[Track]:
    """Drop unstable, oversized or off-road general-obstacle tracks.

    ``road_region`` maps an (n, 2) array of BEV points to booleans; None
    accepts everything. Closed-set tracks pass untouched.
    """
    out = []
    for t in tracks:
        if t.class_label not in GENERAL_LABELS:
            out.append(t)
            continue
        if t.lifetime < min_lifetime:
            continue
        pts = t.aggregated_points
        if len(pts) == 0 or np.any(pts.max(axis=0) - pts.min(axis=0) > max_extent):
            continue
        if road_region is not None and not bool(np.asarray(road_region(pts.mean(axis=0)[None, :2]))[0]):
            continue
        out.append(t)
    return out

"""Deterministic synthetic sequences: ray-cast LiDAR, perfect masks, GT boxes.

World: flat ground z = 0 with optional bump patches, a straight road of
width ``road_width`` centred on y = 0, and cuboid obstacles. The ego drives
along +x at constant speed. LiDAR and camera share an optical centre so the
masks and the point cloud see exactly the same occlusions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Box3D, CameraCalibration, PointCloud, PoseTrack, RigidTransform, wrap_angle
from .dataset import (LabelMask, SequenceManifest, lidar_path, mask_path, save_boxes, save_instance_classes,
                      save_mask, save_point_cloud, save_poses, write_calibration, write_manifest)

GENERAL_CLASS = "obstacle"
# ego -> camera rotation: camera x = -ego y, camera y = -ego z, camera z = ego x
EGO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class ObstacleSpec:
    position: tuple[float, float, float]  # cuboid centre, world frame, at t = 0
    extent: tuple[float, float, float]  # (length along yaw, width, height)
    yaw: float = 0.0
    reflectivity: float = 1.0
    cls: str = GENERAL_CLASS
    velocity: tuple[float, float] = (0.0, 0.0)

    def center_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        p = np.asarray(self.position, dtype=np.float64)
        v = np.array([self.velocity[0], self.velocity[1], 0.0])
        return p + t[..., None] * v


@dataclass
class BumpSpec:
    """Square patch, clipped-quadratic profile: a plateau of ``height`` with
    steep quadratic flanks. Negative height makes a hole."""

    center: tuple[float, float]
    half_size: float
    height: float
    steepness: float = 4.0

    def profile(self, x, y) -> np.ndarray:
        u = (np.asarray(x) - self.center[0]) / self.half_size
        v = (np.asarray(y) - self.center[1]) / self.half_size
        shape = np.clip((1 - u * u) * (1 - v * v) * self.steepness, 0.0, 1.0)
        inside = (np.abs(u) < 1) & (np.abs(v) < 1)
        return np.where(inside, self.height * shape, 0.0)


@dataclass
class SceneSpec:
    seed: int = 0
    duration: float = 15.0
    lidar_rate: float = 10.0
    ego_speed: float = 5.0
    road_width: float = 8.0
    obstacles: list[ObstacleSpec] = field(default_factory=list)
    beam_count: int = 64
    noise_sigma: float = 0.02
    max_range: float = 100.0
    bumps: list[BumpSpec] = field(default_factory=list)
    ego_start_x: float = 0.0
    azimuth_step_deg: float = 0.3
    lidar_hfov_deg: float = 360.0
    elevation_deg: tuple[float, float] = (-16.0, 2.0)
    sensor_height: float = 1.8
    sensor_forward: float = 1.0
    image_width: int = 384
    image_height: int = 216
    focal_px: float = 240.0
    road_mask_range: float = 150.0
    pose_rate: float = 100.0
    gt_range: float = 100.0

    def validate(self) -> None:
        if self.duration <= 0 or self.lidar_rate <= 0 or self.pose_rate <= 0:
            raise ValueError("duration and rates must be positive")
        if self.beam_count < 1 or self.azimuth_step_deg <= 0 or not 0 < self.lidar_hfov_deg <= 360:
            raise ValueError("invalid scan pattern")
        if self.noise_sigma < 0 or self.road_width <= 0 or self.max_range <= 0:
            raise ValueError("noise, road width and range must be non-negative / positive")
        if self.image_width < 1 or self.image_height < 1 or self.focal_px <= 0:
            raise ValueError("invalid camera")
        for ob in self.obstacles:
            if not all(e > 0 for e in ob.extent):
                raise ValueError("obstacle extents must be positive")
            if not 0.0 <= ob.reflectivity <= 1.0:
                raise ValueError("reflectivity must lie in [0, 1]")
        for b in self.bumps:
            if b.half_size <= 0:
                raise ValueError("bump half_size must be positive")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.lidar_rate))

    def frame_time(self, i: int) -> float:
        """Camera / frame timestamp of 1-based frame ``i``: mid-sweep."""
        return (i - 0.5) / self.lidar_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> SceneSpec:
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown scene keys: {sorted(extra)}")
        doc = dict(doc)
        doc["obstacles"] = [_build(ObstacleSpec, o) for o in doc.get("obstacles", [])]
        doc["bumps"] = [_build(BumpSpec, b) for b in doc.get("bumps", [])]
        for key in ("elevation_deg",):
            if key in doc:
                doc[key] = tuple(doc[key])
        spec = cls(**doc)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path) -> SceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(kind, doc: dict):
    known = {f.name for f in fields(kind)}
    extra = set(doc) - known
    if extra:
        raise ValueError(f"unknown {kind.__name__} keys: {sorted(extra)}")
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return kind(**doc)


# -- geometry ------------------------------------------------------------------

def ego_pose(spec: SceneSpec, t) -> np.ndarray:
    """Ego position in world at times ``t``; the heading is constant (+x)."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(t.shape + (3,))
    out[..., 0] = spec.ego_start_x + spec.ego_speed * t
    return out


def sensor_offset(spec: SceneSpec) -> np.ndarray:
    return np.array([spec.sensor_forward, 0.0, spec.sensor_height])


def _ray_boxes(origin, direction, t, spec: SceneSpec):
    """Nearest obstacle hit per ray: (distance, obstacle index or -1)."""
    n = len(direction)
    best = np.full(n, np.inf)
    who = np.full(n, -1, dtype=np.int64)
    for k, ob in enumerate(spec.obstacles):
        c = ob.center_at(t)
        half = np.asarray(ob.extent, dtype=np.float64) / 2
        rel = origin - c
        # cull with the bounding sphere before the slab test
        tc = -np.einsum("ij,ij->i", rel, direction)
        d2 = np.einsum("ij,ij->i", rel, rel) - tc * tc
        rad = float(np.linalg.norm(half))
        cand = np.flatnonzero((d2 <= rad * rad) & (tc > -rad))
        if len(cand) == 0:
            continue
        rel, dr = rel[cand], direction[cand]
        cy, sy = np.cos(ob.yaw), np.sin(ob.yaw)
        lo = np.stack([cy * rel[:, 0] + sy * rel[:, 1], -sy * rel[:, 0] + cy * rel[:, 1], rel[:, 2]], 1)
        ld = np.stack([cy * dr[:, 0] + sy * dr[:, 1], -sy * dr[:, 0] + cy * dr[:, 1], dr[:, 2]], 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-half - lo) * inv
            t2 = (half - lo) * inv
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        # parallel rays outside the slab never hit
        par = (ld == 0) & (np.abs(lo) > half)
        t_in = tmin.max(axis=1)
        t_out = tmax.min(axis=1)
        hit = (t_in <= t_out) & (t_in > 1e-9) & ~par.any(axis=1)
        closer = hit & (t_in < best[cand])
        best[cand[closer]] = t_in[closer]
        who[cand[closer]] = k
    return best, who


def terrain_height(spec: SceneSpec, x, y) -> np.ndarray:
    z = np.zeros(np.broadcast(x, y).shape)
    for b in spec.bumps:
        z = z + b.profile(x, y)
    return z


def _ray_terrain(origin, direction, spec: SceneSpec):
    """Distance to the ground surface (inf when the ray never reaches it)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(direction[:, 2] < 0, -origin[:, 2] / direction[:, 2], np.inf)
    for b in spec.bumps:
        lo = np.array([b.center[0] - b.half_size, b.center[1] - b.half_size, min(0.0, b.height)])
        hi = np.array([b.center[0] + b.half_size, b.center[1] + b.half_size, max(0.0, b.height)])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / direction
            t2 = (hi - origin) / direction
        t_in = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf).max(axis=1).clip(0)
        t_out = np.nan_to_num(np.maximum(t1, t2), nan=np.inf).min(axis=1)
        cand = np.flatnonzero((t_in <= t_out) & (t_in < tg + 1e-9))
        if len(cand) == 0:
            continue
        o, d = origin[cand], direction[cand]
        a, z = t_in[cand], np.minimum(t_out[cand], tg[cand])

        def f(tt):
            p = o + tt[:, None] * d
            return p[:, 2] - terrain_height(spec, p[:, 0], p[:, 1])

        samples = np.linspace(0.0, 1.0, 65)
        prev_t, prev_f = a.copy(), f(a)
        found = np.full(len(cand), np.inf)
        for s in samples[1:]:
            cur_t = a + s * (z - a)
            cur_f = f(cur_t)
            cross = np.isinf(found) & (prev_f > 0) & (cur_f <= 0)
            if cross.any():
                lo_t, hi_t = prev_t[cross].copy(), cur_t[cross].copy()
                oo, dd = o[cross], d[cross]
                for _ in range(40):
                    mid = (lo_t + hi_t) / 2
                    p = oo + mid[:, None] * dd
                    above = p[:, 2] - terrain_height(spec, p[:, 0], p[:, 1]) > 0
                    lo_t = np.where(above, mid, lo_t)
                    hi_t = np.where(above, hi_t, mid)
                found[cross] = hi_t
            prev_t, prev_f = cur_t, cur_f
        inside_foot = np.abs((o + tg[cand, None] * d)[:, :2] - np.asarray(b.center)).max(axis=1) < b.half_size
        # a hole: the flat-ground hit inside the footprint is not a surface
        tg_c = np.where(inside_foot & (b.height < 0) & np.isinf(found), np.inf, tg[cand])
        tg[cand] = np.minimum(found, tg_c)
    return tg


# -- LiDAR -----------------------------------------------------------------------

def beam_elevations(spec: SceneSpec) -> np.ndarray:
    lo, hi = spec.elevation_deg
    return np.deg2rad(np.linspace(lo, hi, spec.beam_count))


def azimuths(spec: SceneSpec) -> np.ndarray:
    step = spec.azimuth_step_deg
    n = int(np.floor(spec.lidar_hfov_deg / step + 1e-9))
    return np.deg2rad(-spec.lidar_hfov_deg / 2 + (np.arange(n) + 0.5) * step)


def _beam_rng(seed: int, frame: int, beam: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (frame << 16) | beam]))


def scan_frame(spec: SceneSpec, frame: int) -> PointCloud:
    """One sweep for 1-based ``frame``, points in the LiDAR frame."""
    az = azimuths(spec)
    el = beam_elevations(spec)
    t0 = (frame - 1) / spec.lidar_rate
    # rotation phase sets each azimuth's time within the sweep
    t_az = t0 + (az + np.pi) / (2 * np.pi) / spec.lidar_rate
    n_az = len(az)
    ce, se = np.cos(el), np.sin(el)
    dirs = np.stack([np.outer(ce, np.cos(az)), np.outer(ce, np.sin(az)), np.repeat(se[:, None], n_az, 1)], -1)
    dirs = dirs.reshape(-1, 3)
    times = np.tile(t_az, spec.beam_count)
    origin = ego_pose(spec, times) + sensor_offset(spec)
    t_ter = _ray_terrain(origin, dirs, spec)
    t_obs = np.full(len(dirs), np.inf)
    who = np.full(len(dirs), -1, dtype=np.int64)
    if spec.obstacles:
        # obstacles may move; intersect at each ray's own time
        uniq, inv = np.unique(times, return_inverse=True)
        movers = any(o.velocity[0] or o.velocity[1] for o in spec.obstacles)
        if movers:
            for k, tt in enumerate(uniq):
                sel = inv == k
                t_obs[sel], who[sel] = _ray_boxes(origin[sel], dirs[sel], tt, spec)
        else:
            t_obs, who = _ray_boxes(origin, dirs, 0.0, spec)
    on_obstacle = t_obs < t_ter
    rng_ = np.where(on_obstacle, t_obs, t_ter)
    refl = np.ones(len(dirs))
    if spec.obstacles:
        r_tab = np.array([o.reflectivity for o in spec.obstacles])
        refl = np.where(on_obstacle, r_tab[np.maximum(who, 0)], 1.0)
    keep_u = np.empty(len(dirs))
    noise = np.empty(len(dirs))
    for b in range(spec.beam_count):
        g = _beam_rng(spec.seed, frame, b)
        sl = slice(b * n_az, (b + 1) * n_az)
        keep_u[sl] = g.random(n_az)
        noise[sl] = g.standard_normal(n_az)
    valid = np.isfinite(rng_) & (rng_ <= spec.max_range) & (keep_u >= 1.0 - refl)
    idx = np.flatnonzero(valid)
    r = rng_[idx] + spec.noise_sigma * noise[idx]
    return PointCloud(dirs[idx] * r[:, None], refl[idx], times[idx], frame)


# -- camera / masks ----------------------------------------------------------------

def camera(spec: SceneSpec, camera_id: int = 0) -> CameraCalibration:
    # ego -> camera: rotate axes, origin at the LiDAR optical centre
    r = EGO_TO_CAM
    ext = RigidTransform(r, -r @ sensor_offset(spec))
    return CameraCalibration.from_pinhole(camera_id, spec.focal_px, spec.focal_px, spec.image_width / 2,
                                          spec.image_height / 2, spec.image_width, spec.image_height, ext)


def _pixel_rays(spec: SceneSpec, u, v):
    cal = camera(spec)
    d_cam = np.stack([(u - cal.cx) / cal.fx, (v - cal.cy) / cal.fy, np.ones_like(u)], -1).reshape(-1, 3)
    d = d_cam @ EGO_TO_CAM  # camera -> ego (R^T applied on the right)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def render_masks(spec: SceneSpec, frame: int) -> dict[str, np.ndarray]:
    """Road, instance and obstacle-candidate masks for one camera frame.

    A pixel belongs to an obstacle only when all four of its corner rays hit
    that obstacle; other pixels take the label of the ground behind them.
    """
    w, h = spec.image_width, spec.image_height
    t = spec.frame_time(frame)
    origin = ego_pose(spec, t) + sensor_offset(spec)
    vv, uu = np.mgrid[0:h + 1, 0:w + 1].astype(np.float64)
    corner_dirs = _pixel_rays(spec, uu, vv)
    o = np.broadcast_to(origin, corner_dirs.shape)
    if spec.obstacles:
        t_obs, who = _ray_boxes(o, corner_dirs, t, spec)
        t_ter = _ray_terrain(np.ascontiguousarray(o), corner_dirs, spec)
        who = np.where(t_obs < t_ter, who, -1).reshape(h + 1, w + 1)
    else:
        who = np.full((h + 1, w + 1), -1)
    c00, c01, c10, c11 = who[:-1, :-1], who[:-1, 1:], who[1:, :-1], who[1:, 1:]
    obstacle = np.where((c00 == c01) & (c00 == c10) & (c00 == c11), c00, -1)
    vc, uc = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    centre_dirs = _pixel_rays(spec, uc, vc)
    oc = np.broadcast_to(origin, centre_dirs.shape)
    t_g = _ray_terrain(np.ascontiguousarray(oc), centre_dirs, spec)
    gp = oc + t_g[:, None] * centre_dirs
    ahead = gp[:, 0] - origin[0]
    road = np.isfinite(t_g) & (np.abs(gp[:, 1]) <= spec.road_width / 2) & (ahead <= spec.road_mask_range)
    road = road.reshape(h, w) & (obstacle < 0)
    inst = np.zeros((h, w), dtype=np.uint16)
    cand = np.zeros((h, w), dtype=np.uint16)
    for k, ob in enumerate(spec.obstacles):
        sel = obstacle == k
        cand[sel] = k + 1
        if ob.cls != GENERAL_CLASS:
            inst[sel] = k + 1
    return {"road": road.astype(np.uint16), "instance": inst, "obstacle_candidate": cand}


# -- ground truth ---------------------------------------------------------------

def _fd(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    if len(values) < 2:
        return np.zeros_like(values)
    return np.gradient(values, times, axis=0, edge_order=1)


def ground_truth(spec: SceneSpec) -> list[Box3D]:
    times = np.array([spec.frame_time(i) for i in range(1, spec.n_frames + 1)])
    ego = ego_pose(spec, times)
    boxes = []
    for k, ob in enumerate(spec.obstacles):
        centers = ob.center_at(times)
        vel = _fd(centers[:, :2], times)
        acc = _fd(vel, times) if len(times) >= 3 else np.zeros_like(vel)
        l, w, h = ob.extent
        for i, (c, t) in enumerate(zip(centers, times)):
            if np.hypot(*(c[:2] - ego[i, :2])) > spec.gt_range:
                continue
            boxes.append(Box3D(float(c[0]), float(c[1]), float(c[2]), float(w), float(h), float(l),
                               float(wrap_angle(ob.yaw)), (float(vel[i, 0]), float(vel[i, 1])),
                               (float(acc[i, 0]), float(acc[i, 1])), k + 1, ob.cls, i + 1))
    boxes.sort(key=lambda b: (b.frame_index, b.id))
    return boxes


def poses(spec: SceneSpec) -> PoseTrack:
    n = int(round(spec.duration * spec.pose_rate))
    ts = np.linspace(0.0, spec.duration, n + 1)
    return PoseTrack(ts, [RigidTransform(np.eye(3), p) for p in ego_pose(spec, ts)])


def generate(spec: SceneSpec, out_path) -> SequenceManifest:
    """Write a complete sequence directory; deterministic in ``spec``."""
    spec.validate()
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    n = spec.n_frames
    manifest = SequenceManifest(f"synth-{spec.seed}", n, 1, [spec.frame_time(i) for i in range(1, n + 1)],
                                {"lidar": n, "mask_kinds": ["road", "instance", "obstacle_candidate"]})
    write_manifest(manifest, root)
    write_calibration([camera(spec)], RigidTransform(np.eye(3), sensor_offset(spec)), root)
    save_poses(poses(spec), root / "poses.csv")
    for i in range(1, n + 1):
        save_point_cloud(scan_frame(spec, i), lidar_path(root, i))
        for kind, px in render_masks(spec, i).items():
            save_mask(LabelMask(0, i, kind, px), mask_path(root, kind, 0, i))
    classes = {k + 1: ob.cls for k, ob in enumerate(spec.obstacles) if ob.cls != GENERAL_CLASS}
    save_instance_classes(classes, root / "masks" / "instances.csv")
    (root / "gt").mkdir(exist_ok=True)
    save_boxes(ground_truth(spec), root / "gt" / "boxes.csv")
    (root / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return manifest


def benchmark_scene(seed: int = 7, n_obstacles: int = 5) -> SceneSpec:
    """15 s at 10 Hz, general obstacles on the road within 60 m of the
    start, reflectivity at least 0.5.

    Three-lane road; obstacles sit in the neighbouring lanes, clear of the
    ego path, and far enough from the road edge that their lower half is
    framed by road in the camera. Obstacles on the same side stay at
    least ``min_gap`` apart so each one is a separate object."""
    min_gap = 4.0
    rng = np.random.default_rng(seed)
    xs = np.sort(rng.uniform(15.0, 55.0, n_obstacles))
    while np.any(xs[2:] - xs[:-2] < min_gap):
        xs = np.sort(rng.uniform(15.0, 55.0, n_obstacles))
    obstacles = []
    for k, x in enumerate(xs):
        l, w, h = rng.uniform(1.0, 2.0), rng.uniform(0.8, 1.6), rng.uniform(0.9, 1.5)
        y = (1.0 if k % 2 == 0 else -1.0) * rng.uniform(1.6, 2.4)
        obstacles.append(ObstacleSpec((float(x), float(y), float(h / 2)), (float(l), float(w), float(h)),
                                      float(rng.uniform(-0.6, 0.6)), float(rng.uniform(0.5, 1.0))))
    return SceneSpec(seed=seed, duration=15.0, lidar_rate=10.0, ego_speed=4.0, road_width=12.0,
                     obstacles=obstacles, noise_sigma=0.02)

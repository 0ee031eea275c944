"""End-to-end orchestration of the offline detector and the naive baseline."""

from __future__ import annotations

import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import ClusterSet, dbscan
from .config import PipelineConfig
from .core import PointCloud, Projection, motion_compensate, project
from .dataset import Dataset, save_boxes
from .fuse import anomaly_track, emit_boxes, mask_to_clusters, resolve_entities
from .ground import RoadWorldModel, accumulate, detect_anomalies, segment_ground
from .maskproc import extract_obstacle_candidates, naive_depth
from .track import GENERAL_LABELS, Cluster, RegistrationGate, Tracker, classify_track, filter_candidates


class StageError(RuntimeError):
    def __init__(self, stage: str, frame: int | None, cause: BaseException):
        where = f" (frame {frame})" if frame is not None else ""
        super().__init__(f"stage {stage}{where} failed: {cause}")
        self.stage, self.frame, self.cause = stage, frame, cause


@dataclass
class FrameResult:
    frame_index: int
    time: float
    road_points_world: np.ndarray
    clusters: list[Cluster]
    n_points: int
    n_ground: int
    n_candidates: int
    n_tagged: int
    timings: dict[str, float]


@dataclass
class DetectResult:
    boxes: list
    report: dict = field(default_factory=dict)


class _Timer:
    def __init__(self, timings: dict, stage: str, frame: int | None):
        self.timings, self.stage, self.frame = timings, stage, frame

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.stage] = self.timings.get(self.stage, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.stage, self.frame, exc) from exc
        return False


def compensated(ds: Dataset, frame_index: int) -> PointCloud:
    """The frame's sweep in the ego frame at the frame (camera) timestamp."""
    return motion_compensate(ds.point_clouds[frame_index - 1], ds.poses, ds.lidar_extrinsic,
                             ds.frame_time(frame_index))


def _road_hits(ds: Dataset, frame_index: int, projections: dict[int, Projection], n: int) -> np.ndarray:
    hit = np.zeros(n, dtype=bool)
    for cam, proj in projections.items():
        m = ds.mask("road", cam, frame_index)
        if m is None or len(proj) == 0:
            continue
        rows, cols = proj.pixels()
        hit[proj.index[m.pixels[rows, cols] > 0]] = True
    return hit


def process_frame(ds: Dataset, cfg: PipelineConfig, frame_index: int) -> FrameResult:
    """Per-frame stages; pure in (dataset, config, frame)."""
    tm: dict[str, float] = {}
    t_frame = ds.frame_time(frame_index)
    with _Timer(tm, "motion_compensation", frame_index):
        cloud = compensated(ds, frame_index)
        pose = ds.poses.at(t_frame)
    if len(cloud) == 0:
        return FrameResult(frame_index, t_frame, np.zeros((0, 3)), [], 0, 0, 0, 0, tm)
    g = cfg.ground
    with _Timer(tm, "ground", frame_index):
        split = segment_ground(cloud, g.tile_m, g.inlier_m, g.max_tilt_deg, g.iterations, seed=frame_index,
                              max_step_m=g.max_step_m)
    with _Timer(tm, "projection", frame_index):
        projections = {c.camera_id: project(cloud.xyz, c) for c in ds.cameras}
        on_road = _road_hits(ds, frame_index, projections, len(cloud))
        gi = split.ground_indices
        road_world = pose.apply(cloud.xyz[gi[on_road[gi]]])
    with _Timer(tm, "cluster", frame_index):
        ng = split.nonground_indices
        cs = dbscan(cloud.xyz[ng], cfg.dbscan.eps, cfg.dbscan.min_pts)
        labels = np.full(len(cloud), -1, dtype=np.int64)
        labels[ng] = cs.labels
        full = ClusterSet(labels, cs.k, np.zeros(len(cloud), dtype=bool))
    with _Timer(tm, "mask_to_clusters", frame_index):
        cands = []
        for cam in ds.cameras:
            road = ds.mask("road", cam.camera_id, frame_index)
            if road is not None:
                cands += extract_obstacle_candidates(road, cfg.maskproc.min_area_px, cfg.maskproc.max_area_px,
                                                     cam.camera_id, frame_index)
        tagged = set(mask_to_clusters(cands, full, projections, cfg.fuse.overlap_frac))
        votes = [Counter() for _ in range(cs.k)]
        n_proj = np.zeros(cs.k, dtype=np.int64)
        for cam, proj in projections.items():
            lab = labels[proj.index]
            keep = lab >= 0
            n_proj += np.bincount(lab[keep], minlength=cs.k)
            inst = ds.mask("instance", cam, frame_index)
            if inst is None:
                continue
            rows, cols = proj.pixels()
            ids = inst.pixels[rows[keep], cols[keep]].astype(np.int64)
            for cl, iid in zip(lab[keep][ids > 0].tolist(), ids[ids > 0].tolist()):
                name = ds.instance_classes.get(iid)
                if name is not None and name not in GENERAL_LABELS:
                    votes[cl][name] += 1
        clusters = []
        for k in range(cs.k):
            idx = ng[cs.labels == k]
            clusters.append(Cluster(pose.apply(cloud.xyz[idx]), idx, k in tagged, votes[k], int(n_proj[k])))
    return FrameResult(frame_index, t_frame, road_world, clusters, len(cloud), len(gi), len(cands), len(tagged), tm)


def _ego_speed(ds: Dataset, frame_index: int) -> tuple[float, float]:
    if frame_index == 1:
        return 0.0, 0.0
    t0, t1 = ds.frame_time(frame_index - 1), ds.frame_time(frame_index)
    d = np.linalg.norm(ds.poses.at(t1).translation - ds.poses.at(t0).translation)
    dt = t1 - t0
    return (float(d / dt) if dt > 0 else 0.0), dt


def run_detect(ds: Dataset, cfg: PipelineConfig | None = None, threads: int = 1) -> DetectResult:
    """ground -> cluster -> mask_to_clusters -> track -> anomalies ->
    resolve -> fit/emit. Output boxes are in the world frame."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    t_start = time.perf_counter()
    timings: dict[str, float] = {}
    counts = Counter()
    model = RoadWorldModel(cfg.anomaly.cell_m)
    tc = cfg.track
    gate = RegistrationGate(tc.voxel_m, tc.min_correction_m, tc.min_correction_rad, tc.max_correction_m,
                            tc.max_correction_rad, tc.max_tilt_rad, tc.significance, tc.min_normal_cos)
    tracker = Tracker(cfg.gicp, tc.gate_m, tc.max_miss, gate)
    frames = range(1, ds.n_frames + 1)

    def consume(fr: FrameResult):
        for k, v in fr.timings.items():
            timings[k] = timings.get(k, 0.0) + v
        counts["points"] += fr.n_points
        counts["ground_points"] += fr.n_ground
        counts["clusters"] += len(fr.clusters)
        counts["obstacle_candidates"] += fr.n_candidates
        counts["tagged_clusters"] += fr.n_tagged
        accumulate(model, fr.road_points_world, np.ones(len(fr.road_points_world), dtype=bool), fr.frame_index)
        speed, dt = _ego_speed(ds, fr.frame_index)
        with _Timer(timings, "track", fr.frame_index):
            tracker.step(fr.frame_index, fr.time, fr.clusters, speed, dt)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            for fr in pool.map(lambda i: process_frame(ds, cfg, i), frames):
                consume(fr)
    else:
        for i in frames:
            consume(process_frame(ds, cfg, i))

    with _Timer(timings, "classify", None):
        tracks = tracker.all_tracks()
        counts["tracks_raw"] = len(tracks)
        kept = []
        for t in tracks:
            t.class_label = classify_track(t)
            if t.class_label not in GENERAL_LABELS:
                t.source = "instance"
            elif any(o.tagged for o in t.observations):
                t.source, t.class_label = "obstacle_mask", "obstacle"
            else:
                continue  # the instance path only vouches for closed-set objects
            kept.append(t)
        kept = filter_candidates(kept, tc.min_lifetime, cfg.fuse.max_extent_m,
                                 lambda xy: model.in_road(xy, tc.road_margin_m))
        counts["tracks_kept"] = len(kept)
    with _Timer(timings, "anomaly", None):
        ac = cfg.anomaly
        anomalies = detect_anomalies(model, ac.residual_m, ac.min_cells, trim_m=ac.trim_m)
        times = {i: ds.frame_time(i) for i in frames}
        next_id = tracker.next_id
        a_tracks = []
        for a in anomalies:
            a_tracks.append(anomaly_track(next_id, a.points, a.frames, times))
            next_id += 1
        counts["anomalies"] = len(a_tracks)
        counts["road_points"] = len(model)
    with _Timer(timings, "resolve", None):
        resolved = resolve_entities(kept + a_tracks, cfg.fuse.merge_dist_m)
        counts["tracks_resolved"] = len(resolved)
    with _Timer(timings, "emit", None):
        boxes = emit_boxes(resolved, cfg.fuse.min_extent_m, cfg.fuse.support_voxel_m, cfg.fuse.min_support_frames)
        counts["boxes"] = len(boxes)
    timings["total"] = time.perf_counter() - t_start
    report = {"frames": ds.n_frames, "counts": dict(counts),
              "timings_s": {k: round(v, 4) for k, v in sorted(timings.items())},
              "tracks": [{"id": t.id, "source": t.source, "class": t.class_label, "frames": t.lifetime,
                          "low_confidence": sum(o.low_confidence for o in t.observations)} for t in resolved]}
    return DetectResult(boxes, report)


def write_detect(result: DetectResult, out_dir) -> Path:
    out = Path(out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    path = out / "predictions" / "boxes.csv"
    save_boxes(result.boxes, path)
    (out / "report.json").write_text(json.dumps(result.report, indent=2) + "\n")
    return path


# -- baseline ------------------------------------------------------------------

@dataclass
class BaselineRow:
    frame_index: int
    camera_id: int
    candidate_idx: int
    depth: float | None
    support: int


def run_baseline(ds: Dataset, cfg: PipelineConfig | None = None) -> list[BaselineRow]:
    """Mean projected LiDAR depth per obstacle candidate, per camera frame."""
    cfg = cfg or PipelineConfig()
    rows = []
    for i in range(1, ds.n_frames + 1):
        try:
            cloud = compensated(ds, i)
        except Exception as e:  # noqa: BLE001 - report stage and frame
            raise StageError("motion_compensation", i, e) from e
        for cam in ds.cameras:
            road = ds.mask("road", cam.camera_id, i)
            if road is None:
                continue
            cands = extract_obstacle_candidates(road, cfg.maskproc.min_area_px, cfg.maskproc.max_area_px,
                                                cam.camera_id, i)
            proj = project(cloud.xyz, cam)
            for k, m in enumerate(cands):
                est = naive_depth(m, proj)
                rows.append(BaselineRow(i, cam.camera_id, k, None if est is None else est[0],
                                        0 if est is None else est[1]))
    return rows


def write_baseline(rows: list[BaselineRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["frame_index,camera_id,candidate_idx,depth,support"]
    for r in rows:
        d = "none" if r.depth is None else repr(float(r.depth))
        lines.append(f"{r.frame_index},{r.camera_id},{r.candidate_idx},{d},{r.support}")
    path.write_text("\n".join(lines) + "\n")

"""On-disk sequence format.

Layout under a dataset root::

    manifest.json
    calibration.json
    poses.csv
    lidar/%06d.bin
    masks/{road,instance,obstacle_candidate}/cam%02d/%06d.pgm
    masks/instances.csv
    gt/boxes.csv

LiDAR records are little-endian ``float32 x, y, z, intensity, float64
timestamp`` (24 bytes, no header). Masks are 16-bit big-endian binary PGM.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Box3D, CameraCalibration, CameraFrame, PointCloud, PoseTrack, RigidTransform

LIDAR_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("timestamp", "<f8")])
MASK_KINDS = ("road", "instance", "obstacle_candidate")
BOX_HEADER = ["frame_index", "id", "class", "x", "y", "z", "w", "h", "l", "theta", "vx", "vy", "ax", "ay"]
POSE_HEADER = ["timestamp"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]


class DatasetError(Exception):
    """Base class for dataset problems (reported as data errors by the CLI)."""


class NotFoundError(DatasetError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = str(path)


class ParseError(DatasetError, ValueError):
    def __init__(self, path, message, *, offset=None, line=None):
        where = f" at byte offset {offset}" if offset is not None else f" at line {line}" if line is not None else ""
        super().__init__(f"{path}: {message}{where}")
        self.path, self.offset, self.line = str(path), offset, line


class ValidationError(DatasetError, ValueError):
    def __init__(self, path, fieldname, message):
        super().__init__(f"{path}: invalid {fieldname}: {message}")
        self.path, self.field = str(path), fieldname


@dataclass
class LabelMask:
    camera_id: int
    frame_index: int
    kind: str
    pixels: np.ndarray  # (height, width) uint16

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class SequenceManifest:
    sequence_id: str
    n_frames: int
    n_cameras: int
    frame_timestamps: list[float]
    files: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "N": self.n_frames,
            "N_cam": self.n_cameras,
            "frames": [{"frame_index": i + 1, "timestamp": t} for i, t in enumerate(self.frame_timestamps)],
            "files": self.files,
        }


@dataclass
class Dataset:
    manifest: SequenceManifest
    point_clouds: list[PointCloud]
    cameras: list[CameraCalibration]
    camera_frames: dict[int, list[CameraFrame]]
    poses: PoseTrack
    lidar_extrinsic: RigidTransform
    masks: dict[tuple[str, int, int], LabelMask]  # (kind, camera_id, frame_index)
    instance_classes: dict[int, str]
    root: Path | None = None

    @property
    def n_frames(self) -> int:
        return len(self.point_clouds)

    def frame_time(self, frame_index: int) -> float:
        return self.manifest.frame_timestamps[frame_index - 1]

    def mask(self, kind: str, camera_id: int, frame_index: int) -> LabelMask | None:
        return self.masks.get((kind, camera_id, frame_index))


# -- paths ------------------------------------------------------------------

def lidar_path(root, frame_index: int) -> Path:
    return Path(root) / "lidar" / f"{frame_index:06d}.bin"


def mask_path(root, kind: str, camera_id: int, frame_index: int) -> Path:
    return Path(root) / "masks" / kind / f"cam{camera_id:02d}" / f"{frame_index:06d}.pgm"


def _fmt(x: float) -> str:
    # shortest repr round-trips float64 exactly
    return repr(float(x))


# -- point clouds -------------------------------------------------------------

def save_point_cloud(cloud: PointCloud, path) -> None:
    rec = np.empty(len(cloud), dtype=LIDAR_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["intensity"] = cloud.intensity
    rec["timestamp"] = cloud.timestamp
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rec.tofile(path)


def load_point_cloud(path, frame_index: int = 1) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    raw = path.read_bytes()
    if len(raw) % LIDAR_DTYPE.itemsize:
        raise ParseError(path, f"length {len(raw)} is not a multiple of {LIDAR_DTYPE.itemsize}",
                         offset=len(raw) - len(raw) % LIDAR_DTYPE.itemsize)
    rec = np.frombuffer(raw, dtype=LIDAR_DTYPE)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    cloud = PointCloud(xyz, rec["intensity"].astype(np.float64), rec["timestamp"].copy(), frame_index)
    if not np.all(np.isfinite(xyz)):
        raise ValidationError(path, "xyz", "non-finite coordinate")
    if not np.all(np.isfinite(cloud.timestamp)) or np.any(cloud.timestamp < 0):
        raise ValidationError(path, "timestamp", "must be finite and >= 0")
    return cloud


# -- masks -----------------------------------------------------------------

def save_mask(mask: LabelMask, path) -> None:
    px = np.asarray(mask.pixels)
    if px.ndim != 2 or px.min(initial=0) < 0 or px.max(initial=0) > 65535:
        raise ValueError("mask must be a 2D array of labels in [0, 65535]")
    h, w = px.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(px.astype(">u2").tobytes())


def _pgm_header(raw: bytes, path):
    """Parse a binary PGM header; returns (width, height, maxval, data offset)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, "truncated header", offset=pos)
        tokens.append((raw[start:pos], start))
    magic, off = tokens[0]
    if magic != b"P5":
        raise ParseError(path, f"bad magic {magic!r}", offset=off)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError as e:
        raise ParseError(path, "non-integer header field", offset=tokens[1][1]) from e
    return w, h, maxval, pos + 1  # exactly one whitespace byte before data


def load_mask(path, camera_id: int = 0, frame_index: int = 0, kind: str = "road") -> LabelMask:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    raw = path.read_bytes()
    w, h, maxval, off = _pgm_header(raw, path)
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(raw) - off != need:
        raise ParseError(path, f"expected {need} sample bytes, found {len(raw) - off}", offset=off)
    px = np.frombuffer(raw, dtype=dtype, offset=off).reshape(h, w).astype(np.uint16)
    return LabelMask(camera_id, frame_index, kind, px)


def save_gray8(values: np.ndarray, path) -> None:
    v = np.asarray(values, dtype=np.uint8)
    h, w = v.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(v.tobytes())


# -- boxes -----------------------------------------------------------------

def save_boxes(boxes, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(BOX_HEADER)
        for b in boxes:
            b.validate()
            wr.writerow([b.frame_index, b.id, b.c] + [_fmt(x) for x in (
                b.x, b.y, b.z, b.w, b.h, b.l, b.theta, b.v[0], b.v[1], b.a[0], b.a[1])])


def load_boxes(path) -> list[Box3D]:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    out = []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        header = next(rows, None)
        if header != BOX_HEADER:
            raise ParseError(path, "unexpected header", line=1)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(BOX_HEADER):
                raise ParseError(path, f"expected {len(BOX_HEADER)} fields, got {len(row)}", line=lineno)
            try:
                fi, tid = int(row[0]), int(row[1])
                x, y, z, w, h, l, th, vx, vy, ax, ay = (float(s) for s in row[3:])
            except ValueError as e:
                raise ParseError(path, str(e), line=lineno) from e
            box = Box3D(x, y, z, w, h, l, th, (vx, vy), (ax, ay), tid, row[2], fi)
            try:
                box.validate()
            except ValueError as e:
                raise ValidationError(path, f"box at line {lineno}", str(e)) from e
            out.append(box)
    return out


# -- poses & calibration -----------------------------------------------------

def save_poses(poses: PoseTrack, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(POSE_HEADER)
        for t, tf in zip(poses.timestamps, poses.transforms):
            wr.writerow([_fmt(t)] + [_fmt(x) for x in tf.rotation.ravel()] + [_fmt(x) for x in tf.translation])


def load_poses(path) -> PoseTrack:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    ts, tfs = [], []
    with open(path, newline="") as f:
        rows = csv.reader(f)
        if next(rows, None) != POSE_HEADER:
            raise ParseError(path, "unexpected header", line=1)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                vals = [float(s) for s in row]
            except ValueError as e:
                raise ParseError(path, str(e), line=lineno) from e
            if len(vals) != 13:
                raise ParseError(path, f"expected 13 fields, got {len(vals)}", line=lineno)
            tf = RigidTransform(np.reshape(vals[1:10], (3, 3)), vals[10:13])
            if not tf.is_valid(1e-6):
                raise ValidationError(path, f"rotation at line {lineno}", "not orthonormal")
            ts.append(vals[0])
            tfs.append(tf)
    try:
        return PoseTrack(np.array(ts), tfs)
    except ValueError as e:
        raise ValidationError(path, "timestamp", str(e)) from e


def calibration_to_json(cameras, lidar_extrinsic: RigidTransform) -> dict:
    return {
        "cameras": [
            {
                "camera_id": c.camera_id,
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
                "extrinsic": c.extrinsic.as_matrix().tolist(),
            }
            for c in cameras
        ],
        "lidar_extrinsic": lidar_extrinsic.as_matrix().tolist(),
    }


def load_calibration(path) -> tuple[list[CameraCalibration], RigidTransform]:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(path, e.msg, offset=e.pos) from e
    try:
        cams = []
        for c in doc["cameras"]:
            ext = RigidTransform.from_matrix(c["extrinsic"])
            if not ext.is_valid(1e-6):
                raise ValidationError(path, f"camera {c['camera_id']} extrinsic", "not a rigid transform")
            cal = CameraCalibration.from_pinhole(c["camera_id"], c["fx"], c["fy"], c["cx"], c["cy"],
                                                 c["width"], c["height"], ext)
            try:
                cal.validate()
            except ValueError as e:
                raise ValidationError(path, "intrinsic", str(e)) from e
            cams.append(cal)
        lidar = RigidTransform.from_matrix(doc["lidar_extrinsic"])
    except (KeyError, TypeError) as e:
        raise ParseError(path, f"missing or malformed key {e}") from e
    if not lidar.is_valid(1e-6):
        raise ValidationError(path, "lidar_extrinsic", "not a rigid transform")
    return cams, lidar


def load_instance_classes(path) -> dict[int, str]:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(path)
    out = {}
    with open(path, newline="") as f:
        rows = csv.reader(f)
        if next(rows, None) != ["instance_id", "class"]:
            raise ParseError(path, "unexpected header", line=1)
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                out[int(row[0])] = row[1]
            except (ValueError, IndexError) as e:
                raise ParseError(path, "malformed row", line=lineno) from e
    return out


def save_instance_classes(classes: dict[int, str], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["instance_id", "class"])
        for k in sorted(classes):
            wr.writerow([k, classes[k]])


# -- whole dataset -------------------------------------------------------------

def load_manifest(root) -> SequenceManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise NotFoundError(path)
    try:
        doc = json.loads(path.read_text())
        frames = sorted(doc["frames"], key=lambda f: f["frame_index"])
        m = SequenceManifest(str(doc["sequence_id"]), int(doc["N"]), int(doc["N_cam"]),
                             [float(f["timestamp"]) for f in frames], doc.get("files", {}))
    except json.JSONDecodeError as e:
        raise ParseError(path, e.msg, offset=e.pos) from e
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, f"missing or malformed key {e}") from e
    if len(m.frame_timestamps) != m.n_frames:
        raise ValidationError(path, "frames", f"{len(m.frame_timestamps)} entries for N={m.n_frames}")
    if any(b < a for a, b in zip(m.frame_timestamps, m.frame_timestamps[1:])):
        raise ValidationError(path, "frames", "timestamps not time-ordered")
    return m


def load_dataset(root, *, load_gt: bool = False) -> Dataset:
    """Load and validate a sequence directory."""
    root = Path(root)
    if not root.is_dir():
        raise NotFoundError(root)
    manifest = load_manifest(root)
    cameras, lidar_ext = load_calibration(root / "calibration.json")
    if len(cameras) != manifest.n_cameras:
        raise ValidationError(root / "calibration.json", "cameras", f"expected {manifest.n_cameras}")
    poses = load_poses(root / "poses.csv")
    lo, hi = poses.span
    clouds = []
    for i in range(1, manifest.n_frames + 1):
        p = lidar_path(root, i)
        cloud = load_point_cloud(p, i)
        if len(cloud) and (cloud.timestamp.min() < lo or cloud.timestamp.max() > hi):
            raise ValidationError(p, "timestamp", f"outside pose span [{lo}, {hi}]")
        clouds.append(cloud)
    for t in manifest.frame_timestamps:
        if not lo <= t <= hi:
            raise ValidationError(root / "manifest.json", "frames", f"timestamp {t} outside pose span")
    camera_frames = {
        c.camera_id: [CameraFrame(c.camera_id, i + 1, t, str(mask_path("", "road", c.camera_id, i + 1)))
                      for i, t in enumerate(manifest.frame_timestamps)]
        for c in cameras
    }
    masks = {}
    for kind in MASK_KINDS:
        for cam in cameras:
            for i in range(1, manifest.n_frames + 1):
                p = mask_path(root, kind, cam.camera_id, i)
                if not p.is_file():
                    if kind == "road":
                        raise NotFoundError(p)
                    continue
                m = load_mask(p, cam.camera_id, i, kind)
                if m.shape != (cam.height, cam.width):
                    raise ValidationError(p, "dimensions", f"{m.shape} != {(cam.height, cam.width)}")
                masks[(kind, cam.camera_id, i)] = m
    inst_path = root / "masks" / "instances.csv"
    instance_classes = load_instance_classes(inst_path) if inst_path.is_file() else {}
    ds = Dataset(manifest, clouds, cameras, camera_frames, poses, lidar_ext, masks, instance_classes, root)
    if load_gt:
        load_boxes(root / "gt" / "boxes.csv")
    return ds


def write_manifest(manifest: SequenceManifest, root) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


def write_calibration(cameras, lidar_extrinsic, root) -> None:
    doc = calibration_to_json(cameras, lidar_extrinsic)
    (Path(root) / "calibration.json").write_text(json.dumps(doc, indent=2) + "\n")

"""Domain types, rigid transforms, pose interpolation, motion compensation
and pinhole projection.

Frames: ego and world are x-forward, y-left, z-up. Camera frames are
z-forward, x-right, y-down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp


class OutOfRangeError(ValueError):
    """A timestamp fell outside the span covered by the pose samples."""


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform ``p' = R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(r, translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    # cheap guard against drift over long chains
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-12):
        r = orthonormalize(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass
class PointCloud:
    """One LiDAR sweep.

    ``xyz`` is (n, 3) float64 in the source frame, ``intensity`` in [0, 1],
    ``timestamp`` seconds (float64) per point.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    timestamp: np.ndarray
    frame_index: int = 1

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.timestamp = np.asarray(self.timestamp, dtype=np.float64).reshape(n)

    @property
    def n_p(self) -> int:
        return len(self.xyz)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, frame_index: int = 1) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), frame_index)

    def subset(self, idx) -> PointCloud:
        return PointCloud(self.xyz[idx], self.intensity[idx], self.timestamp[idx], self.frame_index)

    def with_xyz(self, xyz) -> PointCloud:
        return PointCloud(xyz, self.intensity.copy(), self.timestamp.copy(), self.frame_index)


@dataclass(frozen=True)
class CameraCalibration:
    camera_id: int
    intrinsic: np.ndarray
    extrinsic: RigidTransform  # ego -> camera
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "intrinsic", np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3))

    @classmethod
    def from_pinhole(cls, camera_id, fx, fy, cx, cy, width, height, extrinsic) -> CameraCalibration:
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(camera_id, k, extrinsic, int(width), int(height))

    @property
    def fx(self) -> float:
        return float(self.intrinsic[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsic[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsic[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsic[1, 2])

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.camera_id}: fx, fy must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"camera {self.camera_id}: principal point outside image")
        if self.intrinsic[0, 1] != 0.0:
            raise ValueError(f"camera {self.camera_id}: skew must be zero")


@dataclass(frozen=True)
class CameraFrame:
    camera_id: int
    frame_index: int
    timestamp: float
    image_ref: str = ""


@dataclass
class Box3D:
    """Amodal box. Center in world frame, yaw in (-pi, pi]."""

    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    theta: float
    v: tuple[float, float] = (0.0, 0.0)
    a: tuple[float, float] = (0.0, 0.0)
    id: int = 0
    c: str = "obstacle"
    frame_index: int = 1

    def validate(self) -> None:
        vals = (self.x, self.y, self.z, self.w, self.h, self.l, self.theta, *self.v, *self.a)
        if not all(np.isfinite(vals)):
            raise ValueError("box fields must be finite")
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError("box extents must be positive")
        if not (-np.pi < self.theta <= np.pi):
            raise ValueError("theta must lie in (-pi, pi]")
        if self.id < 0:
            raise ValueError("box id must be non-negative")


@dataclass
class PoseTrack:
    """Time-ordered ego poses (world <- ego)."""

    timestamps: np.ndarray
    transforms: list[RigidTransform]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.transforms) or len(self.timestamps) == 0:
            raise ValueError("poses need matching, non-empty timestamps and transforms")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")
        self._rots = Rotation.from_matrix(np.stack([t.rotation for t in self.transforms]))
        self._trans = np.stack([t.translation for t in self.transforms])
        self._slerp = Slerp(self.timestamps, self._rots) if len(self.timestamps) > 1 else None

    @property
    def span(self) -> tuple[float, float]:
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def _check(self, t: np.ndarray) -> None:
        lo, hi = self.span
        if t.size and (np.min(t) < lo or np.max(t) > hi or not np.all(np.isfinite(t))):
            raise OutOfRangeError(f"time outside pose span [{lo}, {hi}]")

    def interpolate_many(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Rotation matrices (n, 3, 3) and translations (n, 3) at ``times``."""
        t = np.asarray(times, dtype=np.float64).reshape(-1)
        self._check(t)
        if self._slerp is None:
            return np.repeat(self._rots.as_matrix()[None], len(t), 0), np.repeat(self._trans, len(t), 0)
        k = np.clip(np.searchsorted(self.timestamps, t, side="right") - 1, 0, len(self.timestamps) - 2)
        t0, t1 = self.timestamps[k], self.timestamps[k + 1]
        alpha = ((t - t0) / (t1 - t0))[:, None]
        trans = (1.0 - alpha) * self._trans[k] + alpha * self._trans[k + 1]
        rots = self._slerp(t).as_matrix()
        # exact at samples
        exact = np.searchsorted(self.timestamps, t)
        exact = np.minimum(exact, len(self.timestamps) - 1)
        hit = self.timestamps[exact] == t
        if np.any(hit):
            rots[hit] = np.stack([self.transforms[i].rotation for i in exact[hit]])
            trans[hit] = self._trans[exact[hit]]
        return rots, trans

    def at(self, t: float) -> RigidTransform:
        r, p = self.interpolate_many([t])
        return RigidTransform(r[0], p[0])


def interpolate_pose(poses: PoseTrack, t: float) -> RigidTransform:
    """Pose at ``t``: linear translation, spherical-linear rotation."""
    return poses.at(t)


def motion_compensate(
    cloud: PointCloud, poses: PoseTrack, lidar_extrinsic: RigidTransform, target_time: float
) -> PointCloud:
    """Re-express a sweep in the ego frame at ``target_time``.

    Each point goes lidar -> ego -> world with the pose at its own timestamp,
    then world -> ego with the pose at ``target_time``.
    """
    if len(cloud) == 0:
        return PointCloud.empty(cloud.frame_index)
    target = poses.at(target_time).inverse()
    ego = lidar_extrinsic.apply(cloud.xyz)
    # sweeps share few distinct timestamps; interpolate each once
    times, inv = np.unique(cloud.timestamp, return_inverse=True)
    rots, trans = poses.interpolate_many(times)
    inv = inv.reshape(-1)
    world = np.einsum("nij,nj->ni", rots[inv], ego) + trans[inv]
    return cloud.with_xyz(target.apply(world))


@dataclass
class Projection:
    """Projected points: index into the input, pixel coords and depth."""

    index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer (row, col) of the pixel each projected point falls in."""
        return np.floor(self.v).astype(np.int64), np.floor(self.u).astype(np.int64)

    def subset(self, mask) -> Projection:
        return Projection(self.index[mask], self.u[mask], self.v[mask], self.depth[mask])


def project(points_ego, calib: CameraCalibration) -> Projection:
    """Pinhole projection of ego-frame points. Out-of-view points are dropped."""
    xyz = points_ego.xyz if isinstance(points_ego, PointCloud) else np.asarray(points_ego, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    cam = calib.extrinsic.apply(xyz)
    z = cam[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = calib.fx * cam[:, 0] / z + calib.cx
        v = calib.fy * cam[:, 1] / z + calib.cy
    ok = front & (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)
    idx = np.flatnonzero(ok)
    return Projection(idx, u[idx], v[idx], z[idx])


def backproject(u, v, depth, calib: CameraCalibration) -> np.ndarray:
    """Camera-frame points from pixel coordinates and depth."""
    u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
    x = (u - calib.cx) * d / calib.fx
    y = (v - calib.cy) * d / calib.fy
    return np.stack([x, y, d], axis=-1)


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def stack_points(parts: Sequence[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in parts]
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def unique_rows(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lexicographically sorted unique rows of an integer array, with the
    first-occurrence index and the inverse map. Faster than
    ``np.unique(axis=0)`` for the small key ranges used by grids."""
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) == 0:
        return keys.reshape(0, keys.shape[1]), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    lin = np.zeros(len(keys), dtype=np.int64)
    for k in range(keys.shape[1]):
        lin = lin * span[k] + (keys[:, k] - lo[k])
    _, first, inv = np.unique(lin, return_index=True, return_inverse=True)
    return keys[first], first, inv.reshape(-1)

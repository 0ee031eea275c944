import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def brute_dbscan(points, eps, min_pts):
    """O(n^2) reference: sequential scan in index order."""
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    d = np.linalg.norm(p[:, None] - p[None], axis=2)
    nb = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([len(x) >= min_pts for x in nb], dtype=bool)
    labels = np.full(n, -1)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = k
        stack = [i]
        while stack:
            j = stack.pop()
            for q in nb[j]:
                if labels[q] < 0:
                    labels[q] = k
                    if core[q]:
                        stack.append(q)
        k += 1
    return labels, core, k


def same_partition(a, b) -> bool:
    """Equal up to renaming of non-negative labels; -1 must match exactly."""
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a < 0, b < 0):
        return False
    fwd, back = {}, {}
    for x, y in zip(a[a >= 0].tolist(), b[b >= 0].tolist()):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def rotation(axis, angle):
    from scipy.spatial.transform import Rotation
    axis = np.asarray(axis, dtype=np.float64)
    if np.linalg.norm(axis) < 1e-6:
        axis = np.array([0.0, 0.0, 1.0])
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def corner_cloud(rng, n=500, lo=5.0, hi=8.0):
    """Three mutually orthogonal faces of a box meeting in one corner."""
    dims = rng.uniform(lo, hi, 3)
    face = rng.integers(0, 3, n)
    p = rng.uniform(0, 1, (n, 3)) * dims
    p[np.arange(n), face] = 0.0
    return p - p.mean(axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_scene(seed=5, duration=1.5):
    """A short, cheap sequence with one reflective obstacle ahead."""
    from obstacle_forge.synthgen import ObstacleSpec, SceneSpec
    return SceneSpec(seed=seed, duration=duration, ego_speed=4.0, road_width=8.0, lidar_hfov_deg=120.0,
                     azimuth_step_deg=0.3, beam_count=64,
                     obstacles=[ObstacleSpec((22.0, 1.0, 0.6), (1.5, 1.0, 1.2), yaw=0.2, reflectivity=0.9)])


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from obstacle_forge.synthgen import generate
    root = tmp_path_factory.mktemp("small") / "seq"
    generate(small_scene(), root)
    return root


def _box(frame, bid, x, y, l=4.0, w=2.0, h=1.5):
    from obstacle_forge.core import Box3D
    return Box3D(x, y, 0.75, w, h, l, 0.0, id=bid, frame_index=frame)


def golden_eval():
    """Three frames, ego frame, offsets exact in binary.

    Frame 1: gt1 TP (+0.25, -0.25, l +0.125); gt2 TP (0, -0.5, l +0.25); one FP at (30, 6).
    Frame 2: gt1 TP (+0.125, +0.125, l -0.125); gt2 missed; one FP at (56, 2).
    Frame 3: gt1 TP exact but by a new pred id; gt2 TP (+0.5, 0); gt3 loses the
    shared pred to the nearer gt2 and is a FN.
    Cells: (5, 3) holds gt1 and pred 101/102/901, (1, 1) gt2/gt3 and pred 201,
    (3, 4) the first FP.
    """
    gt = [_box(1, 1, 52.0, 1.0), _box(1, 2, 15.0, -5.0),
          _box(2, 1, 53.0, 1.0), _box(2, 2, 16.0, -5.0),
          _box(3, 1, 54.0, 1.0), _box(3, 2, 17.0, -5.0), _box(3, 3, 17.0, -4.25)]
    pred = [_box(1, 101, 52.25, 0.75, l=4.125), _box(1, 201, 15.0, -5.5, l=4.25), _box(1, 900, 30.0, 6.0),
            _box(2, 101, 53.125, 1.125, l=3.875), _box(2, 901, 56.0, 2.0),
            _box(3, 102, 54.0, 1.0), _box(3, 201, 17.5, -5.0)]
    nan = np.nan

    def grid(cells):
        g = np.full((10, 6), nan)
        for rc, v in cells.items():
            g[rc] = v
        return g

    zero_ids = np.zeros((10, 6))
    zero_ids[5, 3] = 1.0
    expected = {
        "summary": {"tp": 5, "fp": 2, "fn": 2, "precision": 5 / 7, "recall": 5 / 7,
                    "mean_long_disp": 0.875 / 5, "mean_lat_disp": 0.875 / 5, "id_changes": 1},
        "grids": {
            "precision": grid({(5, 3): 0.75, (1, 1): 1.0, (3, 4): 0.0}),
            "recall": grid({(5, 3): 1.0, (1, 1): 0.5}),
            "long_disp": grid({(5, 3): 0.375 / 3, (1, 1): 0.25}),
            "lat_disp": grid({(5, 3): 0.375 / 3, (1, 1): 0.25}),
            "len_err": grid({(5, 3): 0.25 / 3, (1, 1): 0.125}),
            "wid_err": grid({(5, 3): 0.0, (1, 1): 0.0}),
            "hei_err": grid({(5, 3): 0.0, (1, 1): 0.0}),
            "id_changes": zero_ids,
        },
    }
    return gt, pred, expected

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rotation
from obstacle_forge.core import (Box3D, CameraCalibration, OutOfRangeError, PointCloud, PoseTrack, RigidTransform,
                                 backproject, compose, inverse, motion_compensate, project, unique_rows, wrap_angle)
from obstacle_forge.synthgen import EGO_TO_CAM

vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10, allow_nan=False))
angle = st.floats(-3.0, 3.0)


def _tf(axis, ang, t):
    return RigidTransform(rotation(axis, ang), t)


@given(vec3, angle, vec3, vec3, angle, vec3, vec3)
def test_compose_matches_sequential_application(a1, g1, t1, a2, g2, t2, p):
    a, b = _tf(a1, g1, t1), _tf(a2, g2, t2)
    assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)
    assert np.allclose((a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-9)


@given(vec3, angle, vec3)
def test_inverse_round_trip(ax, g, t):
    a = _tf(ax, g, t)
    assert np.allclose(compose(a, inverse(a)).as_matrix(), np.eye(4), atol=1e-9)
    assert a.is_valid()


def test_from_yaw():
    t = RigidTransform.from_yaw(np.pi / 2, (1, 0, 0))
    assert np.allclose(t.apply([1.0, 0, 0]), [1, 1, 0])
    assert t.yaw == pytest.approx(np.pi / 2)


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a), atol=1e-9) and np.isclose(np.sin(w), np.sin(a), atol=1e-9)


def test_wrap_angle_pi_boundary():
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(np.pi) == pytest.approx(np.pi)


def _track():
    ts = np.linspace(0, 1, 11)
    return PoseTrack(ts, [RigidTransform(rotation([0, 0, 1], 0.5 * t), [4 * t, 0, 0]) for t in ts])


def test_pose_interpolation_linear_and_slerp():
    tr = _track()
    p = tr.at(0.25)
    assert np.allclose(p.translation, [1.0, 0, 0])
    assert p.yaw == pytest.approx(0.125)
    assert np.array_equal(tr.at(tr.timestamps[3]).rotation, tr.transforms[3].rotation)


def test_pose_out_of_range():
    with pytest.raises(OutOfRangeError):
        _track().at(1.5)


def test_pose_track_rejects_unordered():
    with pytest.raises(ValueError):
        PoseTrack([0.0, 0.0], [RigidTransform(), RigidTransform()])


def test_motion_compensation_recovers_static_world():
    tr = _track()
    world = np.array([[10.0, 2.0, 0.5], [20.0, -3.0, 1.0]])
    times = np.array([0.2, 0.7])
    ego = np.stack([tr.at(t).inverse().apply(w) for t, w in zip(times, world)])
    cloud = PointCloud(ego, np.ones(2), times)
    out = motion_compensate(cloud, tr, RigidTransform(), 0.5)
    assert np.allclose(out.xyz, tr.at(0.5).inverse().apply(world), atol=1e-9)


def _cam():
    return CameraCalibration.from_pinhole(0, 500, 500, 320, 240, 640, 480, RigidTransform(EGO_TO_CAM))


@given(st.floats(-300, 300), st.floats(-200, 200), st.floats(1, 80))
def test_project_backproject_round_trip(du, dv, depth):
    cam = _cam()
    u, v = 320 + du, 240 + dv
    pc = backproject(u, v, depth, cam)
    ego = cam.extrinsic.inverse().apply(pc)
    proj = project(ego[None], cam)
    assert len(proj) == 1
    assert proj.u[0] == pytest.approx(u, abs=1e-6) and proj.v[0] == pytest.approx(v, abs=1e-6)
    assert proj.depth[0] == pytest.approx(depth)


def test_project_drops_points_behind_and_outside():
    proj = project(np.array([[-5.0, 0, 0], [10.0, 0, 0], [10.0, 100.0, 0]]), _cam())
    assert proj.index.tolist() == [1]
    # ego forward maps to the principal point, ego left to smaller u
    assert proj.u[0] == pytest.approx(320) and project(np.array([[10.0, 1, 0]]), _cam()).u[0] < 320


def test_box_validation():
    Box3D(0, 0, 0, 1, 1, 1, np.pi).validate()
    for bad in (dict(w=0), dict(theta=-np.pi), dict(x=np.nan)):
        kw = dict(x=0, y=0, z=0, w=1, h=1, l=1, theta=0.0) | bad
        with pytest.raises(ValueError):
            Box3D(**kw).validate()


def test_unique_rows_matches_numpy():
    keys = np.random.default_rng(0).integers(-3, 3, (200, 3))
    u, first, inv = unique_rows(keys)
    ref = np.unique(keys, axis=0)
    assert np.array_equal(u, ref)
    assert np.array_equal(u[inv], keys)
    assert np.array_equal(keys[first], u)

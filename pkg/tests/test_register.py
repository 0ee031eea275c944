import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import corner_cloud, rotation
from obstacle_forge.core import RigidTransform
from obstacle_forge.register import (GicpConfig, apply_increment, cost, estimate_covariances, gicp, information,
                                     jacobian, residuals, skew, so3_exp)

vec3 = arrays(np.float64, 3, elements=st.floats(-1, 1, allow_nan=False))


@given(vec3)
def test_so3_exp_is_a_rotation(w):
    r = so3_exp(w)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


@given(vec3, vec3)
def test_skew_is_cross_product(a, b):
    assert np.allclose(skew(a)[0] @ b, np.cross(a, b), atol=1e-14)


def test_covariances_are_plane_discs():
    rng = np.random.default_rng(0)
    plane = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    cov = estimate_covariances(plane, 10, 1e-3)
    vals = np.linalg.eigvalsh(cov)
    assert np.allclose(vals, [1e-3, 1, 1], atol=1e-9)
    assert np.allclose(cov[:, 2, 2], 1e-3, atol=1e-9)


def test_covariances_need_enough_points():
    with pytest.raises(ValueError):
        estimate_covariances(np.zeros((5, 3)), 20)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(30, 3))
    tgt = src + rng.normal(0, 0.1, src.shape)
    t = RigidTransform(rotation(rng.normal(size=3), 0.3), rng.normal(size=3))
    jac = jacobian(src, t)
    h = 1e-6
    num = np.empty_like(jac)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        num[:, :, k] = (residuals(src, tgt, apply_increment(t, e)) - residuals(src, tgt, apply_increment(t, -e))) / (2 * h)
    scale = np.abs(jac).max()
    assert np.abs(num - jac).max() <= 1e-5 * scale


def test_information_is_symmetric_positive_definite():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(60, 3))
    cov = estimate_covariances(pts, 10)
    info = information(cov, cov, RigidTransform(rotation([0, 0, 1], 0.2), np.zeros(3)))
    assert np.allclose(info, info.transpose(0, 2, 1), atol=1e-8)
    assert np.all(np.linalg.eigvalsh(info) > 0)


def test_identity_alignment_has_zero_cost():
    rng = np.random.default_rng(2)
    pts = corner_cloud(rng, 200)
    res = gicp(pts, pts)
    assert res.converged
    assert res.final_cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(res.transform.as_matrix(), np.eye(4), atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_recovers_small_perturbation(seed):
    rng = np.random.default_rng(seed)
    base = corner_cloud(rng)
    truth = RigidTransform(rotation(rng.normal(size=3), np.deg2rad(rng.uniform(0, 5))),
                           rng.normal(size=3) * 0.2)
    res = gicp(base, truth.apply(base) + rng.normal(0, 0.01, base.shape))
    rel = res.transform.rotation @ truth.rotation.T
    ang = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
    assert ang < 0.1
    assert np.linalg.norm(res.transform.translation - truth.translation) < 1e-2
    for before, after in res.step_costs:
        assert after <= before


def test_cost_matches_definition():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(40, 3))
    tgt = rng.normal(size=(40, 3))
    cov = estimate_covariances(src, 10)
    t = RigidTransform(rotation([1, 2, 3], 0.1), [0.1, 0, 0])
    info = information(cov, cov, t)
    d = tgt - t.apply(src)
    ref = sum(float(d[i] @ info[i] @ d[i]) for i in range(len(d)))
    assert cost(src, tgt, info, t) == pytest.approx(ref, rel=1e-12)


def test_far_clouds_report_no_correspondences():
    rng = np.random.default_rng(5)
    pts = corner_cloud(rng, 100)
    res = gicp(pts, pts + [100.0, 0, 0], GicpConfig(max_corr_dist=1.0))
    assert res.failed and not res.converged


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        gicp(np.zeros((5, 3)), np.zeros((5, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        GicpConfig(max_corr_dist=0).validate()
    GicpConfig().validate()

"""Generalized-ICP (plane-to-plane) rigid registration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import RigidTransform, orthonormalize


@dataclass
class GicpConfig:
    k_neighbors: int = 20
    cov_epsilon: float = 1e-3
    max_corr_dist: float = 1.0
    max_iterations: int = 50
    trans_tol: float = 1e-4
    rot_tol: float = 1e-4

    def validate(self) -> None:
        for name, val in vars(self).items():
            if not val > 0:
                raise ValueError(f"gicp.{name} must be positive")


@dataclass
class GicpResult:
    transform: RigidTransform
    final_cost: float
    iterations: int
    converged: bool
    reason: str = ""
    # (cost before, cost after) of every accepted step, correspondences fixed
    step_costs: list[tuple[float, float]] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.reason == "no correspondences"


def estimate_covariances(points, k_neighbors: int = 20, cov_epsilon: float = 1e-3,
                         tree: cKDTree | None = None) -> np.ndarray:
    """Plane-regularized covariance per point.

    The covariance of each point's neighbourhood (itself plus its
    ``k_neighbors`` nearest) is eigendecomposed and its spectrum replaced by
    (cov_epsilon, 1, 1): a thin disc aligned with the local surface.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < k_neighbors + 1:
        raise ValueError(f"need at least {k_neighbors + 1} points, got {len(pts)}")
    tree = tree if tree is not None else cKDTree(pts)
    _, idx = tree.query(pts, k=k_neighbors + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = centered.transpose(0, 2, 1) @ centered / k_neighbors
    _, vecs = np.linalg.eigh(cov)
    spec = np.array([cov_epsilon, 1.0, 1.0])
    return (vecs * spec) @ vecs.transpose(0, 2, 1)


def skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, (n, 3) -> (n, 3, 3)."""
    v = np.atleast_2d(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = skew(w)[0]
    if theta < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * (k @ k)


def apply_increment(t: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Left-multiply ``t`` by the increment (dt, dw): p -> exp(dw) p + dt."""
    r = so3_exp(delta[3:])
    return RigidTransform(orthonormalize(r @ t.rotation), r @ t.translation + delta[:3])


def residuals(src, tgt, t: RigidTransform) -> np.ndarray:
    """d_i = target_i - T(source_i)."""
    return tgt - t.apply(src)


def jacobian(src, t: RigidTransform) -> np.ndarray:
    """d(d_i)/d(delta) at delta = 0 for the increment of ``apply_increment``;
    (n, 3, 6) with columns (translation, rotation)."""
    p = t.apply(src)
    j = np.empty((len(p), 3, 6))
    j[:, :, :3] = -np.eye(3)
    j[:, :, 3:] = skew(p)
    return j


def information(cov_src, cov_tgt, t: RigidTransform) -> np.ndarray:
    """(C_target + R C_source R^T)^-1 per correspondence."""
    r = t.rotation
    comb = cov_tgt + r @ cov_src @ r.T
    return np.linalg.inv(comb)


def cost(src, tgt, info, t: RigidTransform) -> float:
    d = residuals(src, tgt, t)
    return float(np.sum(d * (info @ d[:, :, None])[:, :, 0]))


def gicp(source, target, config: GicpConfig | None = None,
         initial: RigidTransform | None = None, target_tree: cKDTree | None = None,
         target_cov: np.ndarray | None = None) -> GicpResult:
    """Align ``source`` onto ``target``; the result maps source to target."""
    cfg = config or GicpConfig()
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    need = cfg.k_neighbors + 1
    if len(src) < need or len(tgt) < need:
        raise ValueError(f"gicp needs at least {need} points per cloud")
    tree = target_tree if target_tree is not None else cKDTree(tgt)
    cov_t = target_cov if target_cov is not None else estimate_covariances(tgt, cfg.k_neighbors, cfg.cov_epsilon, tree)
    cov_s = estimate_covariances(src, cfg.k_neighbors, cfg.cov_epsilon)
    t = initial if initial is not None else RigidTransform.identity()
    steps: list[tuple[float, float]] = []
    last_cost = np.nan
    for it in range(1, cfg.max_iterations + 1):
        dist, nn = tree.query(t.apply(src), distance_upper_bound=cfg.max_corr_dist)
        ok = np.isfinite(dist)
        if not ok.any():
            return GicpResult(t, np.inf, it, False, "no correspondences", steps)
        s, q = src[ok], tgt[nn[ok]]
        info = information(cov_s[ok], cov_t[nn[ok]], t)
        c0 = cost(s, q, info, t)
        d = residuals(s, q, t)
        jac = jacobian(s, t)
        jt_m = jac.transpose(0, 2, 1) @ info
        hess = (jt_m @ jac).sum(axis=0)
        grad = (jt_m @ d[:, :, None]).sum(axis=(0, 2))
        try:
            delta = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        # step halving keeps the cost non-increasing
        for _ in range(9):
            cand = apply_increment(t, delta)
            c1 = cost(s, q, info, cand)
            if c1 <= c0:
                break
            delta = delta / 2
        else:
            # already at a (numerical) minimum for these correspondences
            small = np.linalg.norm(delta[:3]) < cfg.trans_tol and np.linalg.norm(delta[3:]) < cfg.rot_tol
            return GicpResult(t, c0, it, bool(small), "no descent", steps)
        t = cand
        steps.append((c0, c1))
        last_cost = c1
        if np.linalg.norm(delta[:3]) < cfg.trans_tol and np.linalg.norm(delta[3:]) < cfg.rot_tol:
            return GicpResult(t, last_cost, it, True, "", steps)
    return GicpResult(t, last_cost, cfg.max_iterations, False, "max iterations", steps)

"""Sliding-window MAP estimator fusing wheel odometry and a monocular camera.

Window layout: up to N-1 past keyframe poses plus the current head state
(pose and manifold coefficients).  The error vector stacks one 6-dof block
per pose ([dtheta, p]) followed by the shared 6-dof manifold block.  Factors:

- prior from marginalization (information form, relinearized when absorbed),
- odometry prediction factors between consecutive poses (12-dim, whitened by
  the propagated process covariance),
- pinhole reprojection factors with per-feature Schur elimination,
- manifold position/orientation residuals for poses near the head.

After each marginalization the manifold is re-anchored at the head position's
first estimate; the prior and the surviving prediction factors are re-mapped
through the coefficient transform, so every residual is numerically unchanged
at the re-anchoring instant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import geom, manifold
from .geom import quat_to_rotation, rotation_log, skew
from .manifold import ManifoldFrame, ManifoldParams
from .propagation import OdomState, propagate_interval
from .sim import CameraModel

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Keyframe:
    id: int
    t: float
    p: np.ndarray
    q: np.ndarray

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)


@dataclass
class FeatureTrack:
    id: int
    observations: list = field(default_factory=list)  # (pose_id, uv)
    point: np.ndarray | None = None
    active: bool = True


@dataclass
class PredictionFactor:
    """Linearized relative-motion constraint from odometer propagation."""

    from_id: int
    to_id: int
    Phi: np.ndarray  # (12, 12)
    sqrt_info: np.ndarray  # (12, 12) whitener
    lin_from_p: np.ndarray
    lin_from_R: np.ndarray
    lin_to_p: np.ndarray
    lin_to_R: np.ndarray
    lin_m: np.ndarray  # manifold coefficients in the factor's parameterization
    m_back: np.ndarray = field(default_factory=lambda: np.eye(6))


@dataclass
class Prior:
    """Gaussian prior in information form over a set of window blocks.

    cost(eps) = eps^T H eps + 2 b^T eps, with eps measured from the stored
    linearization values.
    """

    keys: list  # ordered block keys: ("pose", id) or ("m",)
    H: np.ndarray
    b: np.ndarray
    lin_poses: dict  # pose_id -> (p, R)
    lin_m: np.ndarray


@dataclass
class EstimatorConfig:
    window_size: int = 8
    camera: CameraModel = field(default_factory=CameraModel)
    pixel_sigma: float = 0.8
    sigma_p: float = 0.05  # manifold position residual (m)
    sigma_q: float = 0.02  # manifold orientation residual weight
    epsilon: float = 15.0  # manifold constraint region (m)
    huber_delta: float = 1.345
    min_baseline: float = 0.05
    chi2_gate: float = float(chi2.ppf(0.999, 2))
    max_iterations: int = 10
    cost_tolerance: float = 1e-6
    step_tolerance: float = 1e-8
    min_depth: float = 0.2
    max_depth: float = 80.0
    # Process-noise floors keep the prediction information finite and cover
    # discretization-level model error per keyframe interval.
    floor_theta: float = 3e-4
    floor_p: float = 3e-4
    floor_m: float = 1e-6
    # Re-anchoring noise scales (per metre / per radian of anchor motion).
    alpha_p: tuple = (2e-3, 2e-3, 2e-3, 5e-4, 5e-4, 5e-4)
    alpha_q: tuple = (1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4)
    # Variant switches.
    use_manifold: bool = True
    manifold_mask: tuple = (True, True, True, True, True, True)
    reanchor: bool = True
    planar_prediction: bool = False  # no-manifold baseline prediction
    planar_sigma_z: float = 0.02  # m per metre travelled
    planar_sigma_rp: float = 0.01  # rad per metre travelled
    initial_pose_sigma_p: float = 1e-4
    initial_pose_sigma_q: float = 1e-5
    initial_manifold_sigmas: tuple = (0.05, 0.05, 0.05, 0.05, 0.05, 0.05)


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def pose_error(p, R, lin_p, lin_R):
    """6-vector [dtheta, dp] with R = lin_R @ exp(skew(dtheta))."""
    return np.concatenate([rotation_log(lin_R.T @ R), p - lin_p])


def schur_marginalize(H: np.ndarray, b: np.ndarray, keep, drop):
    """Marginalize the ``drop`` indices of a quadratic cost x^T H x + 2 b^T x.

    Returns the Schur complement (H', b') over the kept indices; a damped
    pseudo-inverse covers singular marginal blocks.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    keep = np.asarray(keep, dtype=int)
    drop = np.asarray(drop, dtype=int)
    Hkk = H[np.ix_(keep, keep)]
    Hkd = H[np.ix_(keep, drop)]
    Hdd = 0.5 * (H[np.ix_(drop, drop)] + H[np.ix_(drop, drop)].T)
    bd = b[drop]
    rhs = np.column_stack([Hkd.T, bd])
    try:
        L = np.linalg.cholesky(Hdd)
        X = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    except np.linalg.LinAlgError:
        logger.warning("singular marginal block; using pseudo-inverse")
        X = np.linalg.pinv(Hdd, rcond=1e-12, hermitian=True) @ rhs
    Hp = Hkk - Hkd @ X[:, :-1]
    bp = b[keep] - Hkd @ X[:, -1]
    return 0.5 * (Hp + Hp.T), bp


def _sqrt_info_from_cov(cov: np.ndarray) -> np.ndarray:
    """Whitener W such that W @ r has unit covariance."""
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    return np.linalg.inv(L)


def _huber_weight(norm: float, delta: float) -> float:
    return 1.0 if norm <= delta else delta / norm


# ---------------------------------------------------------------------------
# Reprojection and triangulation
# ---------------------------------------------------------------------------


def reprojection_residual(p, R, point, uv, camera: CameraModel):
    """Pinhole residual (pixels) and Jacobians at one pose.

    Returns (r, J_pose(2x6 in [dtheta, dp]), J_point(2x3)), or None when the
    point has non-positive depth in the camera.
    """
    X_o = R.T @ (point - p)
    X_c = camera.R_co @ (X_o - camera.t_oc)
    if X_c[2] <= 1e-6:
        return None
    x, y, z = X_c
    r = np.array(
        [camera.fx * x / z + camera.cx - uv[0], camera.fy * y / z + camera.cy - uv[1]]
    )
    J_pi = np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * x / z**2],
            [0.0, camera.fy / z, -camera.fy * y / z**2],
        ]
    )
    J_c = J_pi @ camera.R_co
    J_pose = np.hstack([J_c @ skew(X_o), -J_c @ R.T])
    J_point = J_c @ R.T
    return r, J_pose, J_point


def triangulate(obs, poses, camera: CameraModel, config: EstimatorConfig):
    """Multi-view point from ray intersection plus Gauss-Newton refinement.

    ``obs`` is [(pose_id, uv)], ``poses`` maps pose_id -> (p, R).  Returns the
    world point, or None on insufficient baseline, bad depth, or gate failure.
    """
    origins, dirs = [], []
    for pose_id, uv in obs:
        p, R = poses[pose_id]
        ray_c = np.array(
            [(uv[0] - camera.cx) / camera.fx, (uv[1] - camera.cy) / camera.fy, 1.0]
        )
        d = R @ (camera.R_co.T @ ray_c)
        d /= np.linalg.norm(d)
        origins.append(p + R @ camera.t_oc)
        dirs.append(d)
    origins = np.array(origins)
    dirs = np.array(dirs)
    if np.max(np.linalg.norm(origins - origins[0], axis=1)) < config.min_baseline:
        return None

    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for o, d in zip(origins, dirs):
        P = np.eye(3) - np.outer(d, d)
        A += P
        rhs += P @ o
    try:
        point = np.linalg.solve(A + 1e-12 * np.eye(3), rhs)
    except np.linalg.LinAlgError:
        return None

    for _ in range(5):
        Hf = np.zeros((3, 3))
        gf = np.zeros(3)
        for pose_id, uv in obs:
            p, R = poses[pose_id]
            out = reprojection_residual(p, R, point, uv, camera)
            if out is None:
                return None
            r, _, J_point = out
            Hf += J_point.T @ J_point
            gf += J_point.T @ r
        try:
            step = np.linalg.solve(Hf + 1e-9 * np.eye(3), -gf)
        except np.linalg.LinAlgError:
            return None
        point = point + step
        if np.linalg.norm(step) < 1e-10:
            break

    total = 0.0
    for pose_id, uv in obs:
        p, R = poses[pose_id]
        out = reprojection_residual(p, R, point, uv, camera)
        if out is None:
            return None
        X_c = camera.R_co @ (R.T @ (point - p) - camera.t_oc)
        if not (config.min_depth < X_c[2] < config.max_depth):
            return None
        total += float(out[0] @ out[0]) / config.pixel_sigma**2
    if total / len(obs) > config.chi2_gate:
        return None
    return point


# ---------------------------------------------------------------------------
# Window
# ---------------------------------------------------------------------------


class Window:
    """Sliding window of keyframes plus the head state and its factors."""

    def __init__(self, head: OdomState, head_id: int, config: EstimatorConfig):
        self.config = config
        self.keyframes: list[Keyframe] = []
        self.head = head
        self.head_id = head_id
        self.prior: Prior | None = None
        self.pred_factors: list[PredictionFactor] = []
        self.tracks: dict[int, FeatureTrack] = {}
        self.first_xy: dict[int, np.ndarray] = {head_id: head.p[:2].copy()}
        self.solve_failed = False

    def pose_ids(self):
        return [kf.id for kf in self.keyframes] + [self.head_id]

    def block_layout(self):
        keys = [("pose", pid) for pid in self.pose_ids()]
        if self.config.use_manifold:
            keys.append(("m",))
        offsets = {}
        off = 0
        for k in keys:
            offsets[k] = off
            off += 6
        return keys, offsets, off

    def pose_value(self, pose_id):
        if pose_id == self.head_id:
            return self.head.p, self.head.rotation()
        for kf in self.keyframes:
            if kf.id == pose_id:
                return kf.p, kf.rotation()
        raise KeyError(pose_id)

    def apply_step(self, delta, offsets):
        for kf in self.keyframes:
            off = offsets[("pose", kf.id)]
            kf.q = geom.quat_boxplus(kf.q, delta[off : off + 3])
            kf.p = kf.p + delta[off + 3 : off + 6]
        off = offsets[("pose", self.head_id)]
        self.head.q = geom.quat_boxplus(self.head.q, delta[off : off + 3])
        self.head.p = self.head.p + delta[off + 3 : off + 6]
        if self.config.use_manifold:
            off = offsets[("m",)]
            self.head.m = ManifoldParams(self.head.m.vec + delta[off : off + 6])

    def snapshot(self):
        return (
            [(kf.p.copy(), kf.q.copy()) for kf in self.keyframes],
            (self.head.p.copy(), self.head.q.copy(), self.head.m.vec.copy()),
        )

    def restore(self, snap):
        for kf, (p, q) in zip(self.keyframes, snap[0]):
            kf.p, kf.q = p.copy(), q.copy()
        self.head.p, self.head.q = snap[1][0].copy(), snap[1][1].copy()
        self.head.m = ManifoldParams(snap[1][2].copy())


# ---------------------------------------------------------------------------
# Residual assembly
# ---------------------------------------------------------------------------


def _factor_jacobians(factor: PredictionFactor):
    """Constant whitened Jacobians of a prediction factor (cached)."""
    cached = getattr(factor, "_jac_cache", None)
    if cached is not None:
        return cached
    W = factor.sqrt_info
    J_from = -W @ factor.Phi[:, 0:6]
    J_to = W[:, 0:6].copy()
    Sm = np.vstack([np.zeros((6, 6)), factor.m_back])
    J_m = W @ (Sm - factor.Phi @ Sm)
    factor._jac_cache = (J_from, J_to, J_m)
    return factor._jac_cache


def prediction_residual(factor: PredictionFactor, window: Window):
    """Whitened 12-dim prediction residual and block Jacobians."""
    p_from, R_from = window.pose_value(factor.from_id)
    p_to, R_to = window.pose_value(factor.to_id)

    eps_from = np.zeros(12)
    eps_from[0:6] = pose_error(p_from, R_from, factor.lin_from_p, factor.lin_from_R)
    eps_to = np.zeros(12)
    eps_to[0:6] = pose_error(p_to, R_to, factor.lin_to_p, factor.lin_to_R)
    if window.config.use_manifold:
        m_err = factor.m_back @ window.head.m.vec - factor.lin_m
        eps_from[6:12] = m_err
        eps_to[6:12] = m_err

    r = eps_to - factor.Phi @ eps_from
    J_from, J_to, J_m = _factor_jacobians(factor)
    return factor.sqrt_info @ r, J_from, J_to, J_m


def _manifold_system(window: Window, with_jac=True):
    """Batched manifold constraints for poses within epsilon of the head.

    Returns (slots, r (K,3), J_pose (K,3,6), J_m (K,3,6)) whitened; row 0 is
    the on-surface residual, rows 1:3 the gradient alignment.
    """
    cfg = window.config
    if not cfg.use_manifold:
        return [], np.zeros((0, 3)), None, None
    mvec = window.head.m.vec
    frame = window.head.frame
    P, Rs = _stack_poses(window)
    head_xy = window.head.p[:2]
    dists = np.linalg.norm(P[:, :2] - head_xy, axis=1)
    sel = dists < cfg.epsilon
    sel[-1] = True  # the head itself always qualifies
    slots = np.flatnonzero(sel)
    P = P[slots]
    Rs = Rs[slots]
    K = len(slots)

    A = np.array([[mvec[3], mvec[4]], [mvec[4], mvec[5]]])
    Ro = frame.rotation
    dp = (P[:, :2] - frame.anchor) @ Ro.T  # (K, 2) local coordinates
    gxy = (dp @ A.T + mvec[1:3]) @ Ro  # rows: Ro^T (B + A dp)
    g = np.concatenate([gxy, np.ones((K, 1))], axis=1)
    value = P[:, 2] + mvec[0] + dp @ mvec[1:3] + 0.5 * np.einsum(
        "ki,ij,kj->k", dp, A, dp
    )
    u = Rs[:, :, 2]
    w_q = 1.0 / cfg.sigma_q
    # skew12(u) @ g, batched.
    align = np.stack(
        [
            -u[:, 2] * g[:, 1] + u[:, 1] * g[:, 2],
            u[:, 2] * g[:, 0] - u[:, 0] * g[:, 2],
        ],
        axis=1,
    )
    r = np.concatenate([(value / cfg.sigma_p)[:, None], w_q * align], axis=1)
    if not with_jac:
        return slots, r, None, None

    def batch_skew(v):
        S = np.zeros((len(v), 3, 3))
        S[:, 0, 1] = -v[:, 2]
        S[:, 0, 2] = v[:, 1]
        S[:, 1, 0] = v[:, 2]
        S[:, 1, 2] = -v[:, 0]
        S[:, 2, 0] = -v[:, 1]
        S[:, 2, 1] = v[:, 0]
        return S

    Abar = manifold.a_bar_world(mvec, frame)
    Gamma = np.zeros((K, 3, 6))
    Gamma[:, :2, 1:3] = Ro.T[None]
    quad = np.zeros((K, 2, 3))
    quad[:, 0, 0] = dp[:, 0]
    quad[:, 0, 1] = dp[:, 1]
    quad[:, 1, 1] = dp[:, 0]
    quad[:, 1, 2] = dp[:, 1]
    Gamma[:, :2, 3:6] = Ro.T[None] @ quad
    value_wrt = np.column_stack(
        [
            np.ones(K),
            dp[:, 0],
            dp[:, 1],
            0.5 * dp[:, 0] ** 2,
            dp[:, 0] * dp[:, 1],
            0.5 * dp[:, 1] ** 2,
        ]
    )

    J_pose = np.zeros((K, 3, 6))
    J_m = np.zeros((K, 3, 6))
    J_pose[:, 0, 3:6] = g / cfg.sigma_p
    J_m[:, 0, :] = value_wrt / cfg.sigma_p
    Sg = batch_skew(g)
    Su = batch_skew(u)
    e3s = skew(geom.E3)
    J_pose[:, 1:3, 0:3] = w_q * (Sg @ Rs @ e3s)[:, 0:2]
    J_pose[:, 1:3, 3:6] = w_q * (Su @ Abar)[:, 0:2]
    J_m[:, 1:3, :] = w_q * (Su @ Gamma)[:, 0:2]
    return slots, r, J_pose, J_m


def manifold_residuals(window: Window):
    """Whitened manifold constraints as per-pose entries.

    Each entry is (pose_id, r(3,), J_pose(3x6), J_m(3x6)); row 0 is the
    on-surface residual, rows 1:3 the gradient-alignment residual.
    """
    slots, r, J_pose, J_m = _manifold_system(window)
    pose_ids = window.pose_ids()
    return [(pose_ids[s], r[k], J_pose[k], J_m[k]) for k, s in enumerate(slots)]


def _prior_sqrt(prior: Prior):
    """Cached square-root factorization (J0, r0) with J0^T J0 = H, J0^T r0 = b."""
    cached = getattr(prior, "_sqrt_cache", None)
    if cached is not None:
        return cached
    w, V = np.linalg.eigh(0.5 * (prior.H + prior.H.T))
    wmax = max(float(np.max(w)), 1e-12) if len(w) else 1e-12
    keep = w > 1e-10 * wmax
    sqrt_w = np.sqrt(w[keep])
    J0 = (V[:, keep] * sqrt_w).T
    r0 = (V[:, keep] / sqrt_w).T @ prior.b
    prior._sqrt_cache = (J0, r0)
    return J0, r0


def prior_residual(window: Window):
    """Square-root form of the prior at the current estimate, or None."""
    prior = window.prior
    if prior is None:
        return None
    dims = 6 * len(prior.keys)
    eps = np.zeros(dims)
    for i, key in enumerate(prior.keys):
        if key[0] == "pose":
            p, R = window.pose_value(key[1])
            lp, lR = prior.lin_poses[key[1]]
            eps[6 * i : 6 * i + 6] = pose_error(p, R, lp, lR)
        else:
            eps[6 * i : 6 * i + 6] = window.head.m.vec - prior.lin_m
    J0, r0 = _prior_sqrt(prior)
    return J0 @ eps + r0, J0, list(prior.keys)


def _build_pairs(track_slot, n_tracks):
    counts = np.bincount(track_slot, minlength=n_tracks)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pair_a, pair_b = [], []
    for s, c in zip(starts, counts):
        idx = np.arange(s, s + c)
        pair_a.append(np.repeat(idx, c))
        pair_b.append(np.tile(idx, c))
    if not pair_a:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(pair_a), np.concatenate(pair_b)


class _Topology:
    """Fixed index structure of the reprojection system for one optimize call.

    Observations are grouped contiguously by track, in window pose order.
    """

    __slots__ = ("track_ids", "uv", "pose_slot", "track_slot", "pair_a", "pair_b", "n_obs", "n_tracks")

    def __init__(self, window: Window = None, track_ids=None):
        if window is None:
            return
        pose_index = {pid: i for i, pid in enumerate(window.pose_ids())}
        self.track_ids = list(track_ids)
        uv, p_slot, t_slot = [], [], []
        for ti, tid in enumerate(self.track_ids):
            for pose_id, obs_uv in window.tracks[tid].observations:
                if pose_id in pose_index:
                    uv.append(obs_uv)
                    p_slot.append(pose_index[pose_id])
                    t_slot.append(ti)
        self.uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        self.pose_slot = np.asarray(p_slot, dtype=int)
        self.track_slot = np.asarray(t_slot, dtype=int)
        self.n_obs = len(self.uv)
        self.n_tracks = len(self.track_ids)
        self.pair_a, self.pair_b = _build_pairs(self.track_slot, self.n_tracks)

    def subset(self, keep_mask):
        """Topology restricted to the tracks flagged in keep_mask."""
        out = _Topology()
        keep_mask = np.asarray(keep_mask, dtype=bool)
        obs_keep = keep_mask[self.track_slot]
        remap = np.cumsum(keep_mask) - 1
        out.track_ids = [tid for tid, k in zip(self.track_ids, keep_mask) if k]
        out.uv = self.uv[obs_keep]
        out.pose_slot = self.pose_slot[obs_keep]
        out.track_slot = remap[self.track_slot[obs_keep]]
        out.n_obs = len(out.uv)
        out.n_tracks = len(out.track_ids)
        out.pair_a, out.pair_b = _build_pairs(out.track_slot, out.n_tracks)
        return out


def _stack_poses(window: Window):
    ps, Rs = [], []
    for pid in window.pose_ids():
        p, R = window.pose_value(pid)
        ps.append(p)
        Rs.append(R)
    return np.asarray(ps), np.asarray(Rs)


def _batch_reprojection(P, Rs, topo: _Topology, points_arr, camera: CameraModel, with_jac=True):
    """Vectorized pinhole residuals over every observation in the topology.

    Invalid (non-positive depth) observations get zeroed rows, which drops
    them from the normal equations.
    """
    if topo.n_obs == 0:
        z2 = np.zeros((0, 2))
        return np.zeros(0, bool), z2, np.zeros((0, 2, 6)), np.zeros((0, 2, 3))
    p_o = P[topo.pose_slot]
    R_o = Rs[topo.pose_slot]
    f_w = points_arr[topo.track_slot]
    X_o = np.einsum("nji,nj->ni", R_o, f_w - p_o)
    X_c = (X_o - camera.t_oc) @ camera.R_co.T
    z = X_c[:, 2]
    valid = z > 1e-6
    z_safe = np.where(valid, z, 1.0)
    u = camera.fx * X_c[:, 0] / z_safe + camera.cx
    v = camera.fy * X_c[:, 1] / z_safe + camera.cy
    r = np.stack([u - topo.uv[:, 0], v - topo.uv[:, 1]], axis=1)
    r[~valid] = 0.0
    if not with_jac:
        return valid, r, None, None
    J_pi = np.zeros((topo.n_obs, 2, 3))
    J_pi[:, 0, 0] = camera.fx / z_safe
    J_pi[:, 1, 1] = camera.fy / z_safe
    J_pi[:, 0, 2] = -camera.fx * X_c[:, 0] / z_safe**2
    J_pi[:, 1, 2] = -camera.fy * X_c[:, 1] / z_safe**2
    J_c = J_pi @ camera.R_co
    Sx = np.zeros((topo.n_obs, 3, 3))
    Sx[:, 0, 1] = -X_o[:, 2]
    Sx[:, 0, 2] = X_o[:, 1]
    Sx[:, 1, 0] = X_o[:, 2]
    Sx[:, 1, 2] = -X_o[:, 0]
    Sx[:, 2, 0] = -X_o[:, 1]
    Sx[:, 2, 1] = X_o[:, 0]
    R_T = np.transpose(R_o, (0, 2, 1))
    J_point = J_c @ R_T
    J_pose = np.concatenate([J_c @ Sx, -J_point], axis=2)
    J_pose[~valid] = 0.0
    J_point[~valid] = 0.0
    return valid, r, J_pose, J_point


def _whitened_feature_system(window: Window, topo: _Topology, points_arr):
    """Residuals and Jacobians whitened by the pixel noise and Huber weights."""
    cfg = window.config
    P, Rs = _stack_poses(window)
    valid, r, J_pose, J_point = _batch_reprojection(P, Rs, topo, points_arr, cfg.camera)
    inv_sigma = 1.0 / cfg.pixel_sigma
    r = r * inv_sigma
    norms = np.linalg.norm(r, axis=1)
    w = np.sqrt(np.where(norms <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(norms, 1e-12)))
    r = r * w[:, None]
    J_pose = J_pose * (inv_sigma * w)[:, None, None]
    J_point = J_point * (inv_sigma * w)[:, None, None]
    return r, J_pose, J_point


def _feature_cost(window: Window, topo: _Topology, points_arr) -> float:
    cfg = window.config
    P, Rs = _stack_poses(window)
    _, r, _, _ = _batch_reprojection(P, Rs, topo, points_arr, cfg.camera, with_jac=False)
    norms = np.linalg.norm(r, axis=1) / cfg.pixel_sigma
    d = cfg.huber_delta
    return float(np.sum(np.where(norms <= d, norms**2, 2.0 * d * norms - d * d)))


def total_cost(window: Window, points: dict) -> float:
    """Objective value: squared whitened residuals (Huber rho on pixels)."""
    cfg = window.config
    cost = 0.0
    pr = prior_residual(window)
    if pr is not None:
        cost += float(pr[0] @ pr[0])
    for factor in window.pred_factors:
        r, *_ = prediction_residual(factor, window)
        cost += float(r @ r)
    for _, r, _, _ in manifold_residuals(window):
        cost += float(r @ r)
    inv_sigma = 1.0 / cfg.pixel_sigma
    in_window = set(window.pose_ids())
    d = cfg.huber_delta
    for tid, point in points.items():
        for pose_id, uv in window.tracks[tid].observations:
            if pose_id not in in_window:
                continue
            p, R = window.pose_value(pose_id)
            out = reprojection_residual(p, R, point, uv, cfg.camera)
            if out is None:
                continue
            rn = float(np.linalg.norm(out[0])) * inv_sigma
            cost += rn * rn if rn <= d else 2.0 * d * rn - d * d
    return cost


# ---------------------------------------------------------------------------
# Normal equations, LM, marginalization
# ---------------------------------------------------------------------------


def _prior_eps(window: Window):
    prior = window.prior
    eps = np.zeros(6 * len(prior.keys))
    for i, key in enumerate(prior.keys):
        if key[0] == "pose":
            p, R = window.pose_value(key[1])
            lp, lR = prior.lin_poses[key[1]]
            eps[6 * i : 6 * i + 6] = pose_error(p, R, lp, lR)
        else:
            eps[6 * i : 6 * i + 6] = window.head.m.vec - prior.lin_m
    return eps


def _prior_cost_const(prior: Prior) -> float:
    _, r0 = _prior_sqrt(prior)
    return float(r0 @ r0)


def _factor_gram(factor: PredictionFactor):
    cached = getattr(factor, "_gram_cache", None)
    if cached is not None:
        return cached
    J_from, J_to, J_m = _factor_jacobians(factor)
    Jstack = np.hstack([J_from, J_to, J_m])  # (12, 18)
    factor._gram_cache = (Jstack, Jstack.T @ Jstack)
    return factor._gram_cache


def _factor_raw_residual(factor: PredictionFactor, window: Window):
    p_from, R_from = window.pose_value(factor.from_id)
    p_to, R_to = window.pose_value(factor.to_id)
    eps_from = np.zeros(12)
    eps_from[0:6] = pose_error(p_from, R_from, factor.lin_from_p, factor.lin_from_R)
    eps_to = np.zeros(12)
    eps_to[0:6] = pose_error(p_to, R_to, factor.lin_to_p, factor.lin_to_R)
    if window.config.use_manifold:
        m_err = factor.m_back @ window.head.m.vec - factor.lin_m
        eps_from[6:12] = m_err
        eps_to[6:12] = m_err
    return factor.sqrt_info @ (eps_to - factor.Phi @ eps_from)


def _direct_system(window: Window):
    """Normal equations of the prior, prediction, and manifold factors."""
    keys, offsets, dims = window.block_layout()
    H = np.zeros((dims, dims))
    g = np.zeros(dims)
    use_m = window.config.use_manifold
    off_m = offsets[("m",)] if use_m else None

    prior = window.prior
    if prior is not None:
        eps = _prior_eps(window)
        gp = prior.H @ eps + prior.b
        offs = [offsets[k] for k in prior.keys]
        for i, oa in enumerate(offs):
            g[oa : oa + 6] += gp[6 * i : 6 * i + 6]
            for j, ob in enumerate(offs):
                H[oa : oa + 6, ob : ob + 6] += prior.H[6 * i : 6 * i + 6, 6 * j : 6 * j + 6]

    for factor in window.pred_factors:
        r = _factor_raw_residual(factor, window)
        Jstack, G = _factor_gram(factor)
        gf = Jstack.T @ r
        offs = [offsets[("pose", factor.from_id)], offsets[("pose", factor.to_id)]]
        if use_m:
            offs.append(off_m)
        for i, oa in enumerate(offs):
            g[oa : oa + 6] += gf[6 * i : 6 * i + 6]
            for j, ob in enumerate(offs):
                H[oa : oa + 6, ob : ob + 6] += G[6 * i : 6 * i + 6, 6 * j : 6 * j + 6]

    slots, r_m, J_pose, J_m = _manifold_system(window)
    pose_offs = [offsets[("pose", pid)] for pid in window.pose_ids()]
    for k, s in enumerate(slots):
        oa = pose_offs[s]
        Jp, Jm, r = J_pose[k], J_m[k], r_m[k]
        g[oa : oa + 6] += Jp.T @ r
        g[off_m : off_m + 6] += Jm.T @ r
        H[oa : oa + 6, oa : oa + 6] += Jp.T @ Jp
        H[oa : oa + 6, off_m : off_m + 6] += Jp.T @ Jm
        H[off_m : off_m + 6, oa : oa + 6] += Jm.T @ Jp
        H[off_m : off_m + 6, off_m : off_m + 6] += Jm.T @ Jm
    return H, g, offsets, dims


def _direct_cost(window: Window) -> float:
    cost = 0.0
    prior = window.prior
    if prior is not None:
        eps = _prior_eps(window)
        cost += float(eps @ (prior.H @ eps) + 2.0 * (prior.b @ eps)) + _prior_cost_const(prior)
    for factor in window.pred_factors:
        r = _factor_raw_residual(factor, window)
        cost += float(r @ r)
    _, r_m, _, _ = _manifold_system(window, with_jac=False)
    cost += float(np.sum(r_m * r_m))
    return cost


def _usable_tracks(window: Window):
    in_window = set(window.pose_ids())
    usable = {}
    for tid, track in window.tracks.items():
        obs = [(pid, uv) for pid, uv in track.observations if pid in in_window]
        if len(obs) >= 2:
            usable[tid] = obs
    return usable


def _triangulate_all(window: Window, topo: _Topology):
    """Batched triangulation of the topology's tracks; same gates as triangulate.

    Returns (ok mask over tracks, points array for every track).
    """
    cfg = window.config
    cam = cfg.camera
    if topo.n_tracks == 0:
        return np.zeros(0, dtype=bool), np.zeros((0, 3))
    P, Rs = _stack_poses(window)
    p_o = P[topo.pose_slot]
    R_o = Rs[topo.pose_slot]

    ray_c = np.stack(
        [
            (topo.uv[:, 0] - cam.cx) / cam.fx,
            (topo.uv[:, 1] - cam.cy) / cam.fy,
            np.ones(topo.n_obs),
        ],
        axis=1,
    )
    d = np.einsum("nij,nj->ni", R_o, ray_c @ cam.R_co)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    origins = p_o + R_o @ cam.t_oc

    T = topo.n_tracks
    ts = topo.track_slot
    # Baseline gate: farthest origin from each track's first observation.
    first = np.full(T, topo.n_obs, dtype=int)
    np.minimum.at(first, ts, np.arange(topo.n_obs))
    base_d = np.linalg.norm(origins - origins[first[ts]], axis=1)
    baseline = np.zeros(T)
    np.maximum.at(baseline, ts, base_d)
    ok = baseline >= cfg.min_baseline

    Pd = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A = np.zeros((T, 3, 3))
    rhs = np.zeros((T, 3))
    np.add.at(A, ts, Pd)
    np.add.at(rhs, ts, np.einsum("nij,nj->ni", Pd, origins))
    A = A + 1e-12 * np.eye(3)
    ok &= np.abs(np.linalg.det(A)) > 1e-20
    A_safe = np.where(ok[:, None, None], A, np.eye(3))
    points_arr = np.linalg.solve(A_safe, rhs[:, :, None])[:, :, 0]

    for _ in range(5):
        valid, r, _, J_point = _batch_reprojection(P, Rs, topo, points_arr, cam)
        ok &= ~_any_invalid_per_track(valid, ts, T)
        Hf = np.zeros((T, 3, 3))
        gf = np.zeros((T, 3))
        np.add.at(Hf, ts, np.einsum("nij,nil->njl", J_point, J_point))
        np.add.at(gf, ts, np.einsum("nij,ni->nj", J_point, r))
        Hf = Hf + 1e-9 * np.eye(3)
        ok &= np.abs(np.linalg.det(Hf)) > 1e-18
        Hf_safe = np.where(ok[:, None, None], Hf, np.eye(3))
        step = np.linalg.solve(Hf_safe, -gf[:, :, None])[:, :, 0]
        points_arr = points_arr + np.where(ok[:, None], step, 0.0)
        if not np.any(ok) or np.max(np.abs(step[ok])) < 1e-10:
            break

    valid, r, _, _ = _batch_reprojection(P, Rs, topo, points_arr, cam, with_jac=False)
    ok &= ~_any_invalid_per_track(valid, ts, T)
    X_o = np.einsum("nji,nj->ni", R_o, points_arr[ts] - p_o)
    depth = (X_o - cam.t_oc) @ cam.R_co.T[:, 2]
    bad_depth = (depth <= cfg.min_depth) | (depth >= cfg.max_depth)
    bad = np.zeros(T, dtype=bool)
    np.logical_or.at(bad, ts, bad_depth)
    ok &= ~bad

    chi = np.zeros(T)
    np.add.at(chi, ts, np.sum(r * r, axis=1) / cfg.pixel_sigma**2)
    counts = np.zeros(T)
    np.add.at(counts, ts, 1.0)
    ok &= chi / np.maximum(counts, 1.0) <= cfg.chi2_gate
    return ok, points_arr


def _any_invalid_per_track(valid, ts, T):
    bad = np.zeros(T, dtype=bool)
    np.logical_or.at(bad, ts, ~valid)
    return bad


def _scatter_feature_system(window: Window, topo: _Topology, points_arr, offsets, dims):
    """Direct feature terms plus the pieces needed for Schur elimination."""
    r, Jp, Jf = _whitened_feature_system(window, topo, points_arr)
    nb = dims // 6
    pose_blk = topo.pose_slot  # pose block index == stacking order
    H4 = np.zeros((nb, nb, 6, 6))
    g2 = np.zeros((nb, 6))
    np.add.at(H4, (pose_blk, pose_blk), np.einsum("nij,nil->njl", Jp, Jp))
    np.add.at(g2, pose_blk, np.einsum("nij,ni->nj", Jp, r))

    T = topo.n_tracks
    Hff = np.zeros((T, 3, 3))
    gf = np.zeros((T, 3))
    np.add.at(Hff, topo.track_slot, np.einsum("nij,nil->njl", Jf, Jf))
    np.add.at(gf, topo.track_slot, np.einsum("nij,ni->nj", Jf, r))
    B = np.einsum("nij,nil->njl", Jp, Jf)  # (n_obs, 6, 3)
    return H4, g2, Hff, gf, B


def _schur_apply(topo: _Topology, H4, g2, Hff, gf, B, lam):
    """Schur-eliminate the damped feature blocks; returns (H4', g2', Hff_inv)."""
    diag_damp = np.zeros_like(Hff)
    idx = np.arange(3)
    diag_damp[:, idx, idx] = lam * Hff[:, idx, idx]
    Hff_inv = np.linalg.inv(Hff + diag_damp + 1e-12 * np.eye(3))
    K = np.einsum("nij,njl->nil", B, Hff_inv[topo.track_slot])  # (n_obs, 6, 3)
    H4s = H4.copy()
    g2s = g2.copy()
    pa, pb = topo.pair_a, topo.pair_b
    if len(pa):
        pair_blocks = -np.einsum("kij,klj->kil", K[pa], B[pb])
        np.add.at(H4s, (topo.pose_slot[pa], topo.pose_slot[pb]), pair_blocks)
        np.add.at(g2s, topo.pose_slot, -np.einsum("nij,nj->ni", K, gf[topo.track_slot]))
    return H4s, g2s, Hff_inv


def _active_indices(window: Window, offsets, dims):
    cfg = window.config
    active = np.ones(dims, dtype=bool)
    if cfg.use_manifold:
        off = offsets[("m",)]
        for i, on in enumerate(cfg.manifold_mask):
            active[off + i] = bool(on)
    return np.flatnonzero(active)


def _fold(H4, g2, dims):
    nb = dims // 6
    return H4.transpose(0, 2, 1, 3).reshape(dims, dims), g2.reshape(dims)


def optimize(window: Window, config: EstimatorConfig | None = None):
    """Levenberg-Marquardt refinement of the window; returns the window.

    Orientation updates are multiplicative; accepted steps never increase the
    objective; terminates on relative cost decrease, step norm, or the
    iteration cap.
    """
    cfg = config or window.config
    window.solve_failed = False

    usable = _usable_tracks(window)
    topo_cand = _Topology(window, list(usable.keys()))
    ok, pts_all = _triangulate_all(window, topo_cand)
    topo = topo_cand.subset(ok)
    points_arr = pts_all[ok] if topo.n_tracks else np.zeros((0, 3))

    cost = _direct_cost(window) + _feature_cost(window, topo, points_arr)
    lam = 1e-4
    rel_drop = np.inf
    step_norm = np.inf
    for _ in range(cfg.max_iterations):
        H, g, offsets, dims = _direct_system(window)
        H4f, g2f, Hff, gf, B = _scatter_feature_system(window, topo, points_arr, offsets, dims)
        active = _active_indices(window, offsets, dims)
        accepted = False
        for _attempt in range(8):
            H4s, g2s, Hff_inv = _schur_apply(topo, H4f, g2f, Hff, gf, B, lam)
            Hf_fold, gf_fold = _fold(H4s, g2s, dims)
            Hs = H + Hf_fold
            gs = g + gf_fold
            Ha = Hs[np.ix_(active, active)]
            Ha = Ha + lam * np.diag(np.diag(Ha)) + 1e-12 * np.eye(len(active))
            try:
                delta_a = np.linalg.solve(Ha, -gs[active])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            delta = np.zeros(dims)
            delta[active] = delta_a

            snap = window.snapshot()
            window.apply_step(delta, offsets)
            if topo.n_obs:
                dx_obs = delta.reshape(-1, 6)[topo.pose_slot]
                corr = np.zeros((topo.n_tracks, 3))
                np.add.at(corr, topo.track_slot, np.einsum("nij,ni->nj", B, dx_obs))
                new_points = points_arr + np.einsum(
                    "tij,tj->ti", Hff_inv, -gf - corr
                )
            else:
                new_points = points_arr
            new_cost = _direct_cost(window) + _feature_cost(window, topo, new_points)
            if new_cost <= cost + 1e-12:
                points_arr = new_points
                accepted = True
                step_norm = float(np.linalg.norm(delta))
                rel_drop = (cost - new_cost) / max(cost, 1e-12)
                cost = new_cost
                lam = max(lam / 3.0, 1e-9)
                break
            window.restore(snap)
            lam *= 4.0
        if not accepted:
            window.solve_failed = True
            logger.warning("optimizer could not find a descent step; window kept")
            break
        if rel_drop < cfg.cost_tolerance or step_norm < cfg.step_tolerance:
            break

    for i, tid in enumerate(topo.track_ids):
        window.tracks[tid].point = points_arr[i].copy()
    window._system_cache = (topo, points_arr)
    window._last_cost = cost
    return window


def window_information(window: Window):
    """Full information matrix over the window blocks at the current estimate."""
    cached = getattr(window, "_system_cache", None)
    if cached is not None:
        topo, points_arr = cached
    else:
        topo_cand = _Topology(window, list(_usable_tracks(window).keys()))
        ok, pts_all = _triangulate_all(window, topo_cand)
        topo = topo_cand.subset(ok)
        points_arr = pts_all[ok] if topo.n_tracks else np.zeros((0, 3))
    H, g, offsets, dims = _direct_system(window)
    H4f, g2f, Hff, gf, B = _scatter_feature_system(window, topo, points_arr, offsets, dims)
    H4s, g2s, _ = _schur_apply(topo, H4f, g2f, Hff, gf, B, 0.0)
    Hf_fold, _ = _fold(H4s, g2s, dims)
    return H + Hf_fold, offsets, dims


def head_covariance(window: Window):
    """12x12 posterior covariance of [head pose, manifold].

    Locked manifold axes (or a disabled manifold) report zero covariance.
    """
    Hs, offsets, dims = window_information(window)
    active = _active_indices(window, offsets, dims)
    cov = np.zeros((dims, dims))
    Ha = Hs[np.ix_(active, active)]
    try:
        cov_a = np.linalg.inv(Ha + 1e-12 * np.eye(len(active)))
    except np.linalg.LinAlgError:
        cov_a = np.linalg.pinv(Ha, hermitian=True)
    cov[np.ix_(active, active)] = cov_a
    out = np.zeros((12, 12))
    off_p = offsets[("pose", window.head_id)]
    out[:6, :6] = cov[off_p : off_p + 6, off_p : off_p + 6]
    if window.config.use_manifold:
        off_m = offsets[("m",)]
        out[6:, 6:] = cov[off_m : off_m + 6, off_m : off_m + 6]
        out[:6, 6:] = cov[off_p : off_p + 6, off_m : off_m + 6]
        out[6:, :6] = out[:6, 6:].T
    return out


def marginalize(window: Window):
    """Schur-complement the oldest keyframe into the prior.

    Absorbs the prior, the prediction factor leaving the oldest pose, and the
    reprojection factors of retired tracks observing it; live tracks just drop
    the marginalized observation to avoid double counting.
    """
    cfg = window.config
    capacity = cfg.window_size - 1
    if len(window.keyframes) <= capacity:
        return window
    oldest = window.keyframes[0]

    involved = [("pose", oldest.id)]

    def touch(key):
        if key not in involved:
            involved.append(key)

    absorb_pred = [f for f in window.pred_factors if f.from_id == oldest.id]
    for f in absorb_pred:
        touch(("pose", f.to_id))
        if cfg.use_manifold:
            touch(("m",))
    if window.prior is not None:
        for k in window.prior.keys:
            touch(k)

    in_window = set(window.pose_ids())
    absorb_tracks = []
    for tid, track in window.tracks.items():
        observes_oldest = any(pid == oldest.id for pid, _ in track.observations)
        if observes_oldest and not track.active:
            obs = [(pid, uv) for pid, uv in track.observations if pid in in_window]
            if len(obs) >= 2 and track.point is not None:
                absorb_tracks.append((tid, obs))
                for pid, _ in obs:
                    touch(("pose", pid))

    offsets = {}
    off = 0
    for k in involved:
        offsets[k] = off
        off += 6
    dims = off
    H = np.zeros((dims, dims))
    b = np.zeros(dims)

    def add(r, blocks):
        for off_a, Ja in blocks:
            wa = Ja.shape[1]
            b[off_a : off_a + wa] += Ja.T @ r
            for off_b, Jb in blocks:
                H[off_a : off_a + wa, off_b : off_b + Jb.shape[1]] += Ja.T @ Jb

    pr = prior_residual(window)
    if pr is not None:
        r0, J0, pkeys = pr
        add(r0, [(offsets[k], J0[:, 6 * i : 6 * i + 6]) for i, k in enumerate(pkeys)])

    for f in absorb_pred:
        r, J_from, J_to, J_m = prediction_residual(f, window)
        blocks = [(offsets[("pose", f.from_id)], J_from), (offsets[("pose", f.to_id)], J_to)]
        if cfg.use_manifold:
            blocks.append((offsets[("m",)], J_m))
        add(r, blocks)

    inv_sigma = 1.0 / cfg.pixel_sigma
    for tid, obs in absorb_tracks:
        track = window.tracks[tid]
        rows_r, rows_Jp, rows_Jf, ids = [], [], [], []
        for pose_id, uv in obs:
            p, R = window.pose_value(pose_id)
            out = reprojection_residual(p, R, track.point, uv, cfg.camera)
            if out is None:
                continue
            r, J_pose, J_point = out
            r = r * inv_sigma
            w = math.sqrt(_huber_weight(float(np.linalg.norm(r)), cfg.huber_delta))
            rows_r.append(w * r)
            rows_Jp.append(w * inv_sigma * J_pose)
            rows_Jf.append(w * inv_sigma * J_point)
            ids.append(pose_id)
        if len(ids) < 2:
            continue
        Jp = np.array(rows_Jp)
        Jf = np.array(rows_Jf)
        rr = np.array(rows_r)
        Hff = np.einsum("kij,kil->jl", Jf, Jf) + 1e-12 * np.eye(3)
        Hff_inv = np.linalg.inv(Hff)
        gf = np.einsum("kij,ki->j", Jf, rr)
        B = np.einsum("kij,kil->kjl", Jp, Jf)
        K = B @ Hff_inv
        for a, pid_a in enumerate(ids):
            oa = offsets[("pose", pid_a)]
            b[oa : oa + 6] += Jp[a].T @ rr[a] - K[a] @ gf
            for c, pid_c in enumerate(ids):
                oc = offsets[("pose", pid_c)]
                Hab = (Jp[a].T @ Jp[c] if a == c else np.zeros((6, 6))) - K[a] @ B[c].T
                H[oa : oa + 6, oc : oc + 6] += Hab

    drop = np.arange(offsets[("pose", oldest.id)], offsets[("pose", oldest.id)] + 6)
    keep = np.array([i for i in range(dims) if i not in set(drop.tolist())])
    Hp, bp = schur_marginalize(H, b, keep, drop)

    new_keys = [k for k in involved if k != ("pose", oldest.id)]
    lin_poses = {}
    for k in new_keys:
        if k[0] == "pose":
            p, R = window.pose_value(k[1])
            lin_poses[k[1]] = (p.copy(), R.copy())
    window.prior = Prior(new_keys, Hp, bp, lin_poses, window.head.m.vec.copy())

    # Shrink the window.
    window.keyframes.pop(0)
    window.pred_factors = [f for f in window.pred_factors if f.from_id != oldest.id]
    window.first_xy.pop(oldest.id, None)
    for tid, _ in absorb_tracks:
        del window.tracks[tid]
    dead = []
    for tid, track in window.tracks.items():
        track.observations = [(pid, uv) for pid, uv in track.observations if pid != oldest.id]
        if not track.observations and not track.active:
            dead.append(tid)
    for tid in dead:
        del window.tracks[tid]
    window._system_cache = None
    return window


def reanchor(window: Window):
    """Re-parameterize the manifold at the head's first-estimate position.

    Maps the manifold state, the prior, and the surviving prediction factors
    through the coefficient transform, and inflates the prior by the
    anchor-motion noise.
    """
    cfg = window.config
    if not (cfg.use_manifold and cfg.reanchor):
        return window
    new_xy = window.first_xy.get(window.head_id, window.head.p[:2]).copy()
    old_frame = window.head.frame
    new_frame = ManifoldFrame(new_xy)
    t = manifold.reparam_transform(old_frame, new_frame)
    t_inv = manifold.reparam_transform(new_frame, old_frame)
    Lam = t.Lambda
    Lam_inv = t_inv.Lambda

    window.head.m = ManifoldParams(Lam @ window.head.m.vec)
    window.head.frame = new_frame
    window.head.lambda_bar = manifold.accumulate(window.head.lambda_bar, t)
    window._system_cache = None

    for f in window.pred_factors:
        f.m_back = f.m_back @ Lam_inv
        f._jac_cache = None
        f._gram_cache = None

    prior = window.prior
    if prior is not None and ("m",) in prior.keys:
        i = prior.keys.index(("m",))
        T = np.eye(6 * len(prior.keys))
        T[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] = Lam
        T_inv = np.eye(6 * len(prior.keys))
        T_inv[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] = Lam_inv
        prior.H = T_inv.T @ prior.H @ T_inv
        prior.H = 0.5 * (prior.H + prior.H.T)
        prior.b = T_inv.T @ prior.b
        prior.lin_m = Lam @ prior.lin_m

        alphas = np.concatenate([np.asarray(cfg.alpha_p), np.asarray(cfg.alpha_q)])
        sigmas = manifold.reparam_noise_sigma(t.delta_p, t.delta_R, alphas)
        mask = np.asarray(cfg.manifold_mask, dtype=bool)
        sigmas = np.where(mask, sigmas, 0.0)
        if np.any(sigmas > 0.0):
            mu = -np.linalg.pinv(prior.H, hermitian=True, rcond=1e-12) @ prior.b
            S = np.zeros((6 * len(prior.keys), int(np.sum(sigmas > 0.0))))
            cols = np.flatnonzero(sigmas > 0.0)
            for j, c in enumerate(cols):
                S[6 * i + c, j] = 1.0
            W_inv = np.diag(1.0 / sigmas[cols] ** 2)
            HS = prior.H @ S
            core = np.linalg.inv(W_inv + S.T @ HS)
            prior.H = prior.H - HS @ core @ HS.T
            prior.H = 0.5 * (prior.H + prior.H.T)
            prior.b = -prior.H @ mu
        prior._sqrt_cache = None
    return window


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def attach_camera(window: Window, pose_id: int, cam_frame):
    """Register one camera frame's observations against a window pose.

    Feature association is by id; ids absent from the frame are marked dead
    (tracks never resume in the simulated streams).
    """
    seen = set()
    for lid, uv in zip(cam_frame.ids, cam_frame.uv):
        tid = int(lid)
        seen.add(tid)
        track = window.tracks.get(tid)
        if track is None:
            track = FeatureTrack(tid)
            window.tracks[tid] = track
        track.observations.append((pose_id, np.asarray(uv, dtype=float)))
        track.active = True
    for tid, track in window.tracks.items():
        if tid not in seen:
            track.active = False


def _planar_prediction(head: OdomState, samples, t_end, noise, cfg: EstimatorConfig):
    """No-manifold baseline prediction: planar dead reckoning lifted to 3D,
    with model uncertainty allocated in all six directions."""
    from .propagation import integrate_planar_baseline

    R0 = head.rotation()
    ts, ps, qs = integrate_planar_baseline(samples, head.p, R0, t_end=t_end)
    p_new, q_new = ps[-1], qs[-1]
    new_state = OdomState(
        t_end, p_new, q_new, ManifoldParams(head.m.vec.copy()), head.frame, head.lambda_bar
    )

    R_new = quat_to_rotation(q_new)
    R_rel = R0.T @ R_new
    dp_rel = R0.T @ (p_new - head.p)
    Phi = np.eye(12)
    Phi[0:3, 0:3] = R_rel.T
    Phi[3:6, 0:3] = -R0 @ skew(dp_rel)

    dts = np.diff([s.t for s in samples] + [t_end])
    dist = sum(abs(s.v) * dt for s, dt in zip(samples, dts))
    var_yaw = sum((noise.sample_sigmas(s.v, s.omega)[1] * dt) ** 2 for s, dt in zip(samples, dts))
    var_along = sum((noise.sample_sigmas(s.v, s.omega)[0] * dt) ** 2 for s, dt in zip(samples, dts))
    sig_rp = cfg.planar_sigma_rp * dist + cfg.floor_theta
    sig_z = cfg.planar_sigma_z * dist + cfg.floor_p
    sig_xy = math.sqrt(var_along + var_yaw * dist**2 / 3.0) + cfg.floor_p
    cov = np.diag(
        [sig_rp**2, sig_rp**2, var_yaw + cfg.floor_theta**2]
        + [sig_xy**2, sig_xy**2, sig_z**2]
        + [cfg.floor_m**2] * 6
    )
    factor = PredictionFactor(
        0,
        0,
        Phi,
        _sqrt_info_from_cov(cov),
        head.p.copy(),
        R0,
        p_new.copy(),
        R_new,
        head.m.vec.copy(),
    )
    return new_state, factor


def step(window: Window, odom_samples, cam_frame, noise):
    """One keyframe cycle: propagate, observe, optimize, marginalize, re-anchor.

    Returns the per-keyframe record (time, pose, manifold, covariance, cost),
    captured after optimization and before marginalization so the covariance
    and the manifold parameterization refer to the same instant.
    """
    cfg = window.config
    t_target = float(cam_frame.t)
    old_head = window.head
    old_id = window.head_id

    if cfg.planar_prediction:
        new_state, factor = _planar_prediction(old_head, odom_samples, t_target, noise, cfg)
    else:
        new_state, _, Phi, Qd = propagate_interval(
            old_head,
            None,
            odom_samples,
            noise,
            t_end=t_target,
            surface_tolerance=np.inf,
            with_covariance=True,
        )
        cov = Qd + np.diag(
            [cfg.floor_theta**2] * 3 + [cfg.floor_p**2] * 3 + [cfg.floor_m**2] * 6
        )
        factor = PredictionFactor(
            old_id,
            0,
            Phi,
            _sqrt_info_from_cov(cov),
            old_head.p.copy(),
            old_head.rotation(),
            new_state.p.copy(),
            new_state.rotation(),
            old_head.m.vec.copy(),
        )

    window.keyframes.append(Keyframe(old_id, old_head.t, old_head.p.copy(), old_head.q.copy()))
    new_id = old_id + 1
    factor.from_id = old_id
    factor.to_id = new_id
    window.head = new_state
    window.head_id = new_id
    window.first_xy[new_id] = new_state.p[:2].copy()
    window.pred_factors.append(factor)

    attach_camera(window, new_id, cam_frame)

    optimize(window)
    cov12 = head_covariance(window)
    record = {
        "t": t_target,
        "p": window.head.p.copy(),
        "q": window.head.q.copy(),
        "m": window.head.m.vec.copy(),
        "anchor": window.head.frame.anchor.copy(),
        "cov": cov12,
        "cost": getattr(window, "_last_cost", 0.0),
        "solve_failed": window.solve_failed,
    }
    marginalize(window)
    reanchor(window)
    return record


def initial_window(t0, p0, R0, config: EstimatorConfig) -> Window:
    """Window anchored at a known initial pose with a tangent-plane manifold."""
    m0, frame0, m_info = manifold.initialize_manifold(
        p0, R0, np.asarray(config.initial_manifold_sigmas)
    )
    head = OdomState(t0, p0, geom.rotation_to_quat(np.asarray(R0, dtype=float)), m0, frame0)
    window = Window(head, 0, config)

    keys = [("pose", 0)]
    n = 12 if config.use_manifold else 6
    H = np.zeros((n, n))
    H[0:3, 0:3] = np.eye(3) / config.initial_pose_sigma_q**2
    H[3:6, 3:6] = np.eye(3) / config.initial_pose_sigma_p**2
    if config.use_manifold:
        keys.append(("m",))
        H[6:12, 6:12] = m_info
    window.prior = Prior(
        keys,
        H,
        np.zeros(n),
        {0: (head.p.copy(), head.rotation())},
        head.m.vec.copy(),
    )
    return window


class ManifoldEstimator:
    """Drives the sliding-window pipeline over sensor batches."""

    def __init__(self, config: EstimatorConfig, odom_noise, t0, p0, R0):
        self.config = config
        self.noise = odom_noise
        self.window = initial_window(t0, np.asarray(p0, dtype=float), np.asarray(R0, dtype=float), config)

    def process(self, odom_samples, cam_frame):
        return step(self.window, odom_samples, cam_frame, self.noise)

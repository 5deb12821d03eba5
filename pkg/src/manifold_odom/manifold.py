"""Quadratic motion-manifold representation and re-parameterization.

The surface constraint is ``M(p) = z + c + B^T dp + 0.5 dp^T A dp = 0`` with
``dp = R_o @ (p_xy - anchor)``, coefficients ``m = [c, b1, b2, a1, a2, a3]``,
``B = [b1, b2]`` and ``A = [[a1, a2], [a2, a3]]``.  Re-anchoring the local
form is the linear coefficient map ``m_new = Lambda @ m_old``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ManifoldParams:
    """Coefficient 6-vector [c, b1, b2, a1, a2, a3] of the quadratic surface."""

    vec: np.ndarray

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=float).reshape(6).copy()
        if not np.all(np.isfinite(self.vec)):
            raise ValueError("manifold parameters must be finite")

    @classmethod
    def zero(cls) -> "ManifoldParams":
        return cls(np.zeros(6))

    @classmethod
    def from_coeffs(cls, c=0.0, b1=0.0, b2=0.0, a1=0.0, a2=0.0, a3=0.0) -> "ManifoldParams":
        return cls(np.array([c, b1, b2, a1, a2, a3], dtype=float))

    @property
    def c(self) -> float:
        return float(self.vec[0])

    @property
    def B(self) -> np.ndarray:
        return self.vec[1:3]

    @property
    def A(self) -> np.ndarray:
        a1, a2, a3 = self.vec[3:6]
        return np.array([[a1, a2], [a2, a3]])


@dataclass
class ManifoldFrame:
    """Local anchor of the surface parameterization: 2D position and rotation."""

    anchor: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float).reshape(2).copy()
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(2, 2).copy()

    @classmethod
    def at(cls, x: float, y: float) -> "ManifoldFrame":
        return cls(np.array([x, y]))

    def local_xy(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.rotation @ (p[:2] - self.anchor)


@dataclass
class ReparamTransform:
    """Coefficient map between two anchors: m_new = Lambda @ m_old."""

    Lambda: np.ndarray
    delta_p: np.ndarray
    delta_R: np.ndarray


def _vec(m) -> np.ndarray:
    if isinstance(m, ManifoldParams):
        return m.vec
    return np.asarray(m, dtype=float).reshape(6)


def evaluate(m, frame: ManifoldFrame, p) -> float:
    """Surface residual M(p); zero iff p lies on the manifold."""
    v = _vec(m)
    p = np.asarray(p, dtype=float)
    dp = frame.local_xy(p)
    A = np.array([[v[3], v[4]], [v[4], v[5]]])
    return float(p[2] + v[0] + v[1] * dp[0] + v[2] * dp[1] + 0.5 * dp @ A @ dp)


def gradient(m, frame: ManifoldFrame, p) -> np.ndarray:
    """Spatial gradient of M at p; the z component is identically 1."""
    v = _vec(m)
    dp = frame.local_xy(p)
    A = np.array([[v[3], v[4]], [v[4], v[5]]])
    gxy = frame.rotation.T @ (v[1:3] + A @ dp)
    return np.array([gxy[0], gxy[1], 1.0])


def gradient_rate(m, frame: ManifoldFrame, v_global) -> np.ndarray:
    """Time derivative of the gradient along a global-frame velocity."""
    v = _vec(m)
    vel = np.asarray(v_global, dtype=float)
    A = np.array([[v[3], v[4]], [v[4], v[5]]])
    gxy = frame.rotation.T @ (A @ (frame.rotation @ vel[:2]))
    return np.array([gxy[0], gxy[1], 0.0])


def a_bar_world(m, frame: ManifoldFrame) -> np.ndarray:
    """3x3 second-derivative of M in global coordinates (dgradient/dp)."""
    v = _vec(m)
    A = np.array([[v[3], v[4]], [v[4], v[5]]])
    Aw = frame.rotation.T @ A @ frame.rotation
    out = np.zeros((3, 3))
    out[:2, :2] = Aw
    return out


def _quad_stack(d: np.ndarray) -> np.ndarray:
    # d(A @ d)/d[a1,a2,a3] for a 2-vector d.
    return np.array([[d[0], d[1], 0.0], [0.0, d[0], d[1]]])


def grad_wrt_params(frame: ManifoldFrame, p) -> np.ndarray:
    """3x6 Jacobian of the gradient with respect to the coefficient vector."""
    dp = frame.local_xy(p)
    out = np.zeros((3, 6))
    out[:2, 1:3] = frame.rotation.T
    out[:2, 3:6] = frame.rotation.T @ _quad_stack(dp)
    return out


def gradrate_wrt_params(frame: ManifoldFrame, v_global) -> np.ndarray:
    """3x6 Jacobian of the gradient rate with respect to the coefficients."""
    vloc = frame.rotation @ np.asarray(v_global, dtype=float)[:2]
    out = np.zeros((3, 6))
    out[:2, 3:6] = frame.rotation.T @ _quad_stack(vloc)
    return out


def value_wrt_params(frame: ManifoldFrame, p) -> np.ndarray:
    """1x6 Jacobian of M(p) with respect to the coefficient vector."""
    dp = frame.local_xy(p)
    return np.array(
        [1.0, dp[0], dp[1], 0.5 * dp[0] ** 2, dp[0] * dp[1], 0.5 * dp[1] ** 2]
    )


def reparam_transform(frame_old: ManifoldFrame, frame_new: ManifoldFrame) -> ReparamTransform:
    """Coefficient map re-expressing the same surface in a new anchor frame."""
    R_o, p_o = frame_old.rotation, frame_old.anchor
    R_1, p_1 = frame_new.rotation, frame_new.anchor
    delta_R = R_o @ R_1.T
    delta_p = R_o @ (p_1 - p_o)
    dx, dy = delta_p
    r1, r2 = delta_R[0]
    r3, r4 = delta_R[1]

    gamma = np.array([0.5 * dx * dx, dx * dy, 0.5 * dy * dy])
    Xi = delta_R.T @ np.array([[dx, dy, 0.0], [0.0, dx, dy]])
    Psi = np.array(
        [
            [r1 * r1, 2.0 * r1 * r3, r3 * r3],
            [r1 * r2, r1 * r4 + r2 * r3, r3 * r4],
            [r2 * r2, 2.0 * r2 * r4, r4 * r4],
        ]
    )

    Lam = np.zeros((6, 6))
    Lam[0, 0] = 1.0
    Lam[0, 1:3] = delta_p
    Lam[0, 3:6] = gamma
    Lam[1:3, 1:3] = delta_R.T
    Lam[1:3, 3:6] = Xi
    Lam[3:6, 3:6] = Psi
    return ReparamTransform(Lambda=Lam, delta_p=delta_p, delta_R=delta_R)


def accumulate(lambda_bar: np.ndarray, step: ReparamTransform) -> np.ndarray:
    """Compose a re-anchoring step onto the cumulative coefficient map.

    The cumulative map keeps ``m_initial = inv(lambda_bar) @ m_current`` valid,
    so Jacobians expressed against the initial parameterization can be chained
    through it.
    """
    out = step.Lambda @ np.asarray(lambda_bar, dtype=float)
    if np.linalg.cond(out) > 1e12:
        raise ValueError(
            "cumulative re-parameterization map is ill-conditioned; re-anchor required"
        )
    return out


def reparam_noise_sigma(delta_p, delta_R, alphas) -> np.ndarray:
    """Per-axis standard deviation of the re-anchoring noise.

    The rotation magnitude is the relative rotation angle, which vanishes for
    identity anchor rotations.
    """
    alphas = np.asarray(alphas, dtype=float).reshape(12)
    if np.any(alphas < 0.0):
        raise ValueError("noise scale factors must be non-negative")
    dp_norm = float(np.linalg.norm(np.asarray(delta_p, dtype=float)))
    dR = np.asarray(delta_R, dtype=float)
    angle = abs(math.atan2(dR[1, 0], dR[0, 0]))
    return alphas[:6] * dp_norm + alphas[6:] * angle


def reparam_covariance(cov12: np.ndarray, transform: ReparamTransform, sigmas) -> np.ndarray:
    """Map a 12x12 [dtheta, p, m] covariance through a re-anchoring step.

    Anchors are fixed quantities, so the pose block passes through unchanged;
    the manifold block is conjugated by Lambda and inflated by the additive
    re-anchoring noise.
    """
    cov12 = np.asarray(cov12, dtype=float)
    if cov12.shape != (12, 12):
        raise ValueError("covariance must be 12x12")
    sym_err = np.max(np.abs(cov12 - cov12.T))
    scale = max(1.0, float(np.max(np.abs(cov12))))
    if sym_err > 1e-8 * scale:
        raise ValueError("covariance must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (cov12 + cov12.T))) < -1e-9 * scale:
        raise ValueError("covariance must be positive semi-definite")

    J = np.eye(12)
    J[6:, 6:] = transform.Lambda
    out = J @ cov12 @ J.T
    out[6:, 6:] += np.diag(np.asarray(sigmas, dtype=float) ** 2)
    return 0.5 * (out + out.T)


def initialize_manifold(initial_position, initial_rotation=None, sigmas=None):
    """Tangent-plane initialization anchored at the initial position.

    The surface starts as the tangent plane of the initial odometer frame
    (zero second-order terms) with a diagonal information matrix.  For a level
    start at the origin this is exactly the zero coefficient vector.
    """
    p = np.asarray(initial_position, dtype=float)
    frame = ManifoldFrame.at(p[0], p[1])
    m = ManifoldParams.zero()
    m.vec[0] = -p[2]
    if initial_rotation is not None:
        n = np.asarray(initial_rotation, dtype=float)[:, 2]
        if n[2] <= 0.0:
            raise ValueError("initial body z-axis must point upward")
        m.vec[1] = n[0] / n[2]
        m.vec[2] = n[1] / n[2]
    if sigmas is None:
        sigmas = np.array([0.05, 0.05, 0.05, 0.05, 0.05, 0.05])
    sigmas = np.asarray(sigmas, dtype=float).reshape(6)
    info = np.diag(1.0 / sigmas**2)
    return m, frame, info

"""Rotation and quaternion kernel.

Conventions used throughout the package:

- Quaternions are stored as ``[w, x, y, z]`` (Hamilton product) and represent
  the body-to-global rotation, i.e. ``R(q) @ v_body = v_global``.
- A small orientation error ``dtheta`` perturbs the world-to-body matrix
  multiplicatively as ``R_wb = (I - skew(dtheta)) @ R_wb_hat``.  Equivalently,
  on the body-to-global matrix, ``R = R_hat @ (I + skew(dtheta))``.  Every
  Jacobian in this package is derived under this single convention.
"""

from __future__ import annotations

import math

import numpy as np

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])
E12T = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew12(v) -> np.ndarray:
    """First two rows of the cross-product matrix."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x]])


def orthonormalize_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor) of a near-rotation M."""
    u, _, vt = np.linalg.svd(M)
    R = u @ vt
    if np.linalg.det(R) < 0.0:
        u[:, -1] = -u[:, -1]
        R = u @ vt
    return R


def apply_small_rotation(R_hat: np.ndarray, dtheta) -> np.ndarray:
    """Perturb a rotation by a small multiplicative error.

    Returns the re-orthonormalized ``(I - skew(dtheta)) @ R_hat``; an exact
    no-op for ``dtheta == 0``.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    if not np.any(dtheta):
        return np.array(R_hat, dtype=float)
    return orthonormalize_rotation((np.eye(3) - skew(dtheta)) @ R_hat)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of the exponential map)."""
    cos_angle = max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0)))
    angle = math.acos(cos_angle)
    if angle < 1e-10:
        # First-order: R ~ I + skew(phi)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle > math.pi - 1e-6:
        # Near pi the off-diagonal extraction degenerates; use the symmetric part.
        B = 0.5 * (R + np.eye(3))  # = axis axis^T at exactly pi
        axis = np.sqrt(np.maximum(np.diag(B), 0.0))
        # Fix signs from the largest off-diagonal products.
        k = int(np.argmax(axis))
        axis = B[:, k] / max(axis[k], 1e-12)
        axis /= np.linalg.norm(axis)
        sin_part = 0.5 * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
        if np.dot(sin_part, axis) < 0.0:
            axis = -axis
        return angle * axis
    factor = angle / (2.0 * math.sin(angle))
    return factor * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def extract_small_rotation(R: np.ndarray, R_hat: np.ndarray) -> np.ndarray:
    """Recover dtheta such that R ~ (I - skew(dtheta)) @ R_hat."""
    return -rotation_log(R @ R_hat.T)


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in radians."""
    return float(np.linalg.norm(rotation_log(R)))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(np.dot(q, q)))
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = q / n
    # Canonical sign keeps chained integrations deterministic.
    if q[0] < 0.0:
        q = -q
    return q


def _qmul(pw, px, py, pz, qw, qx, qy, qz):
    return (
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    )


def quat_multiply(p, q) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(_qmul(pw, px, py, pz, qw, qx, qy, qz))


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_boxplus(q, dtheta) -> np.ndarray:
    """Apply the multiplicative orientation error on the body-to-global side.

    Equivalent to R(q) @ (I + skew(dtheta)) followed by re-orthonormalization,
    but carried out on the quaternion with the exact exponential.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    angle = math.sqrt(float(np.dot(dtheta, dtheta)))
    if angle < 1e-12:
        dq = np.array([1.0, 0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2]])
    else:
        half = 0.5 * angle
        s = math.sin(half) / angle
        dq = np.array([math.cos(half), dtheta[0] * s, dtheta[1] * s, dtheta[2] * s])
    return quat_normalize(quat_multiply(q, dq))


def quat_kinematics_step(q, omega, dt: float, max_substep_angle: float = 0.02) -> np.ndarray:
    """RK4 integration of the quaternion kinematics with constant body rate.

    Integrates q_dot = 0.5 * q (x) (0, omega), the quaternion form of
    Omega(omega)-matrix kinematics.  Subdivides internally so each RK4 substep
    rotates at most ``max_substep_angle`` radians; the result is renormalized.
    """
    if dt < 0.0:
        raise ValueError("dt must be non-negative")
    qw, qx, qy, qz = (float(v) for v in q)
    wx, wy, wz = (float(v) for v in omega)
    total_angle = math.sqrt(wx * wx + wy * wy + wz * wz) * dt
    n_sub = max(1, int(math.ceil(total_angle / max_substep_angle)))
    h = dt / n_sub

    def deriv(a, b, c, d):
        rw, rx, ry, rz = _qmul(a, b, c, d, 0.0, wx, wy, wz)
        return 0.5 * rw, 0.5 * rx, 0.5 * ry, 0.5 * rz

    for _ in range(n_sub):
        k1 = deriv(qw, qx, qy, qz)
        k2 = deriv(
            qw + 0.5 * h * k1[0], qx + 0.5 * h * k1[1], qy + 0.5 * h * k1[2], qz + 0.5 * h * k1[3]
        )
        k3 = deriv(
            qw + 0.5 * h * k2[0], qx + 0.5 * h * k2[1], qy + 0.5 * h * k2[2], qz + 0.5 * h * k2[3]
        )
        k4 = deriv(qw + h * k3[0], qx + h * k3[1], qy + h * k3[2], qz + h * k3[3])
        s = h / 6.0
        qw += s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        qx += s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        qy += s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        qz += s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
        n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    if qw < 0.0:
        qw, qx, qy, qz = -qw, -qx, -qy, -qz
    return np.array([qw, qx, qy, qz])

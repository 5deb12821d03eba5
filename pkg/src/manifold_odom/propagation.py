"""Manifold-aided 6D dead reckoning from wheel-odometer measurements.

The odometer provides forward speed and yaw rate only; roll and pitch rates
are inferred from the motion manifold.  With the alignment constraint between
the body z-axis and the surface gradient, the body angular velocity is

    omega_12 = (1 / |grad M|) * e12^T skew(e3) (R^T d(grad M)/dt)
    omega_3  = measured yaw rate

and position integrates the non-holonomic velocity R @ [v, 0, 0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geom, manifold
from .geom import E12T, quat_normalize, quat_to_rotation, skew
from .manifold import ManifoldFrame, ManifoldParams

# e12^T skew(e3): picks the roll/pitch rows of the alignment constraint.
_E = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])

MAX_STEP_DT = 0.1
SURFACE_TOLERANCE = 1e-4


@dataclass
class OdometerSample:
    """One wheel-odometer reading: forward speed and yaw rate."""

    t: float
    v: float
    omega: float


@dataclass
class OdomNoise:
    """Continuous-time white-noise densities of the odometer channels."""

    sigma_v: float  # m/s/sqrt(Hz)
    sigma_omega: float  # rad/s/sqrt(Hz)

    def __post_init__(self):
        if self.sigma_v <= 0.0 or self.sigma_omega <= 0.0:
            raise ValueError("noise densities must be positive")

    def densities(self, v: float, omega: float):
        return self.sigma_v, self.sigma_omega


@dataclass
class RelativeOdomNoise:
    """Reading-proportional noise: sigma = rel * |reading| + floor, per sample.

    Per-sample standard deviations at ``rate`` Hz convert to continuous
    densities by 1/sqrt(rate).
    """

    rel_v: float = 0.03
    rel_omega: float = 0.03
    floor_v: float = 1e-3
    floor_omega: float = 1e-3
    rate: float = 100.0

    def sample_sigmas(self, v: float, omega: float):
        return (
            self.rel_v * abs(v) + self.floor_v,
            self.rel_omega * abs(omega) + self.floor_omega,
        )

    def densities(self, v: float, omega: float):
        sv, sw = self.sample_sigmas(v, omega)
        root = math.sqrt(self.rate)
        return sv / root, sw / root


@dataclass
class OdomState:
    """Dead-reckoning state: pose plus the local manifold parameterization."""

    t: float
    p: np.ndarray
    q: np.ndarray
    m: ManifoldParams
    frame: ManifoldFrame
    lambda_bar: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3).copy()
        self.q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        self.lambda_bar = np.asarray(self.lambda_bar, dtype=float).reshape(6, 6).copy()

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q)

    def copy(self) -> "OdomState":
        return OdomState(
            self.t,
            self.p.copy(),
            self.q.copy(),
            ManifoldParams(self.m.vec.copy()),
            ManifoldFrame(self.frame.anchor.copy(), self.frame.rotation.copy()),
            self.lambda_bar.copy(),
        )


@dataclass
class ErrorBelief:
    """12x12 covariance over [dtheta, p, m] about the current estimate."""

    cov: np.ndarray

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float).reshape(12, 12).copy()

    def symmetrize(self):
        self.cov = 0.5 * (self.cov + self.cov.T)
        return self


def infer_omega(state: OdomState, sample: OdometerSample) -> np.ndarray:
    """Body angular velocity implied by the manifold plus the yaw reading."""
    R = state.rotation()
    grad = manifold.gradient(state.m, state.frame, state.p)
    v_global = R[:, 0] * sample.v
    grad_rate = manifold.gradient_rate(state.m, state.frame, v_global)
    w12 = (_E @ (R.T @ grad_rate)) / np.linalg.norm(grad)
    return np.array([w12[0], w12[1], sample.omega])


def _omega_from(R, p, m, frame, v, omega_z):
    grad = manifold.gradient(m, frame, p)
    grad_rate = manifold.gradient_rate(m, frame, R[:, 0] * v)
    w12 = (_E @ (R.T @ grad_rate)) / np.linalg.norm(grad)
    return np.array([w12[0], w12[1], omega_z])


def propagate_mean(
    state: OdomState,
    sample: OdometerSample,
    dt: float,
    surface_tolerance: float = SURFACE_TOLERANCE,
) -> OdomState:
    """One RK4 step of the pose under the manifold-aided kinematics.

    The manifold parameters are constant during prediction.  The local
    velocity is exactly [v, 0, 0] (non-holonomic), and the inferred angular
    velocity is re-evaluated at every RK4 stage.
    """
    if not 0.0 < dt <= MAX_STEP_DT:
        raise ValueError(f"dt must lie in (0, {MAX_STEP_DT}]")
    m, frame = state.m, state.frame
    v, wz = sample.v, sample.omega

    def deriv(p, q):
        R = quat_to_rotation(q)
        omega = _omega_from(R, p, m, frame, v, wz)
        p_dot = R[:, 0] * v
        q_dot = 0.5 * geom.quat_multiply(q, np.array([0.0, omega[0], omega[1], omega[2]]))
        return p_dot, q_dot

    p0, q0 = state.p, state.q
    k1p, k1q = deriv(p0, q0)
    k2p, k2q = deriv(p0 + 0.5 * dt * k1p, q0 + 0.5 * dt * k1q)
    k3p, k3q = deriv(p0 + 0.5 * dt * k2p, q0 + 0.5 * dt * k2q)
    k4p, k4q = deriv(p0 + dt * k3p, q0 + dt * k3q)
    p = p0 + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    q = quat_normalize(q0 + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q))

    # The z coefficient of the surface is 1, so one Newton step along e3 is an
    # exact projection back onto the manifold.
    err = manifold.evaluate(m, frame, p)
    if abs(err) > surface_tolerance:
        p = p.copy()
        p[2] -= err

    return OdomState(state.t + dt, p, q, m, frame, state.lambda_bar)


def omega_jacobians(state: OdomState, sample: OdometerSample):
    """Closed-form Jacobians of the inferred angular velocity.

    Returns ``J_x`` (3x12, error-state order [dtheta, p, m]) and ``J_n``
    (3x2, noise order [n_v, n_omega]).  The manifold block differentiates in
    the state's own (current) parameterization; the cumulative re-anchoring
    map cancels there by the chain rule.
    """
    R = state.rotation()
    v = sample.v
    grad = manifold.gradient(state.m, state.frame, state.p)
    ng = float(np.linalg.norm(grad))
    Abar = manifold.a_bar_world(state.m, state.frame)
    D = R.T @ Abar @ R
    e1v = np.array([v, 0.0, 0.0])
    De1v = D @ e1v
    v_global = R[:, 0] * v

    J_x = np.zeros((3, 12))
    J_x[:2, 0:3] = (_E / ng) @ (skew(De1v) - D @ skew(e1v))
    scale = grad / ng**3
    EDe1v = _E @ De1v
    J_x[:2, 3:6] = -np.outer(EDe1v, scale @ Abar)
    Gamma = manifold.grad_wrt_params(state.frame, state.p)
    Upsilon = manifold.gradrate_wrt_params(state.frame, v_global)
    J_x[:2, 6:12] = -np.outer(EDe1v, scale @ Gamma) + (_E / ng) @ (R.T @ Upsilon)

    J_n = np.zeros((3, 2))
    J_n[:2, 0] = -(_E @ (D @ np.array([1.0, 0.0, 0.0]))) / ng
    J_n[2, 1] = -1.0
    return J_x, J_n


def error_transition(state: OdomState, sample: OdometerSample):
    """Continuous-time error-state transition and noise Jacobian.

    Assembled row-by-row in the [dtheta, p, m] ordering:
    d(dtheta)/dt = -skew(omega_hat) dtheta + J_x x + J_n n;
    d(p)/dt = -R skew([v,0,0]) dtheta - R e1 n_v;  d(m)/dt = 0.
    """
    R = state.rotation()
    omega_hat = infer_omega(state, sample)
    J_x, J_n = omega_jacobians(state, sample)

    F = np.zeros((12, 12))
    F[0:3, :] = J_x
    F[0:3, 0:3] -= skew(omega_hat)
    F[3:6, 0:3] = -R @ skew(np.array([sample.v, 0.0, 0.0]))

    G = np.zeros((12, 2))
    G[0:3, :] = J_n
    G[3:6, 0] = -R[:, 0]
    return F, G


def _phi_qd_step(F: np.ndarray, M: np.ndarray, h: float):
    # RK4 on Phi' = F Phi and Qd' = F Qd + Qd F^T + M with F, M held over the
    # step (zero-order hold on the odometer reading).
    I = np.eye(12)

    def qd_dot(Q):
        FQ = F @ Q
        return FQ + FQ.T + M

    k1p = F
    k1q = qd_dot(np.zeros((12, 12)))
    k2p = F @ (I + 0.5 * h * k1p)
    k2q = qd_dot(0.5 * h * k1q)
    k3p = F @ (I + 0.5 * h * k2p)
    k3q = qd_dot(0.5 * h * k2q)
    k4p = F @ (I + h * k3p)
    k4q = qd_dot(h * k3q)
    Phi = I + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    Qd = (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    return Phi, Qd


def propagate_interval(
    state: OdomState,
    belief: ErrorBelief | None,
    samples,
    noise,
    t_end: float | None = None,
    surface_tolerance: float = SURFACE_TOLERANCE,
    with_covariance: bool | None = None,
):
    """Propagate mean, covariance, and transition matrix across a sample batch.

    Each sample holds from its timestamp to the next (zero-order hold); the
    final sample extends to ``t_end`` when given.  Returns the new state, the
    new belief (or None), the accumulated Phi, and the accumulated Qd.
    Passing ``belief=None`` with the default flag skips the covariance work.
    """
    if with_covariance is None:
        with_covariance = belief is not None
    ts = [s.t for s in samples]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("odometer samples must be strictly time-ordered")

    Phi = np.eye(12)
    Qd = np.zeros((12, 12))
    state = state.copy()
    if not samples:
        new_belief = ErrorBelief(belief.cov.copy()).symmetrize() if belief is not None else None
        return state, new_belief, Phi, Qd

    boundaries = ts[1:] + [t_end if t_end is not None else None]
    for sample, t_next in zip(samples, boundaries):
        if t_next is None:
            break
        dt_total = t_next - max(state.t, sample.t)
        if dt_total <= 0.0:
            continue
        n_sub = max(1, int(math.ceil(dt_total / MAX_STEP_DT)))
        h = dt_total / n_sub
        for _ in range(n_sub):
            if with_covariance:
                F, G = error_transition(state, sample)
                sv, sw = noise.densities(sample.v, sample.omega)
                M = G @ np.diag([sv**2, sw**2]) @ G.T
                Phi_s, Qd_s = _phi_qd_step(F, M, h)
                Phi = Phi_s @ Phi
                Qd = Phi_s @ Qd @ Phi_s.T + Qd_s
            state = propagate_mean(state, sample, h, surface_tolerance)

    new_belief = None
    if belief is not None:
        cov = Phi @ belief.cov @ Phi.T + Qd
        new_belief = ErrorBelief(0.5 * (cov + cov.T))
    return state, new_belief, Phi, Qd


def propagate_covariance(belief: ErrorBelief, state: OdomState, samples, noise, t_end=None):
    """Covariance propagation across a batch; returns (belief, Phi)."""
    _, new_belief, Phi, _ = propagate_interval(state, belief, samples, noise, t_end)
    return new_belief, Phi


def integrate_planar_baseline(samples, initial_position, initial_rotation, t_end=None):
    """Planar-assumption dead reckoning lifted to 3D.

    Exact unicycle arcs on (x, y, yaw); z, roll, and pitch stay frozen at
    their initial values.
    """
    p0 = np.asarray(initial_position, dtype=float)
    R0 = np.asarray(initial_rotation, dtype=float)
    yaw0 = math.atan2(R0[1, 0], R0[0, 0])
    x, y, yaw = float(p0[0]), float(p0[1]), yaw0

    ts, ps, qs = [], [], []

    def record(t):
        c, s = math.cos(yaw - yaw0), math.sin(yaw - yaw0)
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        ts.append(t)
        ps.append(np.array([x, y, p0[2]]))
        qs.append(geom.rotation_to_quat(Rz @ R0))

    times = [s.t for s in samples] + ([t_end] if t_end is not None else [])
    record(times[0] if times else 0.0)
    for sample, t_next in zip(samples, times[1:]):
        dt = t_next - sample.t
        if dt <= 0.0:
            continue
        v, w = sample.v, sample.omega
        if abs(w) > 1e-12:
            yaw_new = yaw + w * dt
            x += v / w * (math.sin(yaw_new) - math.sin(yaw))
            y += v / w * (-math.cos(yaw_new) + math.cos(yaw))
            yaw = yaw_new
        else:
            x += v * dt * math.cos(yaw)
            y += v * dt * math.sin(yaw)
        record(t_next)
    return np.array(ts), np.array(ps), np.array(qs)


GRAVITY = np.array([0.0, 0.0, -9.81])


def integrate_imu_baseline(imu_samples, initial_position, initial_velocity, initial_rotation):
    """Strapdown IMU dead reckoning: gyro to orientation, accel to position.

    ``imu_samples`` is an iterable of (t, gyro(3), accel(3)); specific force
    convention accel = R^T (a - g).
    """
    p = np.asarray(initial_position, dtype=float).copy()
    v = np.asarray(initial_velocity, dtype=float).copy()
    q = geom.rotation_to_quat(np.asarray(initial_rotation, dtype=float))

    rows = list(imu_samples)
    ts = [p0[0] for p0 in rows]
    out_t, out_p, out_q = [ts[0]], [p.copy()], [q.copy()]
    for (t0, gyro0, accel0), (t1, gyro1, accel1) in zip(rows, rows[1:]):
        dt = t1 - t0
        # Midpoint inputs over the interval avoid the zero-order-hold bias.
        gyro = 0.5 * (np.asarray(gyro0, dtype=float) + np.asarray(gyro1, dtype=float))
        accel = 0.5 * (np.asarray(accel0, dtype=float) + np.asarray(accel1, dtype=float))

        def deriv(pp, vv, qq):
            R = quat_to_rotation(quat_normalize(qq))
            a = R @ accel + GRAVITY
            q_dot = 0.5 * geom.quat_multiply(qq, np.array([0.0, *gyro]))
            return vv, a, q_dot

        k1 = deriv(p, v, q)
        k2 = deriv(p + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1], q + 0.5 * dt * k1[2])
        k3 = deriv(p + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1], q + 0.5 * dt * k2[2])
        k4 = deriv(p + dt * k3[0], v + dt * k3[1], q + dt * k3[2])
        p = p + (dt / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + (dt / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        q = quat_normalize(q + (dt / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))
        out_t.append(t1)
        out_p.append(p.copy())
        out_q.append(q.copy())
    return np.array(out_t), np.array(out_p), np.array(out_q)

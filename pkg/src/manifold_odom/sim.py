"""Ground-truth worlds, trajectories, and noisy sensor streams.

Worlds are height fields z = h(x, y) with analytic gradient and Hessian.  The
robot follows a planar path (x, y, yaw) at constant along-surface speed; the
full 6D truth (pose, body rates, acceleration) is recovered analytically from
the surface geometry, so every stored sample satisfies the on-surface and
non-holonomic invariants by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .manifold import ManifoldFrame, ManifoldParams
from .propagation import OdometerSample, RelativeOdomNoise


# ---------------------------------------------------------------------------
# World models
# ---------------------------------------------------------------------------


@dataclass
class WorldModel:
    tag: str
    height: callable  # (x, y) -> z
    grad: callable  # (x, y) -> (2,)
    hess: callable  # (x, y) -> (2, 2)
    breakpoints: tuple = ()


class PiecewiseProfile:
    """C1 piecewise-quadratic 1-D profile built from curvature segments.

    The curvature (second derivative) is piecewise constant over the
    breakpoints, so slope and value are continuous by construction.  Segment k
    spans [xs[k-1], xs[k]); segment 0 extends left of the first breakpoint.
    """

    def __init__(self, breakpoints, curvatures, h0=0.0, slope0=0.0):
        if len(curvatures) != len(breakpoints) + 1:
            raise ValueError("need one curvature per segment (n_breakpoints + 1)")
        self.xs = np.asarray(breakpoints, dtype=float)
        if np.any(np.diff(self.xs) <= 0):
            raise ValueError("breakpoints must be increasing")
        self.a = np.asarray(curvatures, dtype=float)
        # Value/slope state at each breakpoint, accumulated from the first.
        slopes = [slope0]
        values = [h0]
        for i in range(len(self.xs) - 1):
            dx = self.xs[i + 1] - self.xs[i]
            a = self.a[i + 1]
            values.append(values[-1] + slopes[-1] * dx + 0.5 * a * dx * dx)
            slopes.append(slopes[-1] + a * dx)
        self.slopes = np.array(slopes)
        self.values = np.array(values)

    def _locate(self, x):
        k = np.searchsorted(self.xs, x, side="right")
        j = np.maximum(k - 1, 0)  # anchor breakpoint (segment 0 anchors at xs[0])
        return k, j

    def value(self, x):
        x = np.asarray(x, dtype=float)
        k, j = self._locate(x)
        dx = x - self.xs[j]
        return self.values[j] + self.slopes[j] * dx + 0.5 * self.a[k] * dx * dx

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        k, j = self._locate(x)
        return self.slopes[j] + self.a[k] * (x - self.xs[j])

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        return self.a[np.searchsorted(self.xs, x, side="right")]


def build_world(variant: str, params: dict | None = None) -> WorldModel:
    """Construct a height-field world.

    Variants: ``flat``; ``quadratic`` (single global quadratic surface);
    ``piecewise`` (C1 piecewise-quadratic profile in x, extruded in y);
    ``sinusoidal`` (product of sinusoids).
    """
    params = dict(params or {})
    if variant == "flat":
        zero2 = np.zeros(2)
        zero22 = np.zeros((2, 2))
        return WorldModel(
            "flat",
            lambda x, y: np.zeros_like(np.asarray(x, dtype=float)) + 0.0,
            lambda x, y: zero2.copy(),
            lambda x, y: zero22.copy(),
        )

    if variant == "quadratic":
        h0 = params.get("h0", 0.0)
        b = np.asarray(params.get("slope", [0.0, 0.0]), dtype=float)
        A = np.asarray(params.get("hessian", [[0.002, 0.0], [0.0, -0.001]]), dtype=float)
        if np.max(np.abs(A - A.T)) > 0:
            raise ValueError("quadratic world Hessian must be symmetric")

        def height(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            return (
                h0
                + b[0] * x
                + b[1] * y
                + 0.5 * (A[0, 0] * x * x + 2 * A[0, 1] * x * y + A[1, 1] * y * y)
            )

        return WorldModel(
            "quadratic",
            height,
            lambda x, y: b + A @ np.array([x, y], dtype=float),
            lambda x, y: A.copy(),
        )

    if variant == "piecewise":
        if "segments" in params:
            profile = _profile_from_segments(params["segments"])
        else:
            breakpoints = params.get("breakpoints", [300.0, 400.0, 500.0, 800.0, 900.0, 1000.0])
            a = params.get("curvature", 0.002)
            curvatures = params.get("curvatures", [0.0, a, -a, 0.0, -a, a, 0.0])
            profile = PiecewiseProfile(breakpoints, curvatures)

        def hess(x, y):
            out = np.zeros((2, 2))
            out[0, 0] = profile.curvature(x)
            return out

        return WorldModel(
            "piecewise",
            lambda x, y: profile.value(x) + 0.0 * np.asarray(y, dtype=float),
            lambda x, y: np.array([float(profile.slope(x)), 0.0]),
            hess,
            breakpoints=tuple(profile.xs),
        )

    if variant == "sinusoidal":
        amp = params.get("amplitude", 2.0)
        kx = params.get("kx", 2.0 * math.pi / 200.0)
        ky = params.get("ky", 2.0 * math.pi / 300.0)

        def height(x, y):
            return amp * np.sin(kx * np.asarray(x, dtype=float)) * np.sin(
                ky * np.asarray(y, dtype=float)
            )

        def grad(x, y):
            return np.array(
                [
                    amp * kx * math.cos(kx * x) * math.sin(ky * y),
                    amp * ky * math.sin(kx * x) * math.cos(ky * y),
                ]
            )

        def hess(x, y):
            sxx = -amp * kx * kx * math.sin(kx * x) * math.sin(ky * y)
            syy = -amp * ky * ky * math.sin(kx * x) * math.sin(ky * y)
            sxy = amp * kx * ky * math.cos(kx * x) * math.cos(ky * y)
            return np.array([[sxx, sxy], [sxy, syy]])

        return WorldModel("sinusoidal", height, grad, hess)

    raise ValueError(f"unknown world variant: {variant!r}")


def _profile_from_segments(segments):
    """Build a profile from explicit segments [(x_start, c, b, a), ...].

    Each segment is h = c + b*dx + 0.5*a*dx^2 with dx measured from its start.
    The declared (c, b) of every segment must match the accumulated state at
    its start, otherwise the spec is not C1 and is rejected.
    """
    xs = [float(s[0]) for s in segments]
    coeffs = [tuple(float(v) for v in s[1:]) for s in segments]
    curvatures = [coeffs[0][2]] + [c[2] for c in coeffs]
    profile = PiecewiseProfile(xs, curvatures, h0=coeffs[0][0], slope0=coeffs[0][1])
    for j, (c, b, _) in enumerate(coeffs):
        if abs(profile.values[j] - c) > 1e-9 or abs(profile.slopes[j] - b) > 1e-9:
            raise ValueError("piecewise segments must join with matching value and slope")
    return profile


def local_quadratic(world: WorldModel, x: float, y: float):
    """Exact second-order surface fit at (x, y) in manifold coefficients."""
    h0 = float(world.height(x, y))
    g = world.grad(x, y)
    H = world.hess(x, y)
    m = ManifoldParams(
        np.array([-h0, -g[0], -g[1], -H[0, 0], -H[0, 1], -H[1, 1]])
    )
    return m, ManifoldFrame.at(x, y)


# ---------------------------------------------------------------------------
# Trajectory generation
# ---------------------------------------------------------------------------


@dataclass
class YawProfile:
    """Heading-rate schedule: piecewise-constant base plus optional weave."""

    pieces: tuple = ((0.0, 0.0),)  # (t_start, rate rad/s)
    weave_amplitude: float = 0.0
    weave_period: float = 30.0

    def rate(self, t: float) -> float:
        base = 0.0
        for t0, r in self.pieces:
            if t >= t0:
                base = r
        if self.weave_amplitude:
            base += self.weave_amplitude * math.sin(2.0 * math.pi * t / self.weave_period)
        return base


@dataclass
class CameraModel:
    fx: float = 380.0
    fy: float = 380.0
    cx: float = 320.0
    cy: float = 200.0
    width: int = 640
    height: int = 400
    # Odometer-to-camera extrinsics: X_c = R_co @ (X_o - t_oc).
    R_co: np.ndarray = field(
        default_factory=lambda: np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    )
    t_oc: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.0, 0.3]))

    def project(self, X_c):
        X_c = np.asarray(X_c, dtype=float)
        u = self.fx * X_c[..., 0] / X_c[..., 2] + self.cx
        v = self.fy * X_c[..., 1] / X_c[..., 2] + self.cy
        return np.stack([u, v], axis=-1)


@dataclass
class ImuNoise:
    gyro_density: float = 9e-4  # rad/s/sqrt(Hz)
    gyro_bias_density: float = 1e-4  # rad/s^1.5
    accel_density: float = 1e-2  # m/s^1.5 (continuous accel noise)
    accel_bias_density: float = 1e-4  # m/s^2.5


@dataclass
class SimConfig:
    duration: float = 60.0
    odom_rate: float = 100.0
    imu_rate: float = 100.0
    cam_rate: float = 10.0
    speed: float = 3.5
    start: tuple = (0.0, 0.0)
    start_yaw: float = 0.0
    yaw_profile: YawProfile = field(default_factory=YawProfile)
    odom_noise: RelativeOdomNoise = field(default_factory=RelativeOdomNoise)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    pixel_sigma: float = 0.8
    camera: CameraModel = field(default_factory=CameraModel)
    n_features: int = 400
    mean_track_length: float = 5.1
    feature_depth: tuple = (5.0, 35.0)
    feature_height: tuple = (0.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.odom_rate, self.imu_rate, self.cam_rate) <= 0:
            raise ValueError("sensor rates must be positive")
        if self.odom_rate != self.imu_rate:
            raise ValueError("odometer and IMU rates must share the truth grid")
        if self.odom_rate % self.cam_rate != 0:
            raise ValueError("camera rate must divide the odometer rate")
        self.odom_noise.rate = self.odom_rate


@dataclass
class GroundTruth:
    t: np.ndarray
    p: np.ndarray  # (N, 3)
    R: np.ndarray  # (N, 3, 3)
    v_body: np.ndarray  # (N, 3), exactly [speed, 0, 0]
    omega_body: np.ndarray  # (N, 3)
    a_global: np.ndarray  # (N, 3)
    yaw: np.ndarray
    speed: float

    def quaternions(self) -> np.ndarray:
        return np.array([geom.rotation_to_quat(R) for R in self.R])


def _truth_sample(world, x, y, psi, psi_dot, v):
    """Full analytic kinematic state of the surface-following robot."""
    u = np.array([math.cos(psi), math.sin(psi)])
    u_perp = np.array([-u[1], u[0]])
    g = world.grad(x, y)
    H = world.hess(x, y)
    gu = float(g @ u)
    denom = math.sqrt(1.0 + gu * gu)
    s = v / denom  # horizontal speed keeping |velocity| = v

    v_g = np.array([s * u[0], s * u[1], s * gu])
    g_dot = H @ (s * u)
    gu_dot = float(g_dot @ u) + float(g @ u_perp) * psi_dot
    s_dot = -v * gu * gu_dot / denom**3

    a_g = np.array(
        [
            s_dot * u[0] + s * psi_dot * u_perp[0],
            s_dot * u[1] + s * psi_dot * u_perp[1],
            s_dot * gu + s * gu_dot,
        ]
    )

    N = math.sqrt(1.0 + float(g @ g))
    n = np.array([-g[0], -g[1], 1.0]) / N
    N_dot = float(g @ g_dot) / N
    n_dot = np.array([-g_dot[0], -g_dot[1], 0.0]) / N - n * (N_dot / N)

    f = v_g / v
    f_dot = a_g / v
    y_b = np.cross(n, f)
    y_b_dot = np.cross(n_dot, f) + np.cross(n, f_dot)

    R = np.column_stack([f, y_b, n])
    omega = np.array([float(n @ y_b_dot), float(f @ n_dot), float(y_b @ f_dot)])
    return R, v_g, a_g, omega


def generate_truth(world: WorldModel, config: SimConfig, substeps: int = 10) -> GroundTruth:
    """Integrate the planar path and recover the 6D truth analytically.

    The (x, y, yaw) path integrates with RK4 at ``substeps`` times the truth
    grid rate; stored samples land exactly on the sensor grid.
    """
    rate = config.odom_rate
    n = int(round(config.duration * rate))
    v = config.speed
    profile = config.yaw_profile

    def planar_rates(x, y, psi, rate):
        u0, u1 = math.cos(psi), math.sin(psi)
        g = world.grad(x, y)
        gu = g[0] * u0 + g[1] * u1
        s = v / math.sqrt(1.0 + gu * gu)
        return s * u0, s * u1, rate

    x, y = config.start
    psi = config.start_yaw
    h = 1.0 / (rate * substeps)

    ts = np.arange(n + 1) / rate
    xs = np.empty(n + 1)
    ys = np.empty(n + 1)
    psis = np.empty(n + 1)
    xs[0], ys[0], psis[0] = x, y, psi
    t = 0.0
    for k in range(n):
        for _ in range(substeps):
            # One rate per substep, sampled at the midpoint: exact for
            # piecewise-constant profiles with grid-aligned switches.
            rate = profile.rate(t + 0.5 * h)
            k1 = planar_rates(x, y, psi, rate)
            k2 = planar_rates(x + 0.5 * h * k1[0], y + 0.5 * h * k1[1], psi + 0.5 * h * k1[2], rate)
            k3 = planar_rates(x + 0.5 * h * k2[0], y + 0.5 * h * k2[1], psi + 0.5 * h * k2[2], rate)
            k4 = planar_rates(x + h * k3[0], y + h * k3[1], psi + h * k3[2], rate)
            x += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            y += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            psi += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            t += h
        xs[k + 1], ys[k + 1], psis[k + 1] = x, y, psi

    p = np.column_stack([xs, ys, np.asarray(world.height(xs, ys), dtype=float)])
    R = np.empty((n + 1, 3, 3))
    omega = np.empty((n + 1, 3))
    a_global = np.empty((n + 1, 3))
    for k in range(n + 1):
        Rk, _, ak, wk = _truth_sample(
            world, xs[k], ys[k], psis[k], profile.rate(ts[k]), v
        )
        R[k] = Rk
        omega[k] = wk
        a_global[k] = ak
    v_body = np.zeros((n + 1, 3))
    v_body[:, 0] = v
    return GroundTruth(ts, p, R, v_body, omega, a_global, psis, v)


# ---------------------------------------------------------------------------
# Sensor synthesis
# ---------------------------------------------------------------------------


def synthesize_odometry(truth: GroundTruth, config: SimConfig, rng=None):
    """Noisy forward-speed / yaw-rate samples on the odometer grid."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    noise = config.odom_noise
    samples = []
    for k in range(len(truth.t)):
        v_true = truth.v_body[k, 0]
        w_true = truth.omega_body[k, 2]
        sv, sw = noise.sample_sigmas(v_true, w_true)
        samples.append(
            OdometerSample(
                truth.t[k],
                v_true + sv * rng.standard_normal(),
                w_true + sw * rng.standard_normal(),
            )
        )
    return samples


@dataclass
class CameraFrame:
    t: float
    ids: np.ndarray
    uv: np.ndarray  # (K, 2) pixels


def synthesize_camera(truth: GroundTruth, world: WorldModel, config: SimConfig, rng=None):
    """Persistent landmark field projected with known association.

    New landmarks spawn in the view frustum to hold the visible count at the
    configured target; per-landmark lifetimes are geometric so the mean track
    length lands near the configured value.  Returns (frames, landmarks).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed + 1)
    cam = config.camera
    stride = int(round(config.odom_rate / config.cam_rate))
    frame_idx = range(0, len(truth.t), stride)

    positions = np.zeros((0, 3))
    expiry = np.zeros(0, dtype=int)  # frame number at which the landmark dies
    ids = np.zeros(0, dtype=int)
    next_id = 0
    frames = []
    all_landmarks = {}

    # Lifetime = 1 + Geometric(p) frames.  The +1.0 in the mean offsets tracks
    # cut short by field-of-view exits rather than expiry.
    p_geom = 1.0 / max(config.mean_track_length, 1.5)

    for fnum, k in enumerate(frame_idx):
        Rwo = truth.R[k]
        pw = truth.p[k]

        def to_cam(X):
            return (cam.R_co @ (Rwo.T @ (X - pw).T - cam.t_oc[:, None])).T

        alive = expiry > fnum
        positions, ids, expiry = positions[alive], ids[alive], expiry[alive]

        if len(positions):
            Xc = to_cam(positions)
            uv = cam.project(Xc)
            visible = (
                (Xc[:, 2] > 0.5)
                & (Xc[:, 2] < config.feature_depth[1] * 1.5)
                & (uv[:, 0] >= 0)
                & (uv[:, 0] < cam.width)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] < cam.height)
            )
        else:
            visible = np.zeros(0, dtype=bool)

        n_new = config.n_features - int(visible.sum())
        if n_new > 0:
            u = rng.uniform(0, cam.width, size=n_new)
            vpx = rng.uniform(0, cam.height, size=n_new)
            depth = rng.uniform(*config.feature_depth, size=n_new)
            xc = (u - cam.cx) / cam.fx * depth
            yc = (vpx - cam.cy) / cam.fy * depth
            Xc_new = np.column_stack([xc, yc, depth])
            Xw_new = (Rwo @ (cam.R_co.T @ Xc_new.T + cam.t_oc[:, None])).T + pw
            new_ids = np.arange(next_id, next_id + n_new)
            next_id += n_new
            lifetimes = 1 + rng.geometric(p_geom, size=n_new)
            positions = np.vstack([positions, Xw_new])
            ids = np.concatenate([ids, new_ids])
            expiry = np.concatenate([expiry, fnum + lifetimes])
            for i, lid in enumerate(new_ids):
                all_landmarks[int(lid)] = Xw_new[i]
            Xc = to_cam(positions)
            uv = cam.project(Xc)
            visible = (
                (Xc[:, 2] > 0.5)
                & (Xc[:, 2] < config.feature_depth[1] * 1.5)
                & (uv[:, 0] >= 0)
                & (uv[:, 0] < cam.width)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] < cam.height)
            )

        uv_vis = uv[visible] + config.pixel_sigma * rng.standard_normal((int(visible.sum()), 2))
        frames.append(CameraFrame(truth.t[k], ids[visible].copy(), uv_vis))
    return frames, all_landmarks


def synthesize_imu(truth: GroundTruth, config: SimConfig, rng=None):
    """Gyro/accel stream with white noise and random-walk biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed + 2)
    nz = config.imu_noise
    dt = 1.0 / config.imu_rate
    root = math.sqrt(config.imu_rate)
    bg = np.zeros(3)
    ba = np.zeros(3)
    gravity = np.array([0.0, 0.0, -9.81])
    rows = []
    for k in range(len(truth.t)):
        gyro = truth.omega_body[k] + bg + nz.gyro_density * root * rng.standard_normal(3)
        accel = (
            truth.R[k].T @ (truth.a_global[k] - gravity)
            + ba
            + nz.accel_density * root * rng.standard_normal(3)
        )
        rows.append((truth.t[k], gyro, accel))
        bg = bg + nz.gyro_bias_density * math.sqrt(dt) * rng.standard_normal(3)
        ba = ba + nz.accel_bias_density * math.sqrt(dt) * rng.standard_normal(3)
    return rows

import math

import numpy as np
import pytest
from scipy.linalg import expm

from manifold_odom import geom, manifold, propagation
from manifold_odom.manifold import ManifoldFrame, ManifoldParams
from manifold_odom.propagation import (
    ErrorBelief,
    OdometerSample,
    OdomNoise,
    OdomState,
    RelativeOdomNoise,
)


def rot2(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_state(rng, t=0.0):
    m = ManifoldParams(
        np.concatenate([rng.normal(scale=[1.0, 0.2, 0.2]), rng.normal(scale=0.05, size=3)])
    )
    frame = ManifoldFrame(rng.normal(scale=5.0, size=2), rot2(rng.uniform(-3, 3)))
    q = geom.quat_normalize(rng.normal(size=4))
    p = rng.normal(scale=8.0, size=3)
    return OdomState(t, p, q, m, frame)


def random_sample(rng, t=0.0):
    return OdometerSample(t, rng.uniform(0.5, 5.0), rng.normal(scale=0.5))


def apply_error(state, xi):
    out = state.copy()
    out.q = geom.quat_boxplus(out.q, xi[0:3])
    out.p = out.p + xi[3:6]
    out.m = ManifoldParams(out.m.vec + xi[6:12])
    return out


def state_error(state, ref):
    dtheta = geom.rotation_log(ref.rotation().T @ state.rotation())
    return np.concatenate([dtheta, state.p - ref.p, state.m.vec - ref.m.vec])


def flat_state(t=0.0, p=(0.0, 0.0, 0.0)):
    return OdomState(
        t,
        np.array(p, dtype=float),
        np.array([1.0, 0.0, 0.0, 0.0]),
        ManifoldParams.zero(),
        ManifoldFrame.at(0.0, 0.0),
    )


class TestInferOmega:
    def test_flat_reduces_to_yaw_only(self):
        state = flat_state()
        w = propagation.infer_omega(state, OdometerSample(0.0, 2.0, 0.3))
        np.testing.assert_allclose(w, [0.0, 0.0, 0.3])

    def test_pitch_rate_from_curvature(self):
        state = flat_state()
        state.m = ManifoldParams.from_coeffs(a1=0.2)
        w = propagation.infer_omega(state, OdometerSample(0.0, 3.5, 0.1))
        np.testing.assert_allclose(w, [0.0, 0.7, 0.1], atol=1e-12)

    def test_alignment_preserved_along_integration(self):
        # Integrating the inferred rate keeps the body z-axis parallel to the
        # manifold gradient.
        state = flat_state()
        state.m = ManifoldParams.from_coeffs(a1=0.02, a2=0.005, a3=0.01)
        sample = OdometerSample(0.0, 3.5, 0.05)
        for _ in range(1000):
            state = propagation.propagate_mean(state, sample, 0.01)
            g = manifold.gradient(state.m, state.frame, state.p)
            resid = geom.skew12(state.rotation() @ geom.E3) @ g
            assert np.linalg.norm(resid) < 1e-6


class TestPropagateMean:
    def test_static(self):
        state = flat_state()
        out = propagation.propagate_mean(state, OdometerSample(0.0, 0.0, 0.0), 0.01)
        np.testing.assert_array_equal(out.p, state.p)
        np.testing.assert_allclose(out.q, state.q, atol=1e-15)
        assert out.t == pytest.approx(0.01)

    def test_straight_line(self):
        state = flat_state()
        sample = OdometerSample(0.0, 1.0, 0.0)
        for _ in range(1000):
            state = propagation.propagate_mean(state, sample, 0.01)
        np.testing.assert_allclose(state.p, [10.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(state.q, [1.0, 0.0, 0.0, 0.0], atol=1e-9)

    def test_parabolic_stays_on_manifold(self):
        state = flat_state()
        state.m = ManifoldParams.from_coeffs(a1=0.5)
        sample = OdometerSample(0.0, 3.5, 0.0)
        for _ in range(200):
            state = propagation.propagate_mean(state, sample, 0.01)
            assert abs(manifold.evaluate(state.m, state.frame, state.p)) < 1e-6

    def test_rejects_bad_dt(self):
        state = flat_state()
        with pytest.raises(ValueError):
            propagation.propagate_mean(state, OdometerSample(0.0, 1.0, 0.0), 0.0)
        with pytest.raises(ValueError):
            propagation.propagate_mean(state, OdometerSample(0.0, 1.0, 0.0), 0.2)


class TestOmegaJacobians:
    def test_zero_speed_flat_limit(self):
        state = flat_state()
        J_x, J_n = propagation.omega_jacobians(state, OdometerSample(0.0, 0.0, 0.2))
        np.testing.assert_array_equal(J_x, np.zeros((3, 12)))
        np.testing.assert_array_equal(J_n, [[0.0, 0.0], [0.0, 0.0], [0.0, -1.0]])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        eps = 1e-6
        for _ in range(100):
            state = random_state(rng)
            sample = random_sample(rng)
            J_x, _ = propagation.omega_jacobians(state, sample)
            fd = np.zeros((3, 12))
            for j in range(12):
                xi = np.zeros(12)
                xi[j] = eps
                wp = propagation.infer_omega(apply_error(state, xi), sample)
                wm = propagation.infer_omega(apply_error(state, -xi), sample)
                fd[:, j] = (wp - wm) / (2 * eps)
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(J_x - fd) / scale) < 1e-5

    def test_noise_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        eps = 1e-6
        for _ in range(100):
            state = random_state(rng)
            sample = random_sample(rng)
            _, J_n = propagation.omega_jacobians(state, sample)
            fd = np.zeros((3, 2))
            for j, (dv, dw) in enumerate([(eps, 0.0), (0.0, eps)]):
                sp = OdometerSample(sample.t, sample.v - dv, sample.omega - dw)
                sm = OdometerSample(sample.t, sample.v + dv, sample.omega + dw)
                fd[:, j] = (
                    propagation.infer_omega(state, sp) - propagation.infer_omega(state, sm)
                ) / (2 * eps)
            scale = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(J_n - fd) / scale) < 1e-5


def flow_error_jacobian(state, sample, h=1e-3, eps=1e-5):
    """Finite-difference transition Jacobian from the full mean dynamics.

    Flows perturbed and nominal states forward/backward (the dynamics are
    linear-homogeneous in the readings, so the backward flow uses negated
    readings) and differentiates the extracted error over time; the +/- eps
    average removes second-order error terms.
    """
    back = OdometerSample(sample.t, -sample.v, -sample.omega)
    nom_plus = propagation.propagate_mean(state, sample, h, surface_tolerance=np.inf)
    nom_minus = propagation.propagate_mean(state, back, h, surface_tolerance=np.inf)
    F = np.zeros((12, 12))
    for j in range(12):
        cols = []
        for sign in (+1.0, -1.0):
            xi = np.zeros(12)
            xi[j] = sign * eps
            pert = apply_error(state, xi)
            pp = propagation.propagate_mean(pert, sample, h, surface_tolerance=np.inf)
            pm = propagation.propagate_mean(pert, back, h, surface_tolerance=np.inf)
            d = (state_error(pp, nom_plus) - state_error(pm, nom_minus)) / (2 * h)
            cols.append(sign * d / eps)
        F[:, j] = 0.5 * (cols[0] + cols[1])
    return F


class TestErrorTransition:
    def test_flat_static_structure(self):
        state = flat_state()
        sample = OdometerSample(0.0, 0.0, 0.4)
        F, G = propagation.error_transition(state, sample)
        expected = np.zeros((12, 12))
        expected[0:3, 0:3] = -geom.skew([0.0, 0.0, 0.4])
        np.testing.assert_allclose(F, expected, atol=1e-15)
        assert G[2, 1] == -1.0

    def test_matches_flow_finite_differences(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            state = random_state(rng)
            sample = random_sample(rng)
            F, _ = propagation.error_transition(state, sample)
            F_fd = flow_error_jacobian(state, sample)
            scale = max(1.0, np.max(np.abs(F_fd)))
            assert np.max(np.abs(F - F_fd)) / scale < 1e-5

    def test_noise_columns_match_finite_differences(self):
        rng = np.random.default_rng(24)
        eps = 1e-6
        for _ in range(50):
            state = random_state(rng)
            sample = random_sample(rng)
            _, G = propagation.error_transition(state, sample)
            R = state.rotation()
            fd = np.zeros((12, 2))
            for j, (dv, dw) in enumerate([(eps, 0.0), (0.0, eps)]):
                sp = OdometerSample(sample.t, sample.v - dv, sample.omega - dw)
                sm = OdometerSample(sample.t, sample.v + dv, sample.omega + dw)
                dw_dn = (
                    propagation.infer_omega(state, sp) - propagation.infer_omega(state, sm)
                ) / (2 * eps)
                dp_dn = (R[:, 0] * (sp.v - sm.v)) / (2 * eps)
                fd[0:3, j] = dw_dn
                fd[3:6, j] = dp_dn
            scale = max(1.0, np.max(np.abs(fd)))
            assert np.max(np.abs(G - fd)) / scale < 1e-5


class TestPropagateCovariance:
    def test_empty_batch(self):
        state = flat_state()
        cov0 = np.diag(np.full(12, 0.01))
        belief, Phi = propagation.propagate_covariance(
            ErrorBelief(cov0), state, [], OdomNoise(0.01, 0.001)
        )
        np.testing.assert_array_equal(belief.cov, cov0)
        np.testing.assert_array_equal(Phi, np.eye(12))

    def make_batch(self, rng, n=20, rate=100.0):
        return [
            OdometerSample(k / rate, 3.5 + 0.1 * math.sin(k * 0.3), 0.2 * math.cos(k * 0.1))
            for k in range(n)
        ]

    def test_phi_composition(self):
        rng = np.random.default_rng(25)
        state = random_state(rng)
        samples = self.make_batch(rng)
        noise = OdomNoise(0.01, 0.001)
        cov0 = ErrorBelief(np.eye(12) * 1e-4)

        _, Phi_full = propagation.propagate_covariance(cov0, state, samples, noise, t_end=0.20)
        mid_state, _, Phi_a, _ = propagation.propagate_interval(
            state, cov0, samples[:10], noise, t_end=0.10
        )
        _, Phi_b = propagation.propagate_covariance(
            cov0, mid_state, samples[10:], noise, t_end=0.20
        )
        np.testing.assert_allclose(Phi_b @ Phi_a, Phi_full, atol=1e-9)

    def test_monte_carlo_linearization_spread(self):
        # Moment-matched samples isolate the linearization error of Phi from
        # sampling noise: the empirical input covariance equals cov0 exactly.
        rng = np.random.default_rng(26)
        state = flat_state()
        state.m = ManifoldParams.from_coeffs(a1=0.01, b1=0.05)
        samples = [OdometerSample(k * 0.02, 3.5, 0.1) for k in range(50)]
        noise = OdomNoise(1e-8, 1e-8)  # zero-noise run up to numerical floor
        sig = np.array([0.02, 0.02, 0.02, 0.05, 0.05, 0.05, 0.01, 0.01, 0.01, 0.002, 0.002, 0.002])
        cov0 = np.diag(sig**2)

        n = 300
        X = rng.normal(size=(n, 12))
        X -= X.mean(axis=0)
        L_emp = np.linalg.cholesky(np.cov(X.T, bias=True))
        X = X @ np.linalg.inv(L_emp).T @ np.diag(sig)

        nominal, _, Phi, _ = propagation.propagate_interval(
            state, None, samples, noise, t_end=1.0, surface_tolerance=np.inf,
            with_covariance=True,
        )
        errs = np.zeros((n, 12))
        for i in range(n):
            pert = apply_error(state, X[i])
            out, _, _, _ = propagation.propagate_interval(
                pert, None, samples, noise, t_end=1.0, surface_tolerance=np.inf
            )
            errs[i] = state_error(out, nominal)
        emp = np.cov(errs.T, bias=True)
        pred = Phi @ cov0 @ Phi.T
        rel = np.linalg.norm(emp - pred) / np.linalg.norm(pred)
        assert rel < 0.05

    def test_psd_and_symmetric_after_propagation(self):
        rng = np.random.default_rng(27)
        state = random_state(rng)
        samples = self.make_batch(rng)
        belief = ErrorBelief(np.eye(12) * 1e-4)
        out, _ = propagation.propagate_covariance(
            belief, state, samples, RelativeOdomNoise(), t_end=0.2
        )
        assert np.max(np.abs(out.cov - out.cov.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(out.cov)) > -1e-12

    def test_rejects_unordered_samples(self):
        state = flat_state()
        samples = [OdometerSample(0.0, 1.0, 0.0), OdometerSample(0.0, 1.0, 0.0)]
        with pytest.raises(ValueError):
            propagation.propagate_covariance(
                ErrorBelief(np.eye(12)), state, samples, OdomNoise(0.01, 0.001)
            )


class TestPlanarBaseline:
    def test_straight_line(self):
        samples = [OdometerSample(k * 0.01, 1.0, 0.0) for k in range(100)]
        t, p, q = propagation.integrate_planar_baseline(
            samples, np.zeros(3), np.eye(3), t_end=1.0
        )
        np.testing.assert_allclose(p[-1], [1.0, 0.0, 0.0], atol=1e-12)

    def test_quarter_circle(self):
        samples = [OdometerSample(k * 0.01, 1.0, math.pi / 2) for k in range(100)]
        t, p, q = propagation.integrate_planar_baseline(
            samples, np.zeros(3), np.eye(3), t_end=1.0
        )
        np.testing.assert_allclose(p[-1], [2 / math.pi, 2 / math.pi, 0.0], atol=1e-12)
        R = geom.quat_to_rotation(q[-1])
        assert math.atan2(R[1, 0], R[0, 0]) == pytest.approx(math.pi / 2, abs=1e-12)

    def test_flat_world_matches_manifold_method(self):
        samples = [OdometerSample(k * 0.01, 2.0, 0.5) for k in range(500)]
        _, p, q = propagation.integrate_planar_baseline(
            samples, np.zeros(3), np.eye(3), t_end=5.0
        )
        state = flat_state()
        out, _, _, _ = propagation.propagate_interval(
            state, None, samples, OdomNoise(1e-6, 1e-6), t_end=5.0
        )
        np.testing.assert_allclose(out.p, p[-1], atol=1e-9)


class TestImuBaseline:
    def test_static_perfect(self):
        R0 = geom.quat_to_rotation(geom.quat_normalize(np.array([0.9, 0.1, 0.2, -0.1])))
        accel = -R0.T @ propagation.GRAVITY
        rows = [(k * 0.01, np.zeros(3), accel) for k in range(200)]
        t, p, q = propagation.integrate_imu_baseline(rows, np.zeros(3), np.zeros(3), R0)
        assert np.linalg.norm(p[-1]) < 1e-10
        assert geom.rotation_angle(R0.T @ geom.quat_to_rotation(q[-1])) < 1e-10

    def test_pure_yaw_rotation(self):
        omega = np.array([0.0, 0.0, 0.5])
        rows = []
        for k in range(301):
            t = k * 0.01
            R = expm(geom.skew(omega * t))
            rows.append((t, omega, -R.T @ propagation.GRAVITY))
        t, p, q = propagation.integrate_imu_baseline(rows, np.zeros(3), np.zeros(3), np.eye(3))
        assert np.linalg.norm(p[-1]) < 1e-8
        R_final = geom.quat_to_rotation(q[-1])
        expected = expm(geom.skew(omega * 3.0))
        assert geom.rotation_angle(expected.T @ R_final) < 1e-8

import math

import numpy as np
import pytest

from manifold_odom import geom, manifold, propagation, sim
from manifold_odom.propagation import RelativeOdomNoise
from manifold_odom.sim import SimConfig, YawProfile, build_world, generate_truth


def quiet_noise():
    return RelativeOdomNoise(rel_v=0.0, rel_omega=0.0, floor_v=0.0, floor_omega=0.0)


class TestWorlds:
    def test_flat(self):
        w = build_world("flat")
        assert float(w.height(3.0, 4.0)) == 0.0
        np.testing.assert_array_equal(w.grad(3.0, 4.0), np.zeros(2))
        np.testing.assert_array_equal(w.hess(3.0, 4.0), np.zeros((2, 2)))

    def test_piecewise_worked_profile(self):
        # Flat then 0.25*(x - 1000)^2: value and slope continuous at the join.
        w = build_world("piecewise", {"breakpoints": [1000.0], "curvatures": [0.0, 0.5]})
        assert float(w.height(500.0, 0.0)) == 0.0
        assert float(w.height(1002.0, 3.0)) == pytest.approx(0.25 * 4.0)
        eps = 1e-7
        left = float(w.height(1000.0 - eps, 0.0))
        right = float(w.height(1000.0 + eps, 0.0))
        assert abs(left - right) < 1e-9
        assert abs(w.grad(1000.0 - eps, 0.0)[0] - w.grad(1000.0 + eps, 0.0)[0]) < 1e-6

    def test_default_piecewise_c1(self):
        w = build_world("piecewise")
        eps = 1e-7
        for xb in w.breakpoints:
            dh = float(w.height(xb + eps, 0)) - float(w.height(xb - eps, 0))
            slope = w.grad(xb, 0)[0]
            assert abs(dh - 2 * eps * slope) < 1e-9
            assert abs(w.grad(xb - eps, 0)[0] - w.grad(xb + eps, 0)[0]) < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(30)
        h = 1e-5
        for variant, params in [
            ("piecewise", None),
            ("sinusoidal", None),
            ("quadratic", {"slope": [0.05, -0.02], "hessian": [[0.002, 0.0005], [0.0005, -0.001]]}),
        ]:
            w = build_world(variant, params)
            for _ in range(30):
                x, y = rng.uniform(-50, 1100), rng.uniform(-50, 50)
                g = w.grad(x, y)
                fx = (float(w.height(x + h, y)) - float(w.height(x - h, y))) / (2 * h)
                fy = (float(w.height(x, y + h)) - float(w.height(x, y - h))) / (2 * h)
                np.testing.assert_allclose(g, [fx, fy], atol=1e-8 + 1e-6 * abs(fx) + 1e-6 * abs(fy))

    def test_rejects_c1_violation(self):
        with pytest.raises(ValueError):
            build_world(
                "piecewise",
                {"segments": [(0.0, 0.0, 0.0, 0.0), (10.0, 1.0, 0.0, 0.0)]},
            )

    def test_accepts_c1_segments(self):
        w = build_world(
            "piecewise",
            {"segments": [(0.0, 0.0, 0.0, 0.002), (10.0, 0.1, 0.02, -0.002)]},
        )
        assert float(w.height(10.0, 0.0)) == pytest.approx(0.1)

    def test_local_quadratic_exact_on_quadratic_world(self):
        w = build_world("quadratic", {"slope": [0.03, 0.01], "hessian": [[0.004, 0.001], [0.001, 0.002]]})
        m, frame = sim.local_quadratic(w, 5.0, -3.0)
        rng = np.random.default_rng(31)
        for _ in range(20):
            x, y = rng.uniform(-20, 20, size=2)
            z = float(w.height(x, y))
            assert abs(manifold.evaluate(m, frame, np.array([x, y, z]))) < 1e-9


class TestGroundTruth:
    def test_flat_straight(self):
        cfg = SimConfig(duration=5.0, odom_noise=quiet_noise(), seed=1)
        truth = generate_truth(build_world("flat"), cfg)
        np.testing.assert_allclose(truth.p[-1], [17.5, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(truth.R[-1], np.eye(3), atol=1e-12)

    def test_invariants_on_surface(self):
        w = build_world("sinusoidal")
        cfg = SimConfig(
            duration=20.0,
            start=(0.0, 75.0),
            yaw_profile=YawProfile(weave_amplitude=0.05),
            odom_noise=quiet_noise(),
        )
        truth = generate_truth(w, cfg)
        z_err = np.abs(truth.p[:, 2] - np.asarray(w.height(truth.p[:, 0], truth.p[:, 1])))
        assert np.max(z_err) < 1e-9
        # Rotation matrices orthonormal with z-axis along the surface normal.
        for k in range(0, len(truth.t), 100):
            R = truth.R[k]
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            g = w.grad(truth.p[k, 0], truth.p[k, 1])
            n = np.array([-g[0], -g[1], 1.0])
            n /= np.linalg.norm(n)
            np.testing.assert_allclose(R[:, 2], n, atol=1e-12)
        assert np.all(truth.v_body[:, 1:] == 0.0)

    def test_omega_matches_finite_difference_of_rotation(self):
        w = build_world("piecewise")
        cfg = SimConfig(
            duration=40.0,
            start=(250.0, 0.0),
            yaw_profile=YawProfile(weave_amplitude=0.04, weave_period=11.0),
            odom_noise=quiet_noise(),
        )
        truth = generate_truth(w, cfg)
        dt = truth.t[1] - truth.t[0]
        for k in range(1, len(truth.t) - 1, 50):
            W = truth.R[k].T @ (truth.R[k + 1] - truth.R[k - 1]) / (2 * dt)
            w_fd = np.array([W[2, 1], W[0, 2], W[1, 0]])
            np.testing.assert_allclose(truth.omega_body[k], w_fd, atol=5e-4)

    def test_accel_matches_finite_difference(self):
        w = build_world("quadratic", {"hessian": [[0.004, 0.0], [0.0, 0.002]]})
        cfg = SimConfig(duration=10.0, yaw_profile=YawProfile(weave_amplitude=0.05), odom_noise=quiet_noise())
        truth = generate_truth(w, cfg)
        dt = truth.t[1] - truth.t[0]
        a_fd = (truth.p[2:] - 2 * truth.p[1:-1] + truth.p[:-2]) / dt**2
        np.testing.assert_allclose(truth.a_global[1:-1], a_fd, atol=5e-4)

    def test_pitch_rate_at_apex(self):
        # Curvature times speed, nose-up for a valley.
        h00 = 0.004
        w = build_world("quadratic", {"hessian": [[h00, 0.0], [0.0, 0.0]]})
        cfg = SimConfig(duration=1.0, odom_noise=quiet_noise())
        truth = generate_truth(w, cfg)
        assert truth.omega_body[0, 1] == pytest.approx(-h00 * cfg.speed, rel=1e-9)


class TestOdometry:
    def test_zero_noise_equals_truth(self):
        cfg = SimConfig(duration=2.0, odom_noise=quiet_noise())
        truth = generate_truth(build_world("flat"), cfg)
        samples = sim.synthesize_odometry(truth, cfg)
        assert all(s.v == truth.v_body[k, 0] for k, s in enumerate(samples))
        assert all(s.omega == truth.omega_body[k, 2] for k, s in enumerate(samples))

    def test_noise_scale(self):
        cfg = SimConfig(duration=1000.0, odom_rate=100.0, imu_rate=100.0, seed=7)
        truth = generate_truth(build_world("flat"), cfg)
        samples = sim.synthesize_odometry(truth, cfg)
        sigma_expected = 0.03 * 3.5 + 1e-3
        errs = np.array([s.v - 3.5 for s in samples])
        assert len(errs) >= 1e5
        assert np.std(errs) == pytest.approx(sigma_expected, rel=0.05)

    def test_deterministic_under_seed(self):
        cfg = SimConfig(duration=2.0, seed=3)
        truth = generate_truth(build_world("flat"), cfg)
        a = sim.synthesize_odometry(truth, cfg, np.random.default_rng(3))
        b = sim.synthesize_odometry(truth, cfg, np.random.default_rng(3))
        assert all(x.v == y.v and x.omega == y.omega for x, y in zip(a, b))


class TestCamera:
    @pytest.fixture(scope="class")
    def nominal_frames(self):
        w = build_world("piecewise")
        cfg = SimConfig(
            duration=40.0,
            start=(250.0, 0.0),
            yaw_profile=YawProfile(weave_amplitude=0.03),
            seed=11,
        )
        truth = generate_truth(w, cfg)
        frames, landmarks = sim.synthesize_camera(truth, w, cfg)
        return cfg, truth, frames, landmarks

    def test_visible_count(self, nominal_frames):
        cfg, _, frames, _ = nominal_frames
        counts = [len(f.ids) for f in frames]
        assert 360 <= np.mean(counts) <= 440

    def test_track_length(self, nominal_frames):
        cfg, _, frames, _ = nominal_frames
        lengths = {}
        for f in frames:
            for i in f.ids:
                lengths[int(i)] = lengths.get(int(i), 0) + 1
        mean_len = np.mean(list(lengths.values()))
        assert 4.6 <= mean_len <= 5.6

    def test_zero_noise_reprojection(self):
        w = build_world("flat")
        cfg = SimConfig(duration=3.0, pixel_sigma=0.0, seed=5, n_features=50)
        truth = generate_truth(w, cfg)
        frames, landmarks = sim.synthesize_camera(truth, w, cfg)
        cam = cfg.camera
        stride = int(round(cfg.odom_rate / cfg.cam_rate))
        for fi, f in enumerate(frames):
            k = fi * stride
            R, p = truth.R[k], truth.p[k]
            for lid, uv in zip(f.ids, f.uv):
                Xc = cam.R_co @ (R.T @ (landmarks[int(lid)] - p) - cam.t_oc)
                np.testing.assert_allclose(cam.project(Xc), uv, atol=1e-8)


class TestImu:
    def test_static_zero_noise_gyro_and_gravity(self):
        w = build_world("flat")
        cfg = SimConfig(duration=1.0, odom_noise=quiet_noise())
        cfg.imu_noise = sim.ImuNoise(0.0, 0.0, 0.0, 0.0)
        truth = generate_truth(w, cfg)
        rows = sim.synthesize_imu(truth, cfg)
        for t, gyro, accel in rows[:50]:
            np.testing.assert_allclose(gyro, np.zeros(3), atol=1e-15)
            np.testing.assert_allclose(accel, [0.0, 0.0, 9.81], atol=1e-12)

    def test_zero_noise_strapdown_round_trip(self):
        w = build_world("quadratic", {"hessian": [[0.002, 0.0], [0.0, -0.001]]})
        cfg = SimConfig(duration=10.0, odom_noise=quiet_noise(),
                        yaw_profile=YawProfile(weave_amplitude=0.05))
        cfg.imu_noise = sim.ImuNoise(0.0, 0.0, 0.0, 0.0)
        truth = generate_truth(w, cfg)
        rows = sim.synthesize_imu(truth, cfg)
        v0 = truth.R[0] @ truth.v_body[0]
        t, p, q = propagation.integrate_imu_baseline(rows, truth.p[0], v0, truth.R[0])
        assert np.linalg.norm(p[-1] - truth.p[-1]) < 1e-4

    def test_bias_random_walk_variance(self):
        w = build_world("flat")
        var_at_end = []
        n_streams, n_samples = 100, 1000
        cfg = SimConfig(duration=n_samples / 100.0, odom_noise=quiet_noise())
        cfg.imu_noise = sim.ImuNoise(gyro_density=0.0, gyro_bias_density=1e-4,
                                     accel_density=0.0, accel_bias_density=0.0)
        truth = generate_truth(w, cfg)
        finals = []
        for s in range(n_streams):
            rows = sim.synthesize_imu(truth, cfg, np.random.default_rng(1000 + s))
            finals.append(rows[-1][1])  # gyro = bias when densities are zero
        finals = np.array(finals)
        T = truth.t[-1]
        expected = (1e-4) ** 2 * T
        measured = np.mean(np.var(finals, axis=0))
        assert measured == pytest.approx(expected, rel=0.4)

import math

import numpy as np
import pytest

from planarba.geometry import (
    GravityVector,
    Intrinsics,
    InvalidDepth,
    MapPoint,
    Observation,
    PointBehindCamera,
    Pose,
    angle_between,
    huber,
    huber_weight,
    project,
    reprojection_residual,
    so3_exp,
    so3_log,
    transform_point,
    unproject,
)

K = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


def random_pose(rng, z_offset=3.0):
    w = rng.normal(0, 0.3, 3)
    t = np.array([0.0, 0.0, z_offset]) + rng.normal(0, 0.2, 3)
    return Pose(so3_exp(w), t)


class TestProject:
    def test_optical_axis(self):
        K1 = Intrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5, width=2, height=2)
        # principal point shifted by cx on a unit camera
        assert np.allclose(project(np.array([0.0, 0.0, 1.0]), K1), [0.5, 0.5])

    def test_closed_form(self):
        assert np.allclose(project(np.array([1.0, 2.0, 2.0]), K), [100.0, 150.0])

    def test_behind_camera_raises(self):
        with pytest.raises(PointBehindCamera):
            project(np.array([0.0, 0.0, -1.0]), K)
        with pytest.raises(PointBehindCamera):
            project(np.array([0.0, 0.0, 0.0]), K)

    def test_unproject_principal_point(self):
        p = unproject(np.array([50.0, 50.0]), 3.0, K)
        assert np.allclose(p, [0.0, 0.0, 3.0])

    def test_unproject_invalid_depth(self):
        with pytest.raises(InvalidDepth):
            unproject(np.array([10.0, 10.0]), 0.0, K)
        with pytest.raises(InvalidDepth):
            unproject(np.array([10.0, 10.0]), -2.0, K)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pixel = rng.uniform(0, 99, 2)
            depth = rng.uniform(0.1, 50.0)
            back = project(unproject(pixel, depth, K), K)
            assert np.abs(back - pixel).max() < 1e-9


class TestPose:
    def test_compose_associative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = a.compose(b).compose(c)
            rhs = a.compose(b.compose(c))
            assert np.abs(lhs.rotation - rhs.rotation).max() < 1e-12
            assert np.abs(lhs.translation - rhs.translation).max() < 1e-12

    def test_inverse_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert np.abs(ident.rotation - np.eye(3)).max() < 1e-12
            assert np.abs(ident.translation).max() < 1e-12

    def test_orthonormality_enforced(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_negative_determinant_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(R, np.zeros(3))

    def test_transform_matches_matrix(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        X = rng.normal(0, 1, (5, 3))
        expected = (p.matrix() @ np.hstack([X, np.ones((5, 1))]).T).T[:, :3]
        assert np.allclose(p.transform(X), expected)

    def test_transform_point_columnwise(self):
        rng = np.random.default_rng(4)
        p = random_pose(rng)
        X = rng.normal(0, 1, 3)
        assert np.allclose(transform_point(p.rotation, p.translation, X), p.transform(X))


class TestSO3:
    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            w = rng.normal(0, 1, 3)
            if np.linalg.norm(w) > math.pi - 0.1:
                continue
            assert np.abs(so3_log(so3_exp(w)) - w).max() < 1e-9

    def test_small_angle(self):
        w = np.array([1e-12, -2e-12, 3e-13])
        R = so3_exp(w)
        assert np.abs(R - np.eye(3)).max() < 1e-11


class TestReprojectionResidual:
    def test_exact_observation_zero(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        X = np.array([0.2, -0.1, 0.5])
        obs = project(pose.transform(X), K)
        r = reprojection_residual(pose, X, obs, K)
        assert np.abs(r).max() < 1e-12

    def test_shifted_observation(self):
        rng = np.random.default_rng(7)
        pose = random_pose(rng)
        X = np.array([0.1, 0.3, -0.2])
        obs = project(pose.transform(X), K) + np.array([1.0, 0.0])
        r = reprojection_residual(pose, X, obs, K)
        assert np.allclose(r, [1.0, 0.0])

    def test_behind_camera_flagged(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))
        with pytest.raises(PointBehindCamera):
            reprojection_residual(pose, np.array([0.0, 0.0, 1.0]), np.zeros(2), K)


class TestHuber:
    def test_zero(self):
        assert huber(0.0) == 0.0

    def test_quadratic_regime_identity(self):
        assert abs(huber(1e-6, 1.345) - 1e-6) < 1e-18
        assert huber(1.345 ** 2, 1.345) == pytest.approx(1.345 ** 2)

    def test_linear_regime_below_raw(self):
        delta = 1.345
        s = 4.0 * delta ** 2
        val = huber(s, delta)
        # closed form: 2 d sqrt(s) - d^2 = 3 d^2
        assert val == pytest.approx(3.0 * delta ** 2)
        assert val < s

    def test_negative_raises(self):
        with pytest.raises(ValueError):
            huber(-1e-9)

    def test_continuity_and_slope_at_threshold(self):
        delta = 0.7
        d2 = delta * delta
        eps = 1e-9
        assert abs(huber(d2 - eps, delta) - huber(d2 + eps, delta)) < 1e-7
        slope_below = (huber(d2, delta) - huber(d2 - eps, delta)) / eps
        slope_above = (huber(d2 + eps, delta) - huber(d2, delta)) / eps
        assert slope_below == pytest.approx(1.0, abs=1e-5)
        assert slope_above == pytest.approx(1.0, abs=1e-5)

    def test_monotone_and_bounded_slope(self):
        rng = np.random.default_rng(8)
        delta = 1.345
        s = np.sort(rng.uniform(0, 50, 500))
        vals = np.array([huber(x, delta) for x in s])
        assert np.all(np.diff(vals) >= 0)
        # slope never exceeds 1 (quadratic slope), weights in (0, 1]
        for x in s:
            assert 0 < huber_weight(x, delta) <= 1.0


class TestDomainTypes:
    def test_gravity_must_be_unit(self):
        with pytest.raises(ValueError):
            GravityVector(direction=np.array([0.0, 0.0, -1.1]))
        g = GravityVector(direction=np.array([0.0, 0.0, -1.0]))
        assert np.allclose(g.direction, [0, 0, -1])

    def test_observation_uncertainty_bounds(self):
        Observation(frame_id=0, point_id=1, pixel=np.array([5.0, 5.0]), uncertainty=0.98)
        with pytest.raises(ValueError):
            Observation(frame_id=0, point_id=1, pixel=np.array([5.0, 5.0]), uncertainty=1.0)
        with pytest.raises(ValueError):
            Observation(frame_id=0, point_id=1, pixel=np.array([5.0, 5.0]), uncertainty=-0.1)

    def test_map_point_normal_validation(self):
        with pytest.raises(ValueError):
            MapPoint(id=0, position=np.zeros(3), normal=np.array([0.0, 0.0, 2.0]),
                     last_observed_distance=1.0)
        with pytest.raises(ValueError):
            MapPoint(id=0, position=np.zeros(3), normal=np.array([0.0, 0.0, 1.0]),
                     last_observed_distance=0.0)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1.0, fy=1.0, cx=0.5, cy=0.5, width=2, height=2)
        with pytest.raises(ValueError):
            Intrinsics(fx=1.0, fy=1.0, cx=5.0, cy=0.5, width=2, height=2)

    def test_angle_between(self):
        assert angle_between(np.array([1, 0, 0]), np.array([0, 1, 0])) == pytest.approx(math.pi / 2)

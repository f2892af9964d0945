import math

import numpy as np
import pytest

from planarba.depth import (
    DepthFrame,
    NormalStore,
    ScaleCorrection,
    clamp_counter,
    compute_normal_map,
    depth_at,
    fuse_normal,
    information_from_uncertainty,
    normal_from_depth,
    scale_correction,
    virtual_right_features,
)
from planarba.geometry import (
    GravityVector,
    Intrinsics,
    MapPoint,
    Observation,
    Pose,
    angle_between,
    so3_exp,
    unproject,
)
from planarba.simulate import (
    NoiseModel,
    PlaneRect,
    default_room_spec,
    generate,
    look_at_pose,
    render_true_depth,
)

K = Intrinsics(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)
K_SMALL = Intrinsics(fx=130.0, fy=130.0, cx=80.0, cy=60.0, width=160, height=120)

FLOOR = PlaneRect(normal=(0, 0, 1), offset=0.0, center=(0, 0, 0),
                  u_dir=(1, 0, 0), v_dir=(0, 1, 0), half_u=50.0, half_v=50.0)


def constant_depth_frame(depth_value=2.0, intrinsics=K_SMALL, pose=None, u=0.0):
    h, w = intrinsics.height, intrinsics.width
    return DepthFrame(frame_id=0,
                      depth=np.full((h, w), depth_value),
                      uncertainty=np.full((h, w), u),
                      pose=pose or Pose.identity(),
                      intrinsics=intrinsics)


def tilted_floor_frame(intrinsics=K_SMALL, height=1.5, pitch_deg=35.0):
    """Camera above an infinite floor at z=0, pitched down."""
    pos = np.array([0.0, 0.0, height])
    target = pos + np.array([math.cos(math.radians(pitch_deg)), 0.0,
                             -math.sin(math.radians(pitch_deg))]) * 3.0
    pose = look_at_pose(pos, target, np.array([0.0, 0.0, -1.0]))
    depth = render_true_depth(pose, intrinsics, [FLOOR])
    return DepthFrame(frame_id=0, depth=depth,
                      uncertainty=np.zeros_like(depth), pose=pose,
                      intrinsics=intrinsics)


class TestNormalFromDepth:
    def test_frontoparallel_plane_faces_camera(self):
        frame = constant_depth_frame(2.5)
        n = normal_from_depth(frame, (80, 60))
        # with identity pose, "facing the camera" is -z
        assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-9)

    def test_tilted_floor_world_up(self):
        frame = tilted_floor_frame()
        for pixel in [(40, 70), (80, 60), (120, 90), (80, 100)]:
            n = normal_from_depth(frame, pixel)
            assert n is not None
            ang = math.degrees(angle_between(n, np.array([0.0, 0.0, 1.0])))
            assert ang < 1.0

    def test_invalid_neighbor_masked(self):
        frame = constant_depth_frame(2.0)
        frame.depth[60 - 4, 80] = np.nan
        assert normal_from_depth(frame, (80, 60)) is None

    def test_border_masked(self):
        frame = constant_depth_frame(2.0)
        assert normal_from_depth(frame, (1, 1), pixel_shift=4) is None

    def test_normal_map_matches_pointwise(self):
        frame = tilted_floor_frame()
        nm = compute_normal_map(frame)
        for pixel in [(30, 40), (90, 80), (140, 110)]:
            single = normal_from_depth(frame, pixel)
            from_map = nm.at(pixel)
            assert np.abs(single - from_map).max() < 1e-12

    def test_noisy_floor_under_five_degrees(self):
        # smooth 1% depth noise, as a depth-prediction error model
        rng = np.random.default_rng(0)
        base = tilted_floor_frame(intrinsics=K, height=1.5)
        angles = []
        up = np.array([0.0, 0.0, 1.0])
        for seed in range(3):
            from planarba.simulate import _smooth_field
            field = _smooth_field(np.random.default_rng(seed), K.height, K.width, 24)
            noisy = DepthFrame(frame_id=0,
                               depth=base.depth * (1.0 + 0.01 * field),
                               uncertainty=base.uncertainty, pose=base.pose,
                               intrinsics=K)
            nm = compute_normal_map(noisy, pixel_shift=4)
            ys, xs = np.nonzero(nm.valid)
            sel = rng.choice(ys.size, size=500, replace=False)
            for i in sel:
                n = nm.normals[ys[i], xs[i]]
                angles.append(math.degrees(angle_between(n, up)))
        angles = np.asarray(angles)
        frac_ok = float((angles < 5.0).mean())
        assert frac_ok >= 0.95


class TestFuseNormal:
    def test_first_observation_initializes(self):
        p = MapPoint(id=0, position=np.zeros(3))
        out = fuse_normal(p, np.array([0.0, 0.0, 1.0]), 2.5)
        assert np.allclose(out.normal, [0, 0, 1])
        assert out.last_observed_distance == 2.5

    def test_same_normal_is_fixed_point(self):
        p = MapPoint(id=0, position=np.zeros(3), normal=np.array([0.0, 1.0, 0.0]),
                     last_observed_distance=2.0)
        out = fuse_normal(p, np.array([0.0, 1.0, 0.0]), 1.0)
        assert np.allclose(out.normal, [0, 1, 0], atol=1e-15)
        assert out.last_observed_distance == 1.0

    def test_inverse_distance_weighting_closed_form(self):
        # stored (1,0,0) observed at distance 2, new (0,1,0) at distance 1:
        # each normal weighted by the other observation's distance
        p = MapPoint(id=0, position=np.zeros(3), normal=np.array([1.0, 0.0, 0.0]),
                     last_observed_distance=2.0)
        out = fuse_normal(p, np.array([0.0, 1.0, 0.0]), 1.0)
        raw = (np.array([0.0, 1.0, 0.0]) * 2.0 + np.array([1.0, 0.0, 0.0]) * 1.0) / 3.0
        assert np.allclose(raw, [1.0 / 3.0, 2.0 / 3.0, 0.0])
        assert np.allclose(out.normal, raw / np.linalg.norm(raw))
        assert np.linalg.norm(out.normal) == pytest.approx(1.0, abs=1e-12)

    def test_sign_alignment(self):
        p = MapPoint(id=0, position=np.zeros(3), normal=np.array([0.0, 0.0, 1.0]),
                     last_observed_distance=1.0)
        out = fuse_normal(p, np.array([0.0, 0.0, -1.0]), 1.0)
        # flipped before averaging, so nothing cancels
        assert np.allclose(out.normal, [0, 0, 1])

    def test_always_unit_norm(self):
        rng = np.random.default_rng(1)
        p = MapPoint(id=0, position=np.zeros(3))
        for _ in range(100):
            n = rng.normal(0, 1, 3)
            n /= np.linalg.norm(n)
            p = fuse_normal(p, n, float(rng.uniform(0.5, 5.0)))
            assert np.linalg.norm(p.normal) == pytest.approx(1.0, abs=1e-9)

    def test_repeated_fusion_converges_monotonically(self):
        target = np.array([0.0, 0.0, 1.0])
        start = np.array([1.0, 0.0, 0.0])
        p = MapPoint(id=0, position=np.zeros(3), normal=start, last_observed_distance=2.0)
        prev = angle_between(p.normal, target)
        for _ in range(25):
            p = fuse_normal(p, target, 2.0)
            ang = angle_between(p.normal, target)
            assert ang <= prev + 1e-12
            prev = ang
        assert prev < math.radians(0.01)

    def test_bad_inputs(self):
        p = MapPoint(id=0, position=np.zeros(3))
        with pytest.raises(ValueError):
            fuse_normal(p, np.array([0.0, 0.0, 2.0]), 1.0)
        with pytest.raises(ValueError):
            fuse_normal(p, np.array([0.0, 0.0, 1.0]), -1.0)


class TestNormalStore:
    def test_update_and_snapshot(self):
        store = NormalStore()
        store.update(7, np.array([1.0, 0.0, 0.0]), 2.0)
        store.update(7, np.array([0.0, 1.0, 0.0]), 1.0)
        snap = store.snapshot()
        expected = np.array([1.0, 2.0, 0.0]) / math.sqrt(5.0)
        assert np.allclose(snap[7][0], expected)
        assert snap[7][1] == 1.0
        # snapshot is a copy
        snap[7][0][0] = 99.0
        assert store.get(7)[0] != 99.0


class TestScaleCorrection:
    def test_identity_when_equal(self):
        frame = constant_depth_frame(2.0)
        pts = [unproject((x, y), 2.0, K_SMALL) for x, y in [(20, 30), (80, 60), (140, 100),
                                                            (50, 50), (100, 20), (60, 90),
                                                            (10, 10), (120, 40), (30, 70),
                                                            (90, 110), (70, 30), (110, 80)]]
        out = scale_correction(frame, pts)
        assert out.valid
        assert out.factor == pytest.approx(1.0, abs=1e-12)

    def test_half_depth_gives_factor_two(self):
        frame = constant_depth_frame(1.0)
        pts = [unproject((x, y), 2.0, K_SMALL) for x, y in [(20, 30), (80, 60), (140, 100),
                                                            (50, 50), (100, 20), (60, 90),
                                                            (10, 10), (120, 40), (30, 70),
                                                            (90, 110), (70, 30), (110, 80)]]
        out = scale_correction(frame, pts)
        assert out.valid
        assert out.factor == pytest.approx(2.0, abs=1e-12)

    def test_too_few_samples_flagged(self):
        frame = constant_depth_frame(2.0)
        pts = [unproject((80, 60), 2.0, K_SMALL)]
        out = scale_correction(frame, pts)
        assert not out.valid
        assert out.factor == 1.0

    def test_scale_equivariance(self):
        rng = np.random.default_rng(2)
        pts = [unproject((x, y), 2.0, K_SMALL)
               for x, y in rng.uniform(10, 110, (30, 2))]
        for c in (0.5, 2.0, 3.7):
            frame = constant_depth_frame(2.0 * c)
            out = scale_correction(frame, pts)
            assert out.factor == pytest.approx(1.0 / c, rel=1e-12)

    def test_monte_carlo_biased_noisy(self):
        # depth biased to half scale with 2% noise; 200 points recover 2.0
        rng = np.random.default_rng(3)
        spec = default_room_spec(
            seed=5, n_frames=3, points_per_plane=70, clutter_points=0,
            noise=NoiseModel(depth_sigma=0.02, depth_scale_bias=0.5,
                             uncertainty_mode="none"))
        ds = generate(spec)
        gt = ds.ground_truth
        frame = ds.frames[1].depth_frame
        pts = list(gt.points.values())
        assert len(pts) >= 200
        out = scale_correction(frame, pts)
        assert out.valid and out.sample_count >= 100
        assert out.factor == pytest.approx(2.0, rel=0.02)

    def test_median_mode(self):
        frame = constant_depth_frame(2.0)
        pts = [unproject((x, y), 2.0, K_SMALL)
               for x, y in np.random.default_rng(0).uniform(10, 110, (20, 2))]
        out = scale_correction(frame, pts, method="median")
        assert out.factor == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(ValueError):
            scale_correction(frame, pts, method="mode")


class TestInformationFromUncertainty:
    def test_zero_uncertainty_identity(self):
        assert np.allclose(information_from_uncertainty(0.0), np.eye(2))

    def test_half(self):
        assert np.allclose(information_from_uncertainty(0.5), 0.5 * np.eye(2))

    def test_clamped_with_counter(self):
        clamp_counter.reset()
        out = information_from_uncertainty(1.2)
        assert np.allclose(out, 0.01 * np.eye(2))
        assert clamp_counter.count == 1
        information_from_uncertainty(-0.5)
        assert clamp_counter.count == 2

    def test_monotone_decreasing_and_spd(self):
        prev = np.inf
        for u in np.linspace(0.0, 0.99, 50):
            M = information_from_uncertainty(float(u))
            assert np.allclose(M, M.T)
            evals = np.linalg.eigvalsh(M)
            assert evals.min() > 0
            assert evals.max() <= prev + 1e-15
            prev = evals.max()


class TestVirtualRight:
    def test_disparity_closed_form(self):
        K1 = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
        frame = DepthFrame(frame_id=0, depth=np.full((100, 100), 2.0),
                           uncertainty=np.zeros((100, 100)),
                           pose=Pose.identity(), intrinsics=K1)
        obs = [Observation(frame_id=0, point_id=0, pixel=np.array([50.0, 50.0]),
                           uncertainty=0.3)]
        out = virtual_right_features(frame, obs, baseline=0.1)
        assert len(out) == 1
        assert out[0].pixel[0] == pytest.approx(50.0 - 5.0)
        assert out[0].pixel[1] == pytest.approx(50.0)
        assert out[0].uncertainty == 0.3

    def test_far_depth_zero_disparity(self):
        frame = constant_depth_frame(1e9)
        obs = [Observation(frame_id=0, point_id=0, pixel=np.array([80.0, 60.0]))]
        out = virtual_right_features(frame, obs, baseline=0.1)
        assert abs(out[0].pixel[0] - 80.0) < 1e-6

    def test_invalid_depth_skipped(self):
        frame = constant_depth_frame(2.0)
        frame.depth[60, 80] = np.nan
        obs = [Observation(frame_id=0, point_id=0, pixel=np.array([80.0, 60.0])),
               Observation(frame_id=0, point_id=1, pixel=np.array([20.0, 20.0]))]
        out = virtual_right_features(frame, obs, baseline=0.1)
        assert [o.point_id for o in out] == [1]

    def test_matches_real_right_camera(self):
        # noiseless simulated rig: virtual right features coincide with the
        # projections of a second camera displaced by the baseline
        spec = default_room_spec(seed=0, n_frames=5, noise=NoiseModel())
        ds = generate(spec)
        gt = ds.ground_truth
        b = 0.12
        for i in (0, 2, 4):
            rec = ds.frames[i]
            K1 = rec.depth_frame.intrinsics
            pose = gt.poses[i]
            right_center = pose.transform(np.array([b, 0.0, 0.0]))
            right_pose_cw = Pose(pose.rotation, right_center).inverse()
            for ro in virtual_right_features(rec.depth_frame, rec.observations, b):
                p = right_pose_cw.transform(gt.points[ro.point_id])
                proj = np.array([K1.fx * p[0] / p[2] + K1.cx,
                                 K1.fy * p[1] / p[2] + K1.cy])
                assert np.abs(ro.pixel - proj).max() < 1e-6

    def test_bad_baseline(self):
        frame = constant_depth_frame(2.0)
        with pytest.raises(ValueError):
            virtual_right_features(frame, [], baseline=0.0)


class TestDepthAt:
    def test_exact_on_plane(self):
        frame = tilted_floor_frame()
        # interpolated depth at fractional pixels matches the analytic plane
        pose_wc = frame.pose.inverse()
        for px, py in [(40.3, 70.7), (80.5, 60.25), (100.9, 90.1)]:
            d = depth_at(frame, (px, py))
            ray = unproject((px, py), 1.0, frame.intrinsics)
            # analytic depth: floor z=0 in world
            n_c = frame.pose.rotation.T @ np.array([0.0, 0.0, 1.0])
            c = -(np.array([0.0, 0.0, 1.0]) @ frame.pose.translation + 0.0)
            z = c / (n_c @ ray)
            assert d == pytest.approx(z, rel=1e-12)

    def test_edge_rejected(self):
        frame = constant_depth_frame(2.0)
        frame.depth[60, 80] = 1.0  # sharp step
        assert math.isnan(depth_at(frame, (79.5, 59.5)))

    def test_out_of_bounds_nan(self):
        frame = constant_depth_frame(2.0)
        assert math.isnan(depth_at(frame, (-1.0, 5.0)))
        assert math.isnan(depth_at(frame, (1000.0, 5.0)))


class TestDepthFrameValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            DepthFrame(frame_id=0, depth=np.ones((5, 5)), uncertainty=np.zeros((5, 5)),
                       pose=Pose.identity(), intrinsics=K_SMALL)

    def test_negative_depth_rejected(self):
        h, w = K_SMALL.height, K_SMALL.width
        depth = np.full((h, w), 2.0)
        depth[0, 0] = -1.0
        with pytest.raises(ValueError):
            DepthFrame(frame_id=0, depth=depth, uncertainty=np.zeros((h, w)),
                       pose=Pose.identity(), intrinsics=K_SMALL)

    def test_nan_is_valid_invalid_marker(self):
        h, w = K_SMALL.height, K_SMALL.width
        depth = np.full((h, w), 2.0)
        depth[3, 4] = np.nan
        frame = DepthFrame(frame_id=0, depth=depth, uncertainty=np.zeros((h, w)),
                           pose=Pose.identity(), intrinsics=K_SMALL)
        assert not frame.valid_mask()[3, 4]
        assert frame.valid_mask()[0, 0]

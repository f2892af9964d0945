"""Synthetic planar scenes with exact ground truth.

Generates rooms made of plane rectangles plus clutter points, smooth
camera trajectories, pinhole observations with configurable noise,
analytically rendered depth maps with a predicted-depth-style noise model
(smooth multiplicative error field with an optional global scale bias),
and uncertainty maps that are either calibrated against the injected noise
or deliberately uninformative as a negative control.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr

from .dataset_io import Dataset, FrameRecord, GroundTruth
from .depth import DepthFrame
from .geometry import GravityVector, Intrinsics, Observation, Pose, so3_exp
from .planes import Plane, classify_orientation

logger = logging.getLogger(__name__)


@dataclass
class PlaneRect:
    """A rectangular patch of an infinite plane.

    ``normal . X + offset == 0`` on the plane; the rectangle is spanned by
    two orthonormal in-plane directions with the given half extents.
    """

    normal: np.ndarray
    offset: float
    center: np.ndarray
    u_dir: np.ndarray
    v_dir: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.center = np.asarray(self.center, dtype=float)
        self.u_dir = np.asarray(self.u_dir, dtype=float)
        self.v_dir = np.asarray(self.v_dir, dtype=float)
        if abs(float(self.normal @ self.center + self.offset)) > 1e-9:
            raise ValueError("rectangle center does not lie on its plane")

    def sample(self, rng: np.random.Generator, n: int, margin: float) -> np.ndarray:
        a = rng.uniform(-1 + margin, 1 - margin, size=n) * self.half_u
        b = rng.uniform(-1 + margin, 1 - margin, size=n) * self.half_v
        return self.center + a[:, None] * self.u_dir + b[:, None] * self.v_dir

    def coeffs(self) -> np.ndarray:
        return np.concatenate([self.normal, [self.offset]])


@dataclass
class NoiseModel:
    """Sensor and prediction noise injected by the generator."""

    pixel_sigma: float = 0.0           # feature localization noise, pixels (base)
    depth_sigma: float = 0.0           # relative depth noise at the best pixels
    depth_scale_bias: float = 1.0      # global multiplicative depth bias
    uncertainty_mode: str = "correlated"   # 'correlated' | 'uncorrelated' | 'none'
    sigma_contrast: float = 3.0        # worst/best noise ratio across the image
    field_cell_px: int = 24            # spatial scale of the noise fields
    uncertainty_floor: float = 0.05    # u value at the best pixels
    pixel_noise_correlated: bool = True  # scale pixel noise by the same field
    pose_sigma_trans: float = 0.0      # tracking-prior translation noise, meters
    pose_sigma_rot_deg: float = 0.0    # tracking-prior rotation noise, deg per axis
    gravity_error_deg: float = 0.0

    def __post_init__(self):
        if self.uncertainty_mode not in ("correlated", "uncorrelated", "none"):
            raise ValueError(f"unknown uncertainty mode {self.uncertainty_mode!r}")


@dataclass
class SceneSpec:
    """Full description of a synthetic scene."""

    planes: List[PlaneRect]
    intrinsics: Intrinsics
    waypoints: np.ndarray              # (K, 3) camera centers
    look_at: np.ndarray                # (K, 3) view targets
    n_frames: int = 60
    fps: float = 30.0
    points_per_plane: int = 70
    clutter_points: int = 90
    clutter_box: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = \
        ((-1.5, -1.5, 0.2), (1.0, 1.0, 2.0))
    clutter_clearance: float = 0.15    # keep clutter this far from every plane
    point_margin: float = 0.08         # inset of plane samples from rectangle edges
    disc_radius_px: int = 2            # clutter splat radius in the depth render
    noise: NoiseModel = field(default_factory=NoiseModel)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    seed: int = 0
    keep_true_depth: bool = True

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        self.look_at = np.atleast_2d(np.asarray(self.look_at, dtype=float))
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.gravity = self.gravity / np.linalg.norm(self.gravity)


def default_room_spec(seed: int = 0, noise: Optional[NoiseModel] = None,
                      n_frames: int = 60, **overrides) -> SceneSpec:
    """A 4 x 4 x 3 m room: floor plus two orthogonal walls.

    The camera sweeps an arc near the opposite corner, looking toward the
    walls so that all three planes stay in view.
    """
    floor = PlaneRect(normal=(0, 0, 1), offset=0.0, center=(0, 0, 0),
                      u_dir=(1, 0, 0), v_dir=(0, 1, 0), half_u=2.0, half_v=2.0)
    wall_x = PlaneRect(normal=(1, 0, 0), offset=2.0, center=(-2, 0, 1.5),
                       u_dir=(0, 1, 0), v_dir=(0, 0, 1), half_u=2.0, half_v=1.5)
    wall_y = PlaneRect(normal=(0, 1, 0), offset=2.0, center=(0, -2, 1.5),
                       u_dir=(1, 0, 0), v_dir=(0, 0, 1), half_u=2.0, half_v=1.5)
    intrinsics = Intrinsics(fx=130.0, fy=130.0, cx=80.0, cy=60.0, width=160, height=120)
    waypoints = np.array([[1.5, 0.0, 1.4],
                          [1.2, 1.2, 1.5],
                          [0.0, 1.5, 1.4]])
    look_at = np.array([[-1.2, -1.0, 0.5],
                        [-1.0, -1.0, 0.6],
                        [-1.0, -1.2, 0.5]])
    spec = SceneSpec(planes=[floor, wall_x, wall_y], intrinsics=intrinsics,
                     waypoints=waypoints, look_at=look_at, n_frames=n_frames,
                     noise=noise or NoiseModel(), seed=seed)
    for key, val in overrides.items():
        setattr(spec, key, val)
    return spec


# ---------------------------------------------------------------------------
# trajectory and rendering
# ---------------------------------------------------------------------------

def _interp_path(points: np.ndarray, n: int) -> np.ndarray:
    if points.shape[0] == 1:
        return np.repeat(points, n, axis=0)
    s = np.linspace(0.0, 1.0, points.shape[0])
    t = np.linspace(0.0, 1.0, n)
    if points.shape[0] < 3:
        return np.stack([np.interp(t, s, points[:, d]) for d in range(3)], axis=1)
    spline = CubicSpline(s, points, axis=0, bc_type="natural")
    return spline(t)


def look_at_pose(position: np.ndarray, target: np.ndarray, gravity: np.ndarray) -> Pose:
    """Camera->world pose looking at a target, image-down along gravity."""
    f = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ValueError("look-at target coincides with the camera position")
    f = f / norm
    down = gravity - float(gravity @ f) * f
    n = np.linalg.norm(down)
    if n < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
        if abs(float(ref @ f)) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        down = ref - float(ref @ f) * f
        n = np.linalg.norm(down)
    y_cam = down / n
    x_cam = np.cross(y_cam, f)
    R = np.column_stack([x_cam, y_cam, f])
    return Pose(R, np.asarray(position, dtype=float))


def render_true_depth(pose_cw: Pose, intrinsics: Intrinsics, planes: Sequence[PlaneRect],
                      clutter: Optional[np.ndarray] = None, disc_radius_px: int = 2
                      ) -> np.ndarray:
    """Analytic z-depth of the nearest surface through each pixel center.

    Clutter points are splatted as small constant-depth discs so that every
    observable feature lies on the rendered surface. Pixels that hit
    nothing are NaN.
    """
    K = intrinsics
    h, w = K.height, K.width
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    rx = (gx - K.cx) / K.fx
    ry = (gy - K.cy) / K.fy
    R = pose_cw.rotation
    t = pose_cw.translation
    depth = np.full((h, w), np.inf)
    for rect in planes:
        n_c = R.T @ rect.normal
        c = -(float(rect.normal @ t) + rect.offset)
        denom = n_c[0] * rx + n_c[1] * ry + n_c[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = c / denom
        valid = np.isfinite(z) & (z > 1e-6)
        hit_x = z * rx
        hit_y = z * ry
        wx = R[0, 0] * hit_x + R[0, 1] * hit_y + R[0, 2] * z + t[0]
        wy = R[1, 0] * hit_x + R[1, 1] * hit_y + R[1, 2] * z + t[1]
        wz = R[2, 0] * hit_x + R[2, 1] * hit_y + R[2, 2] * z + t[2]
        lu = ((wx - rect.center[0]) * rect.u_dir[0] + (wy - rect.center[1]) * rect.u_dir[1]
              + (wz - rect.center[2]) * rect.u_dir[2])
        lv = ((wx - rect.center[0]) * rect.v_dir[0] + (wy - rect.center[1]) * rect.v_dir[1]
              + (wz - rect.center[2]) * rect.v_dir[2])
        inside = valid & (np.abs(lu) <= rect.half_u) & (np.abs(lv) <= rect.half_v)
        depth = np.where(inside & (z < depth), z, depth)
    if clutter is not None and len(clutter):
        pose_wc = pose_cw.inverse()
        P = pose_wc.transform(clutter)
        r = disc_radius_px
        for p in P:
            z = p[2]
            if z <= 1e-6:
                continue
            px = K.fx * p[0] / z + K.cx
            py = K.fy * p[1] / z + K.cy
            cx0 = int(round(px))
            cy0 = int(round(py))
            if cx0 < -r or cy0 < -r or cx0 >= w + r or cy0 >= h + r:
                continue
            x0, x1 = max(0, cx0 - r), min(w, cx0 + r + 1)
            y0, y1 = max(0, cy0 - r), min(h, cy0 + r + 1)
            patch = depth[y0:y1, x0:x1]
            depth[y0:y1, x0:x1] = np.where(z < patch, z, patch)
    return np.where(np.isfinite(depth), depth, np.nan)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinearly upsampled iid Gaussian grid; smooth at the cell scale."""
    gh = max(2, int(math.ceil(h / cell)) + 1)
    gw = max(2, int(math.ceil(w / cell)) + 1)
    coarse = rng.standard_normal((gh, gw))
    ys = np.minimum(np.arange(h) / cell, gh - 1 - 1e-9)
    xs = np.minimum(np.arange(w) / cell, gw - 1 - 1e-9)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _noise_maps(rng: np.random.Generator, noise: NoiseModel, h: int, w: int
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (noise multiplier field, relative sigma, uncertainty map)."""
    if noise.uncertainty_mode == "none":
        m = np.ones((h, w))
        u = np.full((h, w), 0.2)
    else:
        m = 1.0 + (noise.sigma_contrast - 1.0) * ndtr(
            _smooth_field(rng, h, w, noise.field_cell_px))
        if noise.uncertainty_mode == "correlated":
            u_src = m
        else:
            u_src = 1.0 + (noise.sigma_contrast - 1.0) * ndtr(
                _smooth_field(rng, h, w, noise.field_cell_px))
        u = 1.0 - (1.0 / u_src) ** 2 * (1.0 - noise.uncertainty_floor)
    sigma = noise.depth_sigma * m
    return m, sigma, np.clip(u, 0.0, 0.98)


# observation visibility uses the same edge-rejecting lookup as the back-end,
# so every emitted observation has readable depth at its pixel
from .depth import interpolate_depth as _bilerp_inverse_depth_impl


def _bilerp_inverse_depth(depth: np.ndarray, px: float, py: float) -> float:
    return _bilerp_inverse_depth_impl(depth, px, py)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate(spec: SceneSpec) -> Dataset:
    """Render a full dataset plus ground truth from a scene description."""
    rng_points = np.random.default_rng([spec.seed, 1])
    rng_noise = np.random.default_rng([spec.seed, 2])
    rng_pose = np.random.default_rng([spec.seed, 3])
    K = spec.intrinsics
    h, w = K.height, K.width
    gravity_true = spec.gravity

    # world points: plane rectangles then clutter
    points: Dict[int, np.ndarray] = {}
    plane_point_ids: List[set] = []
    next_id = 0
    for rect in spec.planes:
        samples = rect.sample(rng_points, spec.points_per_plane, spec.point_margin)
        ids = set()
        for p in samples:
            points[next_id] = p
            ids.add(next_id)
            next_id += 1
        plane_point_ids.append(ids)
    lo = np.asarray(spec.clutter_box[0], dtype=float)
    hi = np.asarray(spec.clutter_box[1], dtype=float)
    clutter_ids = set()
    attempts = 0
    while len(clutter_ids) < spec.clutter_points and attempts < spec.clutter_points * 100:
        attempts += 1
        p = rng_points.uniform(lo, hi)
        if any(abs(float(r.normal @ p + r.offset)) < spec.clutter_clearance
               for r in spec.planes):
            continue
        points[next_id] = p
        clutter_ids.add(next_id)
        next_id += 1
    clutter_xyz = np.asarray([points[i] for i in sorted(clutter_ids)]) \
        if clutter_ids else np.zeros((0, 3))

    positions = _interp_path(spec.waypoints, spec.n_frames)
    targets = _interp_path(spec.look_at, spec.n_frames)
    true_poses = [look_at_pose(positions[i], targets[i], gravity_true)
                  for i in range(spec.n_frames)]

    point_ids = sorted(points.keys())
    P_world = np.asarray([points[i] for i in point_ids])

    frames: List[FrameRecord] = []
    true_depths: List[np.ndarray] = []
    plane_obs_counts = np.zeros(len(spec.planes), dtype=int)
    sbias = spec.noise.depth_scale_bias

    for i in range(spec.n_frames):
        pose = true_poses[i]
        depth_true = render_true_depth(pose, K, spec.planes, clutter_xyz,
                                       spec.disc_radius_px)
        if spec.keep_true_depth:
            true_depths.append(depth_true)

        rng_frame = np.random.default_rng([spec.seed, 4, i])
        m_field, sigma_map, u_map = _noise_maps(rng_frame, spec.noise, h, w)
        if spec.noise.depth_sigma > 0:
            eps = _smooth_field(rng_frame, h, w, spec.noise.field_cell_px)
            depth_noisy = depth_true * sbias * (1.0 + sigma_map * eps)
            depth_noisy = np.where(np.isfinite(depth_noisy),
                                   np.clip(depth_noisy, 1e-3, None), np.nan)
        else:
            depth_noisy = depth_true * sbias

        # observations of visible points
        pose_wc = pose.inverse()
        P_cam = pose_wc.transform(P_world)
        obs: List[Observation] = []
        for idx, pid in enumerate(point_ids):
            z = P_cam[idx, 2]
            if z <= 1e-6:
                continue
            px = K.fx * P_cam[idx, 0] / z + K.cx
            py = K.fy * P_cam[idx, 1] / z + K.cy
            if not (0 <= px <= w - 1 and 0 <= py <= h - 1):
                continue
            surf = _bilerp_inverse_depth(depth_true, px, py)
            if not np.isfinite(surf) or abs(surf - z) > 1e-6 * z:
                continue  # occluded, or off the rendered surface (depth edge)
            if spec.noise.pixel_sigma > 0:
                sig = spec.noise.pixel_sigma
                if spec.noise.pixel_noise_correlated and spec.noise.uncertainty_mode != "none":
                    sig = sig * m_field[min(int(round(py)), h - 1), min(int(round(px)), w - 1)]
                px_n = px + rng_frame.normal(0.0, sig)
                py_n = py + rng_frame.normal(0.0, sig)
            else:
                px_n, py_n = px, py
            if not (0 <= px_n <= w - 1 and 0 <= py_n <= h - 1):
                continue
            u_val = float(u_map[min(int(round(py_n)), h - 1), min(int(round(px_n)), w - 1)])
            obs.append(Observation(frame_id=i, point_id=pid,
                                   pixel=np.array([px_n, py_n]), uncertainty=u_val))
            for k, ids in enumerate(plane_point_ids):
                if pid in ids:
                    plane_obs_counts[k] += 1
                    break

        # tracking-prior pose: truth with optional perturbation
        if spec.noise.pose_sigma_trans > 0 or spec.noise.pose_sigma_rot_deg > 0:
            wvec = rng_pose.normal(0.0, math.radians(spec.noise.pose_sigma_rot_deg), 3)
            tvec = rng_pose.normal(0.0, spec.noise.pose_sigma_trans, 3)
            prior = Pose(so3_exp(wvec) @ pose.rotation, pose.translation + tvec)
        else:
            prior = pose.copy()

        frame = DepthFrame(frame_id=i, depth=depth_noisy, uncertainty=u_map,
                           pose=prior, intrinsics=K)
        frames.append(FrameRecord(timestamp=i / spec.fps, depth_frame=frame,
                                  observations=obs))

    if np.any(plane_obs_counts == 0):
        bad = [k for k in range(len(spec.planes)) if plane_obs_counts[k] == 0]
        raise ValueError(f"scene planes {bad} are never observed; adjust the trajectory")

    gravity_out = gravity_true
    if spec.noise.gravity_error_deg > 0:
        axis = np.cross(gravity_true, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(gravity_true, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        ang = math.radians(spec.noise.gravity_error_deg)
        phi = rng_pose.uniform(0, 2 * math.pi)
        axis = math.cos(phi) * axis + math.sin(phi) * np.cross(gravity_true, axis)
        gravity_out = so3_exp(ang * axis) @ gravity_true
        gravity_out /= np.linalg.norm(gravity_out)

    g = GravityVector(direction=gravity_true)
    true_planes = []
    for k, rect in enumerate(spec.planes):
        true_planes.append(Plane(coeffs=rect.coeffs(),
                                 orientation_class=classify_orientation(rect.normal, g),
                                 inlier_ids=plane_point_ids[k],
                                 inlier_weight=float(len(plane_point_ids[k])),
                                 inlier_count=len(plane_point_ids[k])))
    gt = GroundTruth(timestamps=[f.timestamp for f in frames],
                     poses=true_poses, points=points, planes=true_planes,
                     depth_maps=true_depths if spec.keep_true_depth else None)
    return Dataset(frames=frames, gravity=GravityVector(direction=gravity_out),
                   ground_truth=gt)


# ---------------------------------------------------------------------------
# trajectory evaluation
# ---------------------------------------------------------------------------

def ate_rmse(estimated: List[Tuple[float, Pose]], truth: List[Tuple[float, Pose]],
             time_tol: float = 1e-6) -> float:
    """RMSE of camera positions after closed-form rigid alignment.

    Aligns the estimate to the truth with the best-fit rotation and
    translation (no scale), then returns the RMSE of the remaining
    translational residuals. Requires at least 3 matching timestamps.
    """
    truth_by_time = {round(t / time_tol): p for t, p in truth}
    E, G = [], []
    for t, pose in estimated:
        key = round(t / time_tol)
        if key in truth_by_time:
            E.append(pose.translation)
            G.append(truth_by_time[key].translation)
    if len(E) < 3:
        raise ValueError(f"need at least 3 matched poses, got {len(E)}")
    E = np.asarray(E)
    G = np.asarray(G)
    mu_e = E.mean(axis=0)
    mu_g = G.mean(axis=0)
    H = (E - mu_e).T @ (G - mu_g)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    resid = (E - mu_e) @ R.T + mu_g - G
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))

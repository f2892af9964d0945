"""Gravity-aware multi-plane detection.

Horizontal planes need a single sample point once the gravity direction is
known, vertical planes need two, and further walls orthogonal or parallel
to an already-detected wall need one again. Sample sets mix map points
(weight 1.0) and depth-derived points (weight 0.5, drawn preferentially
from low-uncertainty pixels). Point normals, where available, veto
contradictory inliers; points without normals always pass the filter.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .depth import DepthFrame, NormalMap, ScaleCorrection
from .geometry import GravityVector, unproject

logger = logging.getLogger(__name__)

HORIZONTAL = "horizontal"
VERTICAL = "vertical"
GENERAL = "general"

MAP_POINT_WEIGHT = 1.0
DEPTH_POINT_WEIGHT = 0.5


@dataclass
class Plane:
    """A detected plane: unit normal plus signed offset.

    ``coeffs`` is (nx, ny, nz, d) with n unit, so coeffs . (x, y, z, 1) is
    the signed distance of a point to the plane in meters.
    """

    coeffs: np.ndarray
    orientation_class: str
    inlier_ids: set = field(default_factory=set)
    inlier_weight: float = 0.0
    inlier_count: int = 0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(4)
        n = float(np.linalg.norm(self.coeffs[:3]))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be unit norm, got {n}")

    @property
    def normal(self) -> np.ndarray:
        return self.coeffs[:3]

    @property
    def offset(self) -> float:
        return float(self.coeffs[3])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.coeffs[:3] + self.coeffs[3]

    def to_dict(self) -> dict:
        return {
            "coeffs": [float(c) for c in self.coeffs],
            "orientation_class": self.orientation_class,
            "inlier_ids": sorted(int(i) for i in self.inlier_ids),
            "inlier_weight": float(self.inlier_weight),
            "inlier_count": int(self.inlier_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(coeffs=np.asarray(d["coeffs"], dtype=float),
                   orientation_class=d["orientation_class"],
                   inlier_ids=set(d.get("inlier_ids", [])),
                   inlier_weight=float(d.get("inlier_weight", 0.0)),
                   inlier_count=int(d.get("inlier_count", 0)))


@dataclass
class SamplePoint:
    """One candidate point for plane fitting."""

    position: np.ndarray
    weight: float = MAP_POINT_WEIGHT
    normal: Optional[np.ndarray] = None
    source_id: object = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if self.weight not in (MAP_POINT_WEIGHT, DEPTH_POINT_WEIGHT):
            raise ValueError(f"sample weight must be 0.5 or 1.0, got {self.weight}")
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=float).reshape(3)


@dataclass
class RansacConfig:
    """Knobs for the gravity-aware RANSAC detectors."""

    success_prob: float = 0.99     # desired probability of hitting an all-inlier sample
    inlier_ratio: float = 0.1      # assumed worst-case inlier fraction
    distance_threshold: float = 0.05   # inlier point-to-plane distance, meters
    angle_tol_deg: float = 5.0     # orientation classification tolerance
    normal_tol_deg: float = 30.0   # point-normal vs plane-normal agreement
    min_weighted_inliers: Optional[float] = None  # None -> max(20, 0.05 * set size)
    max_planes: int = 8
    seed: int = 0
    degenerate_eps: float = 1e-3   # minimum horizontal separation for 2-point samples
    max_draws: int = 10000         # hard cap on sample draws per detector call

    def __post_init__(self):
        if not (0.0 < self.success_prob < 1.0):
            raise ValueError("success_prob must lie in (0, 1)")
        if not (0.0 < self.inlier_ratio < 1.0):
            raise ValueError("inlier_ratio must lie in (0, 1)")
        if self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be positive")

    def min_inliers_for(self, set_size: int) -> float:
        if self.min_weighted_inliers is not None:
            return float(self.min_weighted_inliers)
        return max(20.0, 0.05 * set_size)


@dataclass
class DetectionRecord:
    """Bookkeeping for one detector invocation."""

    stage: str
    trials: int
    draws: int
    seconds: float
    accepted: bool
    plane: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "trials": self.trials, "draws": self.draws,
                "seconds": self.seconds, "accepted": self.accepted, "plane": self.plane}


def ransac_iterations(success_prob: float, inlier_ratio: float, sample_size: int) -> int:
    """Number of RANSAC trials for the requested success probability.

    k = ceil(log(1 - p) / log(1 - w^n)) for sample size n and inlier
    ratio w. Smaller sample sizes need dramatically fewer trials, which is
    what the gravity prior buys.
    """
    if not (0.0 < success_prob < 1.0):
        raise ValueError(f"success probability must lie in (0, 1), got {success_prob}")
    if not (0.0 < inlier_ratio < 1.0):
        raise ValueError(f"inlier ratio must lie in (0, 1), got {inlier_ratio}")
    if sample_size not in (1, 2, 3):
        raise ValueError(f"sample size must be 1, 2 or 3, got {sample_size}")
    k = math.log(1.0 - success_prob) / math.log(1.0 - inlier_ratio ** sample_size)
    return max(1, int(math.ceil(k)))


class _PointArrays:
    """Columnar view of a sample-point sequence for vectorized trials."""

    def __init__(self, points: Sequence[SamplePoint]):
        self.points = list(points)
        n = len(self.points)
        self.positions = np.zeros((n, 3))
        self.weights = np.zeros(n)
        self.normals = np.zeros((n, 3))
        self.has_normal = np.zeros(n, dtype=bool)
        for i, p in enumerate(self.points):
            self.positions[i] = p.position
            self.weights[i] = p.weight
            if p.normal is not None:
                self.normals[i] = p.normal
                self.has_normal[i] = True

    def __len__(self) -> int:
        return len(self.points)

    def inlier_mask(self, normal: np.ndarray, offset: float, theta: float,
                    cos_normal_tol: float) -> np.ndarray:
        dist = np.abs(self.positions @ normal + offset)
        ok = dist < theta
        if self.has_normal.any():
            agree = np.abs(self.normals @ normal) >= cos_normal_tol
            ok &= agree | ~self.has_normal
        return ok

    def collect(self, mask: np.ndarray) -> Tuple[set, float, int]:
        ids = {self.points[i].source_id for i in np.flatnonzero(mask)
               if isinstance(self.points[i].source_id, (int, np.integer))}
        return ids, float(self.weights[mask].sum()), int(mask.sum())


def _finish_plane(arr: _PointArrays, normal: np.ndarray, offset: float, cls: str,
                  cfg: RansacConfig, min_inliers: float
                  ) -> Optional[Tuple[Plane, np.ndarray]]:
    cos_tol = math.cos(math.radians(cfg.normal_tol_deg))
    mask = arr.inlier_mask(normal, offset, cfg.distance_threshold, cos_tol)
    if float(arr.weights[mask].sum()) < min_inliers:
        return None
    ids, weight, count = arr.collect(mask)
    plane = Plane(coeffs=np.concatenate([normal, [offset]]), orientation_class=cls,
                  inlier_ids=ids, inlier_weight=weight, inlier_count=count)
    return plane, mask


def _horizontal_basis(gravity: GravityVector) -> Tuple[np.ndarray, np.ndarray]:
    """Two orthonormal directions spanning the horizontal plane."""
    g = gravity.direction
    ref = np.array([1.0, 0.0, 0.0])
    if abs(float(np.dot(ref, g))) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = ref - float(np.dot(ref, g)) * g
    u /= np.linalg.norm(u)
    v = np.cross(g, u)
    v /= np.linalg.norm(v)
    return u, v


def detect_horizontal(points: Sequence[SamplePoint], gravity: GravityVector,
                      cfg: RansacConfig, rng: Optional[np.random.Generator] = None,
                      log: Optional[list] = None) -> Optional[Plane]:
    plane, _, _ = _detect_horizontal_impl(_PointArrays(points), gravity, cfg,
                                          rng or np.random.default_rng(cfg.seed), log)
    return plane


def _detect_horizontal_impl(arr: _PointArrays, gravity: GravityVector, cfg: RansacConfig,
                            rng: np.random.Generator, log: Optional[list],
                            normal_override: Optional[np.ndarray] = None,
                            stage: str = "horizontal") -> Tuple[Optional[Plane], Optional[np.ndarray], int]:
    """One-point RANSAC for a plane of fixed orientation.

    With the orientation fixed (anti-gravity for horizontal planes, a
    Manhattan candidate for walls) a single sample pins the offset.
    Returns (plane, inlier mask, draws used).
    """
    t0 = time.perf_counter()
    n = len(arr)
    k = ransac_iterations(cfg.success_prob, cfg.inlier_ratio, 1)
    plane_normal = -gravity.direction if normal_override is None else normal_override
    cls = HORIZONTAL if normal_override is None else VERTICAL
    result: Optional[Tuple[Plane, np.ndarray]] = None
    draws = 0
    if n > 0:
        cos_tol = math.cos(math.radians(cfg.normal_tol_deg))
        signed = arr.positions @ plane_normal
        best_weight = 0.0
        best_offset = None
        trial = 0
        while trial < k and draws < cfg.max_draws:
            i = int(rng.integers(0, n))
            draws += 1
            if arr.has_normal[i] and abs(float(arr.normals[i] @ plane_normal)) < cos_tol:
                continue  # incompatible seed; redraw without spending the trial
            trial += 1
            offset = -float(signed[i])
            mask = arr.inlier_mask(plane_normal, offset, cfg.distance_threshold, cos_tol)
            weight = float(arr.weights[mask].sum())
            if weight > best_weight:
                best_weight = weight
                best_offset = offset
        min_inl = cfg.min_inliers_for(n)
        if best_offset is not None and best_weight >= min_inl:
            mask = arr.inlier_mask(plane_normal, best_offset, cfg.distance_threshold, cos_tol)
            w = arr.weights[mask]
            refit_offset = -float(np.dot(w, signed[mask]) / w.sum())
            result = _finish_plane(arr, plane_normal, refit_offset, cls, cfg, min_inl)
    if log is not None:
        log.append(DetectionRecord(stage=stage, trials=k, draws=draws,
                                   seconds=time.perf_counter() - t0,
                                   accepted=result is not None,
                                   plane=result[0].to_dict() if result else None))
    if result is None:
        return None, None, draws
    return result[0], result[1], draws


def detect_vertical(points: Sequence[SamplePoint], gravity: GravityVector,
                    cfg: RansacConfig, rng: Optional[np.random.Generator] = None,
                    log: Optional[list] = None) -> Optional[Plane]:
    plane, _ = _detect_vertical_impl(_PointArrays(points), gravity, cfg,
                                     rng or np.random.default_rng(cfg.seed), log)
    return plane


def _detect_vertical_impl(arr: _PointArrays, gravity: GravityVector, cfg: RansacConfig,
                          rng: np.random.Generator, log: Optional[list]
                          ) -> Tuple[Optional[Plane], Optional[np.ndarray]]:
    """Two-point RANSAC for gravity-parallel planes.

    The two samples fix the wall azimuth; pairs whose horizontal
    separation is below ``degenerate_eps`` are redrawn without consuming
    the trial budget. The winning hypothesis is refit by a weighted total
    least-squares line fit of the inliers' horizontal projections.
    """
    t0 = time.perf_counter()
    n = len(arr)
    g = gravity.direction
    k = ransac_iterations(cfg.success_prob, cfg.inlier_ratio, 2)
    result = None
    draws = 0
    if n >= 2:
        cos_tol = math.cos(math.radians(cfg.normal_tol_deg))
        horiz = arr.positions - np.outer(arr.positions @ g, g)
        best_weight = 0.0
        best = None
        trial = 0
        while trial < k and draws < cfg.max_draws:
            i = int(rng.integers(0, n))
            j = int(rng.integers(0, n))
            draws += 2
            if i == j:
                continue
            if np.linalg.norm(horiz[j] - horiz[i]) < cfg.degenerate_eps:
                continue  # degenerate pair; redraw without spending the trial
            trial += 1
            normal = np.cross(g, arr.positions[j] - arr.positions[i])
            norm = float(np.linalg.norm(normal))
            if norm < 1e-15:
                continue
            normal /= norm
            offset = -float(normal @ arr.positions[i])
            mask = arr.inlier_mask(normal, offset, cfg.distance_threshold, cos_tol)
            weight = float(arr.weights[mask].sum())
            if weight > best_weight:
                best_weight = weight
                best = (normal, offset)
        min_inl = cfg.min_inliers_for(n)
        if best is not None and best_weight >= min_inl:
            normal, offset = best
            mask = arr.inlier_mask(normal, offset, cfg.distance_threshold, cos_tol)
            refit = _refit_vertical(arr, mask, gravity)
            if refit is not None:
                result = _finish_plane(arr, refit[0], refit[1], VERTICAL, cfg, min_inl)
    if log is not None:
        log.append(DetectionRecord(stage="vertical", trials=k, draws=draws,
                                   seconds=time.perf_counter() - t0,
                                   accepted=result is not None,
                                   plane=result[0].to_dict() if result else None))
    if result is None:
        return None, None
    return result


def _refit_vertical(arr: _PointArrays, mask: np.ndarray, gravity: GravityVector
                    ) -> Optional[Tuple[np.ndarray, float]]:
    """Weighted total least squares with the normal kept gravity-orthogonal."""
    u, v = _horizontal_basis(gravity)
    P = arr.positions[mask]
    w = arr.weights[mask]
    if P.shape[0] < 2:
        return None
    Y = np.stack([P @ u, P @ v], axis=1)
    wsum = w.sum()
    centroid = (w[:, None] * Y).sum(axis=0) / wsum
    D = Y - centroid
    S = (w[:, None, None] * (D[:, :, None] * D[:, None, :])).sum(axis=0)
    evals, evecs = np.linalg.eigh(S)
    n2 = evecs[:, 0]  # eigenvector of the smaller eigenvalue
    normal = n2[0] * u + n2[1] * v
    normal /= np.linalg.norm(normal)
    offset = -float(n2 @ centroid)
    return normal, offset


def detect_manhattan(points: Sequence[SamplePoint], gravity: GravityVector,
                     main_wall: Plane, cfg: RansacConfig,
                     rng: Optional[np.random.Generator] = None,
                     log: Optional[list] = None) -> Optional[Plane]:
    plane, _ = _detect_manhattan_impl(_PointArrays(points), gravity, main_wall, cfg,
                                      rng or np.random.default_rng(cfg.seed), log)
    return plane


def _detect_manhattan_impl(arr: _PointArrays, gravity: GravityVector, main_wall: Plane,
                           cfg: RansacConfig, rng: np.random.Generator,
                           log: Optional[list]) -> Tuple[Optional[Plane], Optional[np.ndarray]]:
    """One-point RANSAC for walls parallel or orthogonal to a known wall.

    Both candidate orientations (the main wall's normal and its horizontal
    orthogonal) are tried with the cheap fixed-orientation detector; the
    better accepted plane wins.
    """
    if main_wall.orientation_class != VERTICAL:
        raise ValueError("the Manhattan seed plane must be vertical")
    g = gravity.direction
    n_main = main_wall.normal
    ortho = np.cross(g, n_main)
    ortho /= np.linalg.norm(ortho)
    best: Optional[Tuple[Plane, np.ndarray]] = None
    for candidate in (n_main, ortho):
        plane, mask, _ = _detect_horizontal_impl(arr, gravity, cfg, rng, log,
                                                 normal_override=candidate,
                                                 stage="manhattan")
        if plane is not None and (best is None or plane.inlier_weight > best[0].inlier_weight):
            best = (plane, mask)
    if best is None:
        return None, None
    return best


def detect_general_threepoint(points: Sequence[SamplePoint], cfg: RansacConfig,
                              rng: Optional[np.random.Generator] = None,
                              log: Optional[list] = None,
                              gravity: Optional[GravityVector] = None) -> Optional[Plane]:
    """Classic three-point RANSAC without the gravity prior.

    Kept as a baseline for iteration-count and wall-clock comparisons
    against the one- and two-point detectors; not used by the production
    detection loop.
    """
    t0 = time.perf_counter()
    arr = _PointArrays(points)
    rng = rng or np.random.default_rng(cfg.seed)
    n = len(arr)
    k = ransac_iterations(cfg.success_prob, cfg.inlier_ratio, 3)
    result = None
    draws = 0
    if n >= 3:
        cos_tol = math.cos(math.radians(cfg.normal_tol_deg))
        best_weight = 0.0
        best = None
        trial = 0
        while trial < k and draws < cfg.max_draws:
            idx = rng.integers(0, n, size=3)
            draws += 3
            i, j, l = (int(idx[0]), int(idx[1]), int(idx[2]))
            if i == j or j == l or i == l:
                continue
            a = arr.positions[j] - arr.positions[i]
            b = arr.positions[l] - arr.positions[i]
            normal = np.cross(a, b)
            norm = float(np.linalg.norm(normal))
            if norm < cfg.degenerate_eps * (np.linalg.norm(a) + np.linalg.norm(b) + 1e-12):
                continue  # nearly collinear sample; redraw
            trial += 1
            normal /= norm
            offset = -float(normal @ arr.positions[i])
            mask = arr.inlier_mask(normal, offset, cfg.distance_threshold, cos_tol)
            weight = float(arr.weights[mask].sum())
            if weight > best_weight:
                best_weight = weight
                best = (normal, offset)
        min_inl = cfg.min_inliers_for(n)
        if best is not None and best_weight >= min_inl:
            cls = GENERAL
            if gravity is not None:
                cls = classify_orientation(best[0], gravity, cfg.angle_tol_deg)
            result = _finish_plane(arr, best[0], best[1], cls, cfg, min_inl)
    if log is not None:
        log.append(DetectionRecord(stage="threepoint", trials=k, draws=draws,
                                   seconds=time.perf_counter() - t0,
                                   accepted=result is not None,
                                   plane=result[0].to_dict() if result else None))
    return result[0] if result else None


def classify_orientation(normal: np.ndarray, gravity: GravityVector,
                         angle_tol_deg: float = 5.0) -> str:
    """Orientation class of a plane normal relative to gravity."""
    c = abs(float(np.dot(normal, gravity.direction)))
    if c > math.cos(math.radians(angle_tol_deg)):
        return HORIZONTAL
    if c < math.sin(math.radians(angle_tol_deg)):
        return VERTICAL
    return GENERAL


def sample_depth_points(frame: DepthFrame, normals: NormalMap, scale: ScaleCorrection,
                        budget: int, rng: Optional[np.random.Generator] = None,
                        stride: int = 4) -> List[SamplePoint]:
    """Draw world-frame points from the depth map, guided by uncertainty.

    Pixels on a stride grid are sampled without replacement with
    probability proportional to (1 - u), back-projected with the
    scale-corrected depth and tagged with the per-pixel normal where one
    exists. Depth-derived samples carry weight 0.5.
    """
    if budget <= 0:
        return []
    rng = rng or np.random.default_rng(0)
    h, w = frame.depth.shape
    ys, xs = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
    ys = ys.ravel()
    xs = xs.ravel()
    depths = frame.depth[ys, xs]
    valid = np.isfinite(depths) & (depths > 0)
    ys, xs, depths = ys[valid], xs[valid], depths[valid]
    if ys.size == 0:
        return []
    conf = 1.0 - frame.uncertainty[ys, xs]
    total = conf.sum()
    if total <= 0:
        probs = np.full(ys.size, 1.0 / ys.size)
    else:
        probs = conf / total
    take = min(budget, ys.size)
    chosen = rng.choice(ys.size, size=take, replace=False, p=probs)
    K = frame.intrinsics
    out: List[SamplePoint] = []
    for idx in chosen:
        x, y = int(xs[idx]), int(ys[idx])
        d = float(depths[idx]) * scale.factor
        p_cam = unproject((x, y), d, K)
        p_world = frame.pose.transform(p_cam)
        n = normals.at((x, y))
        out.append(SamplePoint(position=p_world, weight=DEPTH_POINT_WEIGHT,
                               normal=None if n is None else n.copy(),
                               source_id=("depth", frame.frame_id, x, y)))
    return out


def detect_all_planes(map_points: Sequence[SamplePoint], depth_points: Sequence[SamplePoint],
                      gravity: GravityVector, cfg: RansacConfig,
                      log: Optional[list] = None) -> List[Plane]:
    """Iterative multi-plane detection on a mixed sample set.

    Horizontal planes are found first with one-point trials, then the main
    wall with two-point trials, then walls aligned with the Manhattan
    frame of the main wall with one-point trials, then any remaining
    off-axis walls with two-point trials. After each accepted plane its
    inliers leave the working set. Deterministic for a fixed seed and
    input ordering.
    """
    rng = np.random.default_rng(cfg.seed)
    working: List[SamplePoint] = list(map_points) + list(depth_points)
    planes: List[Plane] = []

    def run(detector, *args) -> Optional[Plane]:
        nonlocal working
        if not working:
            return None
        arr = _PointArrays(working)
        out = detector(arr, *args)
        plane, mask = out[0], out[1]
        if plane is None:
            return None
        keep = np.flatnonzero(~mask)
        working = [working[i] for i in keep]
        planes.append(plane)
        return plane

    # floors / tabletops first: cheapest hypotheses, usually largest support
    while len(planes) < cfg.max_planes:
        if run(_detect_horizontal_impl, gravity, cfg, rng, log) is None:
            break

    main_wall: Optional[Plane] = None
    if len(planes) < cfg.max_planes:
        main_wall = run(_detect_vertical_impl, gravity, cfg, rng, log)

    if main_wall is not None:
        while len(planes) < cfg.max_planes:
            if run(_detect_manhattan_impl, gravity, main_wall, cfg, rng, log) is None:
                break
        # off-axis walls that the Manhattan pass cannot express
        while len(planes) < cfg.max_planes:
            if run(_detect_vertical_impl, gravity, cfg, rng, log) is None:
                break
    return planes


def inlier_mask_image(frame: DepthFrame, plane: Plane, theta: float) -> np.ndarray:
    """Boolean image of depth pixels within theta of the plane (for inspection)."""
    h, w = frame.depth.shape
    K = frame.intrinsics
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    rx = (gx - K.cx) / K.fx
    ry = (gy - K.cy) / K.fy
    pts_cam = np.stack([frame.depth * rx, frame.depth * ry, frame.depth], axis=-1)
    pts_world = pts_cam @ frame.pose.rotation.T + frame.pose.translation
    dist = np.abs(pts_world @ plane.normal + plane.offset)
    return np.isfinite(frame.depth) & (dist < theta)

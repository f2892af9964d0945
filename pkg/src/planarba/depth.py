"""Everything derived from a per-frame depth/uncertainty prediction.

Surface normals from depth differences, global scale correction against
the current map, per-landmark normal fusion, conversion of uncertainty
values to information weights, and synthesis of virtual right-view
features from depth.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    U_MAX,
    GravityVector,
    Intrinsics,
    MapPoint,
    Observation,
    Pose,
    unproject,
)

logger = logging.getLogger(__name__)

# Default pixel shift for depth-difference normals; larger values trade
# localization for robustness to depth noise.
NORMAL_PIXEL_SHIFT = 4

# Minimum number of depth samples before a scale correction is trusted.
SCALE_MIN_SAMPLES = 10


@dataclass
class DepthFrame:
    """A per-image depth and uncertainty prediction with its camera.

    ``pose`` maps camera coordinates to world coordinates. Invalid depth
    values are NaN. Grids are row-major with shape (height, width).
    """

    frame_id: int
    depth: np.ndarray
    uncertainty: np.ndarray
    pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.uncertainty = np.asarray(self.uncertainty, dtype=float)
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape or self.uncertainty.shape != shape:
            raise ValueError(f"grid shapes {self.depth.shape}/{self.uncertainty.shape} "
                             f"do not match intrinsics {shape}")
        finite = self.depth[np.isfinite(self.depth)]
        if finite.size and finite.min() <= 0:
            raise ValueError("depth values must be positive or NaN")
        if self.uncertainty.min() < 0 or self.uncertainty.max() > U_MAX:
            raise ValueError(f"uncertainty values must lie in [0, {U_MAX}]")

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)


@dataclass
class NormalMap:
    """Per-pixel world-frame unit normals with a validity mask."""

    normals: np.ndarray
    valid: np.ndarray

    def at(self, pixel) -> Optional[np.ndarray]:
        x = int(round(float(pixel[0])))
        y = int(round(float(pixel[1])))
        if y < 0 or y >= self.valid.shape[0] or x < 0 or x >= self.valid.shape[1]:
            return None
        if not self.valid[y, x]:
            return None
        return self.normals[y, x]


@dataclass(frozen=True)
class ScaleCorrection:
    """Multiplicative factor that aligns predicted depth with the map."""

    factor: float
    sample_count: int
    valid: bool = True

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("scale factor must be positive")


class ClampCounter:
    """Counts out-of-range uncertainty values that had to be clamped."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_counter = ClampCounter()


def information_from_uncertainty(u: float) -> np.ndarray:
    """2x2 information matrix (1 - u) * I for a pixel residual.

    Out-of-range values are clamped to [0, U_MAX] and counted on
    ``clamp_counter``.
    """
    u = float(u)
    if u < 0.0 or u > U_MAX:
        clamp_counter.count += 1
        logger.warning("uncertainty %.4f outside [0, %.2f]; clamped", u, U_MAX)
        u = min(max(u, 0.0), U_MAX)
    return (1.0 - u) * np.eye(2)


def depth_at(frame: DepthFrame, pixel, edge_tol: float = 0.15) -> float:
    """Depth at a (possibly fractional) pixel position, NaN if unavailable.

    Interpolates inverse depth bilinearly, which is exact on planar
    surfaces. A neighborhood that straddles a depth edge (invalid samples,
    or inverse-depth spread above ``edge_tol``) is rejected rather than
    interpolated across: reading depth off an edge produces confidently
    wrong values downstream.
    """
    return interpolate_depth(frame.depth, float(pixel[0]), float(pixel[1]), edge_tol)


def interpolate_depth(depth: np.ndarray, x: float, y: float, edge_tol: float = 0.15) -> float:
    """Inverse-depth bilinear interpolation with depth-edge rejection."""
    h, w = depth.shape
    if x < 0 or y < 0 or x > w - 1 or y > h - 1 or w < 2 or h < 2:
        return float("nan")
    x0 = min(int(math.floor(x)), w - 2)
    y0 = min(int(math.floor(y)), h - 2)
    block = depth[y0:y0 + 2, x0:x0 + 2]
    if not np.all(np.isfinite(block)):
        return float("nan")
    inv = 1.0 / block
    lo = float(inv.min())
    hi = float(inv.max())
    if hi - lo > edge_tol * hi:
        return float("nan")
    fx = x - x0
    fy = y - y0
    top = inv[0, 0] * (1 - fx) + inv[0, 1] * fx
    bot = inv[1, 0] * (1 - fx) + inv[1, 1] * fx
    return 1.0 / (top * (1 - fy) + bot * fy)


def normal_from_depth(frame: DepthFrame, pixel, pixel_shift: int = NORMAL_PIXEL_SHIFT
                      ) -> Optional[np.ndarray]:
    """World-frame unit surface normal at one pixel, from depth differences.

    Back-projects (x, y), (x - shift, y) and (x, y - shift), crosses the two
    in-surface difference vectors, rotates into the world frame and orients
    the result to face the observing camera. Returns None when any of the
    three depth samples is invalid.
    """
    x = int(round(float(pixel[0])))
    y = int(round(float(pixel[1])))
    h, w = frame.depth.shape
    if x - pixel_shift < 0 or y - pixel_shift < 0 or x >= w or y >= h:
        return None
    d0 = frame.depth[y, x]
    d_up = frame.depth[y - pixel_shift, x]
    d_left = frame.depth[y, x - pixel_shift]
    if not (np.isfinite(d0) and np.isfinite(d_up) and np.isfinite(d_left)):
        return None
    K = frame.intrinsics
    p0 = unproject((x, y), float(d0), K)
    p_up = unproject((x, y - pixel_shift), float(d_up), K)
    p_left = unproject((x - pixel_shift, y), float(d_left), K)
    n_cam = np.cross(p_up - p0, p_left - p0)
    norm = float(np.linalg.norm(n_cam))
    if norm < 1e-15:
        return None
    n_cam /= norm
    # face the camera: the viewing ray in the camera frame is p0 itself
    if float(np.dot(n_cam, p0)) > 0:
        n_cam = -n_cam
    return frame.pose.rotation @ n_cam


def compute_normal_map(frame: DepthFrame, pixel_shift: int = NORMAL_PIXEL_SHIFT) -> NormalMap:
    """Vectorized normal_from_depth over the whole grid."""
    h, w = frame.depth.shape
    K = frame.intrinsics
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    rx = (gx - K.cx) / K.fx
    ry = (gy - K.cy) / K.fy
    pts = np.stack([frame.depth * rx, frame.depth * ry, frame.depth], axis=-1)

    s = pixel_shift
    normals = np.full((h, w, 3), np.nan)
    valid = np.zeros((h, w), dtype=bool)
    p0 = pts[s:, s:]
    p_up = pts[:-s, s:]
    p_left = pts[s:, :-s]
    v1 = p_up - p0
    v2 = p_left - p0
    n = np.cross(v1, v2)
    norm = np.linalg.norm(n, axis=-1)
    ok = (np.isfinite(frame.depth[s:, s:])
          & np.isfinite(frame.depth[:-s, s:])
          & np.isfinite(frame.depth[s:, :-s])
          & (norm > 1e-15))
    with np.errstate(invalid="ignore"):
        n = n / norm[..., None]
        flip = np.sum(n * p0, axis=-1) > 0
    n[flip] = -n[flip]
    n_world = n @ frame.pose.rotation.T
    normals[s:, s:][ok] = n_world[ok]
    valid[s:, s:] = ok
    return NormalMap(normals=normals, valid=valid)


def fuse_normal(point: MapPoint, n_new: np.ndarray, d_new: float) -> MapPoint:
    """Fold a new normal observation into a map point.

    The update is a weighted average in which each normal is weighted by
    the *other* observation's distance, i.e. closer observations count
    more. The result is re-normalized and the stored observation distance
    is replaced by the new one.
    """
    if d_new <= 0:
        raise ValueError("observation distance must be positive")
    n_new = np.asarray(n_new, dtype=float).reshape(3)
    nn = float(np.linalg.norm(n_new))
    if abs(nn - 1.0) > 1e-6:
        raise ValueError(f"new normal must be unit norm, got {nn}")
    if point.normal is None:
        return replace(point, normal=n_new.copy(), last_observed_distance=float(d_new))
    n_old = point.normal
    if float(np.dot(n_new, n_old)) < 0:
        n_new = -n_new
    d_old = point.last_observed_distance
    fused = (n_new * d_old + n_old * d_new) / (d_new + d_old)
    norm = float(np.linalg.norm(fused))
    if norm < 1e-12:
        logger.warning("degenerate normal fusion for point %d; keeping previous normal", point.id)
        return replace(point, last_observed_distance=float(d_new))
    return replace(point, normal=fused / norm, last_observed_distance=float(d_new))


class NormalStore:
    """Normals and last observation distances keyed by map-point id.

    Single writer, multiple readers: ``update`` mutates under a lock,
    ``snapshot`` hands out an immutable copy for concurrent consumers.
    """

    def __init__(self):
        self._data: Dict[int, Tuple[np.ndarray, float]] = {}
        self._lock = threading.Lock()

    def update(self, point_id: int, n_new: np.ndarray, d_new: float) -> None:
        with self._lock:
            entry = self._data.get(point_id)
            if entry is None:
                stub = MapPoint(id=point_id, position=np.zeros(3))
            else:
                stub = MapPoint(id=point_id, position=np.zeros(3),
                                normal=entry[0], last_observed_distance=entry[1])
            fused = fuse_normal(stub, n_new, d_new)
            self._data[point_id] = (fused.normal, fused.last_observed_distance)

    def get(self, point_id: int) -> Optional[np.ndarray]:
        with self._lock:
            entry = self._data.get(point_id)
            return None if entry is None else entry[0]

    def snapshot(self) -> Dict[int, Tuple[np.ndarray, float]]:
        with self._lock:
            return {k: (v[0].copy(), v[1]) for k, v in self._data.items()}

    def __len__(self) -> int:
        return len(self._data)


def scale_correction(frame: DepthFrame, points: Sequence, min_samples: int = SCALE_MIN_SAMPLES,
                     method: str = "mean", visibility_gate: float = 0.25) -> ScaleCorrection:
    """Global scale factor between map-point depths and predicted depth.

    For every supplied world point that projects into the frame with a
    valid predicted depth, accumulates the ratio of its camera-frame depth
    to the predicted depth at its projection; the factor is the mean (or
    optional median) ratio. Points occluded by a nearer surface would
    poison the mean, so ratios deviating from the median ratio by more
    than ``visibility_gate`` are treated as not visible and dropped (the
    gate is relative to the median, which keeps a genuine global bias
    intact). Multiplying the depth grid by the factor aligns it with the
    map. With fewer than ``min_samples`` usable points the frame keeps
    factor 1 and the result is flagged invalid.
    """
    positions = []
    for p in points:
        positions.append(p.position if isinstance(p, MapPoint) else np.asarray(p, dtype=float))
    ratios = []
    if positions:
        pose_cw = frame.pose.inverse()  # world -> camera
        P = pose_cw.transform(np.asarray(positions))
        K = frame.intrinsics
        for p_cam in P:
            z = p_cam[2]
            if z <= 0:
                continue
            px = K.fx * p_cam[0] / z + K.cx
            py = K.fy * p_cam[1] / z + K.cy
            if not (0 <= px <= K.width - 1 and 0 <= py <= K.height - 1):
                continue
            d_pred = depth_at(frame, (px, py))
            if not np.isfinite(d_pred) or d_pred <= 0:
                continue
            ratios.append(z / d_pred)
    if ratios:
        r = np.asarray(ratios)
        med = float(np.median(r))
        r = r[np.abs(r / med - 1.0) <= visibility_gate]
    else:
        r = np.asarray(ratios)
    if r.size < min_samples:
        return ScaleCorrection(factor=1.0, sample_count=int(r.size), valid=False)
    if method == "median":
        factor = float(np.median(r))
    elif method == "mean":
        factor = float(np.mean(r))
    else:
        raise ValueError(f"unknown scale correction method {method!r}")
    return ScaleCorrection(factor=factor, sample_count=int(r.size), valid=True)


def virtual_right_features(frame: DepthFrame, observations: Iterable[Observation],
                           baseline: float, scale_factor: float = 1.0
                           ) -> List[Observation]:
    """Synthesize right-view observations from left features and depth.

    Each left observation is shifted in -x by the stereo disparity
    fx * baseline / depth, where depth is the (scale-corrected) predicted
    depth at the left pixel. The uncertainty value is inherited.
    Observations without valid depth are skipped.
    """
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    out: List[Observation] = []
    fx = frame.intrinsics.fx
    for obs in observations:
        d = depth_at(frame, obs.pixel) * scale_factor
        if not np.isfinite(d) or d <= 0:
            continue
        disparity = fx * baseline / d
        out.append(Observation(frame_id=obs.frame_id, point_id=obs.point_id,
                               pixel=np.array([obs.pixel[0] - disparity, obs.pixel[1]]),
                               uncertainty=obs.uncertainty))
    return out

"""Factor-graph bundle adjustment with plane unary factors.

Reprojection residuals (left view and a depth-synthesized virtual right
view) are weighted per-observation by (1 - u) where u is the predicted
uncertainty, robustified with a Huber cost on the weighted squared energy,
and combined with point-to-plane unary terms for points attached to
detected planes. The problem is solved by Levenberg-Marquardt with
multiplicative 6-dof pose updates and Schur elimination of the point
blocks. Planes stay constant during a solve; the detection module refreshes
them periodically.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .depth import (
    DepthFrame,
    NormalStore,
    compute_normal_map,
    depth_at,
    normal_from_depth,
    scale_correction,
    virtual_right_features,
)
from .geometry import (
    Intrinsics,
    Observation,
    Pose,
    huber,
    huber_array,
    huber_weight_array,
    orthonormalize_rotation,
    skew,
    so3_exp,
    transform_point,
    unproject,
)
from .planes import (
    Plane,
    RansacConfig,
    SamplePoint,
    detect_all_planes,
    sample_depth_points,
)

logger = logging.getLogger(__name__)

_MIN_DEPTH = 1e-8


@dataclass
class SolverConfig:
    """Weights, thresholds and iteration limits for the back-end."""

    right_view_weight: float = 1.0    # weight of the virtual right view term, <= 1
    plane_weight: float = 0.1         # weight of the plane term, <= 1
    plane_distance: float = 0.05      # point-to-plane attachment threshold, meters
    plane_refresh_period: int = 30    # frames between plane recomputations
    huber_delta: float = 1.345        # threshold for pixel-domain energies
    huber_delta_plane: float = 0.1    # threshold for meter-domain plane energies
    max_iterations: int = 50
    convergence_tol: float = 1e-10    # stop when an accepted step decreases cost less
    initial_damping: float = 1e-6
    plane_attach_mode: str = "all"    # 'all' or 'nearest'

    def __post_init__(self):
        if self.right_view_weight > 1.0:
            raise ValueError("right_view_weight must be <= 1")
        if self.plane_weight > 1.0:
            raise ValueError("plane_weight must be <= 1")
        if self.plane_refresh_period < 1:
            raise ValueError("plane_refresh_period must be >= 1")
        if self.plane_attach_mode not in ("all", "nearest"):
            raise ValueError("plane_attach_mode must be 'all' or 'nearest'")


@dataclass
class ReprojectionFactor:
    """One 2D observation of a point, on the left or virtual right view."""

    frame_id: int
    point_id: int
    pixel: np.ndarray
    uncertainty: float = 0.0
    is_right: bool = False

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


class FactorGraph:
    """Poses, points, reprojection factors and plane unary factors.

    Pose nodes are world->camera transforms. Plane factors are (point_id,
    plane_index) pairs into the fixed ``planes`` list of the current
    window.
    """

    def __init__(self, intrinsics: Intrinsics, baseline: float = 0.0):
        self.intrinsics = intrinsics
        self.baseline = float(baseline)
        self.poses: Dict[int, Pose] = {}
        self.points: Dict[int, np.ndarray] = {}
        self.factors: List[ReprojectionFactor] = []
        self.plane_factors: List[Tuple[int, int]] = []
        self.planes: List[Plane] = []
        self.fixed_pose_ids: Set[int] = set()

    def add_pose(self, frame_id: int, pose_world_to_cam: Pose, fixed: bool = False) -> None:
        self.poses[frame_id] = pose_world_to_cam.copy()
        if fixed:
            self.fixed_pose_ids.add(frame_id)

    def add_point(self, point_id: int, position: np.ndarray) -> None:
        self.points[point_id] = np.asarray(position, dtype=float).reshape(3).copy()

    def add_observation(self, frame_id: int, point_id: int, pixel, uncertainty: float = 0.0,
                        is_right: bool = False) -> None:
        if frame_id not in self.poses:
            raise KeyError(f"unknown pose node {frame_id}")
        if point_id not in self.points:
            raise KeyError(f"unknown point node {point_id}")
        if is_right and self.baseline <= 0:
            raise ValueError("graph has no stereo baseline; cannot add right-view factors")
        self.factors.append(ReprojectionFactor(frame_id, point_id, pixel,
                                               float(uncertainty), is_right))

    def copy(self) -> "FactorGraph":
        g = FactorGraph(self.intrinsics, self.baseline)
        g.poses = {k: v.copy() for k, v in self.poses.items()}
        g.points = {k: v.copy() for k, v in self.points.items()}
        g.factors = list(self.factors)
        g.plane_factors = list(self.plane_factors)
        g.planes = list(self.planes)
        g.fixed_pose_ids = set(self.fixed_pose_ids)
        return g


def attach_plane_factors(graph: FactorGraph, planes: Sequence[Plane], theta: float,
                         mode: str = "all") -> int:
    """Attach unary plane factors to every point within theta of a plane.

    Previous plane factors are cleared first. In 'all' mode a point near
    several planes (a corner) gets one factor per plane; 'nearest' keeps
    only the closest. Returns the number of factors attached.
    """
    graph.plane_factors = []
    graph.planes = list(planes)
    if not planes or not graph.points:
        return 0
    ids = list(graph.points.keys())
    P = np.asarray([graph.points[i] for i in ids])
    dists = np.stack([np.abs(pl.signed_distance(P)) for pl in planes], axis=1)
    for row, pid in enumerate(ids):
        if mode == "nearest":
            j = int(np.argmin(dists[row]))
            if dists[row, j] < theta:
                graph.plane_factors.append((pid, j))
        else:
            for j in range(len(planes)):
                if dists[row, j] < theta:
                    graph.plane_factors.append((pid, j))
    return len(graph.plane_factors)


@dataclass
class CostBreakdown:
    left: float
    right: float
    plane: float
    total: float
    excluded: int


def cost_breakdown(graph: FactorGraph, cfg: Optional[SolverConfig] = None) -> CostBreakdown:
    """Reference scalar evaluation of every cost term.

    Accumulates factor by factor in list order with plain scalar
    arithmetic; the optimizer uses a vectorized equivalent internally.
    Points behind the camera are excluded and counted.
    """
    cfg = cfg or SolverConfig()
    K = graph.intrinsics
    left = 0.0
    right = 0.0
    excluded = 0
    for f in graph.factors:
        pose = graph.poses[f.frame_id]
        X = graph.points[f.point_id]
        p = transform_point(pose.rotation, pose.translation, X)
        px = p[0] - graph.baseline if f.is_right else p[0]
        pz = p[2]
        if pz <= _MIN_DEPTH:
            excluded += 1
            continue
        e0 = f.pixel[0] - (K.fx * px / pz + K.cx)
        e1 = f.pixel[1] - (K.fy * p[1] / pz + K.cy)
        energy = (1.0 - f.uncertainty) * (e0 * e0 + e1 * e1)
        if f.is_right:
            right += huber(energy, cfg.huber_delta)
        else:
            left += huber(energy, cfg.huber_delta)
    plane = 0.0
    for pid, plane_idx in graph.plane_factors:
        v = graph.planes[plane_idx].coeffs
        X = graph.points[pid]
        r = v[0] * X[0] + v[1] * X[1] + v[2] * X[2] + v[3]
        plane += huber(r * r, cfg.huber_delta_plane)
    total = (left + cfg.right_view_weight * right) + cfg.plane_weight * plane
    return CostBreakdown(left=left, right=right, plane=plane, total=total, excluded=excluded)


def cost_reprojection(graph: FactorGraph, cfg: Optional[SolverConfig] = None) -> float:
    """Uncertainty-weighted robust reprojection cost, left plus weighted right."""
    cfg = cfg or SolverConfig()
    b = cost_breakdown(graph, cfg)
    return b.left + cfg.right_view_weight * b.right


def cost_plane(graph: FactorGraph, cfg: Optional[SolverConfig] = None) -> float:
    """Robust point-to-plane cost over the attached unary factors."""
    cfg = cfg or SolverConfig()
    return cost_breakdown(graph, cfg).plane


def total_cost(graph: FactorGraph, cfg: Optional[SolverConfig] = None) -> float:
    """Reprojection cost plus the weighted plane term."""
    cfg = cfg or SolverConfig()
    b = cost_breakdown(graph, cfg)
    return b.total


@dataclass
class OptimizeReport:
    status: str
    iterations: int
    cost_trace: List[float]
    final_cost: float
    excluded: int
    grad_norm: float
    damping: float
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"status": self.status, "iterations": self.iterations,
                "cost_trace": self.cost_trace, "final_cost": self.final_cost,
                "excluded": self.excluded, "grad_norm": self.grad_norm,
                "damping": self.damping, "seconds": self.seconds}


class _Problem:
    """Columnar snapshot of a graph for vectorized evaluation/assembly."""

    def __init__(self, graph: FactorGraph, cfg: SolverConfig,
                 free_pose_ids: Optional[Iterable[int]] = None,
                 free_point_ids: Optional[Iterable[int]] = None):
        self.graph = graph
        self.cfg = cfg
        self.K = graph.intrinsics
        self.baseline = graph.baseline

        self.pose_ids = sorted(graph.poses.keys())
        self.point_ids = sorted(graph.points.keys())
        self.pose_slot = {pid: i for i, pid in enumerate(self.pose_ids)}
        self.point_slot = {pid: i for i, pid in enumerate(self.point_ids)}

        if free_pose_ids is None:
            free_pose_ids = [p for p in self.pose_ids if p not in graph.fixed_pose_ids]
        else:
            free_pose_ids = [p for p in free_pose_ids if p not in graph.fixed_pose_ids]
        if free_point_ids is None:
            free_point_ids = list(self.point_ids)
        self.free_pose_ids = sorted(free_pose_ids)
        self.free_point_ids = sorted(free_point_ids)
        self.free_pose_slot = {pid: i for i, pid in enumerate(self.free_pose_ids)}
        self.free_point_slot = {pid: i for i, pid in enumerate(self.free_point_ids)}

        self.R = np.stack([graph.poses[p].rotation for p in self.pose_ids]) \
            if self.pose_ids else np.zeros((0, 3, 3))
        self.t = np.stack([graph.poses[p].translation for p in self.pose_ids]) \
            if self.pose_ids else np.zeros((0, 3))
        self.X = np.stack([graph.points[p] for p in self.point_ids]) \
            if self.point_ids else np.zeros((0, 3))

        n = len(graph.factors)
        self.f_pose = np.zeros(n, dtype=int)
        self.f_point = np.zeros(n, dtype=int)
        self.f_pix = np.zeros((n, 2))
        self.f_winfo = np.zeros(n)
        self.f_right = np.zeros(n, dtype=bool)
        for i, f in enumerate(graph.factors):
            self.f_pose[i] = self.pose_slot[f.frame_id]
            self.f_point[i] = self.point_slot[f.point_id]
            self.f_pix[i] = f.pixel
            self.f_winfo[i] = 1.0 - f.uncertainty
            self.f_right[i] = f.is_right
        self.f_term = np.where(self.f_right, cfg.right_view_weight, 1.0)
        self.f_pose_free = np.array([graph.factors[i].frame_id in self.free_pose_slot
                                     for i in range(n)], dtype=bool)
        self.f_point_free = np.array([graph.factors[i].point_id in self.free_point_slot
                                      for i in range(n)], dtype=bool)

        m = len(graph.plane_factors)
        self.pf_point = np.zeros(m, dtype=int)
        self.pf_coeff = np.zeros((m, 4))
        for i, (pid, plane_idx) in enumerate(graph.plane_factors):
            self.pf_point[i] = self.point_slot[pid]
            self.pf_coeff[i] = graph.planes[plane_idx].coeffs
        self.pf_point_free = np.array(
            [graph.plane_factors[i][0] in self.free_point_slot for i in range(m)], dtype=bool)

        # factor indices grouped by free point, for the Schur complement
        self.point_factor_lists: List[np.ndarray] = []
        by_point: Dict[int, List[int]] = {pid: [] for pid in self.free_point_ids}
        for i, f in enumerate(graph.factors):
            if f.point_id in by_point and self.f_pose_free[i]:
                by_point[f.point_id].append(i)
        for pid in self.free_point_ids:
            self.point_factor_lists.append(np.asarray(by_point[pid], dtype=int))

    def evaluate(self, R, t, X):
        """Total cost plus cached per-factor quantities at a given state."""
        cfg = self.cfg
        K = self.K
        if len(self.f_pose):
            p_c = np.einsum("nij,nj->ni", R[self.f_pose], X[self.f_point]) + t[self.f_pose]
        else:
            p_c = np.zeros((0, 3))
        px = p_c[:, 0] - np.where(self.f_right, self.baseline, 0.0)
        pz = p_c[:, 2]
        valid = pz > _MIN_DEPTH
        z = np.where(valid, pz, 1.0)
        proj = np.stack([K.fx * px / z + K.cx, K.fy * p_c[:, 1] / z + K.cy], axis=1)
        e = self.f_pix - proj
        energy = self.f_winfo * np.sum(e * e, axis=1)
        rho = huber_array(energy, cfg.huber_delta)
        cost_reproj = float(np.sum(self.f_term[valid] * rho[valid]))

        if len(self.pf_point):
            r = np.sum(X[self.pf_point] * self.pf_coeff[:, :3], axis=1) + self.pf_coeff[:, 3]
            rho_p = huber_array(r * r, cfg.huber_delta_plane)
            cost_pl = float(np.sum(rho_p))
        else:
            r = np.zeros(0)
            cost_pl = 0.0
        total = cost_reproj + cfg.plane_weight * cost_pl
        excluded = int(np.count_nonzero(~valid))
        return total, {"p_c": p_c, "px": px, "pz": pz, "valid": valid, "e": e,
                       "energy": energy, "plane_r": r, "excluded": excluded}

    def jacobian_blocks(self, R, cache):
        """Per-factor J_pose (N,2,6) and J_point (N,2,3) at the cached state."""
        K = self.K
        p_c = cache["p_c"]
        px = cache["px"]
        pz = np.where(cache["valid"], cache["pz"], 1.0)
        n = p_c.shape[0]
        A = np.zeros((n, 2, 3))
        A[:, 0, 0] = K.fx / pz
        A[:, 0, 2] = -K.fx * px / pz ** 2
        A[:, 1, 1] = K.fy / pz
        A[:, 1, 2] = -K.fy * p_c[:, 1] / pz ** 2
        S = np.zeros((n, 3, 3))
        S[:, 0, 1] = -p_c[:, 2]
        S[:, 0, 2] = p_c[:, 1]
        S[:, 1, 0] = p_c[:, 2]
        S[:, 1, 2] = -p_c[:, 0]
        S[:, 2, 0] = -p_c[:, 1]
        S[:, 2, 1] = p_c[:, 0]
        J_pose = np.concatenate([A @ S, -A], axis=2)
        J_point = -(A @ R[self.f_pose])
        return J_pose, J_point


@dataclass
class NormalEquations:
    """Assembled Gauss-Newton system, exposed for structural tests."""

    free_pose_ids: List[int]
    free_point_ids: List[int]
    H_pose: np.ndarray          # (F, 6, 6) block diagonal
    g_pose: np.ndarray          # (F, 6)
    H_point: np.ndarray         # (M, 3, 3) block diagonal
    g_point: np.ndarray         # (M, 3)
    cross: List[List[Tuple[int, np.ndarray]]]  # per free point: (pose slot, 6x3 block)

    def to_dense(self) -> Tuple[np.ndarray, np.ndarray]:
        F = len(self.free_pose_ids)
        M = len(self.free_point_ids)
        dim = 6 * F + 3 * M
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for i in range(F):
            H[6 * i:6 * i + 6, 6 * i:6 * i + 6] = self.H_pose[i]
            g[6 * i:6 * i + 6] = self.g_pose[i]
        for j in range(M):
            a = 6 * F + 3 * j
            H[a:a + 3, a:a + 3] = self.H_point[j]
            g[a:a + 3] = self.g_point[j]
            for slot, W in self.cross[j]:
                H[6 * slot:6 * slot + 6, a:a + 3] += W
                H[a:a + 3, 6 * slot:6 * slot + 6] += W.T
        return H, g


def build_normal_equations(graph: FactorGraph, cfg: Optional[SolverConfig] = None,
                           free_pose_ids: Optional[Iterable[int]] = None,
                           free_point_ids: Optional[Iterable[int]] = None) -> NormalEquations:
    """Assemble the (undamped) normal equations at the graph's current state."""
    cfg = cfg or SolverConfig()
    prob = _Problem(graph, cfg, free_pose_ids, free_point_ids)
    _, cache = prob.evaluate(prob.R, prob.t, prob.X)
    return _assemble(prob, cache)


def _assemble(prob: _Problem, cache) -> NormalEquations:
    cfg = prob.cfg
    F = len(prob.free_pose_ids)
    M = len(prob.free_point_ids)
    H_pose = np.zeros((F, 6, 6))
    g_pose = np.zeros((F, 6))
    H_point = np.zeros((M, 3, 3))
    g_point = np.zeros((M, 3))
    cross: List[List[Tuple[int, np.ndarray]]] = [[] for _ in range(M)]

    valid = cache["valid"]
    if valid.any():
        J_pose, J_point = prob.jacobian_blocks(prob.R, cache)
        coef = prob.f_term * huber_weight_array(cache["energy"], cfg.huber_delta) * prob.f_winfo
        coef = np.where(valid, coef, 0.0)
        e = cache["e"]

        sel = valid & prob.f_pose_free
        if sel.any():
            slots = np.array([prob.free_pose_slot[prob.graph.factors[i].frame_id]
                              for i in np.flatnonzero(sel)])
            Jp = J_pose[sel]
            blocks = np.einsum("nab,nac->nbc", Jp, Jp) * coef[sel, None, None]
            gvec = np.einsum("nab,na->nb", Jp, e[sel]) * coef[sel, None]
            np.add.at(H_pose, slots, blocks)
            np.add.at(g_pose, slots, gvec)

        sel = valid & prob.f_point_free
        if sel.any():
            slots = np.array([prob.free_point_slot[prob.graph.factors[i].point_id]
                              for i in np.flatnonzero(sel)])
            Jq = J_point[sel]
            blocks = np.einsum("nab,nac->nbc", Jq, Jq) * coef[sel, None, None]
            gvec = np.einsum("nab,na->nb", Jq, e[sel]) * coef[sel, None]
            np.add.at(H_point, slots, blocks)
            np.add.at(g_point, slots, gvec)

        sel = valid & prob.f_pose_free & prob.f_point_free
        cross_acc: List[Dict[int, np.ndarray]] = [dict() for _ in range(M)]
        for i in np.flatnonzero(sel):
            f = prob.graph.factors[i]
            ps = prob.free_pose_slot[f.frame_id]
            qs = prob.free_point_slot[f.point_id]
            W = coef[i] * (J_pose[i].T @ J_point[i])
            if ps in cross_acc[qs]:
                cross_acc[qs][ps] = cross_acc[qs][ps] + W
            else:
                cross_acc[qs][ps] = W
        for qs in range(M):
            cross[qs] = sorted(cross_acc[qs].items())

    # plane unary terms touch only point diagonal blocks
    if len(prob.pf_point):
        r = cache["plane_r"]
        wpl = cfg.plane_weight * huber_weight_array(r * r, cfg.huber_delta_plane)
        for i in np.flatnonzero(prob.pf_point_free):
            pid = prob.graph.plane_factors[i][0]
            qs = prob.free_point_slot[pid]
            nvec = prob.pf_coeff[i, :3]
            H_point[qs] += wpl[i] * np.outer(nvec, nvec)
            g_point[qs] += wpl[i] * r[i] * nvec

    return NormalEquations(free_pose_ids=list(prob.free_pose_ids),
                           free_point_ids=list(prob.free_point_ids),
                           H_pose=H_pose, g_pose=g_pose,
                           H_point=H_point, g_point=g_point, cross=cross)


def _solve_step(eq: NormalEquations, damping: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Damped Schur-complement solve; returns (pose deltas, point deltas)."""
    F = len(eq.free_pose_ids)
    M = len(eq.free_point_ids)
    Hp = eq.H_point.copy()
    for j in range(M):
        d = np.diag(Hp[j]).copy()
        Hp[j] += np.diag(damping * d + 1e-15)
    Vinv = np.zeros_like(Hp)
    solvable = np.zeros(M, dtype=bool)
    for j in range(M):
        try:
            Vinv[j] = np.linalg.inv(Hp[j])
            solvable[j] = np.all(np.isfinite(Vinv[j]))
        except np.linalg.LinAlgError:
            solvable[j] = False

    delta_pose = np.zeros((F, 6))
    if F:
        S = np.zeros((6 * F, 6 * F))
        b = np.zeros(6 * F)
        for i in range(F):
            Hd = eq.H_pose[i]
            S[6 * i:6 * i + 6, 6 * i:6 * i + 6] = Hd + np.diag(damping * np.diag(Hd) + 1e-15)
            b[6 * i:6 * i + 6] = eq.g_pose[i]
        for j in range(M):
            if not eq.cross[j] or not solvable[j]:
                continue
            slots = [s for s, _ in eq.cross[j]]
            W = np.stack([w for _, w in eq.cross[j]])      # (k, 6, 3)
            Y = W @ Vinv[j]                                # (k, 6, 3)
            k = len(slots)
            Yf = Y.transpose(0, 1, 2).reshape(6 * k, 3)
            Wf = W.reshape(6 * k, 3)
            block = Yf @ Wf.T                              # (6k, 6k)
            rows = np.concatenate([np.arange(6 * s, 6 * s + 6) for s in slots])
            S[np.ix_(rows, rows)] -= block
            b[rows] -= (Y @ eq.g_point[j]).reshape(-1)
        try:
            dc = np.linalg.solve(S, -b)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(dc)):
            return None
        delta_pose = dc.reshape(F, 6)

    delta_point = np.zeros((M, 3))
    for j in range(M):
        if not solvable[j]:
            continue
        rhs = eq.g_point[j].copy()
        for s, W in eq.cross[j]:
            rhs += W.T @ delta_pose[s]
        delta_point[j] = -Vinv[j] @ rhs
    if not np.all(np.isfinite(delta_point)):
        return None
    return delta_pose, delta_point


def _apply_step(prob: _Problem, R, t, X, delta_pose, delta_point):
    R2, t2, X2 = R.copy(), t.copy(), X.copy()
    for i, pid in enumerate(prob.free_pose_ids):
        slot = prob.pose_slot[pid]
        Rot = so3_exp(delta_pose[i, :3])
        R2[slot] = orthonormalize_rotation(Rot @ R2[slot])
        t2[slot] = Rot @ t2[slot] + delta_pose[i, 3:]
    for j, pid in enumerate(prob.free_point_ids):
        X2[prob.point_slot[pid]] += delta_point[j]
    return R2, t2, X2


def optimize(graph: FactorGraph, cfg: Optional[SolverConfig] = None,
             free_pose_ids: Optional[Iterable[int]] = None,
             free_point_ids: Optional[Iterable[int]] = None
             ) -> Tuple[FactorGraph, OptimizeReport]:
    """Levenberg-Marquardt over pose tangents and point positions.

    Poses update multiplicatively on the left, points additively; planes
    and factor topology are constants. Returns an optimized copy of the
    graph and an iteration report whose cost trace is non-increasing over
    accepted steps.
    """
    cfg = cfg or SolverConfig()
    out = graph.copy()
    report = optimize_inplace(out, cfg, free_pose_ids, free_point_ids)
    return out, report


def optimize_inplace(graph: FactorGraph, cfg: SolverConfig,
                     free_pose_ids: Optional[Iterable[int]] = None,
                     free_point_ids: Optional[Iterable[int]] = None) -> OptimizeReport:
    t_start = time.perf_counter()
    prob = _Problem(graph, cfg, free_pose_ids, free_point_ids)
    R, t, X = prob.R, prob.t, prob.X
    cost, cache = prob.evaluate(R, t, X)
    trace = [cost]
    damping = cfg.initial_damping
    status = "max_iterations"
    iterations = 0
    grad_norm = math.inf

    for _ in range(cfg.max_iterations):
        eq = _assemble(prob, cache)
        parts = [eq.g_pose.ravel(), eq.g_point.ravel()]
        grad_norm = max((float(np.abs(p).max()) if p.size else 0.0) for p in parts)
        if grad_norm < 1e-12:
            status = "converged"
            break
        accepted = False
        failures = 0
        for _ in range(12):
            step = _solve_step(eq, damping)
            if step is None:
                damping *= 10.0
                failures += 1
                continue
            R2, t2, X2 = _apply_step(prob, R, t, X, step[0], step[1])
            new_cost, new_cache = prob.evaluate(R2, t2, X2)
            if math.isfinite(new_cost) and new_cost < cost:
                R, t, X = R2, t2, X2
                prob.R, prob.t, prob.X = R, t, X
                decrease = cost - new_cost
                cost, cache = new_cost, new_cache
                trace.append(cost)
                damping = max(damping * 0.3, 1e-12)
                accepted = True
                iterations += 1
                break
            damping *= 10.0
        if not accepted:
            status = "diverged" if failures >= 12 else "converged"
            break
        if decrease < cfg.convergence_tol:
            status = "converged"
            break

    # write the state back into the graph
    for pid in prob.pose_ids:
        slot = prob.pose_slot[pid]
        graph.poses[pid] = Pose(R[slot].copy(), t[slot].copy())
    for pid in prob.point_ids:
        graph.points[pid] = X[prob.point_slot[pid]].copy()

    return OptimizeReport(status=status, iterations=iterations, cost_trace=trace,
                          final_cost=cost, excluded=cache["excluded"],
                          grad_norm=grad_norm, damping=damping,
                          seconds=time.perf_counter() - t_start)


def reprojection_jacobians(pose_world_to_cam: Pose, point_world: np.ndarray,
                           intrinsics: Intrinsics, baseline: float = 0.0,
                           is_right: bool = False
                           ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual direction Jacobians of one reprojection factor.

    Returns (p_cam, J_pose (2,6), J_point (2,3)) where J is d(residual)/d
    with the pose tangent ordered [rotation, translation] and applied as a
    left-multiplicative increment. Shares the optimizer's vectorized kernel.
    """
    g = FactorGraph(intrinsics, baseline)
    g.add_pose(0, pose_world_to_cam)
    g.add_point(0, point_world)
    g.factors.append(ReprojectionFactor(0, 0, np.zeros(2), 0.0, is_right))
    prob = _Problem(g, SolverConfig(), free_pose_ids=[0], free_point_ids=[0])
    _, cache = prob.evaluate(prob.R, prob.t, prob.X)
    J_pose, J_point = prob.jacobian_blocks(prob.R, cache)
    return cache["p_c"][0], J_pose[0], J_point[0]


# ---------------------------------------------------------------------------
# windowed pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Front-to-back configuration of the windowed back-end."""

    window_size: int = 8
    baseline: float = 0.12            # virtual right view baseline, meters
    use_uncertainty: bool = True      # weight residuals by (1 - u)
    use_planes: bool = True           # detect planes and add unary factors
    depth_sample_budget: int = 250
    depth_sample_stride: int = 4
    normal_pixel_shift: int = 4
    scale_min_samples: int = 10
    final_full_ba: bool = False
    refresh_mode: str = "sync"        # 'sync' or 'async' (single worker thread)
    seed: int = 0

    def __post_init__(self):
        if self.refresh_mode not in ("sync", "async"):
            raise ValueError("refresh_mode must be 'sync' or 'async'")


@dataclass
class PipelineResult:
    trajectory: List[Tuple[float, Pose]]   # (timestamp, camera->world)
    points: Dict[int, np.ndarray]
    planes: List[Plane]
    report: dict


def run_window_pipeline(dataset, solver: Optional[SolverConfig] = None,
                        ransac: Optional[RansacConfig] = None,
                        pipeline: Optional[PipelineConfig] = None) -> PipelineResult:
    """Sliding-window bundle adjustment over a recorded frame stream.

    Each incoming frame contributes its tracked observations, virtual
    right-view features and depth-initialized new points; every
    ``plane_refresh_period`` frames the plane set is re-detected on a
    snapshot of the current map and depth frame and the plane factors are
    re-attached. Deterministic for a fixed configuration.
    """
    solver = solver or SolverConfig()
    ransac = ransac or RansacConfig()
    pipeline = pipeline or PipelineConfig()
    frames = dataset.frames
    if not frames:
        raise ValueError("dataset has no frames")
    t_start = time.perf_counter()

    intrinsics = frames[0].depth_frame.intrinsics
    graph = FactorGraph(intrinsics, baseline=pipeline.baseline)
    store = NormalStore()
    detect_records: List = []
    frame_reports: List[dict] = []
    refresh_frames: List[int] = []
    executor = ThreadPoolExecutor(max_workers=1) if pipeline.refresh_mode == "async" else None

    def current_pose_cw(fid: int) -> Pose:
        return graph.poses[fid].inverse()

    try:
        for idx, rec in enumerate(frames):
            fid = rec.depth_frame.frame_id
            prior_cw = rec.depth_frame.pose  # camera -> world tracking prior
            graph.add_pose(fid, prior_cw.inverse(), fixed=(idx == 0))
            est_frame = replace(rec.depth_frame, pose=current_pose_cw(fid))

            # scale against the map points tracked in this frame; untracked
            # points may be occluded here and would poison the ratio
            tracked = [graph.points[obs.point_id] for obs in rec.observations
                       if obs.point_id in graph.points]
            scale = scale_correction(est_frame, tracked,
                                     min_samples=pipeline.scale_min_samples)

            usable_obs: List[Observation] = []
            for obs in rec.observations:
                if obs.point_id not in graph.points:
                    d = depth_at(est_frame, obs.pixel) * scale.factor
                    if not (np.isfinite(d) and d > 0):
                        continue
                    p_cam = unproject(obs.pixel, d, intrinsics)
                    graph.add_point(obs.point_id, est_frame.pose.transform(p_cam))
                u_eff = obs.uncertainty if pipeline.use_uncertainty else 0.0
                graph.add_observation(fid, obs.point_id, obs.pixel, u_eff, is_right=False)
                usable_obs.append(obs)

            for robs in virtual_right_features(est_frame, usable_obs,
                                               pipeline.baseline, scale.factor):
                u_eff = robs.uncertainty if pipeline.use_uncertainty else 0.0
                graph.add_observation(fid, robs.point_id, robs.pixel, u_eff, is_right=True)

            for obs in usable_obs:
                n = normal_from_depth(est_frame, obs.pixel, pipeline.normal_pixel_shift)
                if n is None:
                    continue
                d = depth_at(est_frame, obs.pixel) * scale.factor
                if not (np.isfinite(d) and d > 0):
                    continue
                ray = unproject(obs.pixel, d, intrinsics)
                store.update(obs.point_id, n, float(np.linalg.norm(ray)))

            if pipeline.use_planes and idx % solver.plane_refresh_period == 0:
                planes = _refresh_planes(graph, store, est_frame, scale, ransac, pipeline,
                                         dataset.gravity, idx, detect_records, executor)
                attach_plane_factors(graph, planes, solver.plane_distance,
                                     solver.plane_attach_mode)
                refresh_frames.append(fid)

            window_ids = [frames[k].depth_frame.frame_id
                          for k in range(max(0, idx - pipeline.window_size + 1), idx + 1)]
            free_points = {f.point_id for f in graph.factors
                           if f.frame_id in window_ids and f.frame_id not in graph.fixed_pose_ids}
            if not free_points:
                free_points = {f.point_id for f in graph.factors if f.frame_id in window_ids}
            rep = optimize_inplace(graph, solver, free_pose_ids=window_ids,
                                   free_point_ids=free_points)
            frame_reports.append({"frame_id": fid, "ba": rep.to_dict(),
                                  "scale_factor": scale.factor,
                                  "scale_samples": scale.sample_count,
                                  "n_points": len(graph.points),
                                  "n_factors": len(graph.factors)})

        final_report = None
        if pipeline.final_full_ba:
            rep = optimize_inplace(graph, solver)
            final_report = rep.to_dict()
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    trajectory = [(rec.timestamp, graph.poses[rec.depth_frame.frame_id].inverse())
                  for rec in frames]
    report = {
        "frames": len(frames),
        "refresh_frames": refresh_frames,
        "n_planes": len(graph.planes),
        "planes": [p.to_dict() for p in graph.planes],
        "detection": [r.to_dict() for r in detect_records],
        "frame_reports": frame_reports,
        "final_ba": final_report,
        "config": {"use_uncertainty": pipeline.use_uncertainty,
                   "use_planes": pipeline.use_planes,
                   "window_size": pipeline.window_size,
                   "baseline": pipeline.baseline,
                   "seed": pipeline.seed},
        "timing": {"seconds": time.perf_counter() - t_start},
    }
    return PipelineResult(trajectory=trajectory, points=dict(graph.points),
                          planes=list(graph.planes), report=report)


def _refresh_planes(graph: FactorGraph, store: NormalStore, est_frame: DepthFrame,
                    scale, ransac: RansacConfig, pipeline: PipelineConfig,
                    gravity, frame_index: int, detect_records: List,
                    executor: Optional[ThreadPoolExecutor]) -> List[Plane]:
    """Detect planes on an immutable snapshot of the map and current frame."""
    normals = store.snapshot()
    map_samples = []
    for pid, pos in graph.points.items():
        entry = normals.get(pid)
        map_samples.append(SamplePoint(position=pos.copy(), weight=1.0,
                                       normal=None if entry is None else entry[0],
                                       source_id=pid))
    normal_map = compute_normal_map(est_frame, pipeline.normal_pixel_shift)
    rng = np.random.default_rng([pipeline.seed, frame_index])
    depth_samples = sample_depth_points(est_frame, normal_map, scale,
                                        pipeline.depth_sample_budget, rng,
                                        stride=pipeline.depth_sample_stride)
    cfg = replace(ransac, seed=int(np.random.default_rng(
        [pipeline.seed, frame_index, 1]).integers(0, 2 ** 31)))

    def job() -> Tuple[List[Plane], List]:
        log: List = []
        planes = detect_all_planes(map_samples, depth_samples, gravity, cfg, log=log)
        return planes, log

    if executor is not None:
        # snapshot handoff through a single worker; joined at the same frame
        # boundary so results match the synchronous mode exactly
        planes, log = executor.submit(job).result()
    else:
        planes, log = job()
    detect_records.extend(log)
    return planes

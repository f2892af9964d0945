"""Gravity-aware plane detection and plane-regularized bundle adjustment.

The package provides a geometric SLAM back-end that consumes tracked 2D
observations, predicted depth/uncertainty maps and a gravity direction,
detects the dominant horizontal and vertical planes with reduced-sample
RANSAC, and refines poses and points with an uncertainty-weighted,
plane-regularized bundle adjustment. A synthetic scene generator with
exact ground truth and an experiment CLI round out the artifact.
"""

from .geometry import (
    GravityVector,
    Intrinsics,
    MapPoint,
    Observation,
    PointBehindCamera,
    Pose,
    huber,
    project,
    reprojection_residual,
    unproject,
)
from .depth import (
    DepthFrame,
    NormalMap,
    NormalStore,
    ScaleCorrection,
    compute_normal_map,
    fuse_normal,
    information_from_uncertainty,
    normal_from_depth,
    scale_correction,
    virtual_right_features,
)
from .planes import (
    Plane,
    RansacConfig,
    SamplePoint,
    detect_all_planes,
    detect_horizontal,
    detect_manhattan,
    detect_vertical,
    ransac_iterations,
    sample_depth_points,
)
from .ba import (
    FactorGraph,
    PipelineConfig,
    SolverConfig,
    attach_plane_factors,
    cost_plane,
    cost_reprojection,
    optimize,
    run_window_pipeline,
    total_cost,
)
from .simulate import NoiseModel, SceneSpec, ate_rmse, default_room_spec, generate
from .experiment import ExperimentConfig, RunReport, compare_reports, run_experiment

__version__ = "0.1.0"

"""Cooperative perception toolkit: HD-map matching localization, joint state
estimation over a factor graph, and a V2X fusion simulator with RMSE metrics."""

from .estimator import (
    DrivingState,
    FactorGraph,
    marginal_covariance,
    measurement_model,
    solve_joint,
    whitened_residual,
)
from .fusion import (
    FusionConfig,
    FusionMessage,
    FusionMode,
    centralized_fuse,
    host_fuse,
    local_estimate,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    EdtGrid,
    ImageLine,
    edt_sample,
    euclidean_distance_transform,
    line_distance,
    point_distance,
    project_line,
    project_point,
)
from .map_matching import (
    Correspondences,
    MatchingOptions,
    RecognizedFeatures,
    associate,
    estimate_pose,
    matching_residual,
    select_lane_model,
)
from .map_model import HdMap, MapFeature, load_map, map_prior_factors, query_features, save_map
from .observations import ObservationRecord, SourceClass
from .sim import Scenario, SensorSuite, build_preset, run_monte_carlo, run_trial, sense
from .solver import LeastSquaresProblem, SolveReport, SolverOptions, numeric_jacobian, solve

__version__ = "0.1.0"

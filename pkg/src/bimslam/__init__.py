"""Wall-landmark SLAM back-end constrained by an as-planned (BIM) wall set.

Modules: ``geometry`` (planes, walls, SE(3)), ``alignment`` (initial BIM-to-map
transform), ``matching`` (continuous wall association), ``factor_graph``
(factors and Levenberg-Marquardt), ``backend`` (online session loop),
``simulator`` (synthetic worlds and sensors), ``evaluation`` (ATE, map RMSE,
drift), ``session`` (scenario driver) and ``io`` / ``cli``.
"""
from .alignment import AlignmentResult, InitConfig, estimate_alignment, try_initialize
from .backend import BackendConfig, BackendState, finalize, new_state, process_frame
from .evaluation import (
    MetricsReport,
    TrajectoryPair,
    compute_ate,
    compute_map_rmse,
    drift_series,
    improvement_percent,
)
from .factor_graph import FactorGraph, OptConfig, OptResult, optimize
from .geometry import Plane, PlaneCoords, PoseSE3, Wall
from .kernels import BACKEND as KERNEL_BACKEND
from .matching import MatchParams, MatchSet, match_walls
from .session import Scenario, SessionResult, TrajectorySpec, run_session
from .simulator import NoiseSpec, SensorSpec, WorldParams, WorldSpec, generate_trajectory, generate_world

__version__ = "0.1.0"

__all__ = [
    "AlignmentResult", "BackendConfig", "BackendState", "FactorGraph", "InitConfig", "KERNEL_BACKEND",
    "MatchParams", "MatchSet", "MetricsReport", "NoiseSpec", "OptConfig", "OptResult", "Plane",
    "PlaneCoords", "PoseSE3", "Scenario", "SensorSpec", "SessionResult", "TrajectoryPair",
    "TrajectorySpec", "Wall", "WorldParams", "WorldSpec", "compute_ate", "compute_map_rmse",
    "drift_series", "estimate_alignment", "finalize", "generate_trajectory", "generate_world",
    "improvement_percent", "match_walls", "new_state", "optimize", "process_frame", "run_session",
    "try_initialize",
]

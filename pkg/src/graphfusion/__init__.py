"""IMU / GNSS / lidar-odometry state estimation on a receding-horizon factor graph."""
from .config import EstimatorConfig, Extrinsics, load_config
from .estimator import Estimator, EstimatorSnapshot, Frame, FrameBook, GnssOutcome, initialize_static
from .manifold import Pose3
from .measurements import GnssFix, LidarPose
from .preintegration import ImuBias, ImuNoiseSpec, ImuSample, PreintegratedDelta, predict, preintegrate
from .simulator import ScenarioSpec, TrajectorySpec, generate, read_log, write_log
from .smoother import GraphWindow, SolverConfig, optimize, trim_window
from .state import NavState

__all__ = [
    "EstimatorConfig",
    "Extrinsics",
    "load_config",
    "Estimator",
    "EstimatorSnapshot",
    "Frame",
    "FrameBook",
    "GnssOutcome",
    "initialize_static",
    "Pose3",
    "GnssFix",
    "LidarPose",
    "ImuBias",
    "ImuNoiseSpec",
    "ImuSample",
    "PreintegratedDelta",
    "predict",
    "preintegrate",
    "ScenarioSpec",
    "TrajectorySpec",
    "generate",
    "read_log",
    "write_log",
    "GraphWindow",
    "SolverConfig",
    "optimize",
    "trim_window",
    "NavState",
]

"""Event-camera 6-DoF pose tracking for rigid objects with known keypoint models."""

__version__ = "0.1.0"

from .camera import CameraIntrinsics, project
from .detect import (
    DensityPeakDetector,
    HeatmapFileDetector,
    KeypointSet,
    LossWeights,
    OracleDetector,
    detect_density_peaks,
    extract_peaks,
    loss_combined,
    loss_coord,
    loss_heatmap,
    loss_structure,
    read_heatmaps,
    slice_patch,
    write_heatmaps,
)
from .events import (
    EVENT_DTYPE,
    ContrastModel,
    TimeSurfacePair,
    build_time_surfaces,
    make_events,
    read_events,
    write_events,
)
from .geometry import PoseSE3, PoseTrajectory, read_trajectory, write_trajectory
from .metrics import evaluate_trajectories, r_rel, relative_error_terms, t_rel
from .pipeline import EventPoseTracker
from .simulate import (
    SceneModel,
    make_cuboid,
    make_linear_trajectory,
    make_oscillating_trajectory,
    project_keypoints,
    render_events,
)
from .solver import (
    CorrespondenceTable,
    TrackingLostError,
    initialize_correspondence,
    recursive_pose,
    solve_epnp,
    track_pose,
)
from .tracking import (
    ConstantVelocityEkf,
    KeypointState,
    PolarityClass,
    TrackerParams,
    classify_polarity,
    ekf_predict,
    ekf_update,
    match_mixed,
    match_single,
    track_step,
)

__all__ = [
    "CameraIntrinsics",
    "ContrastModel",
    "ConstantVelocityEkf",
    "CorrespondenceTable",
    "DensityPeakDetector",
    "EVENT_DTYPE",
    "EventPoseTracker",
    "HeatmapFileDetector",
    "KeypointSet",
    "KeypointState",
    "LossWeights",
    "OracleDetector",
    "PolarityClass",
    "PoseSE3",
    "PoseTrajectory",
    "SceneModel",
    "TimeSurfacePair",
    "TrackerParams",
    "TrackingLostError",
    "build_time_surfaces",
    "classify_polarity",
    "detect_density_peaks",
    "ekf_predict",
    "ekf_update",
    "evaluate_trajectories",
    "extract_peaks",
    "initialize_correspondence",
    "loss_combined",
    "loss_coord",
    "loss_heatmap",
    "loss_structure",
    "make_cuboid",
    "make_events",
    "make_linear_trajectory",
    "make_oscillating_trajectory",
    "match_mixed",
    "match_single",
    "project",
    "project_keypoints",
    "r_rel",
    "read_events",
    "read_heatmaps",
    "read_trajectory",
    "recursive_pose",
    "relative_error_terms",
    "render_events",
    "slice_patch",
    "solve_epnp",
    "t_rel",
    "track_pose",
    "track_step",
    "write_events",
    "write_heatmaps",
    "write_trajectory",
]

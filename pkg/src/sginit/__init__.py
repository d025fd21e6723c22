"""Dense bundle adjustment for monocular visual odometry, with geometry-guided
initialization, synthetic oracle scenes, and trajectory/depth evaluation."""

from .geometry import (
    CameraIntrinsics,
    FlowField,
    InverseDepthMap,
    Pose,
    Twist,
    compose,
    inverse,
    relative,
    reproject_flow,
    se3_exp,
    se3_log,
)

__all__ = [
    "CameraIntrinsics",
    "FlowField",
    "InverseDepthMap",
    "Pose",
    "Twist",
    "compose",
    "inverse",
    "relative",
    "reproject_flow",
    "se3_exp",
    "se3_log",
]

__version__ = "0.1.0"

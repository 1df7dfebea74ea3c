"""Motion feature network: shift-and-subtract motion features in a small CNN."""

from .backbone import ArchConfig, ModelGraph, StageSpec, build_model
from .motion import (DirectionSet, Displacement, MotionBlock, MotionBlockSpec,
                     default_directions, motion_filter, shift)
from .tensor import (ConfigurationError, ParamRegistry, SgdState, Tensor,
                     backward, sgd_step)
from .tsn import SegmentPlan, sample_indices, step_lr, video_predict

__all__ = [
    "ArchConfig",
    "ConfigurationError",
    "DirectionSet",
    "Displacement",
    "ModelGraph",
    "MotionBlock",
    "MotionBlockSpec",
    "ParamRegistry",
    "SegmentPlan",
    "SgdState",
    "StageSpec",
    "Tensor",
    "backward",
    "build_model",
    "default_directions",
    "motion_filter",
    "sample_indices",
    "sgd_step",
    "shift",
    "step_lr",
    "video_predict",
]

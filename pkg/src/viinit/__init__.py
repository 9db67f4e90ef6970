"""Closed-form visual-inertial initialization for multi-camera rigs."""

from .core import (
    Camera,
    DataAlignmentError,
    DegenerateProjection,
    FeatureTrack,
    IllConditioned,
    InsufficientParallax,
    Intrinsics,
    Observation,
    OutOfRange,
    RigCalibration,
)
from .preintegration import ImuSample, ImuWindow, preintegrate
from .state import InitState, SolverOptions

__all__ = [
    "Camera",
    "DataAlignmentError",
    "DegenerateProjection",
    "FeatureTrack",
    "IllConditioned",
    "ImuSample",
    "ImuWindow",
    "InitState",
    "InsufficientParallax",
    "Intrinsics",
    "Observation",
    "OutOfRange",
    "RigCalibration",
    "SolverOptions",
    "preintegrate",
]

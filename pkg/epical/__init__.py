"""
epical: markerless stereo extrinsic self-calibration on SO(3) x S^2
"""

from .config import CalibrationConfig, GridConfig, OptimizerConfig, RejectionConfig, SceneConfig, SessionConfig
from .core import CameraIntrinsics, EssentialMatrix, ExtrinsicEstimate, NormalizedMatch, PixelMatch, StereoRig
from .covariance import CalibrationCovariance, NoiseModel
from .dataset import StereoDataset
from .exceptions import (
    CalibrationError,
    ConfigurationError,
    DataFormatError,
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidInputError,
)
from .optimizer import OptimizationResult, optimize
from .pipeline import CalibrationSession, SessionState
from .utils import open_dataset

__version__ = "0.1.0"

__all__ = [
    "CalibrationConfig",
    "GridConfig",
    "OptimizerConfig",
    "RejectionConfig",
    "SceneConfig",
    "SessionConfig",
    "CameraIntrinsics",
    "EssentialMatrix",
    "ExtrinsicEstimate",
    "NormalizedMatch",
    "PixelMatch",
    "StereoRig",
    "CalibrationCovariance",
    "NoiseModel",
    "StereoDataset",
    "CalibrationError",
    "ConfigurationError",
    "DataFormatError",
    "DegenerateGeometryError",
    "InsufficientDataError",
    "InvalidInputError",
    "OptimizationResult",
    "optimize",
    "CalibrationSession",
    "SessionState",
    "open_dataset",
]

"""
Configuration for epical

One frozen dataclass per concern, aggregated by :class:`CalibrationConfig`
and loaded from YAML documents::

    optimizer:
      huber_threshold_px: 1.0
    grid:
      cols: 16
      rows: 25
    session:
      convergence_threshold: 7.6e-7

Missing sections and keys take the defaults below; unknown ones are errors.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar, Union

import yaml
from typing_extensions import Final, Literal

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

DEFAULT_CONVERGENCE_THRESHOLD: Final = 7.6e-7
DEFAULT_SIGMA_PX: Final = 0.5

T = TypeVar("T")


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


@dataclass(frozen=True)
class OptimizerConfig:
    """Gauss-Newton settings

    Attributes:
        huber_threshold_px: Huber threshold in pixels, converted to
            normalized units with the smaller focal length of the rig
        max_iterations: iteration cap
        step_tolerance: convergence threshold on the infinity norm of the step
        min_matches: fewest matches accepted by the optimizer
        damping: diagonal damping added to the normal matrix
        normalize_weights: whiten residuals by their predicted variance
    """

    huber_threshold_px: float = 1.0
    max_iterations: int = 50
    step_tolerance: float = 1e-10
    min_matches: int = 10
    damping: float = 0.0
    normalize_weights: bool = True

    def __post_init__(self):
        _check(self.huber_threshold_px > 0, f"huber_threshold_px must be > 0, got {self.huber_threshold_px}")
        _check(self.max_iterations >= 1, f"max_iterations must be >= 1, got {self.max_iterations}")
        _check(self.step_tolerance > 0, f"step_tolerance must be > 0, got {self.step_tolerance}")
        _check(self.min_matches >= 10, f"min_matches must be >= 10, got {self.min_matches}")
        _check(self.damping >= 0, f"damping must be >= 0, got {self.damping}")


@dataclass(frozen=True)
class GridConfig:
    """Feature buffer grid: cols x rows cells of at most cell_capacity matches"""

    cols: int = 16
    rows: int = 25
    cell_capacity: int = 10
    tie_band_px: float = 1.0

    def __post_init__(self):
        _check(self.cols >= 1 and self.rows >= 1, f"grid must be at least 1x1, got {self.cols}x{self.rows}")
        _check(self.cell_capacity >= 1, f"cell_capacity must be >= 1, got {self.cell_capacity}")
        _check(self.tie_band_px >= 0, f"tie_band_px must be >= 0, got {self.tie_band_px}")

    @property
    def max_matches(self) -> int:
        """Buffer capacity over the whole grid"""
        return self.cols * self.rows * self.cell_capacity


@dataclass(frozen=True)
class RejectionConfig:
    """Outlier rejection: prior gate, RANSAC and optional score threshold"""

    prior_gate_px: float = 20.0
    ransac_threshold_px: float = 1.5
    ransac_confidence: float = 0.99
    ransac_max_iterations: int = 500
    seed: int = 0
    min_score: Optional[float] = None
    low_consensus_ratio: float = 0.5

    def __post_init__(self):
        _check(self.prior_gate_px > 0, f"prior_gate_px must be > 0, got {self.prior_gate_px}")
        _check(self.ransac_threshold_px > 0, f"ransac_threshold_px must be > 0, got {self.ransac_threshold_px}")
        _check(0 < self.ransac_confidence < 1, f"ransac_confidence must be in (0, 1), got {self.ransac_confidence}")
        _check(self.ransac_max_iterations >= 1, "ransac_max_iterations must be >= 1")
        _check(self.seed >= 0, f"seed must be non-negative, got {self.seed}")
        _check(0 <= self.low_consensus_ratio <= 1, "low_consensus_ratio must be in [0, 1]")


@dataclass(frozen=True)
class NoiseConfig:
    """Pixel noise assumed by the weighting and covariance"""

    sigma_px: float = DEFAULT_SIGMA_PX

    def __post_init__(self):
        _check(self.sigma_px >= 0, f"sigma_px must be >= 0, got {self.sigma_px}")


@dataclass(frozen=True)
class SessionConfig:
    """Cadence and termination of a calibration session"""

    optimize_every: int = 1
    convergence_threshold: float = DEFAULT_CONVERGENCE_THRESHOLD
    covariance_mode: Literal["full", "approximate"] = "full"

    def __post_init__(self):
        _check(self.optimize_every >= 1, f"optimize_every must be >= 1, got {self.optimize_every}")
        _check(self.convergence_threshold > 0, "convergence_threshold must be > 0")
        _check(
            self.covariance_mode in ("full", "approximate"),
            f"covariance_mode must be 'full' or 'approximate', got {self.covariance_mode!r}",
        )


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene and camera settings for the simulator"""

    num_points_per_frame: int = 200
    depth_min: float = 2.0
    depth_max: float = 20.0
    sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    quantize_pixels: bool = False
    seed: int = 0
    frames: int = 10
    width: int = 640
    height: int = 480
    focal_px: float = 230.0

    def __post_init__(self):
        _check(self.num_points_per_frame >= 1, "num_points_per_frame must be >= 1")
        _check(
            0 < self.depth_min <= self.depth_max,
            f"need 0 < depth_min <= depth_max, got [{self.depth_min}, {self.depth_max}]",
        )
        _check(self.sigma_px >= 0, f"sigma_px must be >= 0, got {self.sigma_px}")
        _check(0 <= self.outlier_fraction < 1, f"outlier_fraction must be in [0, 1), got {self.outlier_fraction}")
        _check(self.seed >= 0, f"seed must be non-negative, got {self.seed}")
        _check(self.frames >= 1, f"frames must be >= 1, got {self.frames}")
        _check(self.width >= 1 and self.height >= 1, "image size must be positive")
        _check(self.focal_px > 0, f"focal_px must be > 0, got {self.focal_px}")


def _section_from_dict(cls: Type[T], data: Optional[Dict[str, Any]], name: str) -> T:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"Unknown keys in section '{name}': {unknown}")
    values = dict(data)
    try:
        # YAML 1.1 reads "1e-10" as a string
        for f in fields(cls):
            if f.name in values and values[f.name] is not None and f.type in ("float", "Optional[float]"):
                values[f.name] = float(values[f.name])
        return cls(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"Invalid section '{name}': {err}") from err


_SECTIONS = {
    "optimizer": OptimizerConfig,
    "grid": GridConfig,
    "rejection": RejectionConfig,
    "noise": NoiseConfig,
    "session": SessionConfig,
    "scene": SceneConfig,
}


@dataclass(frozen=True)
class CalibrationConfig:
    """All settings of a calibration or simulation run"""

    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    rejection: RejectionConfig = field(default_factory=RejectionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "CalibrationConfig":
        """Build from a parsed YAML mapping; missing sections take their defaults"""
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError("Configuration document must be a mapping")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigurationError(f"Unknown configuration sections: {unknown}")
        return cls(**{name: _section_from_dict(kind, data.get(name), name) for name, kind in _SECTIONS.items()})

    def to_dict(self) -> Dict[str, Any]:
        """Plain mapping suitable for YAML"""
        return asdict(self)

    def with_seed(self, seed: int) -> "CalibrationConfig":
        """Copy with the RANSAC/tie-break seed and the scene seed replaced"""
        return replace(
            self,
            rejection=replace(self.rejection, seed=seed),
            scene=replace(self.scene, seed=seed),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CalibrationConfig":
        """Read a YAML config file"""
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{path}: invalid YAML: {err}") from err
        logger.debug("Loaded configuration from %s", path)
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> None:
        """Write the config as YAML"""
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

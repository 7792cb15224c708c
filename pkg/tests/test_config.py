"""
Unit tests for epical.config
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from epical.config import (
    DEFAULT_CONVERGENCE_THRESHOLD,
    CalibrationConfig,
    GridConfig,
    OptimizerConfig,
    RejectionConfig,
    SceneConfig,
    SessionConfig,
)
from epical.exceptions import ConfigurationError


class TestDefaults:
    """Test cases for the default settings"""

    def test_defaults(self):
        """Test default settings"""
        cfg = CalibrationConfig()
        assert cfg.optimizer.huber_threshold_px == 1.0
        assert cfg.optimizer.max_iterations == 50
        assert cfg.optimizer.step_tolerance == 1e-10
        assert cfg.grid.max_matches == 4000
        assert cfg.rejection.prior_gate_px == 20.0
        assert cfg.rejection.ransac_threshold_px == 1.5
        assert cfg.noise.sigma_px == 0.5
        assert cfg.session.convergence_threshold == DEFAULT_CONVERGENCE_THRESHOLD == 7.6e-7
        assert cfg.scene.focal_px == 230.0

    def test_empty_document(self):
        """Test empty document"""
        assert CalibrationConfig.from_dict(None) == CalibrationConfig()
        assert CalibrationConfig.from_dict({}) == CalibrationConfig()


class TestFromDict:
    """Test cases for CalibrationConfig.from_dict"""

    def test_partial_section(self):
        """Test partial section"""
        cfg = CalibrationConfig.from_dict({"grid": {"cols": 8}})
        assert cfg.grid.cols == 8
        assert cfg.grid.rows == 25

    def test_string_floats(self):
        """YAML 1.1 reads exponent literals without a dot as strings"""
        cfg = CalibrationConfig.from_dict({"optimizer": {"step_tolerance": "1e-12"}})
        assert cfg.optimizer.step_tolerance == 1e-12

    def test_optional_float(self):
        """Test optional float"""
        cfg = CalibrationConfig.from_dict({"rejection": {"min_score": "0.5"}})
        assert cfg.rejection.min_score == 0.5

    def test_unknown_section(self):
        """Test unknown section"""
        with pytest.raises(ConfigurationError, match="sections"):
            CalibrationConfig.from_dict({"solver": {}})

    def test_unknown_key(self):
        """Test unknown key"""
        with pytest.raises(ConfigurationError, match="huber"):
            CalibrationConfig.from_dict({"optimizer": {"huber": 2.0}})

    def test_section_not_mapping(self):
        """Test section not mapping"""
        with pytest.raises(ConfigurationError):
            CalibrationConfig.from_dict({"grid": [1, 2]})

    def test_bad_value(self):
        """Test bad value"""
        with pytest.raises(ConfigurationError):
            CalibrationConfig.from_dict({"optimizer": {"huber_threshold_px": "wide"}})

    def test_to_dict_round_trip(self):
        """Test to dict round trip"""
        cfg = CalibrationConfig.from_dict({"session": {"optimize_every": 3, "covariance_mode": "approximate"}})
        assert CalibrationConfig.from_dict(cfg.to_dict()) == cfg


class TestValidation:
    """Test cases for value checks"""

    @pytest.mark.parametrize(
        "factory",
        [
            lambda: OptimizerConfig(huber_threshold_px=0.0),
            lambda: OptimizerConfig(max_iterations=0),
            lambda: OptimizerConfig(min_matches=9),
            lambda: GridConfig(cols=0),
            lambda: GridConfig(cell_capacity=0),
            lambda: RejectionConfig(ransac_confidence=1.0),
            lambda: RejectionConfig(seed=-1),
            lambda: SessionConfig(optimize_every=0),
            lambda: SessionConfig(covariance_mode="diagonal"),
            lambda: SceneConfig(depth_min=5.0, depth_max=2.0),
            lambda: SceneConfig(outlier_fraction=1.0),
        ],
    )
    def test_rejected(self, factory):
        """Test invalid values raise ConfigurationError"""
        with pytest.raises(ConfigurationError):
            factory()

    def test_is_value_error(self):
        """Test is value error"""
        with pytest.raises(ValueError):
            GridConfig(rows=-1)


class TestLoadSave:
    """Test cases for YAML persistence"""

    def test_save_and_load(self, tmp_path):
        """Test save and load"""
        cfg = CalibrationConfig.from_dict({"grid": {"cols": 4, "rows": 3}, "scene": {"frames": 2}})
        path = tmp_path / "config.yaml"
        cfg.save(path)
        assert CalibrationConfig.load(path) == cfg

    def test_yaml_literal(self, tmp_path):
        """Test yaml literal"""
        path = tmp_path / "config.yaml"
        path.write_text("session:\n  convergence_threshold: 1e-6\n", encoding="utf-8")
        assert CalibrationConfig.load(path).session.convergence_threshold == 1e-6

    def test_invalid_yaml(self, tmp_path):
        """Test invalid yaml"""
        path = tmp_path / "config.yaml"
        path.write_text("grid: {cols: 4\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            CalibrationConfig.load(path)

    def test_with_seed(self):
        """Test with seed"""
        cfg = CalibrationConfig().with_seed(42)
        assert cfg.rejection.seed == 42
        assert cfg.scene.seed == 42
        assert cfg.grid == CalibrationConfig().grid

"""
Pytest configuration and fixtures
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from epical.config import SceneConfig
from epical.core import normalize_matches
from epical.simulator import default_ground_truth, generate_frames, perturb_extrinsic, write_dataset


@pytest.fixture
def truth():
    """Default simulated rig with its ground-truth extrinsic"""
    return default_ground_truth()


@pytest.fixture
def rig(truth):
    return truth.rig


@pytest.fixture
def noiseless_matches(truth):
    """One frame of 300 exact correspondences"""
    cfg = SceneConfig(num_points_per_frame=300, frames=1, seed=3)
    return generate_frames(cfg, truth).frames[0]


@pytest.fixture
def noiseless_normalized(rig, noiseless_matches):
    return normalize_matches(rig, noiseless_matches)


@pytest.fixture
def prior(truth):
    """Ground truth off by 3 degrees per axis and 2 degrees in direction"""
    return perturb_extrinsic(truth.extrinsic, 3.0, 2.0)


@pytest.fixture
def dataset_dir(tmp_path, truth, prior):
    """Small noiseless dataset directory written by the simulator"""
    cfg = SceneConfig(num_points_per_frame=150, frames=3, seed=11)
    sequence = generate_frames(cfg, truth)
    return write_dataset(tmp_path / "run", sequence, prior)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

"""
Integration tests for epical on simulated sequences

These tests run the complete calibration stack end to end:
- Jacobian and fast-covariance oracles over many random configurations
- Recovery from a 3 degree prior, noiseless and at 0.5 px noise
- Covariance consistency by Monte Carlo
- Outlier rejection through the prior gate, RANSAC and Huber weighting
- Termination on near scenes and its absence on far ones
- Fresh points every frame against a static scene
- Timing of one optimize + covariance pass on a full buffer
- Byte-identical reports from the command line
"""

import os
import sys
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from epical.cli import run_cli
from epical.config import CalibrationConfig, OptimizerConfig, SceneConfig, SessionConfig
from epical.core import essential_from, normalize_matches, pixel_arrays, pixel_epipolar_distances
from epical.covariance import NoiseModel, estimate_covariance
from epical.manifold import axis_rotation_errors_deg, direction_error_deg, finding_bases, rotation_error_deg
from epical.optimizer import MatchArrays, optimize
from epical.pipeline import CalibrationSession
from epical.selfcheck import check_fast_covariance, check_jacobian
from epical.simulator import generate_frames, generate_scene, perturb_extrinsic, project_points

pytestmark = pytest.mark.integration


def simulate(truth, n, sigma_px, seed, **scene):
    cfg = SceneConfig(num_points_per_frame=n, frames=1, sigma_px=sigma_px, seed=seed, **scene)
    return normalize_matches(truth.rig, generate_frames(cfg, truth).frames[0])


def tangent_error(reference, estimate):
    """Error state that retracts ``reference`` onto ``estimate``"""
    basis = finding_bases(reference.t)
    dtheta = Rotation.from_matrix(reference.R.T @ estimate.R).as_rotvec()
    t = estimate.t / (estimate.t @ reference.t)
    return np.concatenate([dtheta, [t @ basis.b1, t @ basis.b2]])


def assert_on_manifold(result):
    for ext in result.trajectory:
        assert abs(np.linalg.norm(ext.t) - 1.0) < 1e-12
        assert np.max(np.abs(ext.R.T @ ext.R - np.eye(3))) < 1e-9
    for before, after in result.cost_history:
        assert after <= before + 1e-12


class TestOracles:
    """Analytic pieces against independent oracles"""

    def test_jacobian_thousand_configurations(self):
        """Test jacobian thousand configurations"""
        result = check_jacobian(np.random.default_rng(0), trials=1000)
        assert result.passed, result.detail

    def test_fast_covariance_equals_full(self):
        """Test fast covariance equals full"""
        result = check_fast_covariance(np.random.default_rng(1), trials=100)
        assert result.passed, result.detail


class TestRecovery:
    """Refinement of a perturbed prior"""

    def test_three_degree_prior_noiseless(self, truth, prior):
        """Test three degree prior noiseless"""
        matches = simulate(truth, 2000, 0.0, seed=31)
        noise = NoiseModel.from_pixel_sigma(0.5, truth.rig)
        result = optimize(prior, matches, OptimizerConfig(), noise, truth.rig)
        assert rotation_error_deg(result.estimate.R, truth.extrinsic.R) < 0.01
        assert direction_error_deg(result.estimate.t, truth.extrinsic.t) < 0.01
        assert result.iterations <= 25
        assert_on_manifold(result)

    def test_noisy_full_buffer(self, truth, prior):
        """4000 matches at 0.5 px: every axis within 0.1 deg, y usually the weakest"""
        noise = NoiseModel.from_pixel_sigma(0.5, truth.rig)
        errors = []
        for trial in range(50):
            matches = simulate(truth, 4000, 0.5, seed=1000 + trial)
            result = optimize(prior, matches, OptimizerConfig(), noise, truth.rig)
            assert_on_manifold(result)
            errors.append(axis_rotation_errors_deg(result.estimate.R, truth.extrinsic.R))
        errors = np.array(errors)
        assert np.all(errors < 0.1)
        assert np.mean(np.argmax(errors, axis=1) == 1) >= 0.6


class TestCovarianceConsistency:
    """Predicted covariance against Monte Carlo spread"""

    def test_normalized_squared_error(self, truth):
        """Test normalized squared error"""
        ext = truth.extrinsic
        prior = perturb_extrinsic(ext, 1.0, 1.0)
        noise = NoiseModel.from_pixel_sigma(0.5, truth.rig)
        errors, nees, predicted = [], [], []
        for run in range(200):
            matches = MatchArrays.from_matches(simulate(truth, 500, 0.5, seed=5000 + run))
            result = optimize(prior, matches, OptimizerConfig(), noise, truth.rig)
            cov = estimate_covariance(ext, matches, noise)
            e = tangent_error(ext, result.estimate)
            errors.append(e)
            nees.append(e @ np.linalg.solve(cov.sigma_delta, e))
            predicted.append(np.diag(cov.sigma_delta))
        assert 3.5 <= np.mean(nees) <= 7.0
        ratio = np.var(np.array(errors), axis=0) / np.mean(predicted, axis=0)
        assert np.all((ratio >= 0.5) & (ratio <= 2.0)), ratio


class TestOutlierRobustness:
    """Prior gate, RANSAC and Huber weighting against uniform outliers"""

    def test_outliers_never_reach_the_buffer(self, truth, prior):
        """Test outliers never reach the buffer"""
        config = CalibrationConfig()
        rig = truth.rig
        E_true = essential_from(truth.extrinsic)
        clean_errors, robust_errors, clean_buffers = [], [], 0
        for trial in range(20):
            cfg = SceneConfig(num_points_per_frame=300, frames=3, sigma_px=0.5, outlier_fraction=0.2, seed=200 + trial)
            seq = generate_frames(cfg, truth)
            clean = [
                [m for m, flag in zip(frame, flags) if not flag]
                for frame, flags in zip(seq.frames, seq.truth.outlier_labels)
            ]
            robust = CalibrationSession(prior, rig, config).run(seq.frames, stop_on_termination=False)
            reference = CalibrationSession(prior, rig, config).run(clean, stop_on_termination=False)
            robust_errors.append(rotation_error_deg(robust.estimate.R, truth.extrinsic.R))
            clean_errors.append(rotation_error_deg(reference.estimate.R, truth.extrinsic.R))

            px_l, px_r = pixel_arrays([m.pixel for m in robust.buffer.matches()])
            dist = pixel_epipolar_distances(rig.left, rig.right, E_true, px_l, px_r)
            clean_buffers += int(np.nanmax(dist) <= 4.0)
        assert clean_buffers >= 19
        assert np.mean(robust_errors) <= 2.0 * np.mean(clean_errors) + 0.002


class TestTermination:
    """lambda_max as the stopping signal"""

    def test_far_scene_never_terminates(self, truth):
        """Test far scene never terminates"""
        cfg = SceneConfig(num_points_per_frame=200, frames=100, depth_min=500.0, depth_max=1000.0, sigma_px=0.5, seed=7)
        seq = generate_frames(cfg, truth)
        config = CalibrationConfig()
        state = CalibrationSession(perturb_extrinsic(truth.extrinsic, 1.0, 1.0), truth.rig, config).run(seq.frames)
        assert not state.terminated
        assert state.frames_processed == 100
        threshold = config.session.convergence_threshold
        assert all(rec.lambda_max > threshold for rec in state.trace)

    def test_near_scene_terminates(self, truth):
        """Test near scene terminates"""
        cfg = SceneConfig(num_points_per_frame=400, frames=50, depth_min=0.3, depth_max=2.0, sigma_px=0.5, seed=8)
        seq = generate_frames(cfg, truth)
        config = CalibrationConfig()
        state = CalibrationSession(perturb_extrinsic(truth.extrinsic, 1.0, 1.0), truth.rig, config).run(seq.frames)
        assert state.terminated
        assert state.frames_processed <= 50
        assert state.trace[-1].lambda_max < config.session.convergence_threshold
        assert state.trace[-1].lambda_max < state.trace[0].lambda_max

    def test_near_scene_lambda_strictly_decreases(self, truth):
        """The first ten optimizing frames of a close textured scene each tighten the estimate"""
        cfg = SceneConfig(num_points_per_frame=400, frames=10, depth_min=0.3, depth_max=2.0, sigma_px=0.5, seed=8)
        seq = generate_frames(cfg, truth)
        config = CalibrationConfig(session=SessionConfig(convergence_threshold=1e-30))
        state = CalibrationSession(perturb_extrinsic(truth.extrinsic, 1.0, 1.0), truth.rig, config).run(seq.frames)
        lambdas = [rec.lambda_max for rec in state.trace if rec.optimized]
        assert len(lambdas) == 10
        assert all(after < before for before, after in zip(lambdas, lambdas[1:]))


class TestDynamicScene:
    """Fresh points every frame calibrate as well as a static scene"""

    def test_fresh_points_match_static_scene(self, truth):
        """Test fresh points match static scene"""
        rig = truth.rig
        prior = perturb_extrinsic(truth.extrinsic, 1.0, 1.0)
        config = CalibrationConfig(session=SessionConfig(convergence_threshold=1e-30))
        dynamic_errors, static_errors = [], []
        for trial in range(10):
            cfg = SceneConfig(num_points_per_frame=300, frames=5, sigma_px=0.5, seed=600 + trial)
            dynamic = generate_frames(cfg, truth).frames
            points = generate_scene(cfg, truth, 0)
            noise_rng = np.random.default_rng(900 + trial)
            static = [project_points(truth, points, cfg, noise_rng, frame_id=k) for k in range(cfg.frames)]
            for frames, errors in ((dynamic, dynamic_errors), (static, static_errors)):
                state = CalibrationSession(prior, rig, config).run(frames)
                errors.append(rotation_error_deg(state.estimate.R, truth.extrinsic.R))
        assert max(dynamic_errors + static_errors) < 0.1
        assert np.mean(dynamic_errors) <= 2.0 * np.mean(static_errors) + 0.002


class TestTiming:
    """Wall time of one refinement on a full buffer"""

    def test_optimize_and_covariance_within_budget(self, truth):
        """Test optimize and covariance within budget"""
        noise = NoiseModel.from_pixel_sigma(0.5, truth.rig)
        matches = MatchArrays.from_matches(simulate(truth, 4000, 0.5, seed=77))
        prior = perturb_extrinsic(truth.extrinsic, 1.0, 1.0)
        cfg = OptimizerConfig()
        times = []
        for _ in range(20):
            start = time.perf_counter()
            result = optimize(prior, matches, cfg, noise, truth.rig)
            estimate_covariance(result.estimate, matches, noise)
            times.append(time.perf_counter() - start)
        assert np.median(times) <= 0.1


class TestCommandLine:
    """simulate + calibrate through the command line"""

    def test_reports_are_byte_identical(self, tmp_path):
        """Test reports are byte identical"""
        reports = []
        for name in ("a", "b"):
            data = tmp_path / name
            out = tmp_path / f"{name}.yaml"
            assert run_cli(["-q", "simulate", "--out", str(data), "--frames", "4", "--sigma-px", "0.5",
                            "--outliers", "0.1", "--seed", "42"]) == 0
            assert run_cli(["-q", "calibrate", "--dataset", str(data), "--out", str(out), "--seed", "42"]) == 0
            reports.append(out.read_bytes())
        assert reports[0] == reports[1]

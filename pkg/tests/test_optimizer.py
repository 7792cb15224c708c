"""
Unit tests for epical.optimizer
"""

import os
import sys

import numpy as np
import pytest
from unittest.mock import patch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from epical.config import OptimizerConfig, SceneConfig
from epical.core import ExtrinsicEstimate, NormalizedMatch, normalize_matches
from epical.covariance import NoiseModel
from epical.exceptions import DegenerateGeometryError, InsufficientDataError
from epical.manifold import direction_error_deg, finding_bases, rotation_error_deg
from epical.optimizer import (
    MatchArrays,
    assemble,
    huber_weight,
    normalization_weight,
    optimize,
    residual_and_jacobian,
    solve_step,
)
from epical.selfcheck import numeric_jacobian, random_extrinsic, random_match
from epical.simulator import generate_frames


class TestResidualAndJacobian:
    """Test cases for the analytic Jacobian"""

    def setup_method(self):
        self.ext = ExtrinsicEstimate(np.eye(3), np.array([1.0, 0.0, 0.0]))
        self.m = NormalizedMatch(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.1, 1.0]))

    def test_by_hand(self):
        """Test residual and Jacobian computed by hand"""
        r, J = residual_and_jacobian(self.ext, finding_bases(self.ext.t), self.m)
        assert r == pytest.approx(-0.1)
        np.testing.assert_allclose(J[:3], [-1.0, 0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(J[3:], [0.0, 0.0], atol=1e-15)

    def test_against_finite_differences(self, rng):
        """Test against finite differences"""
        for _ in range(100):
            ext = random_extrinsic(rng)
            m = random_match(rng)
            _, J = residual_and_jacobian(ext, finding_bases(ext.t), m)
            np.testing.assert_allclose(J, numeric_jacobian(ext, m), rtol=1e-6, atol=1e-8)


class TestWeights:
    """Test cases for the Huber and normalization weights"""

    @pytest.mark.parametrize("r, expected", [(0.002, 1.0), (0.008, 0.5), (0.0, 1.0), (-0.008, 0.5)])
    def test_huber(self, r, expected):
        """Test Huber weights inside and outside the threshold"""
        assert huber_weight(r, 0.004) == pytest.approx(expected)

    def test_normalization_by_hand(self):
        """cov(r) = 2e-6 gives 1 / sqrt(2e-6)"""
        ext = ExtrinsicEstimate(np.eye(3), np.array([1.0, 0.0, 0.0]))
        m = NormalizedMatch(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        sigma = 1e-6 * np.diag([1.0, 1.0, 0.0])
        assert normalization_weight(ext, m, sigma) == pytest.approx(1.0 / np.sqrt(2e-6), rel=1e-5)

    def test_normalization_noiseless_floor(self):
        """Test normalization noiseless floor"""
        ext = ExtrinsicEstimate(np.eye(3), np.array([1.0, 0.0, 0.0]))
        m = NormalizedMatch(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        assert normalization_weight(ext, m, np.zeros((3, 3))) == pytest.approx(1e6)


class TestAssemble:
    """Test cases for the normal equations"""

    def setup_method(self):
        self.cfg = OptimizerConfig()

    def test_repeated_row(self, rig):
        """N copies of one match give N times that row's contribution"""
        ext = ExtrinsicEstimate(np.eye(3), np.array([1.0, 0.0, 0.0]))
        m = NormalizedMatch(np.array([0.1, -0.2, 1.0]), np.array([0.3, -0.19, 1.0]))
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        basis = finding_bases(ext.t)
        one = assemble(ext, basis, [m] * 10, self.cfg, noise, rig)
        row = one.rows()[0]
        np.testing.assert_allclose(one.JtWJ, 10 * row.w * np.outer(row.J, row.J), rtol=1e-12)
        np.testing.assert_allclose(one.JtWr, 10 * row.w * row.r * row.J, rtol=1e-12)

    def test_gradient_vanishes_at_truth(self, truth, rig, noiseless_normalized):
        """Test gradient vanishes at truth"""
        cfg = OptimizerConfig(normalize_weights=False)
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        ext = truth.extrinsic
        ne = assemble(ext, finding_bases(ext.t), noiseless_normalized, cfg, noise, rig)
        assert np.max(np.abs(ne.JtWr)) < 1e-10
        assert ne.rms_px < 1e-9

    def test_permutation_invariance(self, truth, rig, noiseless_normalized, prior):
        """Shuffled inputs give bit-identical normal equations"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        basis = finding_bases(prior.t)
        shuffled = list(noiseless_normalized)
        np.random.default_rng(7).shuffle(shuffled)
        a = assemble(prior, basis, noiseless_normalized, self.cfg, noise, rig)
        b = assemble(prior, basis, shuffled, self.cfg, noise, rig)
        np.testing.assert_array_equal(a.JtWJ, b.JtWJ)
        np.testing.assert_array_equal(a.JtWr, b.JtWr)
        assert a.cost == b.cost

    def test_huber_threshold_in_pixels(self, rig, noiseless_normalized, prior):
        """Residuals beyond huber_threshold_px / min_focal are down-weighted"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        ne = assemble(prior, finding_bases(prior.t), noiseless_normalized, self.cfg, noise, rig)
        c_t = self.cfg.huber_threshold_px / rig.min_focal
        big = np.abs(ne.residuals) > c_t
        assert big.any()
        np.testing.assert_allclose(ne.huber_weights[big], c_t / np.abs(ne.residuals[big]))
        np.testing.assert_array_equal(ne.huber_weights[~big], 1.0)

    def test_too_few_matches(self, rig, noiseless_normalized, truth):
        """Test too few matches"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        ext = truth.extrinsic
        with pytest.raises(InsufficientDataError):
            assemble(ext, finding_bases(ext.t), noiseless_normalized[:9], self.cfg, noise, rig)

    def test_canonical_order(self, noiseless_normalized):
        """Test canonical order"""
        arrays = MatchArrays.from_matches(noiseless_normalized)
        keys = [tuple(row) for row in np.column_stack([arrays.f[:, :2], arrays.f_prime[:, :2]])]
        assert keys == sorted(keys)


class TestSolveStep:
    """Test cases for solve_step"""

    def test_diagonal_system(self):
        """Test diagonal system"""
        step = solve_step(4.0 * np.eye(5), np.array([4.0, 0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(step.as_vector(), [-1.0, 0.0, 0.0, 0.0, 0.0])

    def test_stationary_point(self):
        """Test stationary point"""
        step = solve_step(np.eye(5), np.zeros(5))
        np.testing.assert_array_equal(step.as_vector(), np.zeros(5))

    def test_random_spd(self, rng):
        """Test random spd"""
        A = rng.normal(size=(8, 5))
        H = A.T @ A
        g = rng.normal(size=5)
        delta = solve_step(H, g).as_vector()
        assert np.linalg.norm(H @ delta + g) < 1e-10

    def test_singular_system(self):
        """A zero normal matrix stays singular after damping escalation"""
        with pytest.raises(DegenerateGeometryError):
            solve_step(np.zeros((5, 5)), np.ones(5))

    def test_indefinite_system(self):
        """Test indefinite system"""
        with pytest.raises(DegenerateGeometryError):
            solve_step(-np.eye(5), np.ones(5))

    def test_rank_deficient_is_damped(self):
        """Relative damping rescues a matrix that is singular in one direction"""
        H = np.diag([1.0, 1.0, 1.0, 1.0, 0.0])
        step = solve_step(H, np.array([1.0, 0.0, 0.0, 0.0, 0.0]))
        assert np.all(np.isfinite(step.as_vector()))
        assert step.delta_theta[0] == pytest.approx(-1.0, rel=1e-6)


class TestOptimize:
    """Test cases for optimize"""

    def setup_method(self):
        self.cfg = OptimizerConfig()

    def test_prior_at_truth(self, truth, rig, noiseless_normalized):
        """Test prior at truth"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        result = optimize(truth.extrinsic, noiseless_normalized, self.cfg, noise, rig)
        assert result.converged
        assert result.iterations <= 2
        np.testing.assert_allclose(result.estimate.R, truth.extrinsic.R, atol=1e-10)
        np.testing.assert_allclose(result.estimate.t, truth.extrinsic.t, atol=1e-10)

    def test_recovers_from_perturbed_prior(self, truth, prior):
        """2000 exact matches pull a 3 deg / 2 deg prior back to the truth"""
        seq = generate_frames(SceneConfig(num_points_per_frame=2000, frames=1, seed=5), truth)
        rig = truth.rig
        matches = normalize_matches(rig, seq.frames[0])
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        result = optimize(prior, matches, self.cfg, noise, rig)
        assert rotation_error_deg(result.estimate.R, truth.extrinsic.R) < 0.01
        assert direction_error_deg(result.estimate.t, truth.extrinsic.t) < 0.01
        assert result.iterations <= 25
        assert result.converged

    def test_cost_history_non_increasing(self, truth, rig, noiseless_normalized, prior):
        """Test cost history non increasing"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        result = optimize(prior, noiseless_normalized, self.cfg, noise, rig)
        assert result.cost_history
        for before, after in result.cost_history:
            assert after <= before + 1e-12
        assert len(result.trajectory) == len(result.cost_history) + 1
        assert result.trajectory[0] is prior
        for ext in result.trajectory:
            assert abs(np.linalg.norm(ext.t) - 1.0) < 1e-12
            assert np.max(np.abs(ext.R.T @ ext.R - np.eye(3))) < 1e-9

    def test_iteration_cap(self, rig, noiseless_normalized, prior):
        """Test iteration cap"""
        cfg = OptimizerConfig(max_iterations=1)
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        result = optimize(prior, noiseless_normalized, cfg, noise, rig)
        assert result.iterations == 1
        assert not result.converged

    def test_too_few_matches(self, rig, noiseless_normalized, prior):
        """Test too few matches"""
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        with pytest.raises(InsufficientDataError):
            optimize(prior, noiseless_normalized[:5], self.cfg, noise, rig)

    @patch("epical.optimizer.solve_step")
    def test_degenerate_reports_best_estimate(self, mock_solve, rig, noiseless_normalized, prior):
        """A singular first iteration hands back the prior"""
        mock_solve.side_effect = DegenerateGeometryError("singular")
        noise = NoiseModel.from_pixel_sigma(0.5, rig)
        with pytest.raises(DegenerateGeometryError) as info:
            optimize(prior, noiseless_normalized, self.cfg, noise, rig)
        assert info.value.best_estimate is prior

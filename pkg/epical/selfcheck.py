"""
Numerical self-checks: analytic pieces against independent oracles
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy import linalg

from .core import ExtrinsicEstimate, NormalizedMatch, skew
from .covariance import approx_covariance, full_covariance, power_iteration_lambda_max
from .manifold import ErrorState, exp_map, finding_bases, retract
from .optimizer import residual_and_jacobian, residuals_and_jacobians

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_extrinsic(rng: np.random.Generator) -> ExtrinsicEstimate:
    """Random rotation (rotation vector of scale 0.5 rad) with a random unit direction"""
    R = exp_map(rng.normal(0.0, 0.5, 3))
    t = rng.normal(size=3)
    return ExtrinsicEstimate(R, t / np.linalg.norm(t))


def random_match(rng: np.random.Generator) -> NormalizedMatch:
    """Pair of random bearings on the z = 1 plane"""
    return NormalizedMatch(
        np.array([*rng.uniform(-1.0, 1.0, 2), 1.0]),
        np.array([*rng.uniform(-1.0, 1.0, 2), 1.0]),
    )


def numeric_jacobian(ext: ExtrinsicEstimate, m: NormalizedMatch, h: float = 1e-6) -> np.ndarray:
    """Central differences of the residual through the retraction"""
    basis = finding_bases(ext.t)
    J = np.empty(5)
    for k in range(5):
        e = np.zeros(5)
        e[k] = h
        r_plus, _ = residual_and_jacobian(retract(ext, basis, ErrorState.from_vector(e)), basis, m)
        r_minus, _ = residual_and_jacobian(retract(ext, basis, ErrorState.from_vector(-e)), basis, m)
        J[k] = (r_plus - r_minus) / (2.0 * h)
    return J


def check_jacobian(rng: np.random.Generator, trials: int = 1000) -> CheckResult:
    """Analytic Jacobian against central differences through the retraction"""
    worst = 0.0
    for _ in range(trials):
        ext = random_extrinsic(rng)
        m = random_match(rng)
        _, analytic = residual_and_jacobian(ext, finding_bases(ext.t), m)
        numeric = numeric_jacobian(ext, m)
        scale = max(np.max(np.abs(analytic)), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return CheckResult("jacobian", worst < 1e-6, f"max relative error {worst:.2e} over {trials} configurations")


def series_exp(delta_theta: np.ndarray, terms: int = 20) -> np.ndarray:
    """Truncated matrix-exponential series of [delta_theta]x"""
    K = skew(delta_theta)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ K / k
        out = out + term
    return out


def check_exp_map(rng: np.random.Generator, trials: int = 200) -> CheckResult:
    """exp_map against the truncated matrix-exponential series"""
    worst = 0.0
    for _ in range(trials):
        w = rng.normal(size=3)
        w *= rng.uniform(0.0, 0.1) / np.linalg.norm(w)
        worst = max(worst, float(np.max(np.abs(exp_map(w) - series_exp(w)))))
    return CheckResult("exp_map", worst < 1e-12, f"max deviation from series {worst:.2e}")


def check_lambda_max(rng: np.random.Generator, trials: int = 50) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        spectrum = np.sort(rng.uniform(0.1, 1.0, 5))
        spectrum[-1] = 2.0 * spectrum[-2]
        A = Q @ np.diag(spectrum) @ Q.T
        A = 0.5 * (A + A.T)
        eig = float(linalg.eigh(A, eigvals_only=True)[-1])
        power = power_iteration_lambda_max(A)
        worst = max(worst, abs(eig - power) / eig)
    return CheckResult("lambda_max", worst < 1e-9, f"max relative deviation from power iteration {worst:.2e}")


def check_fast_covariance(rng: np.random.Generator, trials: int = 100) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        ext = random_extrinsic(rng)
        f = np.column_stack([rng.uniform(-1.0, 1.0, (50, 2)), np.ones(50)])
        fp = np.column_stack([rng.uniform(-1.0, 1.0, (50, 2)), np.ones(50)])
        _, J = residuals_and_jacobians(ext, finding_bases(ext.t), f, fp)
        c_r = float(rng.uniform(1e-7, 1e-5))
        full = full_covariance(J, np.full(50, c_r))
        fast = approx_covariance(J.T @ J, c_r)
        rel = np.max(np.abs(full.sigma_delta - fast.sigma_delta)) / np.max(np.abs(full.sigma_delta))
        worst = max(worst, float(rel))
    return CheckResult("fast_covariance", worst < 1e-9, f"max relative difference {worst:.2e}")


CHECKS: List[Callable[[np.random.Generator], CheckResult]] = [
    check_jacobian,
    check_exp_map,
    check_lambda_max,
    check_fast_covariance,
]


def run_selfcheck(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for check in CHECKS:
        result = check(rng)
        logger.debug("%s: %s (%s)", result.name, "pass" if result.passed else "FAIL", result.detail)
        results.append(result)
    return results

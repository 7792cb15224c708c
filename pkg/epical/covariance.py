"""
Covariance of the 5-DOF extrinsic estimate

First-order propagation of bearing noise through the epipolar residuals,
its cheap equal-variance approximation, and the largest-eigenvalue
termination signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .core import (
    EssentialLike,
    ExtrinsicEstimate,
    Matrix,
    NormalizedMatch,
    StereoRig,
    essential_array,
    essential_from,
)
from .exceptions import InvalidInputError
from .manifold import finding_bases

logger = logging.getLogger(__name__)

# Relative eigenvalue floor below which the information matrix is singular
SINGULAR_RTOL = 1e-12


def _check_bearing_covariance(sigma: np.ndarray, name: str) -> np.ndarray:
    sigma = np.array(sigma, dtype=float)
    if sigma.shape != (3, 3) or not np.all(np.isfinite(sigma)):
        raise InvalidInputError(f"{name} must be a finite 3x3 matrix")
    if np.any(sigma[2, :] != 0) or np.any(sigma[:, 2] != 0):
        raise InvalidInputError(f"{name} must have zero third row and column")
    if np.max(np.abs(sigma - sigma.T)) > 1e-15 * max(1.0, np.max(np.abs(sigma))):
        raise InvalidInputError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(sigma)) < -1e-18:
        raise InvalidInputError(f"{name} must be positive semidefinite")
    sigma.setflags(write=False)
    return sigma


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Bearing noise of both cameras

    Attributes:
        sigma_px: pixel noise standard deviation
        sigma_f_left: 3x3 covariance of left bearings
        sigma_f_right: 3x3 covariance of right bearings
    """

    sigma_px: float
    sigma_f_left: Matrix
    sigma_f_right: Matrix

    def __post_init__(self):
        if not np.isfinite(self.sigma_px) or self.sigma_px < 0:
            raise InvalidInputError(f"sigma_px must be >= 0, got {self.sigma_px}")
        object.__setattr__(self, "sigma_f_left", _check_bearing_covariance(self.sigma_f_left, "sigma_f_left"))
        object.__setattr__(self, "sigma_f_right", _check_bearing_covariance(self.sigma_f_right, "sigma_f_right"))

    @classmethod
    def from_pixel_sigma(cls, sigma_px: float, rig: StereoRig) -> "NoiseModel":
        """diag((sigma/fx)^2, (sigma/fy)^2, 0) per camera"""
        def bearing_cov(K):
            return np.diag([(sigma_px / K.fx) ** 2, (sigma_px / K.fy) ** 2, 0.0])

        return cls(float(sigma_px), bearing_cov(rig.left), bearing_cov(rig.right))


@dataclass(frozen=True, eq=False)
class CalibrationCovariance:
    """Covariance of the tangent-space error state

    ``lambda_max`` is ``inf`` when the information matrix is singular.
    """

    sigma_delta: Matrix
    lambda_max: float
    approximate: bool = False

    @property
    def singular(self) -> bool:
        """True when some direction is unobservable"""
        return not np.isfinite(self.lambda_max)

    @property
    def log10_lambda_max(self) -> float:
        """Base-10 logarithm of lambda_max"""
        return float(np.log10(self.lambda_max)) if self.lambda_max > 0 else float("-inf")

    @classmethod
    def unknown(cls) -> "CalibrationCovariance":
        """Placeholder before any optimization has run"""
        return cls(np.full((5, 5), np.inf), float("inf"), False)


def residual_covariances(
    E: EssentialLike, f: np.ndarray, f_prime: np.ndarray, noise: NoiseModel
) -> np.ndarray:
    """Predicted variance of every residual ``f'^T E f``

    The second-order cross term of the two noise sources is dropped.
    """
    E = essential_array(E)
    a = f_prime @ E
    b = f @ E.T
    left = np.einsum("ni,ij,nj->n", a, noise.sigma_f_left, a)
    right = np.einsum("ni,ij,nj->n", b, noise.sigma_f_right, b)
    return left + right


def residual_covariance(E: EssentialLike, m: NormalizedMatch, noise: NoiseModel) -> float:
    """Variance of the residual of one match under bearing noise"""
    return float(residual_covariances(E, m.f[None, :], m.f_prime[None, :], noise)[0])


def _from_information(information: Matrix, scale: float, approximate: bool) -> CalibrationCovariance:
    info = 0.5 * (information + information.T)
    if not np.all(np.isfinite(info)):
        raise InvalidInputError("Information matrix must be finite")
    eigvals = linalg.eigh(info, eigvals_only=True)
    if eigvals[-1] <= 0 or eigvals[0] <= SINGULAR_RTOL * eigvals[-1]:
        logger.debug("Singular information matrix, eigenvalues %s", eigvals)
        sigma = scale * np.linalg.pinv(info, hermitian=True)
        return CalibrationCovariance(0.5 * (sigma + sigma.T), float("inf"), approximate)

    sigma = scale * linalg.cho_solve(linalg.cho_factor(info), np.eye(info.shape[0]))
    sigma = 0.5 * (sigma + sigma.T)
    lambda_max = float(linalg.eigh(sigma, eigvals_only=True)[-1])
    return CalibrationCovariance(sigma, lambda_max, approximate)


def information_matrix(J: np.ndarray, residual_covs: Sequence[float]) -> Matrix:
    """J^T diag(1 / cov) J"""
    J = np.asarray(J, dtype=float)
    covs = np.asarray(residual_covs, dtype=float)
    return np.einsum("ni,n,nj->ij", J, 1.0 / covs, J)


def full_covariance(J: np.ndarray, residual_covs: Sequence[float]) -> CalibrationCovariance:
    """(J^T Sigma_r^-1 J)^-1 for a diagonal residual covariance"""
    J = np.asarray(J, dtype=float)
    covs = np.asarray(residual_covs, dtype=float)
    if J.ndim != 2 or J.shape[1] != 5:
        raise InvalidInputError(f"J must be N x 5, got shape {J.shape}")
    if J.shape[0] < 5:
        raise InvalidInputError(f"Need at least 5 rows, got {J.shape[0]}")
    if covs.shape != (J.shape[0],) or not np.all(covs > 0):
        raise InvalidInputError("residual_covs must be positive, one per row of J")
    return _from_information(information_matrix(J, covs), 1.0, approximate=False)


def approx_covariance(JtWJ: Matrix, c_r: float) -> CalibrationCovariance:
    """c_r (J^T W J)^-1, exact when every residual variance equals c_r"""
    if not c_r > 0:
        raise InvalidInputError(f"c_r must be > 0, got {c_r}")
    return _from_information(np.asarray(JtWJ, dtype=float), float(c_r), approximate=True)


def convergence_check(cov: CalibrationCovariance, threshold: float) -> bool:
    """True iff lambda_max is below ``threshold``"""
    if not threshold > 0:
        raise InvalidInputError(f"threshold must be > 0, got {threshold}")
    return bool(cov.lambda_max < threshold)


def estimate_covariance(
    ext: ExtrinsicEstimate,
    matches,
    noise: NoiseModel,
    approximate: bool = False,
    normal_matrix: Optional[Matrix] = None,
) -> CalibrationCovariance:
    """Covariance of ``ext`` given the matches it was estimated from

    With ``approximate`` the residual variances are replaced by their mean
    and ``normal_matrix`` (the unwhitened J^T W J of the optimizer, J^T J
    when omitted) is reused.
    """
    from .optimizer import MatchArrays, residuals_and_jacobians  # circular

    arrays = matches if isinstance(matches, MatchArrays) else MatchArrays.from_matches(matches)
    if len(arrays) < 5:
        raise InvalidInputError(f"Need at least 5 matches for a covariance, got {len(arrays)}")
    E = essential_from(ext)
    covs = residual_covariances(E, arrays.f, arrays.f_prime, noise)
    if not np.all(covs > 0):
        # noiseless model: nothing to propagate
        covs = np.maximum(covs, 1e-30)

    if approximate:
        if normal_matrix is None:
            _, J = residuals_and_jacobians(ext, finding_bases(ext.t), arrays.f, arrays.f_prime)
            normal_matrix = J.T @ J
        return approx_covariance(normal_matrix, float(np.mean(covs)))

    _, J = residuals_and_jacobians(ext, finding_bases(ext.t), arrays.f, arrays.f_prime)
    return full_covariance(J, covs)


def power_iteration_lambda_max(matrix: Matrix, iterations: int = 200) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration"""
    matrix = np.asarray(matrix, dtype=float)
    v = np.ones(matrix.shape[0]) / np.sqrt(matrix.shape[0])
    lam = 0.0
    for _ in range(iterations):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        lam = float(v @ matrix @ v)
    return lam

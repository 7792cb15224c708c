"""
Tangent-space machinery for SO(3) x S^2

The extrinsic lives on the product of the rotation group and the unit
sphere. Steps are taken in a 5-dimensional tangent space (3 rotation
components, 2 translation components along an orthonormal basis of the
sphere's tangent plane) and mapped back with :func:`retract`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .core import ExtrinsicEstimate, Matrix, Vector, skew
from .exceptions import InvalidInputError, StepTooLargeError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
TAYLOR_THRESHOLD = 1e-8

# Candidate axes per excluded (dominant) index
_CANDIDATES = {
    0: (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    1: (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    2: (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),
}


@dataclass(frozen=True, eq=False)
class TangentBasis:
    """Orthonormal basis (b1, b2) of the tangent plane of S^2 at t"""

    b1: Vector
    b2: Vector

    def as_matrix(self) -> Matrix:
        """3x2 matrix with the basis vectors as columns"""
        return np.column_stack([self.b1, self.b2])


@dataclass(frozen=True, eq=False)
class ErrorState:
    """Tangent-space step: rotation perturbation plus translation displacements"""

    delta_theta: Vector
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        dt = np.array(self.delta_theta, dtype=float)
        if dt.shape != (3,):
            raise InvalidInputError(f"delta_theta must be a 3-vector, got shape {dt.shape}")
        if not (np.all(np.isfinite(dt)) and np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise InvalidInputError("ErrorState components must be finite")
        object.__setattr__(self, "delta_theta", dt)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    def as_vector(self) -> Vector:
        """Stack as [delta_theta, alpha, beta]"""
        return np.array([*self.delta_theta, self.alpha, self.beta])

    @classmethod
    def from_vector(cls, delta: Sequence[float]) -> "ErrorState":
        """Inverse of :meth:`as_vector`"""
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (5,):
            raise InvalidInputError(f"Error state vector must have 5 entries, got shape {delta.shape}")
        return cls(delta[:3], delta[3], delta[4])

    @classmethod
    def zero(cls) -> "ErrorState":
        """The identity step"""
        return cls(np.zeros(3))

    @property
    def max_abs(self) -> float:
        """Infinity norm of the step"""
        return float(np.max(np.abs(self.as_vector())))


def projection(u: Sequence[float], v: Sequence[float]) -> Vector:
    """Component of v along u"""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    uu = float(u @ u)
    if not uu > 0:
        raise InvalidInputError("Cannot project onto a zero vector")
    return u * (float(u @ v) / uu)


def finding_bases(t_hat: Sequence[float]) -> TangentBasis:
    """Orthonormal tangent basis of the unit sphere at ``t_hat``

    The canonical axis most aligned with ``t_hat`` is excluded, the two
    remaining axes are orthogonalized against ``t_hat`` and each other.
    Ties resolve to the lowest index.

    Raises:
        InvalidInputError: if ``t_hat`` is zero, non-finite or not unit length
    """
    t = np.asarray(t_hat, dtype=float)
    if t.shape != (3,) or not np.all(np.isfinite(t)):
        raise InvalidInputError(f"t_hat must be a finite 3-vector, got {t_hat!r}")
    norm = np.linalg.norm(t)
    if norm == 0.0 or abs(norm - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"t_hat must be a unit vector, |t_hat|={norm!r}")

    idx = 0
    for i in (1, 2):
        if abs(t[i]) > abs(t[idx]):
            idx = i
    c1, c2 = _CANDIDATES[idx]

    b1 = c1 - projection(t, c1)
    b1 = b1 - projection(t, b1)
    b1 = b1 / np.linalg.norm(b1)

    b2 = c2 - projection(t, c2) - projection(b1, c2)
    b2 = b2 - projection(t, b2) - projection(b1, b2)
    b2 = b2 / np.linalg.norm(b2)
    return TangentBasis(b1, b2)


def exp_map(delta_theta: Sequence[float]) -> Matrix:
    """Rodrigues formula for exp([delta_theta]x)"""
    w = np.asarray(delta_theta, dtype=float)
    theta_sq = float(w @ w)
    theta = np.sqrt(theta_sq)
    if theta < TAYLOR_THRESHOLD:
        a = 1.0 - theta_sq / 6.0
        b = 0.5 - theta_sq / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta_sq
    K = skew(w)
    return np.eye(3) + a * K + b * (K @ K)


def _project_to_so3(R: Matrix) -> Matrix:
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def retract(ext: ExtrinsicEstimate, basis: TangentBasis, step: ErrorState) -> ExtrinsicEstimate:
    """Apply a tangent step: R <- R exp(dtheta), t <- normalize(t + a b1 + b b2)

    Raises:
        StepTooLargeError: if the translation update leaves no direction
    """
    R = ext.R @ exp_map(step.delta_theta)
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
        R = _project_to_so3(R)

    t = ext.t + step.alpha * basis.b1 + step.beta * basis.b2
    norm = np.linalg.norm(t)
    if not np.isfinite(norm) or norm < 1e-12:
        raise StepTooLargeError(
            f"Translation step (alpha={step.alpha}, beta={step.beta}) collapses the direction",
            best_estimate=ext,
        )
    return ext.with_pose(R, t / norm)


def rotation_error_deg(R_a: Matrix, R_b: Matrix) -> float:
    """Angle of the relative rotation R_a^T R_b in degrees"""
    return float(np.degrees(Rotation.from_matrix(np.asarray(R_a).T @ np.asarray(R_b)).magnitude()))


def direction_error_deg(t_a: Sequence[float], t_b: Sequence[float]) -> float:
    """Angle between two directions in degrees"""
    a = np.asarray(t_a, dtype=float)
    b = np.asarray(t_b, dtype=float)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def axis_rotation_errors_deg(R_est: Matrix, R_true: Matrix) -> Vector:
    """Absolute per-axis components (degrees) of the error rotation vector"""
    err = Rotation.from_matrix(np.asarray(R_true).T @ np.asarray(R_est))
    return np.abs(np.degrees(err.as_rotvec()))

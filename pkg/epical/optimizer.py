"""
Weighted Gauss-Newton on SO(3) x S^2

Each iteration linearizes the epipolar residuals at the current estimate,
solves the weighted normal equations for a 5-DOF tangent step and retracts
it onto the manifold. Weights are recomputed every iteration (IRLS) as the
product of a residual whitening term and a Huber term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .config import OptimizerConfig
from .core import (
    ExtrinsicEstimate,
    Matrix,
    NormalizedMatch,
    StereoRig,
    Vector,
    essential_from,
    pixel_epipolar_distances,
)
from .covariance import NoiseModel, residual_covariances
from .exceptions import DegenerateGeometryError, InsufficientDataError, InvalidInputError, StepTooLargeError
from .manifold import ErrorState, TangentBasis, finding_bases, retract

logger = logging.getLogger(__name__)

WEIGHT_EPS = 1e-12
MAX_DAMPING = 1e-3
MAX_COST_RETRIES = 8


@dataclass(frozen=True, eq=False)
class MatchArrays:
    """Column-stacked view of a list of normalized matches

    Rows are sorted by a lexicographic key over the bearing coordinates, so
    every reduction over them is independent of the input order.
    """

    f: np.ndarray
    f_prime: np.ndarray
    pixels_left: np.ndarray
    pixels_right: np.ndarray
    disparity: np.ndarray

    def __len__(self) -> int:
        """Number of matches"""
        return int(self.f.shape[0])

    @classmethod
    def from_matches(cls, matches: Sequence[NormalizedMatch]) -> "MatchArrays":
        """Stack and sort a list of normalized matches"""
        n = len(matches)
        f = np.empty((n, 3))
        fp = np.empty((n, 3))
        px_l = np.full((n, 2), np.nan)
        px_r = np.full((n, 2), np.nan)
        disparity = np.empty(n)
        for i, m in enumerate(matches):
            f[i] = m.f
            fp[i] = m.f_prime
            disparity[i] = m.disparity
            if m.pixel is not None:
                px_l[i] = (m.pixel.u_l, m.pixel.v_l)
                px_r[i] = (m.pixel.u_r, m.pixel.v_r)
        if n:
            # np.lexsort uses the last key as the primary one
            order = np.lexsort((fp[:, 1], fp[:, 0], f[:, 1], f[:, 0]))
            f, fp, px_l, px_r, disparity = f[order], fp[order], px_l[order], px_r[order], disparity[order]
        return cls(f, fp, px_l, px_r, disparity)


@dataclass(frozen=True, eq=False)
class ResidualRow:
    """One linearized residual with its combined weight"""

    r: float
    J: Vector
    w: float


@dataclass(frozen=True, eq=False)
class NormalEquations:
    """Weighted normal equations and residual statistics at one estimate

    Attributes:
        JtWJ: 5x5 weighted normal matrix
        JtWr: weighted gradient
        JtHJ: normal matrix with Huber weights only (fast covariance path)
        cost: weighted sum of squared residuals
        rms_normalized: RMS of the raw residuals
        rms_px: RMS one-sided epipolar distance in pixels (NaN without pixels)
    """

    JtWJ: Matrix
    JtWr: Vector
    JtHJ: Matrix
    cost: float
    rms_normalized: float
    rms_px: float
    residuals: np.ndarray
    jacobian: np.ndarray
    weights: np.ndarray
    huber_weights: np.ndarray
    residual_covs: np.ndarray

    def rows(self) -> List[ResidualRow]:
        """Per-match residual, Jacobian row and combined weight"""
        return [ResidualRow(float(r), J, float(w)) for r, J, w in zip(self.residuals, self.jacobian, self.weights)]


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    """Outcome of :func:`optimize`

    ``cost_history`` holds the (before, after) weighted cost of every
    accepted step, evaluated under that iteration's weights.
    ``trajectory`` starts with the prior and adds the estimate after every
    accepted step.
    """

    estimate: ExtrinsicEstimate
    iterations: int
    converged: bool
    final_rms_normalized: float
    final_rms_px: float
    normal_matrix: Matrix
    normal_equations: NormalEquations
    cost_history: List[Tuple[float, float]] = field(default_factory=list)
    trajectory: List[ExtrinsicEstimate] = field(default_factory=list)


def residuals_and_jacobians(
    ext: ExtrinsicEstimate, basis: TangentBasis, f: np.ndarray, f_prime: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Residuals ``f'^T [t]x R f`` and their N x 5 Jacobian w.r.t. the error state"""
    R, t = ext.R, ext.t
    Rf = f @ R.T
    r = np.einsum("ni,ni->n", f_prime, np.cross(t, Rf))

    # row vector f'^T [t]x R, then -(a x f) gives -f'^T [t]x R [f]x
    a = -np.cross(t, f_prime) @ R
    J = np.empty((f.shape[0], 5))
    J[:, 0:3] = -np.cross(a, f)
    J[:, 3] = np.einsum("ni,ni->n", f_prime, np.cross(basis.b1, Rf))
    J[:, 4] = np.einsum("ni,ni->n", f_prime, np.cross(basis.b2, Rf))
    return r, J


def residual_and_jacobian(ext: ExtrinsicEstimate, basis: TangentBasis, m: NormalizedMatch) -> Tuple[float, Vector]:
    """Residual of one match and its derivative with respect to the 5-DOF error state"""
    r, J = residuals_and_jacobians(ext, basis, m.f[None, :], m.f_prime[None, :])
    return float(r[0]), J[0]


def huber_weights(r: np.ndarray, c_t: float) -> np.ndarray:
    """IRLS Huber weights: 1 inside the threshold, c_t/|r| outside"""
    if not c_t > 0:
        raise InvalidInputError(f"Huber threshold must be > 0, got {c_t}")
    abs_r = np.abs(np.asarray(r, dtype=float))
    weights = np.ones(abs_r.shape)
    mask = abs_r > c_t
    weights[mask] = c_t / abs_r[mask]
    return weights


def huber_weight(r: float, c_t: float) -> float:
    """Scalar form of :func:`huber_weights`"""
    return float(huber_weights(np.array([r]), c_t)[0])


def normalization_weight(
    ext: ExtrinsicEstimate,
    m: NormalizedMatch,
    sigma_f: Matrix,
    sigma_f_prime: Optional[Matrix] = None,
) -> float:
    """1 / sqrt(cov(r) + eps): scales the residual to unit variance"""
    sigma_f_prime = sigma_f if sigma_f_prime is None else sigma_f_prime
    noise = NoiseModel(0.0, sigma_f, sigma_f_prime)
    cov = residual_covariances(essential_from(ext), m.f[None, :], m.f_prime[None, :], noise)[0]
    return float(1.0 / np.sqrt(cov + WEIGHT_EPS))


def _as_arrays(matches: Union[MatchArrays, Sequence[NormalizedMatch]]) -> MatchArrays:
    if isinstance(matches, MatchArrays):
        return matches
    return MatchArrays.from_matches(matches)


def _rms_px(ext: ExtrinsicEstimate, arrays: MatchArrays, rig: Optional[StereoRig]) -> float:
    if rig is None or len(arrays) == 0 or np.isnan(arrays.pixels_left).any():
        return float("nan")
    dist = pixel_epipolar_distances(rig.left, rig.right, essential_from(ext), arrays.pixels_left, arrays.pixels_right)
    return float(np.sqrt(np.nanmean(dist ** 2)))


def assemble(
    ext: ExtrinsicEstimate,
    basis: TangentBasis,
    matches: Union[MatchArrays, Sequence[NormalizedMatch]],
    cfg: OptimizerConfig,
    noise: NoiseModel,
    rig: StereoRig,
    pixel_stats: bool = True,
) -> NormalEquations:
    """Weighted normal equations J^T W J, J^T W r at ``ext``

    W_ii is the squared whitening weight times the Huber weight; the Huber
    threshold is converted to normalized units with the rig's smallest focal
    length.

    Raises:
        InsufficientDataError: fewer than ``cfg.min_matches`` matches
    """
    arrays = _as_arrays(matches)
    if len(arrays) < cfg.min_matches:
        raise InsufficientDataError(f"Need at least {cfg.min_matches} matches, got {len(arrays)}")

    r, J = residuals_and_jacobians(ext, basis, arrays.f, arrays.f_prime)
    covs = residual_covariances(essential_from(ext), arrays.f, arrays.f_prime, noise)
    h = huber_weights(r, cfg.huber_threshold_px / rig.min_focal)
    if cfg.normalize_weights:
        W = h / (covs + WEIGHT_EPS)
    else:
        W = h

    JtWJ = np.einsum("ni,n,nj->ij", J, W, J)
    JtHJ = np.einsum("ni,n,nj->ij", J, h, J)
    return NormalEquations(
        JtWJ=0.5 * (JtWJ + JtWJ.T),
        JtWr=np.einsum("ni,n,n->i", J, W, r),
        JtHJ=0.5 * (JtHJ + JtHJ.T),
        cost=float(np.sum(W * r ** 2)),
        rms_normalized=float(np.sqrt(np.mean(r ** 2))),
        rms_px=_rms_px(ext, arrays, rig) if pixel_stats else float("nan"),
        residuals=r,
        jacobian=J,
        weights=W,
        huber_weights=h,
        residual_covs=covs,
    )


def solve_step(JtWJ: Matrix, JtWr: Vector, damping: float = 0.0) -> ErrorState:
    """Solve (J^T W J + damping I) delta = -J^T W r by Cholesky

    When the factorization fails, extra damping relative to the largest
    diagonal entry escalates x10 from 1e-9 up to 1e-3.

    Raises:
        DegenerateGeometryError: the system stays singular after escalation
    """
    H = np.asarray(JtWJ, dtype=float)
    g = np.asarray(JtWr, dtype=float)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise InvalidInputError("Normal equations must be finite")
    scale = float(np.max(np.abs(np.diag(H))))
    extra = 0.0
    while True:
        try:
            factor = linalg.cho_factor(H + (damping + extra * scale) * np.eye(H.shape[0]))
            delta = -linalg.cho_solve(factor, g)
            if np.all(np.isfinite(delta)):
                return ErrorState.from_vector(delta)
        except linalg.LinAlgError:
            pass
        extra = 1e-9 if extra == 0.0 else 10.0 * extra
        if extra > MAX_DAMPING:
            raise DegenerateGeometryError("Normal matrix is singular; the extrinsic is unobservable")
        logger.debug("Cholesky failed, escalating relative damping to %g", extra)


def _weighted_cost(ext: ExtrinsicEstimate, arrays: MatchArrays, weights: np.ndarray) -> float:
    r = np.einsum("ni,ni->n", arrays.f_prime, np.cross(ext.t, arrays.f @ ext.R.T))
    return float(np.sum(weights * r ** 2))


def _try_step(
    ext: ExtrinsicEstimate, basis: TangentBasis, step: ErrorState, arrays: MatchArrays, weights: np.ndarray
) -> Tuple[Optional[ExtrinsicEstimate], float]:
    try:
        candidate = retract(ext, basis, step)
    except StepTooLargeError:
        return None, float("inf")
    return candidate, _weighted_cost(candidate, arrays, weights)


def optimize(
    prior: ExtrinsicEstimate,
    matches: Union[MatchArrays, Sequence[NormalizedMatch]],
    cfg: OptimizerConfig,
    noise: NoiseModel,
    rig: StereoRig,
) -> OptimizationResult:
    """Refine ``prior`` on the given matches

    A step that would raise the weighted cost is retried with growing
    damping; when no damped step helps, the current estimate is a
    stationary point at working precision and the loop stops.

    Raises:
        InsufficientDataError: fewer than ``cfg.min_matches`` matches
        DegenerateGeometryError: singular normal equations, with the best
            estimate reached attached as ``best_estimate``
    """
    arrays = _as_arrays(matches)
    if len(arrays) < cfg.min_matches:
        raise InsufficientDataError(f"Need at least {cfg.min_matches} matches, got {len(arrays)}")

    ext = prior
    trajectory = [prior]
    cost_history: List[Tuple[float, float]] = []
    converged = False
    iterations = 0

    for _ in range(cfg.max_iterations):
        basis = finding_bases(ext.t)
        ne = assemble(ext, basis, arrays, cfg, noise, rig, pixel_stats=False)
        iterations += 1
        try:
            step = solve_step(ne.JtWJ, ne.JtWr, cfg.damping)
        except DegenerateGeometryError as err:
            raise DegenerateGeometryError(str(err), best_estimate=ext) from err

        candidate, cost = _try_step(ext, basis, step, arrays, ne.weights)
        if step.max_abs < cfg.step_tolerance:
            converged = True
            if candidate is not None and cost <= ne.cost:
                cost_history.append((ne.cost, cost))
                ext = candidate
                trajectory.append(ext)
            break

        mu = 0.0
        scale = float(np.mean(np.diag(ne.JtWJ)))
        retries = 0
        while (candidate is None or cost > ne.cost) and retries < MAX_COST_RETRIES:
            mu = 1e-4 if mu == 0.0 else 10.0 * mu
            retries += 1
            logger.debug("Cost rose to %.6g from %.6g, retrying with relative damping %g", cost, ne.cost, mu)
            step = solve_step(ne.JtWJ, ne.JtWr, cfg.damping + mu * scale)
            candidate, cost = _try_step(ext, basis, step, arrays, ne.weights)

        if candidate is None or cost > ne.cost:
            logger.debug("No step lowers the cost %.6g; stopping at iteration %d", ne.cost, iterations)
            converged = True
            break

        logger.debug("Iteration %d: cost %.6g -> %.6g, |step| %.3g", iterations, ne.cost, cost, step.max_abs)
        cost_history.append((ne.cost, cost))
        ext = candidate
        trajectory.append(ext)

    final = assemble(ext, finding_bases(ext.t), arrays, cfg, noise, rig)
    if not converged:
        logger.info("Optimizer stopped after %d iterations without converging", iterations)
    return OptimizationResult(
        estimate=ext,
        iterations=iterations,
        converged=converged,
        final_rms_normalized=final.rms_normalized,
        final_rms_px=final.rms_px,
        normal_matrix=final.JtWJ,
        normal_equations=final,
        cost_history=cost_history,
        trajectory=trajectory,
    )

"""
Per-frame ingestion and the calibration session

Every frame of correspondences goes through

1. an optional score threshold,
2. a gate on the pixel epipolar distance under the current estimate,
3. RANSAC over a normalized 8-point essential matrix,
4. insertion into a grid buffer that keeps the largest disparities per cell,

after which the buffer is periodically re-optimized, the covariance is
recomputed and the session terminates once its largest eigenvalue drops
below a threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .config import CalibrationConfig, GridConfig, RejectionConfig
from .core import (
    CameraIntrinsics,
    EssentialMatrix,
    ExtrinsicEstimate,
    Matrix,
    NormalizedMatch,
    PixelMatch,
    StereoRig,
    essential_from,
    fundamental_from,
    normalize_matches,
    pixel_epipolar_distances,
    pixel_arrays,
    sampson_distances,
)
from .covariance import CalibrationCovariance, NoiseModel, convergence_check, estimate_covariance
from .exceptions import CalibrationError, DegenerateGeometryError, InsufficientDataError, InvalidInputError
from .optimizer import MatchArrays, OptimizationResult, optimize

logger = logging.getLogger(__name__)

MIN_SAMPLE = 8

SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    """Generator for one frame, keyed on its id so arrival order does not matter"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame_id)]))


def prior_gate(
    prior: ExtrinsicEstimate,
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    matches: Sequence[PixelMatch],
    gate_px: float,
) -> List[PixelMatch]:
    """Keep matches within ``gate_px`` of their epipolar line under ``prior``"""
    if not gate_px > 0:
        raise InvalidInputError(f"gate_px must be > 0, got {gate_px}")
    if len(matches) == 0:
        return []
    px_l, px_r = pixel_arrays(matches)
    dist = pixel_epipolar_distances(K_l, K_r, essential_from(prior), px_l, px_r)
    keep = dist <= gate_px
    return [m for m, k in zip(matches, keep) if k]


# ---------------------------------------------------------------------------
# RANSAC


def _normalization_transform(points: np.ndarray) -> Matrix:
    """Similarity moving the centroid to the origin at mean distance sqrt(2)"""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    s = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def project_to_essential(E: Matrix) -> Matrix:
    """Closest matrix with singular values (1, 1, 0)"""
    U, _, Vt = linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def eight_point(f: np.ndarray, f_prime: np.ndarray) -> Matrix:
    """Normalized 8-point estimate of E from ``(N, 3)`` bearings, N >= 8"""
    if f.shape[0] < MIN_SAMPLE:
        raise InsufficientDataError(f"The 8-point algorithm needs 8 matches, got {f.shape[0]}")
    T1 = _normalization_transform(f[:, :2])
    T2 = _normalization_transform(f_prime[:, :2])
    x1 = f @ T1.T
    x2 = f_prime @ T2.T
    A = np.einsum("ni,nj->nij", x2, x1).reshape(-1, 9)
    _, _, Vt = linalg.svd(A)
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    return project_to_essential(E)


def ransac_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    """Trials needed to draw one clean 8-sample with the given confidence"""
    if inlier_ratio <= 0:
        return cap
    p_clean = inlier_ratio ** MIN_SAMPLE
    if p_clean >= 1.0:
        return 1
    needed = math.log(1.0 - confidence) / math.log1p(-p_clean)
    return int(min(cap, max(1, math.ceil(needed))))


@dataclass(frozen=True, eq=False)
class RansacResult:
    """Consensus set of one RANSAC run"""

    inliers: List[NormalizedMatch]
    E: EssentialMatrix
    inlier_mask: np.ndarray
    iterations: int
    low_consensus: bool = False


def ransac_essential(
    matches: Sequence[NormalizedMatch],
    cfg: RejectionConfig,
    rig: StereoRig,
    rng: SeedLike = None,
) -> RansacResult:
    """Largest consensus set under the Sampson distance in pixels

    Raises:
        InsufficientDataError: fewer than 8 matches
    """
    n = len(matches)
    if n < MIN_SAMPLE:
        raise InsufficientDataError(f"RANSAC needs at least {MIN_SAMPLE} matches, got {n}")
    rng = _rng(cfg.seed if rng is None else rng)

    f = np.array([m.f for m in matches])
    fp = np.array([m.f_prime for m in matches])
    px_l = f[:, :2] * [rig.left.fx, rig.left.fy] + [rig.left.cx, rig.left.cy]
    px_r = fp[:, :2] * [rig.right.fx, rig.right.fy] + [rig.right.cx, rig.right.cy]

    def score(E: Matrix) -> np.ndarray:
        d = sampson_distances(fundamental_from(rig.left, rig.right, E), px_l, px_r)
        return d <= cfg.ransac_threshold_px

    best_mask = np.zeros(n, dtype=bool)
    best_E = None
    budget = cfg.ransac_max_iterations
    trials = 0
    while trials < budget:
        trials += 1
        sample = rng.choice(n, MIN_SAMPLE, replace=False)
        E = eight_point(f[sample], fp[sample])
        mask = score(E)
        if mask.sum() > best_mask.sum():
            best_mask, best_E = mask, E
            budget = ransac_iterations(mask.sum() / n, cfg.ransac_confidence, cfg.ransac_max_iterations)

    if best_E is None:
        best_E = eight_point(f, fp)
    elif best_mask.sum() >= MIN_SAMPLE:
        refit = eight_point(f[best_mask], fp[best_mask])
        refit_mask = score(refit)
        if refit_mask.sum() >= best_mask.sum():
            best_mask, best_E = refit_mask, refit

    count = int(best_mask.sum())
    low = count < cfg.low_consensus_ratio * n
    if low:
        logger.warning("Low RANSAC consensus: %d of %d matches", count, n)
    logger.debug("RANSAC kept %d of %d matches after %d trials", count, n, trials)
    return RansacResult(
        inliers=[m for m, k in zip(matches, best_mask) if k],
        E=EssentialMatrix(best_E),
        inlier_mask=best_mask,
        iterations=trials,
        low_consensus=low,
    )


# ---------------------------------------------------------------------------
# Feature buffer

CellKey = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class FeatureBuffer:
    """Matches bucketed by the cell of their left pixel

    Attributes:
        cells: (row, col) -> matches of that cell, largest disparity first
        width, height: left image size in pixels
        skipped_out_of_bounds: matches dropped for lying outside the image
        last_inserted: new matches kept by the most recent insert
    """

    width: int
    height: int
    cells: Dict[CellKey, Tuple[NormalizedMatch, ...]] = field(default_factory=dict)
    skipped_out_of_bounds: int = 0
    last_inserted: int = 0

    @classmethod
    def empty(cls, intrinsics: CameraIntrinsics) -> "FeatureBuffer":
        """Empty buffer sized to the left image"""
        return cls(intrinsics.width, intrinsics.height)

    @property
    def total_count(self) -> int:
        """Matches held across all cells"""
        return sum(len(v) for v in self.cells.values())

    def __len__(self) -> int:
        """Same as :attr:`total_count`"""
        return self.total_count

    def matches(self) -> List[NormalizedMatch]:
        """All stored matches, cell by cell in key order"""
        return [m for key in sorted(self.cells) for m in self.cells[key]]

    def arrays(self) -> MatchArrays:
        """Buffer contents as sorted arrays for the optimizer"""
        return MatchArrays.from_matches(self.matches())

    def cell_of(self, m: NormalizedMatch, grid: GridConfig) -> Optional[CellKey]:
        """Grid cell of the left pixel, None when it is outside the image"""
        if m.pixel is None:
            raise InvalidInputError("Buffered matches need their pixel coordinates")
        u, v = m.pixel.u_l, m.pixel.v_l
        if not (0.0 <= u < self.width and 0.0 <= v < self.height):
            return None
        col = min(int(math.floor(u * grid.cols / self.width)), grid.cols - 1)
        row = min(int(math.floor(v * grid.rows / self.height)), grid.rows - 1)
        return row, col


def _select(candidates: List[NormalizedMatch], grid: GridConfig, rng: np.random.Generator) -> List[NormalizedMatch]:
    if len(candidates) <= grid.cell_capacity:
        order = np.argsort([-m.disparity for m in candidates], kind="stable")
        return [candidates[i] for i in order]

    disparity = np.array([m.disparity for m in candidates])
    order = np.argsort(-disparity, kind="stable")
    d = disparity[order]
    d_b = d[grid.cell_capacity - 1]
    in_band = (np.abs(d - d_b) < grid.tie_band_px) | (d == d_b)
    sure = (d > d_b) & ~in_band

    keep = np.flatnonzero(sure)
    remaining = grid.cell_capacity - keep.size
    band = np.flatnonzero(in_band)
    picked = rng.choice(band, size=remaining, replace=False) if remaining < band.size else band
    kept = np.sort(np.concatenate([keep, picked]))
    return [candidates[order[i]] for i in kept]


def grid_insert(
    buffer: FeatureBuffer,
    matches: Sequence[NormalizedMatch],
    grid: GridConfig,
    seed: SeedLike = None,
) -> FeatureBuffer:
    """Insert matches, keeping at most ``cell_capacity`` per cell

    Over capacity, the largest disparities win; candidates within
    ``tie_band_px`` of the capacity boundary are drawn at random.
    Existing occupants compete with the new matches on equal terms.
    Out-of-image matches are skipped and counted.
    """
    rng = _rng(seed)
    incoming: Dict[CellKey, List[NormalizedMatch]] = {}
    skipped = 0
    for m in matches:
        key = buffer.cell_of(m, grid)
        if key is None:
            skipped += 1
            continue
        incoming.setdefault(key, []).append(m)

    cells = dict(buffer.cells)
    new_ids = {id(m) for group in incoming.values() for m in group}
    inserted = 0
    for key in sorted(incoming):
        kept = _select(list(cells.get(key, ())) + incoming[key], grid, rng)
        cells[key] = tuple(kept)
        inserted += sum(1 for m in kept if id(m) in new_ids)

    if skipped:
        logger.debug("Skipped %d out-of-bounds matches", skipped)
    return FeatureBuffer(
        width=buffer.width,
        height=buffer.height,
        cells=cells,
        skipped_out_of_bounds=buffer.skipped_out_of_bounds + skipped,
        last_inserted=inserted,
    )


# ---------------------------------------------------------------------------
# Session


@dataclass(frozen=True)
class SessionDiagnostics:
    """Cumulative per-stage match counts and recorded frame errors"""

    received: int = 0
    after_score: int = 0
    after_gate: int = 0
    after_ransac: int = 0
    inserted: int = 0
    skipped_out_of_bounds: int = 0
    optimizations: int = 0
    errors: Tuple[str, ...] = ()

    def stage_counts(self) -> Dict[str, int]:
        """Match counts after each rejection stage"""
        return {
            "received": self.received,
            "after_score": self.after_score,
            "after_gate": self.after_gate,
            "after_ransac": self.after_ransac,
            "inserted": self.inserted,
            "skipped_out_of_bounds": self.skipped_out_of_bounds,
        }


@dataclass(frozen=True, eq=False)
class TraceRecord:
    """State of the session after one frame"""

    frame_index: int
    frame_id: int
    buffer_size: int
    lambda_max: float
    terminated: bool
    optimized: bool
    estimate: ExtrinsicEstimate

    @property
    def log10_lambda_max(self) -> float:
        """Base-10 logarithm of lambda_max"""
        return float(np.log10(self.lambda_max)) if self.lambda_max > 0 else float("-inf")


@dataclass(frozen=True, eq=False)
class SessionState:
    """Everything a calibration session carries between frames"""

    estimate: ExtrinsicEstimate
    buffer: FeatureBuffer
    covariance: CalibrationCovariance = field(default_factory=CalibrationCovariance.unknown)
    frames_processed: int = 0
    terminated: bool = False
    diagnostics: SessionDiagnostics = field(default_factory=SessionDiagnostics)
    trace: Tuple[TraceRecord, ...] = ()
    last_result: Optional[OptimizationResult] = None

    @classmethod
    def initial(cls, prior: ExtrinsicEstimate, rig: StereoRig) -> "SessionState":
        """Fresh state at the prior with an empty buffer"""
        return cls(estimate=prior, buffer=FeatureBuffer.empty(rig.left))


def _ingest(
    state: SessionState, frame: Sequence[PixelMatch], config: CalibrationConfig, rig: StereoRig, frame_index: int
) -> Tuple[FeatureBuffer, SessionDiagnostics]:
    rej = config.rejection
    diag = state.diagnostics
    rng = frame_rng(rej.seed, frame[0].frame_id)

    scored = [m for m in frame if rej.min_score is None or m.score is None or m.score >= rej.min_score]
    gated = prior_gate(state.estimate, rig.left, rig.right, scored, rej.prior_gate_px)
    diag = replace(
        diag,
        received=diag.received + len(frame),
        after_score=diag.after_score + len(scored),
        after_gate=diag.after_gate + len(gated),
    )
    if len(gated) < MIN_SAMPLE:
        message = f"frame {frame_index}: {len(gated)} matches after gating, RANSAC needs {MIN_SAMPLE}"
        logger.warning(message)
        return state.buffer, replace(diag, errors=diag.errors + (message,))

    result = ransac_essential(normalize_matches(rig, gated), rej, rig, rng=rng)
    buffer = grid_insert(state.buffer, result.inliers, config.grid, rng)
    diag = replace(
        diag,
        after_ransac=diag.after_ransac + len(result.inliers),
        inserted=diag.inserted + buffer.last_inserted,
        skipped_out_of_bounds=buffer.skipped_out_of_bounds,
    )
    logger.info(
        "Frame %d: %d received, %d gated, %d RANSAC inliers, buffer %d",
        frame_index, len(frame), len(gated), len(result.inliers), buffer.total_count,
    )
    return buffer, diag


def process_frame(
    state: SessionState,
    frame: Sequence[PixelMatch],
    config: CalibrationConfig,
    rig: StereoRig,
) -> SessionState:
    """Advance the session by one frame; never raises for frame-level failures"""
    if state.terminated:
        return state
    frame_index = state.frames_processed
    if len(frame) == 0:
        return replace(state, frames_processed=frame_index + 1)

    try:
        buffer, diag = _ingest(state, frame, config, rig, frame_index)
    except CalibrationError as err:
        message = f"frame {frame_index}: {err}"
        logger.warning(message)
        buffer = state.buffer
        diag = replace(state.diagnostics, errors=state.diagnostics.errors + (message,))

    estimate = state.estimate
    covariance = state.covariance
    terminated = False
    last_result = state.last_result
    optimized = False
    due = (frame_index + 1) % config.session.optimize_every == 0
    if due and buffer.total_count >= config.optimizer.min_matches:
        noise = NoiseModel.from_pixel_sigma(config.noise.sigma_px, rig)
        arrays = buffer.arrays()
        try:
            result = optimize(estimate, arrays, config.optimizer, noise, rig)
            estimate = result.estimate
            last_result = result
            covariance = estimate_covariance(
                estimate,
                arrays,
                noise,
                approximate=config.session.covariance_mode == "approximate",
                normal_matrix=result.normal_equations.JtHJ,
            )
            terminated = convergence_check(covariance, config.session.convergence_threshold)
            optimized = True
            diag = replace(diag, optimizations=diag.optimizations + 1)
        except DegenerateGeometryError as err:
            if err.best_estimate is not None:
                estimate = err.best_estimate
            covariance = CalibrationCovariance.unknown()
            message = f"frame {frame_index}: {err}"
            logger.warning(message)
            diag = replace(diag, errors=diag.errors + (message,))
        except CalibrationError as err:
            message = f"frame {frame_index}: {err}"
            logger.warning(message)
            diag = replace(diag, errors=diag.errors + (message,))

    if terminated:
        logger.info("Calibration terminated at frame %d, lambda_max %.3g", frame_index, covariance.lambda_max)

    record = TraceRecord(
        frame_index=frame_index,
        frame_id=int(frame[0].frame_id),
        buffer_size=buffer.total_count,
        lambda_max=covariance.lambda_max,
        terminated=terminated,
        optimized=optimized,
        estimate=estimate,
    )
    return SessionState(
        estimate=estimate,
        buffer=buffer,
        covariance=covariance,
        frames_processed=frame_index + 1,
        terminated=terminated,
        diagnostics=diag,
        trace=state.trace + (record,),
        last_result=last_result,
    )


class CalibrationSession:
    """Owner of a :class:`SessionState` fed one frame at a time

    Examples:
        session = CalibrationSession(prior, rig)
        for frame in frames:
            state = session.process_frame(frame)
            if state.terminated:
                break
    """

    def __init__(self, prior: ExtrinsicEstimate, rig: StereoRig, config: Optional[CalibrationConfig] = None):
        self.rig = rig
        self.config = config or CalibrationConfig()
        self._state = SessionState.initial(prior, rig)

    @property
    def state(self) -> SessionState:
        """Current session state"""
        return self._state

    @property
    def terminated(self) -> bool:
        """True once lambda_max has fallen below the threshold"""
        return self._state.terminated

    def process_frame(self, frame: Sequence[PixelMatch]) -> SessionState:
        """Feed one frame and return the new state"""
        self._state = process_frame(self._state, frame, self.config, self.rig)
        return self._state

    def run(self, frames: Iterable[Sequence[PixelMatch]], stop_on_termination: bool = True) -> SessionState:
        """Feed frames in order, stopping at termination unless told otherwise"""
        for frame in frames:
            self.process_frame(frame)
            if stop_on_termination and self._state.terminated:
                break
        return self._state

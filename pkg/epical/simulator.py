"""
Synthetic stereo scenes with known extrinsic

Points are drawn uniformly over the left image and in depth, kept only when
the right camera sees them too, and projected through both pinhole cameras
with optional pixel noise, rounding and outlier injection. Every frame draws
fresh points from its own seed stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import CalibrationConfig, SceneConfig
from .core import CameraIntrinsics, ExtrinsicEstimate, PixelMatch, StereoRig
from .exceptions import ConfigurationError, NotVisibleError
from .io import save_extrinsic, save_intrinsics, save_yaml, write_matches
from .manifold import exp_map, finding_bases

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 1000

DEFAULT_EULER_XYZ_DEG = (0.25, 0.36, 1.07)
DEFAULT_TRANSLATION_M = (-0.1386, -0.0009, 0.0026)

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True extrinsic and intrinsics of a simulated rig

    ``outlier_labels`` holds one tuple of flags per frame once outliers have
    been injected.
    """

    extrinsic: ExtrinsicEstimate
    intrinsics_left: CameraIntrinsics
    intrinsics_right: CameraIntrinsics
    outlier_labels: Tuple[Tuple[bool, ...], ...] = ()

    @property
    def rig(self) -> StereoRig:
        return StereoRig(self.intrinsics_left, self.intrinsics_right)


@dataclass(frozen=True, eq=False)
class SimulatedSequence:
    """Frames of matches with the truth and scene that produced them"""

    frames: List[List[PixelMatch]]
    truth: GroundTruth
    config: SceneConfig
    points: List[np.ndarray] = field(default_factory=list)


def camera_from_scene(cfg: SceneConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.focal_px, cfg.focal_px, cfg.width / 2.0, cfg.height / 2.0, cfg.width, cfg.height)


def default_ground_truth(cfg: Optional[SceneConfig] = None) -> GroundTruth:
    """VGA rig with fx = fy = 230 and a 0.14 m baseline along -x"""
    camera = camera_from_scene(cfg or SceneConfig())
    ext = ExtrinsicEstimate.from_euler(DEFAULT_EULER_XYZ_DEG, DEFAULT_TRANSLATION_M)
    return GroundTruth(ext, camera, camera)


def perturb_extrinsic(
    ext: ExtrinsicEstimate, rotation_deg: Union[float, Sequence[float]], translation_deg: float
) -> ExtrinsicEstimate:
    """Rotate by ``rotation_deg`` about each axis and tilt t by ``translation_deg``

    The translation is tilted toward the first tangent basis vector at t.
    """
    angles = np.broadcast_to(np.asarray(rotation_deg, dtype=float), (3,))
    R = ext.R @ exp_map(np.radians(angles))
    b1 = finding_bases(ext.t).b1
    a = np.radians(translation_deg)
    t = np.cos(a) * ext.t + np.sin(a) * b1
    return ExtrinsicEstimate(R, t / np.linalg.norm(t), ext.baseline_length)


def _frame_streams(seed: int, frame_index: int) -> List[np.random.Generator]:
    children = np.random.SeedSequence([int(seed), int(frame_index)]).spawn(3)
    return [np.random.default_rng(s) for s in children]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _right_visible(truth: GroundTruth, points: np.ndarray) -> np.ndarray:
    ext = truth.extrinsic
    Xr = points @ ext.R.T + ext.t_metric
    K = truth.intrinsics_right
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xr[:, 0] / Xr[:, 2] + K.cx
        v = K.fy * Xr[:, 1] / Xr[:, 2] + K.cy
    return (Xr[:, 2] > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)


def generate_scene(
    cfg: SceneConfig, truth: GroundTruth, frame_index: int = 0, rng: SeedLike = None
) -> np.ndarray:
    """Points (left camera frame, meters) visible in both cameras

    Raises:
        ConfigurationError: 1000 consecutive candidates were invisible
    """
    if rng is None:
        rng = _frame_streams(cfg.seed, frame_index)[0]
    rng = _rng(rng)
    K = truth.intrinsics_left
    accepted: List[np.ndarray] = []
    count = 0
    failures = 0
    while count < cfg.num_points_per_frame:
        n = cfg.num_points_per_frame - count
        u = rng.uniform(0.0, K.width, n)
        v = rng.uniform(0.0, K.height, n)
        depth = rng.uniform(cfg.depth_min, cfg.depth_max, n)
        points = np.column_stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
        visible = _right_visible(truth, points)
        for ok in visible:
            failures = 0 if ok else failures + 1
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise ConfigurationError(
                    f"{MAX_CONSECUTIVE_FAILURES} consecutive points invisible to the right camera; "
                    f"check depth range [{cfg.depth_min}, {cfg.depth_max}] and the extrinsic"
                )
        accepted.append(points[visible])
        count += int(visible.sum())
    return np.concatenate(accepted)[: cfg.num_points_per_frame]


def project_points(
    truth: GroundTruth,
    points: np.ndarray,
    cfg: SceneConfig,
    rng: SeedLike = None,
    frame_id: int = 0,
) -> List[PixelMatch]:
    """Project ``(N, 3)`` points into both cameras with noise and rounding

    Raises:
        NotVisibleError: a point lies behind either camera
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    ext = truth.extrinsic
    Xr = points @ ext.R.T + ext.t_metric
    if np.any(points[:, 2] <= 0) or np.any(Xr[:, 2] <= 0):
        raise NotVisibleError("Point behind a camera")
    Kl, Kr = truth.intrinsics_left, truth.intrinsics_right
    pix = np.column_stack([
        Kl.fx * points[:, 0] / points[:, 2] + Kl.cx,
        Kl.fy * points[:, 1] / points[:, 2] + Kl.cy,
        Kr.fx * Xr[:, 0] / Xr[:, 2] + Kr.cx,
        Kr.fy * Xr[:, 1] / Xr[:, 2] + Kr.cy,
    ])
    if cfg.sigma_px > 0:
        pix = pix + _rng(rng).normal(0.0, cfg.sigma_px, pix.shape)
    if cfg.quantize_pixels:
        pix = np.round(pix)
    return [PixelMatch(frame_id, *map(float, row)) for row in pix]


def project(
    truth: GroundTruth, point: Sequence[float], cfg: SceneConfig, rng: SeedLike = None, frame_id: int = 0
) -> PixelMatch:
    return project_points(truth, np.asarray(point, dtype=float)[None, :], cfg, rng, frame_id)[0]


def inject_outliers(
    matches: Sequence[PixelMatch],
    fraction: float,
    seed: SeedLike,
    intrinsics: CameraIntrinsics,
) -> Tuple[List[PixelMatch], List[bool]]:
    """Replace the right pixel of round(fraction * N) matches by a uniform pixel"""
    if not 0 <= fraction < 1:
        raise ConfigurationError(f"outlier fraction must be in [0, 1), got {fraction}")
    n = len(matches)
    count = int(round(fraction * n))
    labels = [False] * n
    if count == 0:
        return list(matches), labels
    rng = _rng(seed)
    chosen = rng.choice(n, size=count, replace=False)
    out = list(matches)
    for i in sorted(int(c) for c in chosen):
        u = rng.uniform(0.0, intrinsics.width)
        v = rng.uniform(0.0, intrinsics.height)
        out[i] = replace(out[i], u_r=float(u), v_r=float(v))
        labels[i] = True
    return out, labels


def generate_frames(cfg: SceneConfig, truth: GroundTruth) -> SimulatedSequence:
    """Simulate ``cfg.frames`` frames with fresh points each"""
    frames: List[List[PixelMatch]] = []
    labels: List[Tuple[bool, ...]] = []
    scenes: List[np.ndarray] = []
    for k in range(cfg.frames):
        scene_rng, noise_rng, outlier_rng = _frame_streams(cfg.seed, k)
        points = generate_scene(cfg, truth, k, scene_rng)
        matches = project_points(truth, points, cfg, noise_rng, frame_id=k)
        flags = [False] * len(matches)
        if cfg.outlier_fraction > 0:
            matches, flags = inject_outliers(matches, cfg.outlier_fraction, outlier_rng, truth.intrinsics_right)
        frames.append(matches)
        labels.append(tuple(flags))
        scenes.append(points)
    logger.info("Simulated %d frames of %d matches", cfg.frames, cfg.num_points_per_frame)
    return SimulatedSequence(frames, replace(truth, outlier_labels=tuple(labels)), cfg, scenes)


def write_dataset(
    directory: Union[str, Path],
    sequence: SimulatedSequence,
    prior: ExtrinsicEstimate,
    config: Optional[CalibrationConfig] = None,
) -> Path:
    """Write intrinsics, matches, truth, prior and config into ``directory``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    truth = sequence.truth
    save_intrinsics(directory / "intrinsics.yaml", truth.rig)
    write_matches(directory / "matches.csv", sequence.frames)
    truth_doc = {"extrinsic": truth.extrinsic.to_dict()}
    outliers = {
        int(frame[0].frame_id): [i for i, flag in enumerate(flags) if flag]
        for frame, flags in zip(sequence.frames, truth.outlier_labels)
        if frame and any(flags)
    }
    if outliers:
        truth_doc["outliers"] = outliers
    save_yaml(directory / "truth.yaml", truth_doc)
    save_extrinsic(directory / "prior.yaml", prior)
    config = config or CalibrationConfig()
    save_yaml(directory / "config.yaml", replace(config, scene=sequence.config).to_dict())
    logger.info("Wrote dataset to %s", directory)
    return directory

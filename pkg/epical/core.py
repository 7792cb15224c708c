"""
Core geometry for epical

Pinhole camera model, essential matrix construction and the epipolar
residual and distance primitives shared by every other module:

- Pixel to bearing normalization (and its inverse)
- Relative pose (R, unit t, baseline length) of the right camera
- Epipolar residuals in normalized coordinates
- Point-to-line and Sampson distances in pixel units

All functions are pure; batch forms operate on ``(N, 3)`` bearing arrays or
``(N, 2)`` pixel arrays and the single-match forms delegate to them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation
from typing_extensions import TypeAlias

from .exceptions import DegenerateGeometryError, InvalidInputError

logger = logging.getLogger(__name__)

Vector: TypeAlias = np.ndarray
Matrix: TypeAlias = np.ndarray

ORTHONORMAL_TOL = 1e-9
UNIT_NORM_TOL = 1e-12


def _frozen_array(values: Any, shape: tuple, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise InvalidInputError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of one camera (all values in pixels)"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        if not all(np.isfinite(v) for v in values):
            raise InvalidInputError(f"Intrinsics must be finite, got {values}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not 0 < self.cx < self.width:
            raise InvalidInputError(f"cx={self.cx} outside (0, {self.width})")
        if not 0 < self.cy < self.height:
            raise InvalidInputError(f"cy={self.cy} outside (0, {self.height})")

    @property
    def K(self) -> Matrix:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> Matrix:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @property
    def min_focal(self) -> float:
        """Smaller of fx and fy"""
        return float(min(self.fx, self.fy))

    def normalize(self, pixel: Sequence[float]) -> Vector:
        """Bearing [x, y, 1] of one pixel"""
        return normalize(self, pixel)

    def normalize_many(self, pixels: np.ndarray) -> np.ndarray:
        """Vectorized :func:`normalize` for an ``(N, 2)`` pixel array"""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        out = np.ones((pixels.shape[0], 3))
        out[:, 0] = (pixels[:, 0] - self.cx) / self.fx
        out[:, 1] = (pixels[:, 1] - self.cy) / self.fy
        return out

    def project(self, bearing: Sequence[float]) -> Vector:
        """Map a bearing (or any point in front of the camera) to pixels"""
        b = np.asarray(bearing, dtype=float)
        if b[2] <= 0:
            raise InvalidInputError(f"Cannot project a point with z={b[2]} <= 0")
        return np.array([self.fx * b[0] / b[2] + self.cx, self.fy * b[1] / b[2] + self.cy])

    def contains(self, pixel: Sequence[float]) -> bool:
        """True if the pixel lies inside the image"""
        u, v = float(pixel[0]), float(pixel[1])
        return 0.0 <= u < self.width and 0.0 <= v < self.height

    def to_dict(self) -> Dict[str, Any]:
        """Plain mapping suitable for YAML"""
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraIntrinsics":
        """Build from a mapping with fx, fy, cx, cy, width and height"""
        missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in data]
        if missing:
            raise InvalidInputError(f"Intrinsics missing fields: {missing}")
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass(frozen=True)
class StereoRig:
    """Intrinsics of the left and right cameras"""

    left: CameraIntrinsics
    right: CameraIntrinsics

    @property
    def min_focal(self) -> float:
        """Smallest focal length over both cameras"""
        return min(self.left.min_focal, self.right.min_focal)

    def to_dict(self) -> Dict[str, Any]:
        """Both cameras under left and right keys"""
        return {"left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StereoRig":
        """Build from a mapping with left and right camera sections"""
        if "left" not in data or "right" not in data:
            raise InvalidInputError("Stereo intrinsics need 'left' and 'right' sections")
        return cls(CameraIntrinsics.from_dict(data["left"]), CameraIntrinsics.from_dict(data["right"]))


@dataclass(frozen=True)
class PixelMatch:
    """A left/right correspondence in pixels

    ``score`` is an optional match quality in [0, 1] supplied by the
    upstream matcher (higher is better).
    """

    frame_id: int
    u_l: float
    v_l: float
    u_r: float
    v_r: float
    score: Optional[float] = None

    def __post_init__(self):
        if int(self.frame_id) != self.frame_id or self.frame_id < 0:
            raise InvalidInputError(f"frame_id must be a non-negative integer, got {self.frame_id}")
        if not all(np.isfinite(v) for v in (self.u_l, self.v_l, self.u_r, self.v_r)):
            raise InvalidInputError(f"Pixel coordinates must be finite in frame {self.frame_id}")
        if self.score is not None and not np.isfinite(self.score):
            raise InvalidInputError("score must be finite when present")

    @property
    def left(self) -> Vector:
        """Left pixel as an array"""
        return np.array([self.u_l, self.v_l])

    @property
    def right(self) -> Vector:
        """Right pixel as an array"""
        return np.array([self.u_r, self.v_r])

    @property
    def disparity(self) -> float:
        """Pixel distance between the left and right positions"""
        return abs(self.u_l - self.u_r)


@dataclass(frozen=True, eq=False)
class NormalizedMatch:
    """A correspondence as a pair of bearings with third component 1"""

    f: Vector
    f_prime: Vector
    pixel: Optional[PixelMatch] = None
    disparity: float = 0.0

    def __post_init__(self):
        f = _frozen_array(self.f, (3,), "f")
        fp = _frozen_array(self.f_prime, (3,), "f_prime")
        if f[2] != 1.0 or fp[2] != 1.0:
            raise InvalidInputError("Bearings must have third component exactly 1")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "f_prime", fp)


@dataclass(frozen=True, eq=False)
class ExtrinsicEstimate:
    """Relative pose of the right camera: x' = R x + baseline_length * t

    Attributes:
        R: rotation matrix in SO(3)
        t: unit translation direction
        baseline_length: metric length of the stereo baseline (meters)
    """

    R: Matrix
    t: Vector
    baseline_length: float = 1.0

    def __post_init__(self):
        R = _frozen_array(self.R, (3, 3), "R")
        t = _frozen_array(self.t, (3,), "t")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidInputError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidInputError("det(R) must be 1")
        if abs(np.linalg.norm(t) - 1.0) > UNIT_NORM_TOL:
            raise InvalidInputError(f"t must be a unit vector, |t|={np.linalg.norm(t)!r}")
        if not np.isfinite(self.baseline_length) or self.baseline_length <= 0:
            raise InvalidInputError(f"baseline_length must be positive, got {self.baseline_length}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "baseline_length", float(self.baseline_length))

    @property
    def t_metric(self) -> Vector:
        """Translation in meters"""
        return self.baseline_length * self.t

    @property
    def rotation(self) -> Rotation:
        """R as a scipy Rotation"""
        return Rotation.from_matrix(self.R)

    def with_pose(self, R: Matrix, t: Vector) -> "ExtrinsicEstimate":
        """Same baseline length, new rotation and direction"""
        return ExtrinsicEstimate(R, t, self.baseline_length)

    @classmethod
    def from_metric_translation(cls, R: Matrix, t_metric: Sequence[float]) -> "ExtrinsicEstimate":
        """Split a metric translation into unit direction and baseline length"""
        t_metric = np.asarray(t_metric, dtype=float)
        length = float(np.linalg.norm(t_metric))
        if not length > 0:
            raise InvalidInputError("Metric translation must be non-zero")
        return cls(R, t_metric / length, length)

    @classmethod
    def from_euler(cls, angles_deg: Sequence[float], t_metric: Sequence[float]) -> "ExtrinsicEstimate":
        """Build from fixed-axis X-Y-Z angles in degrees and a metric translation"""
        R = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()
        return cls.from_metric_translation(R, t_metric)

    def to_dict(self) -> Dict[str, Any]:
        """Rotation matrix, unit translation and baseline length as plain lists"""
        return {
            "R": [[float(v) for v in row] for row in self.R],
            "t": [float(v) for v in self.t],
            "baseline_length": float(self.baseline_length),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtrinsicEstimate":
        """Parse an extrinsic document

        The rotation is read from ``R`` (3x3), ``quaternion`` (w, x, y, z) or
        ``euler_xyz_deg``; the translation from ``t`` plus
        ``baseline_length`` or from ``translation_metric``.
        """
        if "R" in data:
            R = np.array(data["R"], dtype=float)
            if R.shape != (3, 3):
                raise InvalidInputError(f"R must be 3x3, got shape {R.shape}")
            if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
                if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
                    raise InvalidInputError("R is not a rotation matrix")
                R = Rotation.from_matrix(R).as_matrix()
        elif "quaternion" in data:
            w, x, y, z = (float(v) for v in data["quaternion"])
            R = Rotation.from_quat([x, y, z, w]).as_matrix()
        elif "euler_xyz_deg" in data:
            R = Rotation.from_euler("xyz", data["euler_xyz_deg"], degrees=True).as_matrix()
        else:
            raise InvalidInputError("Extrinsic needs one of 'R', 'quaternion' or 'euler_xyz_deg'")

        if "translation_metric" in data:
            return cls.from_metric_translation(R, data["translation_metric"])
        if "t" not in data:
            raise InvalidInputError("Extrinsic needs 't' or 'translation_metric'")
        t = np.asarray(data["t"], dtype=float)
        norm = np.linalg.norm(t)
        if abs(norm - 1.0) > UNIT_NORM_TOL and norm > 0:
            t = t / norm
        return cls(R, t, float(data.get("baseline_length", 1.0)))


@dataclass(frozen=True, eq=False)
class EssentialMatrix:
    """E = [t]x R"""

    E: Matrix = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        object.__setattr__(self, "E", _frozen_array(self.E, (3, 3), "E"))

    def __array__(self, dtype=None):
        return np.asarray(self.E, dtype=dtype)


EssentialLike = Union[EssentialMatrix, np.ndarray]


def essential_array(E: EssentialLike) -> Matrix:
    """The 3x3 array behind an EssentialMatrix or a raw matrix"""
    if isinstance(E, EssentialMatrix):
        return E.E
    return np.asarray(E, dtype=float)


def normalize(K: CameraIntrinsics, pixel: Sequence[float]) -> Vector:
    """Map a pixel to its bearing ``[(u - cx)/fx, (v - cy)/fy, 1]``"""
    u, v = (float(p) for p in pixel)
    if not (np.isfinite(u) and np.isfinite(v)):
        raise InvalidInputError(f"Pixel must be finite, got ({u}, {v})")
    return np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])


def skew(a: Sequence[float]) -> Matrix:
    """Skew-symmetric matrix with skew(a) @ b == cross(a, b)"""
    a = np.asarray(a, dtype=float)
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


def essential_from(ext: ExtrinsicEstimate) -> EssentialMatrix:
    """Essential matrix [t]x R of an extrinsic (unit t, so scale free)"""
    return EssentialMatrix(skew(ext.t) @ ext.R)


def epipolar_residuals(E: EssentialLike, f: np.ndarray, f_prime: np.ndarray) -> np.ndarray:
    """Signed residuals ``f'^T E f`` for ``(N, 3)`` bearing arrays"""
    E = essential_array(E)
    return np.einsum("ni,ni->n", f_prime, f @ E.T)


def epipolar_residual(E: EssentialLike, m: NormalizedMatch) -> float:
    """Algebraic residual f'^T E f of one normalized match"""
    E = essential_array(E)
    return float(m.f_prime @ E @ m.f)


def fundamental_from(K_l: CameraIntrinsics, K_r: CameraIntrinsics, E: EssentialLike) -> Matrix:
    """Fundamental matrix K_r^-T E K_l^-1"""
    return K_r.K_inv.T @ essential_array(E) @ K_l.K_inv


def _homogeneous(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return np.hstack([pixels, np.ones((pixels.shape[0], 1))])


def pixel_epipolar_distances(
    K_l: CameraIntrinsics,
    K_r: CameraIntrinsics,
    E: EssentialLike,
    pixels_left: np.ndarray,
    pixels_right: np.ndarray,
) -> np.ndarray:
    """Distances (pixels) from right pixels to the epipolar lines of left pixels

    Entries whose epipolar line is degenerate are NaN.
    """
    F = fundamental_from(K_l, K_r, E)
    lines = _homogeneous(pixels_left) @ F.T
    x_r = _homogeneous(pixels_right)
    norm = np.hypot(lines[:, 0], lines[:, 1])
    degenerate = norm <= 1e-15 * np.maximum(np.abs(lines[:, 2]), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.abs(np.einsum("ni,ni->n", lines, x_r)) / norm
    dist[degenerate] = np.nan
    return dist


def pixel_epipolar_distance(
    K_l: CameraIntrinsics, K_r: CameraIntrinsics, E: EssentialLike, m: PixelMatch
) -> float:
    """One-sided distance from the right pixel to the left pixel's epipolar line

    Raises:
        DegenerateGeometryError: if the epipolar line is undefined
    """
    dist = pixel_epipolar_distances(K_l, K_r, E, m.left, m.right)[0]
    if np.isnan(dist):
        raise DegenerateGeometryError(
            f"Epipolar line of ({m.u_l}, {m.v_l}) in frame {m.frame_id} is degenerate"
        )
    return float(dist)


def sampson_distances(F: Matrix, pixels_left: np.ndarray, pixels_right: np.ndarray) -> np.ndarray:
    """First-order geometric distance of each correspondence to F (pixels)"""
    x1 = _homogeneous(pixels_left)
    x2 = _homogeneous(pixels_right)
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ni,ni->n", x2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return np.sqrt(d2)


def normalize_match(rig: StereoRig, m: PixelMatch) -> NormalizedMatch:
    """Bearings of both pixels, keeping the pixel match and its disparity"""
    return NormalizedMatch(
        f=normalize(rig.left, (m.u_l, m.v_l)),
        f_prime=normalize(rig.right, (m.u_r, m.v_r)),
        pixel=m,
        disparity=m.disparity,
    )


def normalize_matches(rig: StereoRig, matches: Iterable[PixelMatch]) -> List[NormalizedMatch]:
    """:func:`normalize_match` over a list"""
    return [normalize_match(rig, m) for m in matches]


def pixel_arrays(matches: Sequence[PixelMatch]) -> tuple:
    """Left and right ``(N, 2)`` pixel arrays of a match list"""
    if len(matches) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    data = np.array([(m.u_l, m.v_l, m.u_r, m.v_r) for m in matches], dtype=float)
    return data[:, 0:2], data[:, 2:4]

"""
Dataset directories for epical

A dataset directory holds the files written by ``epical simulate``:

- ``intrinsics.yaml``: stereo intrinsics (required)
- ``matches.csv``: per-frame correspondences (required)
- ``prior.yaml``: initial extrinsic guess
- ``truth.yaml``: ground-truth extrinsic and outlier indices
- ``config.yaml``: configuration used to produce it
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import CalibrationConfig
from .core import ExtrinsicEstimate, PixelMatch, StereoRig, essential_from, pixel_arrays, pixel_epipolar_distances
from .io import load_extrinsic, load_intrinsics, load_yaml, read_matches

INTRINSICS_FILE = "intrinsics.yaml"
MATCHES_FILE = "matches.csv"
PRIOR_FILE = "prior.yaml"
TRUTH_FILE = "truth.yaml"
CONFIG_FILE = "config.yaml"


class StereoDataset:
    """Frames of matches with the rig that observed them

    Examples:
        ds = StereoDataset("run01")

        # Frames
        first = ds[0]
        print(len(ds), ds.attrs["n_matches"])

        # Consistency of an extrinsic with every match
        rms = ds.epipolar_rms(ds.truth)
    """

    def __init__(self, directory: Union[str, Path]):
        """Open a dataset directory; raises FileNotFoundError if it is missing"""
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"No dataset directory: {self.directory}")
        self.rig: StereoRig = load_intrinsics(self.directory / INTRINSICS_FILE)
        self.frames: List[List[PixelMatch]] = read_matches(self.directory / MATCHES_FILE)
        self.prior = self._optional_extrinsic(PRIOR_FILE)
        self.truth = self._optional_extrinsic(TRUTH_FILE)
        self._outliers = self._load_outliers()
        config_path = self.directory / CONFIG_FILE
        self.config = CalibrationConfig.load(config_path) if config_path.exists() else CalibrationConfig()

    def _optional_extrinsic(self, name: str) -> Optional[ExtrinsicEstimate]:
        path = self.directory / name
        return load_extrinsic(path) if path.exists() else None

    def _load_outliers(self) -> Dict[int, List[int]]:
        path = self.directory / TRUTH_FILE
        if not path.exists():
            return {}
        data = load_yaml(path) or {}
        return {int(k): [int(i) for i in v] for k, v in (data.get("outliers") or {}).items()}

    def __len__(self) -> int:
        """Number of frames"""
        return len(self.frames)

    def __getitem__(self, index: int) -> List[PixelMatch]:
        """Matches of the frame at position ``index``"""
        return self.frames[index]

    def __iter__(self):
        """Iterate over frames in file order"""
        return iter(self.frames)

    @property
    def matches(self) -> List[PixelMatch]:
        """All matches of all frames"""
        return [m for frame in self.frames for m in frame]

    def outlier_indices(self, frame_id: int) -> List[int]:
        """Indices of injected outliers in a frame (empty without truth)"""
        return list(self._outliers.get(frame_id, []))

    @property
    def attrs(self) -> Dict[str, Any]:
        """Dataset attributes"""
        return {
            "directory": str(self.directory),
            "n_frames": len(self.frames),
            "n_matches": sum(len(f) for f in self.frames),
            "frame_ids": [f[0].frame_id for f in self.frames if f],
            "image_size": (self.rig.left.width, self.rig.left.height),
            "has_prior": self.prior is not None,
            "has_truth": self.truth is not None,
            "n_outliers": sum(len(v) for v in self._outliers.values()),
        }

    def epipolar_rms(self, extrinsic: ExtrinsicEstimate, frame: Optional[int] = None) -> float:
        """RMS one-sided pixel epipolar distance over one frame or all of them"""
        matches = self.frames[frame] if frame is not None else self.matches
        return epipolar_rms(self.rig, matches, extrinsic)


def epipolar_rms(rig: StereoRig, matches: Sequence[PixelMatch], extrinsic: ExtrinsicEstimate) -> float:
    """RMS one-sided pixel epipolar distance of ``matches`` under ``extrinsic``"""
    if not matches:
        return float("nan")
    px_l, px_r = pixel_arrays(matches)
    dist = pixel_epipolar_distances(rig.left, rig.right, essential_from(extrinsic), px_l, px_r)
    return float(np.sqrt(np.nanmean(dist ** 2)))

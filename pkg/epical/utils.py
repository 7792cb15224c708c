"""
Utility functions for epical package
"""

from pathlib import Path
from typing import Union

from .dataset import StereoDataset


def open_dataset(directory: Union[str, Path]) -> StereoDataset:
    """
    Open a dataset directory and return a stereo dataset.

    Parameters
    ----------
    directory : str or Path
        Directory holding intrinsics.yaml and matches.csv

    Returns
    -------
    StereoDataset
        Frames of matches with the rig, prior and truth when present

    Examples
    --------
    >>> ds = open_dataset('run01')
    >>> print(ds.epipolar_rms(ds.truth))
    """
    return StereoDataset(directory)

"""
File formats for epical

- Match tables: comma-separated text with header
  ``frame_id,u_l,v_l,u_r,v_r[,score]``, frames in non-decreasing order.
- Intrinsics, extrinsics and configuration: YAML documents.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import yaml

from .core import CameraIntrinsics, ExtrinsicEstimate, PixelMatch, StereoRig
from .exceptions import CalibrationError, DataFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MATCH_COLUMNS = ("frame_id", "u_l", "v_l", "u_r", "v_r")
SCORE_COLUMN = "score"


def _parse_frame_id(text: str, path: str, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataFormatError(f"frame_id must be an integer, got {text!r}", path, line) from None
    if value < 0:
        raise DataFormatError(f"frame_id must be non-negative, got {value}", path, line)
    return value


def _parse_float(text: str, column: str, path: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{column} is not a number: {text!r}", path, line) from None


def read_matches(path: PathLike) -> List[List[PixelMatch]]:
    """Read a match table into frames (consecutive rows sharing a frame_id)

    Raises:
        DataFormatError: bad header, wrong field count, non-numeric values
            or decreasing frame ids, with the offending line number
    """
    path_str = str(path)
    frames: List[List[PixelMatch]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty match file", path_str, 1)
        header = [h.strip() for h in header]
        if tuple(header[:5]) != MATCH_COLUMNS or len(header) > 6 or (len(header) == 6 and header[5] != SCORE_COLUMN):
            raise DataFormatError(
                f"header must be {','.join(MATCH_COLUMNS)}[,{SCORE_COLUMN}], got {','.join(header)}", path_str, 1
            )
        has_score = len(header) == 6

        last_id = -1
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path_str, line)
            frame_id = _parse_frame_id(row[0].strip(), path_str, line)
            if frame_id < last_id:
                raise DataFormatError(f"frame_id {frame_id} follows {last_id}; frames must be sorted", path_str, line)
            u_l, v_l, u_r, v_r = (_parse_float(row[i].strip(), MATCH_COLUMNS[i], path_str, line) for i in range(1, 5))
            score = None
            if has_score and row[5].strip():
                score = _parse_float(row[5].strip(), SCORE_COLUMN, path_str, line)
            try:
                match = PixelMatch(frame_id, u_l, v_l, u_r, v_r, score)
            except CalibrationError as err:
                raise DataFormatError(str(err), path_str, line) from err
            if frame_id != last_id:
                frames.append([])
                last_id = frame_id
            frames[-1].append(match)
    logger.debug("Read %d frames from %s", len(frames), path_str)
    return frames


def write_matches(path: PathLike, frames: Sequence[Sequence[PixelMatch]]) -> None:
    """Write frames as a match table; floats are written at full precision"""
    has_score = any(m.score is not None for frame in frames for m in frame)
    header = list(MATCH_COLUMNS) + ([SCORE_COLUMN] if has_score else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for frame in frames:
            for m in frame:
                row = [str(int(m.frame_id))] + [repr(float(v)) for v in (m.u_l, m.v_l, m.u_r, m.v_r)]
                if has_score:
                    row.append("" if m.score is None else repr(float(m.score)))
                writer.writerow(row)


def load_yaml(path: PathLike) -> Any:
    """Parse a YAML file, raising DataFormatError on invalid YAML"""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as err:
        raise DataFormatError(f"invalid YAML: {err}", str(path)) from err


def save_yaml(path: PathLike, data: Dict[str, Any]) -> None:
    """Write a mapping as block-style YAML"""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(data, fh, sort_keys=False, default_flow_style=None)


def load_intrinsics(path: PathLike) -> StereoRig:
    """Read a stereo intrinsics document

    A document without ``left``/``right`` sections describes one camera
    used for both sides.
    """
    data = load_yaml(path)
    if not isinstance(data, dict):
        raise DataFormatError("intrinsics document must be a mapping", str(path))
    try:
        if "left" in data or "right" in data:
            return StereoRig.from_dict(data)
        camera = CameraIntrinsics.from_dict(data)
        return StereoRig(camera, camera)
    except (CalibrationError, TypeError, ValueError) as err:
        raise DataFormatError(str(err), str(path)) from err


def save_intrinsics(path: PathLike, rig: StereoRig) -> None:
    """Write both cameras under left and right keys"""
    save_yaml(path, rig.to_dict())


def load_extrinsic(path: PathLike) -> ExtrinsicEstimate:
    """Read an extrinsic, optionally nested under an ``extrinsic`` key"""
    data = load_yaml(path)
    if not isinstance(data, dict):
        raise DataFormatError("extrinsic document must be a mapping", str(path))
    if "extrinsic" in data and isinstance(data["extrinsic"], dict):
        data = data["extrinsic"]
    try:
        return ExtrinsicEstimate.from_dict(data)
    except (CalibrationError, TypeError, ValueError) as err:
        raise DataFormatError(str(err), str(path)) from err


def save_extrinsic(path: PathLike, ext: ExtrinsicEstimate) -> None:
    """Write an extrinsic as rotation matrix, unit translation and baseline length"""
    save_yaml(path, ext.to_dict())

"""
Calibration report and per-frame trace
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import CalibrationConfig
from .core import ExtrinsicEstimate
from .io import save_yaml
from .pipeline import SessionState, TraceRecord

logger = logging.getLogger(__name__)

EULER_CONVENTION = "fixed-axis X-Y-Z (roll, pitch, yaw), degrees"

TRACE_COLUMNS = (
    "frame_index", "frame_id", "buffer_size", "optimized", "lambda_max", "log10_lambda_max",
    "terminated", "qw", "qx", "qy", "qz", "tx", "ty", "tz",
)


def quaternion_wxyz(ext: ExtrinsicEstimate) -> List[float]:
    """Unit quaternion (w, x, y, z) with w >= 0"""
    x, y, z, w = ext.rotation.as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return [float(v) for v in q]


def euler_xyz_deg(ext: ExtrinsicEstimate) -> List[float]:
    """Fixed-axis X-Y-Z angles of R in degrees"""
    return [float(v) for v in ext.rotation.as_euler("xyz", degrees=True)]


def build_report(
    state: SessionState,
    config: CalibrationConfig,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """Report document for the final state of a session"""
    ext = state.estimate
    cov = state.covariance
    result = state.last_result
    log10 = cov.log10_lambda_max
    report: Dict[str, Any] = {
        "rotation": {
            "quaternion_wxyz": quaternion_wxyz(ext),
            "euler_xyz_deg": euler_xyz_deg(ext),
            "euler_convention": EULER_CONVENTION,
        },
        "translation_unit": [float(v) for v in ext.t],
        "translation_metric": [float(ext.baseline_length * v) for v in ext.t],
        "baseline_length": float(ext.baseline_length),
        "covariance": {
            "sigma_delta": [[float(v) for v in row] for row in cov.sigma_delta],
            "lambda_max": float(cov.lambda_max),
            "log10_lambda_max": float(log10),
            "approximate": bool(cov.approximate),
        },
        "iterations": int(result.iterations) if result else 0,
        "converged": bool(result.converged) if result else False,
        "terminated": bool(state.terminated),
        "frames_processed": int(state.frames_processed),
        "rms_epipolar_px": float(result.final_rms_px) if result else float("nan"),
        "match_counts": dict(state.diagnostics.stage_counts(), buffered=state.buffer.total_count),
        "frame_errors": list(state.diagnostics.errors),
        "config": config.to_dict(),
        "seed": int(config.rejection.seed if seed is None else seed),
    }
    return report


def save_report(path: Union[str, Path], report: Dict[str, Any]) -> None:
    """Write a report mapping as YAML"""
    save_yaml(path, report)
    logger.info("Wrote report to %s", path)


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def write_trace(path: Union[str, Path], trace: Sequence[TraceRecord]) -> None:
    """Per-frame table of lambda_max and the estimate, for plotting"""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            q = quaternion_wxyz(rec.estimate)
            writer.writerow(
                [rec.frame_index, rec.frame_id, rec.buffer_size, int(rec.optimized),
                 _fmt(rec.lambda_max), _fmt(rec.log10_lambda_max), int(rec.terminated)]
                + [repr(v) for v in q]
                + [repr(float(v)) for v in rec.estimate.t]
            )
    logger.info("Wrote %d trace rows to %s", len(trace), path)

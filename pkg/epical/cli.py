"""
Command-line interface for epical

Subcommands::

    epical simulate  --out DIR [--config PATH] [--seed N] [scene options]
    epical calibrate (--dataset DIR | --intrinsics P --matches P --prior P)
                     [--config PATH] [--out REPORT] [--seed N] [--trace CSV]
    epical evaluate  (--dataset DIR | --intrinsics P --matches P) [--extrinsic P]
    epical selfcheck [--seed N]

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure (degenerate geometry).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .config import CalibrationConfig
from .core import ExtrinsicEstimate, PixelMatch, StereoRig
from .dataset import StereoDataset, epipolar_rms
from .exceptions import (
    CalibrationError,
    ConfigurationError,
    DataFormatError,
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidInputError,
)
from .io import load_extrinsic, load_intrinsics, read_matches
from .pipeline import CalibrationSession
from .report import build_report, save_report, write_trace
from .selfcheck import run_selfcheck
from .simulator import default_ground_truth, generate_frames, perturb_extrinsic, write_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Raised by the parser instead of exiting"""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        """Raise instead of exiting so run_cli can map usage errors to an exit code"""
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the simulate, calibrate, evaluate and selfcheck commands"""
    parser = _ArgumentParser(prog="epical", description="Markerless stereo extrinsic self-calibration")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Enable debug logs")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    sub.required = True

    sim = sub.add_parser("simulate", help="Write a synthetic dataset directory")
    sim.add_argument("--out", type=Path, required=True, help="Dataset directory to create")
    sim.add_argument("--config", type=Path, help="Configuration YAML (scene section)")
    sim.add_argument("--seed", type=int, help="Seed for the scene and RANSAC")
    sim.add_argument("--frames", type=int, help="Number of frames")
    sim.add_argument("--points", type=int, help="Matches per frame")
    sim.add_argument("--sigma-px", type=float, help="Pixel noise standard deviation")
    sim.add_argument("--outliers", type=float, help="Fraction of injected outliers")
    sim.add_argument("--depth-min", type=float, help="Nearest depth in meters")
    sim.add_argument("--depth-max", type=float, help="Farthest depth in meters")
    sim.add_argument("--quantize", action="store_true", default=None, help="Round pixels to integers")
    sim.add_argument("--prior-rotation-deg", type=float, default=3.0, help="Prior error about each axis")
    sim.add_argument("--prior-translation-deg", type=float, default=2.0, help="Prior error of t direction")

    cal = sub.add_parser("calibrate", help="Refine a prior extrinsic from matches")
    _add_input_arguments(cal)
    cal.add_argument("--prior", type=Path, help="Prior extrinsic YAML")
    cal.add_argument("--config", type=Path, help="Configuration YAML")
    cal.add_argument("--out", type=Path, help="Report YAML (stdout when omitted)")
    cal.add_argument("--seed", type=int, help="Seed for RANSAC and tie-breaking")
    cal.add_argument("--trace", type=Path, help="Per-frame trace CSV")
    cal.add_argument("--all-frames", action="store_true", help="Keep going after termination")

    ev = sub.add_parser("evaluate", help="RMS pixel epipolar distance of an extrinsic")
    _add_input_arguments(ev)
    ev.add_argument("--extrinsic", "--prior", dest="extrinsic", type=Path, help="Extrinsic YAML")
    ev.add_argument("--out", type=Path, help="Result YAML (stdout when omitted)")

    check = sub.add_parser("selfcheck", help="Run the numerical oracle checks")
    check.add_argument("--seed", type=int, default=0)
    return parser


def _add_input_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", type=Path, help="Dataset directory written by 'simulate'")
    parser.add_argument("--intrinsics", type=Path, help="Stereo intrinsics YAML")
    parser.add_argument("--matches", type=Path, help="Match table CSV")


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr)
    logging.getLogger("epical").setLevel(level)


def _emit(data: dict, out: Optional[Path]) -> None:
    if out is None:
        yaml.safe_dump(data, sys.stdout, sort_keys=False, default_flow_style=None)
    else:
        save_report(out, data)


def _load_inputs(args: argparse.Namespace, parser_name: str):
    """(rig, frames, dataset or None) from --dataset or the individual files"""
    if args.dataset is not None:
        ds = StereoDataset(args.dataset)
        return ds.rig, ds.frames, ds
    if args.intrinsics is None or args.matches is None:
        raise UsageError(f"epical {parser_name}: error: need --dataset or both --intrinsics and --matches")
    return load_intrinsics(args.intrinsics), read_matches(args.matches), None


def cmd_simulate(args: argparse.Namespace) -> int:
    """Write a simulated dataset directory with a perturbed prior"""
    config = CalibrationConfig.load(args.config) if args.config else CalibrationConfig()
    overrides = {
        "frames": args.frames,
        "num_points_per_frame": args.points,
        "sigma_px": args.sigma_px,
        "outlier_fraction": args.outliers,
        "depth_min": args.depth_min,
        "depth_max": args.depth_max,
        "quantize_pixels": args.quantize,
    }
    scene = replace(config.scene, **{k: v for k, v in overrides.items() if v is not None})
    config = replace(config, scene=scene)
    if args.seed is not None:
        config = config.with_seed(args.seed)

    truth = default_ground_truth(config.scene)
    sequence = generate_frames(config.scene, truth)
    prior = perturb_extrinsic(truth.extrinsic, args.prior_rotation_deg, args.prior_translation_deg)
    write_dataset(args.out, sequence, prior, config)
    return EXIT_OK


def _calibrate(
    rig: StereoRig,
    frames: Sequence[Sequence[PixelMatch]],
    prior: ExtrinsicEstimate,
    config: CalibrationConfig,
    stop_on_termination: bool = True,
):
    session = CalibrationSession(prior, rig, config)
    state = session.run(frames, stop_on_termination=stop_on_termination)
    if state.last_result is None:
        if state.diagnostics.errors:
            logger.error("Last frame error: %s", state.diagnostics.errors[-1])
        raise InsufficientDataError(
            f"No optimization ran: {state.buffer.total_count} buffered matches, "
            f"need {config.optimizer.min_matches}"
        )
    return state


def cmd_calibrate(args: argparse.Namespace) -> int:
    """Run a calibration session over a dataset and write the report"""
    rig, frames, ds = _load_inputs(args, "calibrate")
    if args.config is not None:
        config = CalibrationConfig.load(args.config)
    else:
        config = ds.config if ds is not None else CalibrationConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)

    if args.prior is not None:
        prior = load_extrinsic(args.prior)
    elif ds is not None and ds.prior is not None:
        prior = ds.prior
    else:
        raise UsageError("epical calibrate: error: need --prior (or a dataset with prior.yaml)")

    state = _calibrate(rig, frames, prior, config, stop_on_termination=not args.all_frames)
    report = build_report(state, config)
    _emit(report, args.out)
    if args.trace is not None:
        write_trace(args.trace, state.trace)
    logger.info(
        "Calibrated over %d frames: converged=%s terminated=%s lambda_max=%.3g",
        state.frames_processed, report["converged"], report["terminated"], state.covariance.lambda_max,
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Report the pixel epipolar RMS of an extrinsic on a dataset"""
    rig, frames, ds = _load_inputs(args, "evaluate")
    if args.extrinsic is not None:
        extrinsic = load_extrinsic(args.extrinsic)
    elif ds is not None and ds.truth is not None:
        extrinsic = ds.truth
    else:
        raise UsageError("epical evaluate: error: need --extrinsic")
    matches = [m for frame in frames for m in frame]
    rms = epipolar_rms(rig, matches, extrinsic)
    _emit({"rms_epipolar_px": rms, "matches": len(matches), "frames": len(frames)}, args.out)
    return EXIT_OK


def cmd_selfcheck(args: argparse.Namespace) -> int:
    """Run the numerical oracles and print one PASS/FAIL line each"""
    results = run_selfcheck(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "selfcheck": cmd_selfcheck,
}


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args)

    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except DegenerateGeometryError as err:
        logger.error("Degenerate geometry: %s", err)
        return EXIT_NUMERICAL
    except (DataFormatError, ConfigurationError, InsufficientDataError, InvalidInputError) as err:
        logger.error("%s", err)
        return EXIT_DATA
    except FileNotFoundError as err:
        logger.error("File not found: %s", err.filename or err)
        return EXIT_DATA
    except CalibrationError as err:
        logger.error("%s", err)
        return EXIT_DATA


def main(argv: Optional[List[str]] = None) -> int:
    """Console-script entry point"""
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())

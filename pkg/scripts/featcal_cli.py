# featcal/scripts/featcal_cli.py

import argparse
import asyncio
import os
import sys
from typing import Any, Dict, List, Optional

# Add the project root to the sys.path to allow imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from loguru import logger
from pydantic import ValidationError

from config.settings import settings
from core.errors import (
    ArtifactError,
    CalibrationError,
    ConfigError,
    ManifestError,
    MergeError,
    NonFiniteError,
    OracleFailure,
    ShapeMismatchError,
    SpecError,
    StageError,
    TrainingDivergedError,
)
from pipeline.orchestrator import STAGES, FeatCalPipeline, PipelineConfig, load_pipeline_config
from utils.logger import setup_logging

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4
EXIT_ARTIFACT = 5
EXIT_MANIFEST = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  1  unexpected error
  2  usage error (bad flags or arguments)
  3  configuration error (invalid config file, model spec or flag values)
  4  numerical failure (training divergence, non-finite values, failed solve or oracle)
  5  artifact I/O error (missing or unreadable stage outputs)
  6  manifest integrity error (hash mismatch, missing or undecodable artifact)
"""

SUBCOMMANDS = {
    "gen-tasks": "generate the synthetic task suite",
    "train": "pretrain the base model and fine-tune one expert per task",
    "merge": "merge the experts in weight space",
    "calibrate": "calibrate the merged model layer by layer",
    "drift-report": "layer-wise drift diagnostics for merged and calibrated models",
    "eval": "test accuracy and loss of base, experts, merged and calibrated models",
    "sweep": "single-factor calibration sweeps over lambda, alpha, rho and n",
    "pipeline": "run gen-tasks, train, merge, calibrate, drift-report and eval in order",
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, StageError):
        return exit_code_for(error.cause)
    if isinstance(error, ManifestError):
        return EXIT_MANIFEST
    if isinstance(error, ArtifactError):
        return EXIT_ARTIFACT
    if isinstance(error, (ValidationError, ConfigError, SpecError)):
        return EXIT_CONFIG
    if isinstance(error, (TrainingDivergedError, NonFiniteError, OracleFailure, CalibrationError,
                          MergeError, ShapeMismatchError)):
        return EXIT_NUMERICAL
    return EXIT_UNEXPECTED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment YAML/JSON file (default: FEATCAL_CONFIG_PATH)")
    common.add_argument("--seed", type=int, required=True, help="run seed; every RNG in the run derives from it")
    common.add_argument("--out", default=None, help="run directory (default: <ARTIFACT_DIR>/seed-<seed>)")
    common.add_argument("--log-level", default=settings.LOG_LEVEL)
    common.add_argument("--log-file", default=settings.LOG_FILE)

    merge_flags = argparse.ArgumentParser(add_help=False)
    merge_flags.add_argument("--method", choices=["average", "task-arithmetic"], default=None)
    merge_flags.add_argument("--scale", type=float, default=None, help="task-arithmetic scale")
    merge_flags.add_argument("--head-mode", choices=["task", "merged"], default=None)

    calib_flags = argparse.ArgumentParser(add_help=False)
    calib_flags.add_argument("--lambda", dest="lam", type=float, default=None)
    calib_flags.add_argument("--rho", type=float, default=None)
    calib_flags.add_argument("--alpha", type=float, default=None)
    calib_flags.add_argument("--epsilon", type=float, default=None, help="ridge stabilizer added to every solve")
    calib_flags.add_argument("--n", type=int, default=None, help="calibration samples per task")
    calib_flags.add_argument("--modules", default=None, help="comma-separated module-path globs")
    calib_flags.add_argument("--feature-source", choices=["deployed", "merged", "expert"], default=None)
    calib_flags.add_argument("--task-weighting", choices=["inverse_norm", "uniform"], default=None)
    calib_flags.add_argument("--bias", choices=["on", "off"], default=None, help="calibrate linear biases")
    calib_flags.add_argument("--layernorm", choices=["on", "off"], default=None, help="calibrate LayerNorm gamma/beta")

    parser = argparse.ArgumentParser(
        prog="featcal",
        description="Post-merging feature calibration: synthetic tasks, experts, merging, calibration and drift diagnostics.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        parents = [common]
        if name in ("merge", "pipeline"):
            parents.append(merge_flags)
        if name in ("calibrate", "sweep", "pipeline"):
            parents.append(calib_flags)
        sub.add_parser(name, parents=parents, help=help_text, description=help_text,
                       epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def _overrides(args: argparse.Namespace, names: List[str]) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def apply_flag_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Merge/calibration flags given on the command line replace config values."""
    update: Dict[str, Any] = {}
    merge_update = _overrides(args, ["method", "scale", "head_mode"])
    if merge_update:
        update["merge"] = config.merge.model_validate({**config.merge.model_dump(), **merge_update})
    calib_update = _overrides(args, ["lam", "rho", "alpha", "epsilon", "n", "modules", "feature_source", "task_weighting"])
    for flag, field in (("bias", "calibrate_bias"), ("layernorm", "calibrate_layernorm")):
        if getattr(args, flag, None) is not None:
            calib_update[field] = getattr(args, flag) == "on"
    if calib_update:
        update["calibration"] = config.calibration.model_validate({**config.calibration.model_dump(), **calib_update})
    return config.model_copy(update=update) if update else config


async def run_command(args: argparse.Namespace) -> str:
    config = apply_flag_overrides(load_pipeline_config(args.config), args)
    out = args.out or os.path.join(settings.ARTIFACT_DIR, f"seed-{args.seed}")
    pipeline = FeatCalPipeline(config, args.seed, out)
    stages = STAGES if args.command == "pipeline" else (args.command,)
    await pipeline.run(stages)
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        out = asyncio.run(run_command(args))
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_UNEXPECTED
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_UNEXPECTED:
            logger.exception(f"Unexpected error in '{args.command}': {e}")
        else:
            logger.error(f"'{args.command}' failed (exit {code}): {e}")
        return code
    print(f"featcal {args.command}: ok (seed={args.seed}, out={out})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

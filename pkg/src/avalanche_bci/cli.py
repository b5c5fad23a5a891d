"""Command-line entry point: ``avalanche-bci <command> [flags]``.

Exit codes: 0 success, 2 validation error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from typing import Any

from pydantic import ValidationError

from . import __version__
from .config import PipelineConfig, RunConfig, load_run_config
from .exceptions import EXIT_VALIDATION, AvalancheBCIError
from .pipeline import cmd_features, cmd_pipeline, cmd_predict, cmd_rmcorr, cmd_roi_select, cmd_simulate, cmd_stats
from .report import cmd_report
from .synth import SynthConfig, load_synth_config
from .utils import resolve_output_directory, resolve_workers

logger = logging.getLogger(__name__)

# Constants
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# argparse dest -> RunConfig field
_RUN_FLAGS = {
    "dataset": "dataset",
    "grid": "grid",
    "couple": "couples",
    "excursion": "excursion",
    "filter": "trial_filter",
    "alpha": "alpha",
    "chance": "chance",
    "seed": "seed",
    "permutations": "n_permutations",
    "scheme": "permutation_scheme",
    "model": "model",
    "control": "control",
    "rois": "rois",
    "roi_reference": "roi_reference",
    "out": "out",
    "workers": "workers",
    "max_outer": "max_outer",
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config mirroring the flags below")
    common.add_argument("--dataset", help="Dataset directory or manifest.json")
    common.add_argument("--grid", help="'canonical' or a JSON file of couples")
    common.add_argument("--couple", action="append", metavar="K:SAMPLES", help="Parameter couple (repeatable)")
    common.add_argument("--excursion", choices=["abs", "positive", "negative"], help="Thresholded excursions")
    common.add_argument("--filter", choices=["all", "hit", "miss"], help="Trial filter")
    common.add_argument("--alpha", type=float, help="Significance level")
    common.add_argument("--chance", type=float, help="Control threshold in percent")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--permutations", type=int, help="Permutations per test")
    common.add_argument("--scheme", choices=["unrestricted", "within_subject"], help="Permutation scheme")
    common.add_argument("--model", choices=["lsvr", "lsvc", "svr", "svc"], help="Predictor")
    common.add_argument("--control", choices=["none", "shuffle"], help="Session-shuffle control")
    common.add_argument("--rois", help="'all' or 'selected:<file>'")
    common.add_argument("--roi-reference", choices=["max", "mean", "median", "min"], help="ROI map reference")
    common.add_argument("--max-outer", type=int, help="Alternating iterations of longitudinal fits")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--workers", type=int, help="Worker threads")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="avalanche-bci",
        description="Neuronal-avalanche features, statistics and longitudinal prediction of BCI scores",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", parents=[common], help="Generate a synthetic dataset")
    simulate.add_argument("--synth-config", help="JSON simulator config")
    sub.add_parser("features", parents=[common], help="Extract avalanche features")
    sub.add_parser("stats", parents=[common], help="Run the statistical battery")
    sub.add_parser("rmcorr", parents=[common], help="Correlate delta features with scores")
    sub.add_parser("roi-select", parents=[common], help="Select condition-sensitive ROIs")
    sub.add_parser("predict", parents=[common], help="Leave-one-subject-out prediction")
    sub.add_parser("report", parents=[common], help="Summary and plot-data files")
    pipeline = sub.add_parser("pipeline", parents=[common], help="Run every stage in order")
    pipeline.add_argument("--synth-config", help="JSON simulator config used when --dataset is absent")
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file values overridden by explicitly given flags.

    Raises:
        ConfigError: If the config file cannot be read
        pydantic.ValidationError: If the merged values are invalid
    """
    values: dict[str, Any] = {}
    if args.config:
        values.update(load_run_config(args.config).model_dump(exclude_unset=True))
    for dest, field_name in _RUN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[field_name] = value
    return RunConfig.model_validate(values)


def _synth_config(args: argparse.Namespace, run_config: RunConfig) -> SynthConfig:
    base = load_synth_config(args.synth_config) if args.synth_config else SynthConfig()
    if args.seed is None:
        return base
    return SynthConfig.model_validate({**base.model_dump(), "seed": run_config.seed})


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def _validation_message(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in error.errors()
    )


def run(args: argparse.Namespace) -> None:
    """Dispatch one parsed command."""
    run_config = resolve_run_config(args)
    if args.command == "simulate":
        settings = run_config.to_settings()
        truth = cmd_simulate(
            _synth_config(args, run_config),
            resolve_output_directory(settings),
            workers=resolve_workers(settings),
        )
        logger.info("Simulated %d subjects (%d learners)", len(truth.learners), len(truth.learner_ids))
        return
    config = PipelineConfig.from_run_config(run_config)
    if args.command == "features":
        cmd_features(config)
    elif args.command == "stats":
        cmd_stats(config)
    elif args.command == "rmcorr":
        cmd_rmcorr(config)
    elif args.command == "roi-select":
        cmd_roi_select(config)
    elif args.command == "predict":
        cmd_predict(config)
    elif args.command == "report":
        cmd_report(config.out)
    elif args.command == "pipeline":
        synth = _synth_config(args, run_config) if not config.dataset else None
        cmd_pipeline(config, synth)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line and return the process exit code."""
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        run(args)
    except ValidationError as e:
        print(f"error: invalid configuration: {_validation_message(e)}", file=sys.stderr)
        return EXIT_VALIDATION
    except AvalancheBCIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line interface for fsm_placer.

Verbs:
    run       execute a twin experiment
    sweep     map estimate sensitivities over (t1, t2)
    preset    print or save a shipped experiment config
    validate  check a config file

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from fsm_placer.config import settings
from fsm_placer.errors import (
    ConfigError,
    DimensionError,
    FsmPlacerError,
    ModelError,
    OffGridError,
    PlacementError,
)
from fsm_placer.experiment import PRESETS, ExperimentConfig, load_config, preset, with_overrides
from fsm_placer.runner import run, sweep_cmd

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

INPUT_ERRORS = (ConfigError, PlacementError, ModelError, OffGridError, DimensionError)


def _number_list(cast: Callable[[str], float]) -> Callable[[str], List]:
    def parse(text: str) -> List:
        try:
            return [cast(item) for item in text.split(",") if item.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got '{text}'") from e

    return parse


def _add_experiment_options(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="experiment config (JSON)")
    source.add_argument("--preset", choices=sorted(PRESETS), help="use a shipped experiment")
    parser.add_argument("--out", type=Path, default=None, help=f"output directory (default {settings.OUTPUT_DIR})")
    parser.add_argument("--seed", type=_number_list(int), default=None, help="seeds, e.g. 0,1,2")
    parser.add_argument("--noise", type=float, default=None, help="noise level in percent")
    parser.add_argument("--times", type=_number_list(float), default=None, help="observation times, e.g. 0.1,1.0")
    parser.add_argument("--format", choices=("csv", "json"), default=None, help="table format")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsm-placer",
        description="Forward-sensitivity observation placement and twin experiments",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run a twin experiment")
    _add_experiment_options(run_parser)

    sweep_parser = commands.add_parser("sweep", help="sweep estimate sensitivities over (t1, t2)")
    _add_experiment_options(sweep_parser)
    sweep_parser.add_argument("--t1-axis", type=_number_list(float), default=None)
    sweep_parser.add_argument("--t2-axis", type=_number_list(float), default=None)

    preset_parser = commands.add_parser("preset", help="emit a shipped experiment config")
    preset_parser.add_argument("name", choices=sorted(PRESETS))
    preset_parser.add_argument("--emit", type=Path, nargs="?", const=None, default=None, help="write to a file instead of stdout")

    validate_parser = commands.add_parser("validate", help="validate a config file")
    validate_parser.add_argument("--config", type=Path, required=True)
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if args.preset:
        config = preset(args.preset)
    elif args.config:
        config = load_config(args.config)
    else:
        raise ConfigError("either --config or --preset is required")
    return with_overrides(config, seeds=args.seed, noise_pct=args.noise, times=args.times, fmt=args.format)


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return args.out if args.out is not None else settings.OUTPUT_DIR / config.name


def cmd_run(args: argparse.Namespace) -> int:
    config = _experiment(args)
    artifacts = run(config, _out_dir(args, config), workers=args.threads)
    print(artifacts.out_dir / "summary.json")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _experiment(args)
    artifacts = sweep_cmd(config, _out_dir(args, config), args.t1_axis, args.t2_axis, workers=args.threads)
    print(artifacts.out_dir / "sweep_summary.json")
    return EXIT_OK


def cmd_preset(args: argparse.Namespace) -> int:
    text = preset(args.name).model_dump_json(indent=2)
    if args.emit is None:
        print(text)
    else:
        args.emit.parent.mkdir(parents=True, exist_ok=True)
        args.emit.write_text(text + "\n", encoding="utf-8")
        print(args.emit)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    config.time_grid()
    config.build_model()
    print(f"{args.config}: valid ({config.model.name}, {len(config.seeds)} seeds)")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "preset": cmd_preset,
    "validate": cmd_validate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and dispatch to the verb.

    Returns:
        Process exit code
    """
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except INPUT_ERRORS as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FsmPlacerError as e:
        logger.error("%s", e)
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL

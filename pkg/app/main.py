"""
Command-line entry point.

    python -m app.main gen-data  --config configs/desk_scale.json --out runs/a
    python -m app.main pretrain  --pretext both
    python -m app.main train     --variant ssl_fl_bt
    python -m app.main evaluate  --variant ssl_fl_bt
    python -m app.main report    fedavg fl_bt ssl_fl_bt
    python -m app.main pipeline

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric/structural failure.
"""
import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add project root to path first
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dotenv import load_dotenv

from core.commands import (Command, EvaluateCommand, GenDataCommand, PipelineCommand, PretrainCommand,
                           ReportCommand, RunContext, StageLog, TrainCommand)
from core.config import VARIANTS, ExperimentConfig
from core.types import Algorithm, ConfigError, Pretext, SimulatorError

logger = logging.getLogger("app")

LOG_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get("SSLFL_CONFIG"),
                        help="experiment config (JSON); defaults built in when omitted")
    common.add_argument("--seed", type=int, default=None, help="override master_seed")
    common.add_argument("--out", default=os.environ.get("SSLFL_OUT", "runs/default"),
                        help="output directory for archives, checkpoints and reports")
    common.add_argument("--log-level", default=os.environ.get("SSLFL_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="sslfl", description="Desk-scale SSL + federated Barlow Twins simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate center and pseudo archives")

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised encoder pretraining")
    p.add_argument("--pretext", choices=[e.value for e in Pretext], default=None)

    for name, text in (("train", "federated training on full center data"),
                       ("evaluate", "k-fold cross-validation with PR curves")):
        p = sub.add_parser(name, parents=[common], help=text)
        group = p.add_mutually_exclusive_group()
        group.add_argument("--variant", choices=list(VARIANTS), default=None)
        group.add_argument("--algorithm", choices=[e.value for e in Algorithm], default=None,
                           help="default: fl.algorithm from the config")
        p.add_argument("--ssl-init", default=None, help="checkpoint whose encoder initializes the global model")
        p.add_argument("--pretext", choices=[e.value for e in Pretext], default=None,
                       help="initialize from the SSL checkpoint of this pretext")

    p = sub.add_parser("report", parents=[common], help="comparison tables over evaluated runs")
    p.add_argument("runs", nargs="*", help="run names (default: the config's variants)")

    p = sub.add_parser("pipeline", parents=[common], help="gen-data, pretrain, train, evaluate, report")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=None)

    p = sub.add_parser("init-config", parents=[common], help="write the default config to --config")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    problems = config.validate()
    for problem in problems:
        (logger.error if problem.severity == "error" else logger.warning)("%s", problem)
    if any(p.severity == "error" for p in problems):
        raise ConfigError(f"{sum(p.severity == 'error' for p in problems)} config error(s)")
    return config


def build_command(args: argparse.Namespace, config: ExperimentConfig) -> Command:
    if args.command == "gen-data":
        return GenDataCommand()
    if args.command == "pretrain":
        return PretrainCommand(Pretext(args.pretext) if args.pretext else None)
    if args.command in ("train", "evaluate"):
        cls = TrainCommand if args.command == "train" else EvaluateCommand
        algorithm = Algorithm(args.algorithm) if args.algorithm else None
        if args.variant is None and algorithm is None:
            algorithm = config.fl.algorithm
        return cls(variant=args.variant,
                   algorithm=algorithm,
                   pretext=Pretext(args.pretext) if args.pretext else None,
                   ssl_init=Path(args.ssl_init) if args.ssl_init else None)
    if args.command == "report":
        return ReportCommand(args.runs or list(config.variants))
    return PipelineCommand(args.variants or list(config.variants))


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)

    try:
        if args.command == "init-config":
            if not args.config:
                raise ConfigError("init-config needs --config PATH")
            ExperimentConfig().save_json(args.config)
            logger.info("wrote default config to %s", args.config)
            return 0
        config = load_config(args)
        command = build_command(args, config)
        StageLog().execute_command(command, RunContext(config, Path(args.out)))
    except SimulatorError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

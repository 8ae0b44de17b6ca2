"""Command-line entry point.

    uasflow macro-analytic|macro-fd|resilient|micro|run SPEC --out DIR [--dt S] [--seed N]

Exit codes: 0 success, 2 validation error, 3 numerical failure. Log level
comes from ``UASFLOW_LOG`` (DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

from uasflow import scenario
from uasflow.config import ScenarioConfig, config_hash, load_config
from uasflow.errors import ConfigurationError, DomainError, NumericalError, StepSizeError, UasflowError
from uasflow.output import write_result

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
SUBCOMMANDS = ("macro-analytic", "macro-fd", "resilient", "micro", "run")

log = logging.getLogger("uasflow")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("dt must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uasflow", description="UAS traffic coordination experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "macro-analytic": "channels and velocity field from ideal-flow elements",
        "macro-fd": "steady grid solution and stability diagnostics",
        "resilient": "recovery after pop-up obstacles",
        "micro": "leader-follower cluster tracking",
        "run": "every stage the scenario supports",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("spec", help="scenario YAML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--dt", type=_positive, default=None, help="override integration step (s)")
        p.add_argument("--seed", type=_u64, default=None, help="override RNG seed (u64)")
        if name == "resilient":
            p.add_argument("--mode", choices=("lqr", "analytic"), default="lqr")
    return parser


def _effective(cfg: ScenarioConfig, dt: float | None, seed: int | None) -> ScenarioConfig:
    update = {}
    if dt is not None:
        update["integration"] = cfg.integration.model_copy(update={"dt": dt})
    if seed is not None:
        update["seed"] = seed
    return cfg.model_copy(update=update) if update else cfg


def execute(command: str, cfg: ScenarioConfig, mode: str = "lqr"):
    if command == "macro-analytic":
        return scenario.run_macro_analytic(cfg)
    if command == "macro-fd":
        return scenario.run_macro_fd(cfg)
    if command == "resilient":
        res = scenario.run_resilient(cfg, mode)
        res.metrics.pop("_recovery", None)
        return res
    if command == "micro":
        return scenario.run_micro(cfg)
    return scenario.run_scenario(cfg)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("UASFLOW_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    args = build_parser().parse_args(argv)
    mode = getattr(args, "mode", "lqr")
    try:
        cfg = _effective(load_config(args.spec), args.dt, args.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            result = execute(args.command, cfg, mode)
        extra = {"seed": cfg.seed, "dt_s": cfg.integration.dt}
        if args.command == "resilient":
            extra["mode"] = mode
        write_result(result, args.out, args.command, config_hash(cfg), extra)
    except (ConfigurationError, DomainError, StepSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except UasflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    log.info("wrote %s", args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from .bootstrap import ensure_first_run_files
from .cloudsim import ProtocolError
from .config import ConfigError, apply_overrides, load_config, validate_config
from .context import ExperimentContext
from .paths import project_root as get_project_root
from .privacy import PrivacyError
from .problem import ProblemError
from .schedule import ScheduleError
from .solver import NumericalError

log = logging.getLogger("cloudopt")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cloudopt",
        description="Cloud-coordinated, differentially private multi-agent optimization experiments.",
    )
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration (default ./config.yaml)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set solver.iterations=1000 (repeatable)",
    )
    p.add_argument("--output", default=None, help="output directory (overrides output.directory)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = p.add_subparsers(dest="verb", help="default: the verb matching `mode` in the config")
    sub.add_parser("reference", help="compute the noise-free reference solution z0")
    sub.add_parser("run", help="run the ensemble solver for every seed")
    sub.add_parser("simulate", help="run the cloud/agent protocol for every seed")
    an = sub.add_parser("analyze", help="convergence bounds and trade-off table for recorded traces")
    an.add_argument("traces", nargs="*", type=Path, help="trace CSVs (default: all traces in the output directory)")
    ck = sub.add_parser("check", help="run the property suites")
    ck.add_argument("--samples", type=int, default=10_000, help="sample count per suite")
    return p


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[cloudopt] %(levelname)s %(name)s: %(message)s",
    )


def _cmd_reference(ctx: ExperimentContext, args: argparse.Namespace) -> int:
    ctx.compute_reference()
    return EXIT_OK


def _cmd_run(ctx: ExperimentContext, args: argparse.Namespace) -> int:
    _, path = ctx.run_seeds("solve")
    log.info("summary -> %s", path)
    return EXIT_OK


def _cmd_simulate(ctx: ExperimentContext, args: argparse.Namespace) -> int:
    _, path = ctx.run_seeds("cloudsim")
    log.info("summary -> %s", path)
    return EXIT_OK


def _cmd_analyze(ctx: ExperimentContext, args: argparse.Namespace) -> int:
    summary, path = ctx.analyze(getattr(args, "traces", None) or None)
    log.info("sum of sigma_k <~ %.6g; P(stay in ball from k=%d) >= %.4g", summary.sigma_total_bound, summary.probability_k, summary.probability)
    log.info("analysis -> %s", path)
    if summary.observed_below_bound is False:
        return EXIT_VALIDATION
    return EXIT_OK


def _cmd_check(ctx: ExperimentContext, args: argparse.Namespace) -> int:
    results = ctx.check(getattr(args, "samples", 10_000))
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("%d of %d checks failed: %s", len(failed), len(results), ", ".join(failed))
        return EXIT_VALIDATION
    log.info("all %d checks passed", len(results))
    return EXIT_OK


MODE_VERBS = {"solve": "run", "cloudsim": "simulate", "analyze": "analyze", "reference": "reference"}

COMMANDS = {
    "reference": _cmd_reference,
    "run": _cmd_run,
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "check": _cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    root = get_project_root()

    try:
        config_path = args.config if args.config is not None else ensure_first_run_files(root)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        overrides = list(args.overrides)
        if args.output is not None:
            overrides.append(f"output.directory={args.output}")
        cfg = apply_overrides(load_config(config_path), overrides)
        ok, err = validate_config(cfg)
        if not ok:
            log.error("invalid config: %s", err)
            return EXIT_VALIDATION
        ctx = ExperimentContext(root, cfg)
        log.debug("config %s (hash %s)", config_path, ctx.config_hash)
        verb = args.verb or MODE_VERBS[cfg.mode]
        return COMMANDS[verb](ctx, args)
    except (ConfigError, ProblemError, ScheduleError, PrivacyError) as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except (NumericalError, ProtocolError) as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())

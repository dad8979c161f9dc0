"""Command-line entry point: gen-data, run-forecast, run-allocation, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError

log = logging.getLogger("roadrisk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _gen_data(args) -> None:
    from .synth import gen_synthetic, load_world_spec

    spec = load_world_spec(args.spec)
    truth = gen_synthetic(spec, args.out)
    log.info("wrote %d incidents for %d segments to %s", truth["n_incidents"], spec.n_segments, args.out)


def _run_forecast(args) -> None:
    from .config import load_config
    from .pipeline import run_forecast

    cfg = load_config(args.config)
    run = run_forecast(cfg)
    log.info("forecast outputs in %s", cfg.output_dir)
    print(run.results.to_string(index=False, float_format=lambda v: f"{v:.1f}"))


def _run_allocation(args) -> None:
    from .config import load_config
    from .pipeline import run_allocation

    cfg = load_config(args.config)
    predictions = args.predictions or Path(cfg.output_dir) / "predictions.csv"
    run = run_allocation(cfg, predictions)
    cols = ["model", "p", "alpha", "dist_median", "dist_mean", "unattended_mean", "unattended_max"]
    print(run.summary[cols].to_string(index=False, float_format=lambda v: f"{v:.2f}"))


def _report(args) -> None:
    from .report import build_report

    out = build_report(args.in_dir, args.out)
    log.info("report written to %s", out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadrisk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic world (four CSVs + truth.json)")
    p.add_argument("--spec", required=True, help="world spec file with a [world] section")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_gen_data)

    p = sub.add_parser("run-forecast", help="rolling-window forecasting run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_run_forecast)

    p = sub.add_parser("run-allocation", help="allocation and dispatch replay on stored predictions")
    p.add_argument("--config", required=True)
    p.add_argument("--predictions", help="predictions.csv (default: <output_dir>/predictions.csv)")
    p.set_defaults(func=_run_allocation)

    p = sub.add_parser("report", help="render an HTML report from run outputs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

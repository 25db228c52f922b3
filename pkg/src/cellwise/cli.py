"""Command-line front end.

    cellwise simulate  [--config C] [--seed N] [--out DIR]
    cellwise estimate  --profile P.csv [--truth T.csv] [--estimator E] [--config C] [--out DIR]
    cellwise compare   [--config C] [--seed N] [--out DIR] [--format csv|json|markdown ...]
    cellwise validate  --config C

Exit status: 0 success, 1 configuration error, 2 partial grid failure.
``CELLWISE_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import (FORMATS, SEED_MAX, ConfigError, atomic_write, default_experiment,
                         derive_seed, emit_experiment, load_config, load_truth, profile_csv,
                         run_experiment, synthesize, trace_csv, truth_csv)
from .joint import ESTIMATORS, run_estimator
from .model import load_profile

log = logging.getLogger("cellwise")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellwise", description="Battery SOC/SOH estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, seed=True):
        p.add_argument("--config", type=Path, help="YAML experiment config")
        if seed:
            p.add_argument("--seed", type=_seed, help="override the config seed (u64)")
        if out:
            p.add_argument("--out", type=Path, help="output directory (overrides config)")

    p = sub.add_parser("simulate", help="generate synthetic profiles and ground truth")
    common(p)
    p = sub.add_parser("estimate", help="run one estimator on a profile CSV")
    common(p, seed=False)
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="truth CSV from 'simulate' (enables SOC errors)")
    p.add_argument("--estimator", choices=ESTIMATORS, default="adffrls_ekf")
    p.add_argument("--soc0", type=float, help="initial SOC (default: OCV inversion of first sample)")
    p = sub.add_parser("compare", help="run the profile x estimator grid")
    common(p)
    p.add_argument("--format", choices=FORMATS, action="append",
                   help="table format; repeat for several (default csv)")
    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("--config", type=Path, required=True)
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else default_experiment()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    out = getattr(args, "out", None)
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for index, entry in enumerate(cfg.profiles):
        if entry.synthetic is None:
            log.info("skipping file profile %s", entry.name)
            continue
        measured, _, truth = synthesize(entry.synthetic, cfg.joint.ecm_nominal, cfg.joint.curve,
                                        cfg.noise, derive_seed(cfg.seed, index))
        atomic_write(out / f"{entry.name}.csv", profile_csv(measured))
        atomic_write(out / f"{entry.name}_truth.csv", truth_csv(measured.t, truth))
        n += 1
    print(f"wrote {n} profile(s) to {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load(args)
    profile = load_profile(args.profile)
    truth = load_truth(args.truth).soc if args.truth else None
    res = run_estimator(profile, args.estimator, cfg.joint, truth_soc=truth, soc0=args.soc0,
                        profile_name=args.profile.stem)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.profile.stem}__{args.estimator}"
    atomic_write(out / f"{stem}_trace.csv", trace_csv(res.trace))
    report = res.report.to_dict()
    as_json = {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in report.items()}
    atomic_write(out / f"{stem}_report.json", json.dumps(as_json, indent=2) + "\n")
    header = ",".join(report)
    atomic_write(out / f"{stem}_report.csv",
                 header + "\n" + ",".join(repr(v) if isinstance(v, float) else str(v) for v in report.values()) + "\n")
    print(json.dumps(as_json))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg)
    emit_experiment(result, args.format or ["csv"], cfg.output_dir, cfg.write_traces)
    failed = len(result.errors)
    print(f"{result.n_cells - failed}/{result.n_cells} cells succeeded; tables in {cfg.output_dir}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    missing = [p.file for p in cfg.profiles if p.file is not None and not Path(p.file).is_file()]
    if missing:
        raise ConfigError(f"profile files not found: {missing}")
    print(f"ok: {len(cfg.profiles)} profile(s) x {len(cfg.estimators)} estimator(s)")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "compare": cmd_compare,
            "validate": cmd_validate}


def configure_logging() -> None:
    level = os.environ.get("CELLWISE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL if args.command == "compare" else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

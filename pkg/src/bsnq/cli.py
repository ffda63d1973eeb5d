"""Command-line entry: simulate / converge / moments / increments / selftest.

Exit codes: 0 success, 2 config error, 3 solver-failure threshold exceeded.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import (
    EXIT_CONFIG,
    ConfigError,
    parse_config,
    run_converge,
    run_increments,
    run_moments,
    run_selftest,
    run_simulate,
)


def _add_common(sub):
    sub.add_argument("--config", required=True, help="experiment config (YAML)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--workers", type=int, default=1, help="worker processes")
    sub.add_argument("--resume", action="store_true",
                     help="reuse existing per-path partials / checkpoints")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsnq",
        description="Stochastic 2D Boussinesq implicit-Euler convergence laboratory",
    )
    subs = parser.add_subparsers(dest="verb", required=True)
    for verb, desc in (
        ("simulate", "single trajectory with resumable checkpoints"),
        ("converge", "coupled mesh-ladder campaign (errors/rates/proba CSVs)"),
        ("moments", "moment-table campaign (moments.csv)"),
        ("increments", "increment-regularity campaign (increments.csv)"),
    ):
        sub = subs.add_parser(verb, help=desc)
        _add_common(sub)
    st = subs.add_parser("selftest", help="identity and certification suite")
    st.add_argument("--grid", type=int, default=32, help="grid size K")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--config", help="take the grid size from this config")
    st.add_argument("--out", help="also write selftest_report.json here")
    return parser


def _load_config(path: str):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "selftest":
            K = args.grid
            if args.config:
                K = _load_config(args.config).grid.K
            report = run_selftest(K=K, seed=args.seed)
            if args.out:
                import json
                import os

                os.makedirs(args.out, exist_ok=True)
                payload = [{"name": e.name, "value": e.value,
                            "threshold": e.threshold, "passed": e.passed}
                           for e in report.entries]
                with open(os.path.join(args.out, "selftest_report.json"), "w") as fh:
                    json.dump({"passed": report.passed, "entries": payload}, fh,
                              indent=1, sort_keys=True)
            return 0 if report.passed else 1
        cfg = _load_config(args.config)
        if args.verb == "simulate":
            code, _, _ = run_simulate(cfg, args.out, resume=args.resume)
            return code
        if args.verb == "converge":
            result = run_converge(cfg, args.out, workers=args.workers,
                                  resume=args.resume)
            if result.rate_fit is not None:
                print(f"strong-rate slope (squared error): {result.rate_fit.slope:.4f} "
                      f"(R^2 {result.rate_fit.r_squared:.4f})")
            if result.failures:
                print(f"{len(result.failures)} diverged runs recorded in failures.csv",
                      file=sys.stderr)
            return result.exit_code
        if args.verb == "moments":
            code, _, _ = run_moments(cfg, args.out, workers=args.workers,
                                     resume=args.resume)
            return code
        if args.verb == "increments":
            code, (fit_u, fit_t), _ = run_increments(cfg, args.out,
                                                     workers=args.workers,
                                                     resume=args.resume)
            print(f"increment exponents: u {fit_u.slope:.3f}, theta {fit_t.slope:.3f}")
            return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())

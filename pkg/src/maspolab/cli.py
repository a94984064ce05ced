"""Command-line entry point: ``maspolab {run,gate-table,sweep,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .gating import ConfigError, GateMethod, GateParams, DomainError

log = logging.getLogger("maspolab")


def _cmd_run(args) -> int:
    from .config import load_config
    from .experiment import run_experiment

    cfg = load_config(args.config)
    status = run_experiment(cfg, args.out)
    log.info("run finished with status %d", status)
    return status


def _cmd_gate_table(args) -> int:
    from .experiment import emit_gate_table

    params = GateParams()
    if args.config:
        from .config import load_config

        params = load_config(args.config).train.gate
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    emit_gate_table(args.out, methods, args.pi, args.adv, args.rho_min, args.rho_max, args.points, params)
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {text!r}") from None


def _cmd_sweep(args) -> int:
    from .config import load_config
    from .experiment import run_sweep

    cfg = load_config(args.config)
    index = run_sweep(cfg, args.param, _parse_values(args.values), args.out, jobs=args.jobs)
    failed = [row for row in index if row["status"] != 0]
    for row in index:
        log.info("%s=%g -> %s (status %d)", row["param"], row["value"], row["metrics"], row["status"])
    return 1 if failed else 0


def _cmd_verify(args) -> int:
    from .checks import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maspolab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gate-table", help="tabulate gate weights over a ratio grid")
    p.add_argument("--methods", required=True, help=f"comma list of {[m.value for m in GateMethod]}")
    p.add_argument("--pi", type=float, required=True)
    p.add_argument("--adv", type=float, required=True)
    p.add_argument("--rho-min", type=float, required=True)
    p.add_argument("--rho-max", type=float, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="take gate parameters from this experiment config")
    p.set_defaults(func=_cmd_gate_table)

    p = sub.add_parser("sweep", help="run one experiment per hyperparameter value")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle and property battery")
    p.add_argument("--quick", action="store_true", help="skip the training-based checks")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

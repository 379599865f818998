"""Command line entry point.

    sva run --config exp.cfg
    sva validate --config exp.cfg
    sva instanton --model ou_quartic --dt 0.005 --out instanton.csv

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .model import ModelError, get_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = load_config(args.config, n_workers=args.workers, output_dir=args.output_dir,
                      timestamp=False if args.no_timestamp else None)
    art = run_experiment(cfg)
    print(art.summary_path.read_text(), end="")
    print(f"wrote {art.instanton_path}, {art.efficiency_path}, {art.summary_path}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .experiment import validate_against_oracle

    cfg = load_config(args.config, n_workers=args.workers, output_dir=args.output_dir)
    rep = validate_against_oracle(cfg, run_mc=not args.no_mc)
    cols = list(rep.rows[0].keys())
    print("\t".join(cols))
    for r in rep.rows:
        print("\t".join(f"{r[c]:.8g}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    print("g1 error ratios between successive eps:", ", ".join(f"{x:.4g}" for x in rep.g1_error_ratios))
    print("g2 error ratios between successive eps:", ", ".join(f"{x:.4g}" for x in rep.g2_error_ratios))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "validation.csv")
    return EXIT_OK


def _cmd_instanton(args) -> int:
    from .bias import InstantonControl
    from .odesolve import write_path_csv

    params = {"a": args.a, "q": args.q} if args.model == "lq" else {}
    model, obs = get_model(args.model, **params)
    ctl = InstantonControl(order=2, dt=args.dt).fit(model, obs)
    write_path_csv(args.out, ctl.instanton_, ctl.riccati_)
    path = ctl.instanton_
    print(f"converged in {path.iterations} iterations (residual {path.final_residual:.3e}); "
          f"phi_T = {path.phi[-1]}, g1(0, x0) = {InstantonControl(order=1, dt=args.dt).fit(model, obs).value_at_start():.8g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sva", description="Instanton-based importance sampling experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="eps sweep: instanton.csv, efficiency.csv, summary.txt")
    run.add_argument("--config", required=True)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--output-dir", default=None)
    run.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="compare g(0, x0) and MC estimates with the PDE oracle")
    val.add_argument("--config", required=True)
    val.add_argument("--workers", type=int, default=None)
    val.add_argument("--output-dir", default=None)
    val.add_argument("--no-mc", action="store_true", help="skip the Monte Carlo columns")
    val.set_defaults(func=_cmd_validate)

    ins = sub.add_parser("instanton", help="solve and export the instanton and Riccati paths")
    ins.add_argument("--model", required=True)
    ins.add_argument("--dt", type=float, default=5e-3)
    ins.add_argument("--out", required=True)
    ins.add_argument("--a", type=float, default=1.0)
    ins.add_argument("--q", type=float, default=1.0)
    ins.set_defaults(func=_cmd_instanton)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

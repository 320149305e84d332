"""Command-line interface: ``zofdi run | scenarios | theory``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .errors import ConfigurationError


def _config_help() -> str:
    lines = ["config keys (TOML):"]
    lines += [f"  {k:16s} {v}" for k, v in harness.CONFIG_KEYS.items()]
    lines.append(f"default output directory: ${harness.OUT_ENV} or ./{harness.DEFAULT_OUT}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zofdi", description="Model-free false-data-injection attack simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment", epilog=_config_help(),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="TOML experiment config")
    src.add_argument("--preset", choices=sorted(harness.PRESETS), help="built-in figure preset")
    run.add_argument("--variant", help="run a single variant of a preset (fig3, fig4)")
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--horizon", "-T", type=int, dest="T", help="override the number of iterations")
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--plots", action="store_true", help="write SVG plots")
    run.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")

    sub.add_parser("scenarios", help="list registered scenarios")

    th = sub.add_parser("theory", help="evaluate theory constants and step-size schedules")
    th.add_argument("--constants", type=Path, required=True,
                    help="TOML with M, M_x, M_y, M_g, alpha1..alpha3 (or c1..c3), optional sigma and p")
    th.add_argument("--epsilon", type=float, required=True)
    k = th.add_mutually_exclusive_group()
    k.add_argument("--kappa", type=float)
    k.add_argument("--kappa-fraction", type=float, default=0.5, help="kappa as a fraction of its bound")
    th.add_argument("--horizon", "-T", type=int, required=True)
    th.add_argument("--noisy", action="store_true")
    th.add_argument("--json", action="store_true", help="print JSON instead of text")
    return ap


def _run(args) -> int:
    try:
        if args.config:
            configs = [harness.ExperimentConfig.from_toml(args.config)]
        else:
            configs = harness.preset_configs(args.preset, args.variant)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    code = harness.EXIT_OK
    for cfg in configs:
        if args.trials is not None:
            cfg.trials = args.trials
        if args.seed is not None:
            cfg.seed = args.seed
        if args.T is not None:
            cfg.attack = replace(cfg.attack, T=args.T)
        if args.plots:
            cfg.plots = True
        base = args.out if args.out else (cfg.out or harness.default_out())
        if args.preset:
            cfg.out = Path(base) / cfg.label
        else:
            cfg.out = Path(base)
        res = harness.run_experiment(cfg, workers=args.workers)
        if "error" in res.summary and res.exit_code != harness.EXIT_OK:
            print(f"{cfg.label}: error: {res.summary['error']}", file=sys.stderr)
        else:
            out = res.summary.get("output", {})
            gap = res.summary.get("gap", {})
            print(f"{cfg.label}: trials={res.summary['trials']} diverged={res.summary['diverged_trials']} "
                  f"final={out.get('final_mean', float('nan')):.4g} "
                  f"tail={out.get('tail_mean_final_20pct', float('nan')):.4g} "
                  f"gap[{gap.get('mode', '-')}]={gap.get('time_averaged_gap', float('nan')):.4g} -> {cfg.out}")
        code = max(code, res.exit_code)
    return code


def _scenarios() -> int:
    for row in harness.list_scenarios():
        rho = "n/a" if row["spectral_radius"] is None else f"{row['spectral_radius']:.6g}"
        print(f"{row['name']:18s} n={row['n']} m={row['m']} q={row['q']} p={row['p']} "
              f"rho={rho:10s} {row['stability']}")
    return 0


def _theory(args) -> int:
    try:
        constants, extra = harness.load_constants(args.constants)
        rep = harness.theory_report(constants, args.epsilon, args.horizon, kappa=args.kappa,
                                    kappa_fraction=args.kappa_fraction, p=int(extra.get("p", 2)),
                                    noisy=args.noisy)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    if args.json:
        print(json.dumps(harness._jsonable(rep), sort_keys=True, indent=2))
        return 0
    mu_name = "mu'" if args.noisy else "mu"
    print(f"{mu_name} = {rep['mu']:.10g}")
    for key in ("kappa_star", "kappa_bound", "kappa", "delta", "eta", "rho"):
        if key in rep:
            print(f"{key} = {rep[key]:.10g}")
    if "coupling" in rep:
        c = rep["coupling"]
        print("P = [[{p11:.6g}, sqrt({p12:.6g}*{p21:.6g})], [., {p22:.6g}]]  d1={d1:.6g} d2={d2:.6g}".format(**c))
    for v in rep["verdicts"]:
        print(f"verdict: {v}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    if args.command == "scenarios":
        return _scenarios()
    return _theory(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``distgan run|compare|gradcheck|list-presets``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import kernels
from .config import ConfigError, bundled_config, load_config
from .gradcheck import TOLERANCE, run_gradcheck
from .harness import EXIT_CONFIG, EXIT_OK, compare_runs, execute
from .nn import PRESETS


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    if not p.exists() and bundled_config(arg).exists():
        return bundled_config(arg)
    return p


def cmd_run(args) -> int:
    try:
        cfg = load_config(_resolve_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        cfg = cfg.with_overrides(workers=args.workers)
    out = execute(cfg, args.out, check=args.check_thresholds)
    if out.exit_code == EXIT_OK:
        print(f"outputs written to {out.out_dir}")
    return out.exit_code


def cmd_compare(args) -> int:
    try:
        compare_runs(args.runs, args.out)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(args.seed, args.trials, inject_sign_flip=args.inject_sign_flip)
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"gradcheck {verdict}: {rep.trials} networks, max relative error {rep.max_rel_error:.3e} "
          f"(trial {rep.worst_trial}, tolerance {TOLERANCE:g}), backend {kernels.BACKEND}")
    return EXIT_OK if rep.passed else 1


def cmd_list_presets(args) -> int:
    print("network presets (data_dim, noise_dim, hidden, generator output):")
    for name, (d, nd, h, final) in sorted(PRESETS.items()):
        print(f"  {name:<8} {d:>4} {nd:>4} {h:>4}  {final}")
    configs = sorted(bundled_config("x").parent.glob("*.yaml"))
    if configs:
        print("bundled configs (pass the name to --config):")
        for c in configs:
            print(f"  {c.stem}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distgan", description="Distributed GAN training simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="YAML config path or bundled config name")
    run.add_argument("--seed", type=int, help="override the data, init and train seeds")
    run.add_argument("--out", help="output directory (default: config 'output' or runs/<name>)")
    run.add_argument("--workers", type=int, help="threads for per-user work (default: one per user)")
    run.add_argument("--assert", dest="check_thresholds", action="store_true",
                     help="exit 4 when the config's assert thresholds are missed")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate finished runs")
    cmp_.add_argument("runs", nargs="+", help="run output directories")
    cmp_.add_argument("--out", help="also write the table as CSV")
    cmp_.set_defaults(func=cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference check of backprop")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    lp = sub.add_parser("list-presets", help="show network presets and bundled configs")
    lp.set_defaults(func=cmd_list_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

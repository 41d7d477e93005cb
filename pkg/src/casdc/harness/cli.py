"""Command line entry point: ``casdc <subcommand>``.

Stage subcommands (``split``, ``train``, ``calibrate``, ``eval``) act on
``<out>/seed_<n>`` for every ``--seed`` and can be re-run independently;
``run`` chains them and aggregates; ``sweep-beta`` / ``sweep-ku`` run one
experiment per value; ``plot`` renders figures from a run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import CasDCError
from .config import load_config
from .pipeline import run_dir_for, stage_calibrate, stage_eval, stage_split, stage_train
from .plots import emit_plots
from .runner import run_experiment, sweep_beta, sweep_ku_fraction
from ..training import deterministic


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _common(p):
    p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, action="append", help="run seed; repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", type=_bool, default=None, help="single-threaded deterministic mode")
    p.add_argument("--jobs", type=int, default=None, help="parallel seed processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="casdc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("split", "train", "calibrate", "eval", "run"):
        _common(sub.add_parser(name))
    for name in ("sweep-beta", "sweep-ku"):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--values", type=float, nargs="+", required=True)
    p = sub.add_parser("plot")
    p.add_argument("--input", help="directory holding curve.csv / projection.csv (default: --out)")
    p.add_argument("--out", required=True)
    return parser


def _config(args):
    overrides = {}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    cfg = load_config(args.config)
    return cfg.replace(**overrides) if overrides else cfg


_STAGES = {"split": stage_split, "train": stage_train, "calibrate": stage_calibrate, "eval": stage_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            for k, v in emit_plots(args.input or args.out, args.out).items():
                print(f"{k}: {v}")
            return 0
        cfg = _config(args)
        if args.command in _STAGES:
            for seed in cfg.seeds:
                with deterministic(cfg.deterministic):
                    result = _STAGES[args.command](cfg, seed, run_dir_for(cfg, seed))
                if args.command == "eval":
                    print(json.dumps({"seed": seed, **result}, sort_keys=True))
                else:
                    print(f"{args.command} seed {seed}: {run_dir_for(cfg, seed)}")
        elif args.command == "run":
            rep = run_experiment(cfg)
            for k in sorted(rep.mean):
                std = "" if rep.std[k] is None else f" ± {rep.std[k]:.4f}"
                print(f"{k:32s} {rep.mean[k]:.4f}{std}")
        elif args.command == "sweep-beta":
            for row in sweep_beta(cfg, args.values):
                print(row.pretty("beta"))
        elif args.command == "sweep-ku":
            for row in sweep_ku_fraction(cfg, args.values):
                print(row.pretty("ku_fraction"))
    except (CasDCError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

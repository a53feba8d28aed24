"""Command line front end: ``run``, ``compare`` and ``validate``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import sys

from .errors import ConfigurationError, NumericalError
from .harness import AlignmentError, compare, load_config, load_manifest_seed, run_experiment

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilqr", description="Run trajectory optimization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment for one seed")
    run.add_argument("--config", required=True, help="experiment config or a manifest.json from an earlier run")
    run.add_argument("--seed", type=int, help="defaults to the manifest's seed, else the config's first seed")
    run.add_argument("--out", help="output directory (defaults to the config's output_dir)")

    cmp_ = sub.add_parser("compare", help="run all seeds of several configs and align their curves")
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("configs", nargs="+", metavar="CFG")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {cfg.name} ({cfg.algorithm} on {cfg.env}, {len(cfg.conditions)} condition(s)) hash {cfg.config_hash()[:12]}")
        elif args.command == "run":
            cfg = load_config(args.config)
            seed = args.seed
            if seed is None:
                seed = load_manifest_seed(args.config)
            if seed is None:
                seed = cfg.seeds[0]
            out = args.out or cfg.output_dir
            if out is None:
                raise ConfigurationError("no output directory: pass --out or set output_dir")
            res = run_experiment(cfg, seed, out)
            print(f"{cfg.name} seed {seed}: final cost {res.final_cost:.6g}; artifacts in {res.out_dir}")
        else:
            table = compare(args.configs, args.out)
            last = {}
            for row in table:
                last[row["name"]] = row
            for name, row in last.items():
                print(f"{name}: iteration {row['iteration']} mean cost {row['mean_cost']:.6g} +- {row['seed_std']:.3g}")
    except (ConfigurationError, AlignmentError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())

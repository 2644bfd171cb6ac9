"""Command line entry point: ``lmoelab {run,ablate,gen-corpus,check-grads,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


def _load(path):
    from .harness.config import load_config

    return load_config(path)


def cmd_run(args) -> int:
    from .harness import emit_reports, run_experiment

    cfg = _load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(train={"model_seed": args.seed, "data_seed": args.seed})
    report = run_experiment(cfg)
    for p in emit_reports(report, args.out):
        print(p)
    m = report.metrics
    print(f"overall accuracy {m.overall_accuracy:.4f}  groups {m.group_accuracy}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness.experiment import ablation_run, parse_toggle_rows, write_ablation

    cfg = _load(args.config)
    try:
        rows = parse_toggle_rows(args.toggles)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    table = ablation_run(cfg, rows)
    print(write_ablation(table, args.out))
    for r in table:
        few = "n/a" if r["few"] is None else f"{r['few']:.4f}"
        print(f"{r['row']:2d} {r['toggles']:<40s} overall {r['overall']:.4f} few {few}")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    from .scenegen import corpus, save_corpus

    cfg = _load(args.config)
    n = args.scenes if args.scenes is not None else cfg.train.train_scenes
    c = corpus(cfg.scene, n, base_seed=cfg.train.data_seed * 100_003)
    save_corpus(c, args.out)
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    from .gradsuite import run_suite

    res = run_suite(seeds=range(args.seeds))
    for name, errs in res.errors.items():
        ok = max(errs) <= res.tol
        print(f"{'PASS' if ok else 'FAIL'} {name:<45s} max rel err {max(errs):.2e}")
    for name in res.missing:
        print(f"FAIL {name:<45s} no gradient case")
    print(f"{len(res.errors)} cases x {args.seeds} seeds in {res.seconds:.1f}s")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmoelab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the model and data seeds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="module ablation with identical seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--toggles", required=True, help="e.g. 'moe,moe+guided_router' or 'modules'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-corpus", help="write the training corpus of a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("check-grads", help="finite-difference check of every op and composite")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    from .harness.config import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if getattr(args, "config", None) and Path(args.config) == Path(exc.filename or ""):
            print(f"invalid config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

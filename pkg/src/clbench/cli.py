"""Command-line entry point.

    clbench run --config exp.ini [--strategy S] [--scenario K] [--seeds 0,1,2] [--out DIR]
    clbench metrics --matrix matrix.csv
    clbench synth --classes K --per-class N --out FILE
    clbench inspect --container FILE

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SPLITS, SynthConfig, gen_synthetic_tasks, read_header, write_container
from .errors import CLBenchError, ConfigError
from .metrics import average_accuracy, average_forgetting, read_matrix_csv

logger = logging.getLogger("clbench")


def _cmd_run(args) -> int:
    from .config import parse_config
    from .runner import run_experiment

    overrides = {}
    if args.strategy:
        overrides["strategy.name"] = args.strategy
    if args.scenario:
        overrides["scenario.kind"] = args.scenario
    if args.seeds:
        overrides["run.seeds"] = args.seeds
    if args.out:
        overrides["run.out"] = args.out
    cfg = parse_config(args.config, overrides)
    records = run_experiment(cfg)
    failed = [r for r in records if r.status != "complete"]
    for r in records:
        print(f"{r.strategy:6s} {r.scenario['kind']:16s} seed={r.seed} status={r.status} "
              f"A_T={r.final_accuracy if r.final_accuracy is None else round(r.final_accuracy, 4)} "
              f"F={r.forgetting if r.forgetting is None else round(r.forgetting, 4)}")
    return 2 if failed else 0


def _cmd_metrics(args) -> int:
    m = read_matrix_csv(args.matrix)
    out = {"avg_accuracy": [average_accuracy(m, t) for t in range(1, m.T + 1)],
           "forgetting": average_forgetting(m) if m.T >= 2 else None}
    print(json.dumps(out, indent=2))
    return 0


def _cmd_synth(args) -> int:
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
    except ValueError:
        raise ConfigError(f"--shape must be comma-separated integers, got {args.shape!r}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    splits = gen_synthetic_tasks(SynthConfig(classes=args.classes, train_per_class=args.per_class,
                                             val_per_class=args.per_class, test_per_class=args.per_class,
                                             image_shape=shape, sigma=args.sigma, seed=args.seed,
                                             name=out.stem))
    if args.all_splits:
        for split, ds in zip(SPLITS, splits):
            path = out.with_name(f"{out.stem}_{split}.llcb")
            write_container(ds, path)
            print(path)
    else:
        write_container(splits.train, out)
        print(out)
    return 0


def _cmd_inspect(args) -> int:
    print(json.dumps(read_header(args.container), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clbench", description="Continual-learning benchmark engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", type=Path)
    run.add_argument("--strategy", help="strategy name or comma-separated list")
    run.add_argument("--scenario", choices=["task-il", "class-il", "domain-aware", "domain-agnostic", "fine-grained"])
    run.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2,3,4")
    run.add_argument("--out", help="output directory")
    run.set_defaults(func=_cmd_run)

    met = sub.add_parser("metrics", help="recompute A_t and F from a matrix.csv")
    met.add_argument("--matrix", type=Path, required=True)
    met.set_defaults(func=_cmd_metrics)

    syn = sub.add_parser("synth", help="generate a synthetic LLCB container")
    syn.add_argument("--classes", type=int, required=True)
    syn.add_argument("--per-class", type=int, required=True)
    syn.add_argument("--out", required=True)
    syn.add_argument("--shape", default="1,8,8", help="C,H,W")
    syn.add_argument("--sigma", type=float, default=12.0)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--all-splits", action="store_true",
                     help="write <stem>_train/_val/_test.llcb next to --out")
    syn.set_defaults(func=_cmd_synth)

    ins = sub.add_parser("inspect", help="print an LLCB header")
    ins.add_argument("--container", type=Path, required=True)
    ins.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CLBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

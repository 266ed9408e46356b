"""Command-line entry point: train, evaluate, transfer, sweep, baseline."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, plots
from .env import GridQuest, MapError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_COVERAGE = 3


def _scales(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise harness.ConfigError(f"bad scales {text!r}") from exc


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    runs = harness.run(cfg, args.out)
    for r in runs:
        print(f"seed {r.seed}: frames={r.env.frames} episodes={r.manager.episode} coverage={r.coverage():.3f} "
              f"eval_return={r.last_eval}")
    fig = plots.plot_run(args.out)
    if fig is not None:
        print(f"figure: {fig}")
    uncovered = [r for r in runs if r.target is not None and not r.covered]
    return EXIT_NO_COVERAGE if uncovered else EXIT_OK


def cmd_evaluate(args) -> int:
    r = harness.load_checkpoint(args.snapshot)
    ret = harness.evaluate(r.model, r.worker, GridQuest(r.spec, r.seed + 10_000))
    print(f"known_states={len(r.model.known_set)} actions={len(r.model.actions)} eval_return={ret}")
    if args.oracle:
        print(f"oracle_value={harness.oracle_value(r.spec)}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    rep = harness.transfer_eval(args.snapshot, args.task, args.budget, args.baseline_factor)
    out = Path(args.out) if args.out else Path(args.snapshot).parent
    out.mkdir(parents=True, exist_ok=True)
    harness.write_transfer_reports([rep], out / f"transfer_seed{rep.seed}.csv")
    plots.plot_transfer([rep], out / f"transfer_seed{rep.seed}.png")
    t = rep.transfer
    print(f"task={rep.task!r} transfer_return={t.achieved_return} frames_used={t.frames_used} "
          f"baseline_best={rep.baseline_best} (budget {rep.baseline_budget}) oracle={rep.oracle_value} "
          f"ratio={rep.ratio}")
    for w in t.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = harness.load_config(args.config)
    entries = harness.sweep_buckets(cfg, _scales(args.scales), args.out)
    for e in entries:
        print(f"scale {e.scale:g} seed {e.seed}: bucket={e.bucket_size} h_worker={e.h_worker} "
              f"frames={e.frames} coverage={e.coverage:.3f}")
    plots.plot_sweep(args.out)
    return EXIT_NO_COVERAGE if any(not e.covered for e in entries) else EXIT_OK


def cmd_baseline(args) -> int:
    cfg = harness.load_config(args.config)
    curves = harness.run_baseline(cfg, args.out)
    for seed, curve in curves.items():
        best = max((v for _, v in curve), default=0.0)
        print(f"seed {seed}: best_eval_return={best}")
    plots.plot_run(args.out, "baseline_seed*.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abshorizon", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train on a map and write metrics, snapshots and figures")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("evaluate", help="run the best plan of a snapshot once")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--oracle", action="store_true", help="also print the optimal return")
    e.set_defaults(func=cmd_evaluate)
    x = sub.add_parser("transfer", help="few-shot transfer to a new reward next to the flat learner")
    x.add_argument("--snapshot", required=True)
    x.add_argument("--task", required=True)
    x.add_argument("--budget", type=int, default=None)
    x.add_argument("--baseline-factor", type=int, default=100)
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_transfer)
    s = sub.add_parser("sweep", help="train at several bucket scales")
    s.add_argument("--config", required=True)
    s.add_argument("--scales", default="0.5,1,2")
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep)
    b = sub.add_parser("baseline", help="train the flat learner with the config's budget")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="baseline")
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, MapError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``safm run|report|gen-tasks``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .tasks import make_stream, materialize, write_jsonl


def cmd_run(args):
    cfg = experiment.load_config(args.config, method=args.method, output_dir=args.out)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    reports = experiment.run(cfg, resume=args.resume)
    for rep in reports:
        bwt = "N/A" if rep.bwt is None else f"{100 * rep.bwt:.2f}"
        print(f"{rep.method} seed={rep.seed} score={100 * rep.score:.2f} bwt={bwt} "
              f"params={rep.learnable_params}")
    return 0


def cmd_report(args):
    summary, _ = experiment.report(args.dir)
    for s in summary:
        print(f"{s['scenario']:10s} {s['method']:11s} seeds={s['n_seeds']} "
              f"score={100 * s['score_mean']:.2f}")
    print(f"wrote {Path(args.dir) / 'report.md'}")
    return 0


def cmd_gen_tasks(args):
    stream = make_stream(args.scenario, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(stream.to_manifest(), indent=2) + "\n")
    for spec in stream.specs:
        for split, samples in materialize(spec).items():
            write_jsonl(out / f"task_{spec.task_id}_{split}.jsonl", samples)
    print(f"wrote {len(stream)} {args.scenario} tasks to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="safm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a continual-learning experiment")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--method", choices=experiment.METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--resume", action="store_true", help="continue from saved checkpoints")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate finished runs")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-tasks", help="write a task stream as JSONL")
    p.add_argument("--scenario", choices=("similar", "dissimilar"), default="similar")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (experiment.ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``python -m ppesmoc {run,aggregate,bench-list}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import aggregate_dir, load_config, run_all, write_summary
from .problems import benchmark_names, get_benchmark


def _run(args):
    cfg = load_config(args.config)
    records = run_all(cfg)
    bad = [r for r in records if r.status != "ok"]
    for r in records:
        if r.rows:
            last = r.rows[-1]
            print(f"rep {r.repetition}: status={r.status} final log_gap={last.log_gap:.4f}")
        else:
            print(f"rep {r.repetition}: status={r.status}")
    if cfg.output_dir:
        print(f"results written to {cfg.output_dir}")
    return 1 if bad else 0


def _aggregate(args):
    rows = aggregate_dir(args.dir)
    out = Path(args.out) if args.out else Path(args.dir) / "summary.csv"
    write_summary(rows, out)
    print("iter,n,mean_log_gap,stderr_log_gap,median_seconds,mad_seconds")
    for r in rows:
        print(",".join(str(r[k]) for k in r))
    return 0


def _bench_list(args):
    for name in benchmark_names():
        p = get_benchmark(name)
        print(f"{name:15s} d={p.dim} K={p.K} J={p.J}")
    print("synthetic       d, K, J set in the config (GP-prior sample)")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ppesmoc")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_run)
    p = sub.add_parser("aggregate", help="summarize rep_*.csv files of a run directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_aggregate)
    p = sub.add_parser("bench-list", help="list available problems")
    p.set_defaults(func=_bench_list)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

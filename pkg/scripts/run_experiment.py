#!/usr/bin/env python3
"""Run the transfer experiment and print the markdown report.

Usage: python scripts/run_experiment.py OUT_DIR [--config spec.json] [--seed N ...] [--quick]

--quick swaps in a tiny configuration that finishes in a few seconds.
"""
import argparse
import json
import sys
import time

from xaidet import experiment as ex


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--quick", action="store_true")
    args = p.parse_args(argv)

    if args.quick:
        spec = ex.quick_spec()
    else:
        cfg = json.loads(open(args.config, encoding="utf-8").read()) if args.config else {}
        spec = ex.ExperimentSpec.from_dict(cfg)
    if args.seed:
        spec = ex.ExperimentSpec.from_dict({**spec.to_dict(), "seeds": args.seed})

    t0 = time.perf_counter()
    log = lambda msg: print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", file=sys.stderr, flush=True)
    report = ex.run_experiment(spec, args.out, log=log)
    print(report.to_markdown())


if __name__ == "__main__":
    main()

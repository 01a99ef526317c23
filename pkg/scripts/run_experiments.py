"""Run desk-scale experiment bundles and print their summaries.

    python3 scripts/run_experiments.py --out results            # every bundle
    python3 scripts/run_experiments.py grafting conflict --seeds 0 1
"""

import argparse
import json
import sys
import time
from pathlib import Path

from locstitch import experiments


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("bundles", nargs="*", help=f"bundles to run (default: all of {', '.join(experiments.BUNDLES)})")
    p.add_argument("--out", default="results")
    p.add_argument("--seeds", type=int, nargs="+", default=list(experiments.DEFAULT_SEEDS))
    a = p.parse_args(argv)
    unknown = [b for b in a.bundles if b not in experiments.BUNDLES]
    if unknown:
        p.error(f"unknown bundle {unknown[0]!r}; choose from {', '.join(experiments.BUNDLES)}")
    for name in a.bundles or list(experiments.BUNDLES):
        t0 = time.perf_counter()
        summary = experiments.BUNDLES[name](Path(a.out) / name, seeds=tuple(a.seeds))
        print(f"{name} ({time.perf_counter() - t0:.1f}s): {json.dumps(summary, sort_keys=True)}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())

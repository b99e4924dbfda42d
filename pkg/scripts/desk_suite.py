"""Train (or load from cache) the five desk models and print a summary.

    python3 scripts/desk_suite.py [--cache DIR]

The acceptance tests reuse the same cache, so running this first moves the
training cost out of the test session.
"""

import argparse
import logging
import os
from pathlib import Path

from reenact.desk import LEVELS, DeskSuite
from reenact.evaluate import evaluate

DEFAULT_CACHE = Path(__file__).resolve().parents[1] / ".acceptance_cache"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default=os.environ.get("REENACT_ACCEPT_CACHE", DEFAULT_CACHE))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    suite = DeskSuite(args.cache)
    runs = [suite.level_model(q) for q in LEVELS]
    runs += [suite.fusion_only_model(40), suite.independent_streams(40)]
    print(f"{'run':<20}{'best epoch':>11}{'best val':>10}{'train s':>9}")
    for r in runs:
        print(f"{r.name:<20}{r.best_epoch:>11}{r.best_val:>10.4f}{r.train_seconds:>9.0f}")
    for q in LEVELS:
        acc = evaluate(suite.level_model(q).model, suite.data("test", q)).balanced_accuracy
        print(f"test balanced accuracy qp{q}: {acc:.4f}")


if __name__ == "__main__":
    main()

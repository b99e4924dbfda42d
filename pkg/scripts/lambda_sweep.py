"""Balanced accuracy of the fused output as the fusion weight lambda varies.

    python3 scripts/lambda_sweep.py --qp 40 --lambdas 0.001 1 100 --out lambda_sweep.csv

Each lambda trains a fresh desk model (same seed); about 6 minutes each on one core.
"""

import argparse
import logging

from reenact.desk import DESK_TRAIN, DeskSuite
from reenact.evaluate import lambda_sweep, write_rows_csv
from reenact.train import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--qp", type=int, default=40)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.001, 1.0, 100.0])
    p.add_argument("--epochs", type=int, default=DESK_TRAIN.epochs)
    p.add_argument("--out", default="lambda_sweep.csv")
    p.add_argument("--cache", default=".acceptance_cache", help="only used to hold the generator output")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    suite = DeskSuite(args.cache)
    tc = TrainConfig(**{**DESK_TRAIN.to_dict(), "epochs": args.epochs, "qp": args.qp})
    rows = lambda_sweep(
        suite.data("train", args.qp), suite.data("val", args.qp), suite.data("test", args.qp),
        args.lambdas, tc, backbone=suite.backbone,
    )
    write_rows_csv(rows, args.out)
    for r in rows:
        print(f"lambda {r['lambda']:<8g} balanced accuracy {r['balanced_accuracy']:.4f} (best epoch {r['best_epoch']})")


if __name__ == "__main__":
    main()

"""Write the desk-scale result tables and figures from the cached suite models.

    python3 scripts/desk_report.py --out results/

Outputs: level_accuracy.csv, cross_compression.csv, stream_ablation.csv,
fusion_ablation.csv, roc_qp{0,23,40}.csv, roc.png, cam_*.png and cam.csv.
"""

import argparse
import logging
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from reenact.desk import LEVELS, DeskSuite  # noqa: E402
from reenact.evaluate import (  # noqa: E402
    ablate_streams,
    cam,
    cam_localization,
    cross_compression_matrix,
    evaluate,
    fusion_ablation,
    save_cam_png,
    stream_scores,
    write_matrix_csv,
    write_roc_csv,
    write_rows_csv,
)

DEFAULT_CACHE = Path(__file__).resolve().parents[1] / ".acceptance_cache"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=os.environ.get("REENACT_ACCEPT_CACHE", DEFAULT_CACHE))
    p.add_argument("--hard", type=int, default=40, help="level used for the ablations")
    p.add_argument("--cams", type=int, default=6, help="overlay PNGs to write")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = DeskSuite(args.cache)

    models = {q: suite.level_model(q).model for q in LEVELS}
    tests = {q: suite.data("test", q) for q in LEVELS}
    rows = []
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for q in LEVELS:
        rep = evaluate(models[q], tests[q])
        rows.append({"qp": q, **rep.metrics_row()})
        write_roc_csv(rep, out / f"roc_qp{q}.csv")
        ax.plot(rep.fpr, rep.tpr, label=f"qp{q} (AUC {rep.auc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    write_rows_csv(rows, out / "level_accuracy.csv")

    write_matrix_csv(*cross_compression_matrix(models, tests), out / "cross_compression.csv")

    hard = args.hard
    val, test = suite.data("val", hard), suite.data("test", hard)
    write_rows_csv(ablate_streams(models[hard], val, test), out / "stream_ablation.csv")
    indep = suite.independent_streams(hard).model
    proposed = evaluate(models[hard], test).balanced_accuracy
    write_rows_csv(
        fusion_ablation(stream_scores(indep, val), val.labels, stream_scores(indep, test), test.labels, proposed),
        out / "fusion_ablation.csv",
    )

    masked = suite.data("test", 0, with_masks=True)
    stats = cam_localization(models[0], masked, stream=1, cls=1)
    write_rows_csv([{"stream": 1, "cls": 1, **stats}], out / "cam.csv")
    for i in np.flatnonzero(masked.labels == 1)[: args.cams]:
        save_cam_png(cam(models[0], masked.regions[i], stream=1, cls=1), out / f"cam_{i:04d}.png")
    print((out / "level_accuracy.csv").read_text())
    print((out / "cross_compression.csv").read_text())


if __name__ == "__main__":
    main()

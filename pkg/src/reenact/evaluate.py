"""Evaluation battery: metrics, ROC, cross-compression, ablations, CAMs.

Frozen-score fusion (the linear-SVM row of the score-fusion comparison) is an
L2-regularized logistic-loss linear classifier fitted by Newton iterations on
standardized stream scores.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from .metrics import (
    MetricError,
    argmax_predictions,
    auc,
    balanced_accuracy,
    confusion_counts,
    per_class_accuracy,
    roc_curve,
    softmax_scores,
)
from .model import N_STREAMS, BackboneConfig, MultiStreamModel, build_model, predict_arrays, stream_forward
from .preprocess import resize_bilinear
from .tensor import get_dtype, no_grad
from .train import RegionData, TrainConfig, train

log = logging.getLogger(__name__)

STREAM_LABELS = ("Face (X1)", "Left Eye (X2)", "Right Eye (X3)", "Left Cheek (X4)", "Right Cheek (X5)")


@dataclass
class EvalReport:
    balanced_accuracy: float
    class_accuracy: tuple[float, float]
    confusion: dict[str, int]
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    stream_logits: np.ndarray | None = field(default=None, repr=False)
    fused_logits: np.ndarray | None = field(default=None, repr=False)

    def metrics_row(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "accuracy_original": self.class_accuracy[0],
            "accuracy_altered": self.class_accuracy[1],
            "auc": self.auc,
            **self.confusion,
            "n": int(len(self.labels)),
        }


def report_from_logits(fused_logits: np.ndarray, labels, stream_logits: np.ndarray | None = None) -> EvalReport:
    """Per-frame report: argmax of the fused softmax (ties -> original)."""
    fused_logits = np.asarray(fused_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise MetricError("evaluation split must contain both classes")
    pred = argmax_predictions(fused_logits)
    scores = softmax_scores(fused_logits)
    fpr, tpr, thr = roc_curve(scores, labels)
    return EvalReport(
        balanced_accuracy=balanced_accuracy(pred, labels),
        class_accuracy=per_class_accuracy(pred, labels),
        confusion=confusion_counts(pred, labels),
        auc=auc(scores, labels),
        fpr=fpr,
        tpr=tpr,
        thresholds=thr,
        scores=scores,
        labels=labels,
        stream_logits=stream_logits,
        fused_logits=fused_logits,
    )


def evaluate(model: MultiStreamModel, data: RegionData, batch_size: int = 100) -> EvalReport:
    if len(data) == 0:
        raise MetricError("evaluation split is empty")
    if not data.has_both_classes():
        raise MetricError("evaluation split must contain both classes")
    streams, fused = predict_arrays(model, data.regions, batch_size)
    return report_from_logits(fused, data.labels, streams)


def cross_compression_matrix(
    models: Mapping[int, MultiStreamModel],
    test_sets: Mapping[int, RegionData],
) -> tuple[list[int], list[int], np.ndarray]:
    """Entry (r, c): balanced accuracy of the model trained at level r on test level c."""
    rows = list(models)
    cols = list(test_sets)
    mat = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            mat[i, j] = evaluate(models[r], test_sets[c]).balanced_accuracy
    return rows, cols, mat


# -- frozen-score linear fusion --------------------------------------------

@dataclass
class LinearFusion:
    """L2-regularized logistic regression on frozen stream scores."""

    alpha: float = 1e-2
    max_iter: int = 100
    tol: float = 1e-10
    weight: np.ndarray | None = None
    bias: float = 0.0
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    degenerate: list[int] = field(default_factory=list)

    def fit(self, x, y) -> "LinearFusion":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.degenerate = [int(i) for i in np.flatnonzero(std < 1e-12)]
        std[std < 1e-12] = np.inf  # constant columns contribute nothing
        self.scale = std
        z = (x - self.mean) / self.scale
        n, d = z.shape
        a = np.c_[z, np.ones(n)]
        theta = np.zeros(d + 1)
        reg = np.r_[np.full(d, self.alpha), 0.0]
        for _ in range(self.max_iter):
            p = 1.0 / (1.0 + np.exp(-(a @ theta)))
            grad = a.T @ (p - y) / n + reg * theta
            hess = (a * (p * (1 - p))[:, None]).T @ a / n + np.diag(reg) + 1e-12 * np.eye(d + 1)
            step = np.linalg.solve(hess, grad)
            theta -= step
            if np.max(np.abs(step)) < self.tol:
                break
        self.weight, self.bias = theta[:d], float(theta[d])
        return self

    def decision(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias

    def predict(self, x) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)


def stream_scores(model: MultiStreamModel, data: RegionData, batch_size: int = 100) -> np.ndarray:
    """Frozen per-stream softmax scores, concatenated to [N, 10]."""
    streams, _ = predict_arrays(model, data.regions, batch_size)
    z = streams - streams.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return p.reshape(len(p), -1)


def _columns(streams: Sequence[int]) -> list[int]:
    return [2 * (s - 1) + k for s in streams for k in (0, 1)]


def fused_accuracy(fit_scores, fit_labels, test_scores, test_labels, streams: Sequence[int]) -> tuple[float, list[int]]:
    cols = _columns(streams)
    lf = LinearFusion().fit(np.asarray(fit_scores)[:, cols], fit_labels)
    acc = balanced_accuracy(lf.predict(np.asarray(test_scores)[:, cols]), test_labels)
    return acc, [cols[i] for i in lf.degenerate]


def ablate_streams(model: MultiStreamModel, fit_data: RegionData, test_data: RegionData) -> list[dict]:
    """Standalone accuracy of each stream and of face + region combinations.

    Combinations are frozen-score linear fusions fitted on ``fit_data``.
    """
    test_streams, _ = predict_arrays(model, test_data.regions)
    rows = []
    for i in range(N_STREAMS):
        acc = balanced_accuracy(argmax_predictions(test_streams[:, i]), test_data.labels)
        rows.append({"group": "Individual", "streams": STREAM_LABELS[i], "accuracy": acc})
    fit_s = stream_scores(model, fit_data)
    test_s = np.exp(test_streams - test_streams.max(-1, keepdims=True))
    test_s = (test_s / test_s.sum(-1, keepdims=True)).reshape(len(test_s), -1)
    combos = [("Regional", (2, 3, 4, 5))] + [(f"Face + {STREAM_LABELS[i].split(' (')[0]}", (1, i + 1)) for i in range(1, N_STREAMS)]
    for label, streams in combos:
        acc, _ = fused_accuracy(fit_s, fit_data.labels, test_s, test_data.labels, streams)
        rows.append({"group": "Combination", "streams": label, "accuracy": acc})
    return rows


def fusion_ablation(fit_scores, fit_labels, test_scores, test_labels, proposed_accuracy: float | None = None) -> list[dict]:
    """Frozen-score fusion rows versus the end-to-end model.

    Constant score columns are listed in the ``degenerate`` field rather than
    treated as errors.
    """
    rows = []
    for label, streams in (("Regional Classifiers", (2, 3, 4, 5)), ("All Classifiers", (1, 2, 3, 4, 5))):
        acc, bad = fused_accuracy(fit_scores, fit_labels, test_scores, test_labels, streams)
        rows.append({"classifiers": label, "fusion": "Linear", "accuracy": acc, "degenerate": " ".join(map(str, bad))})
    if proposed_accuracy is not None:
        rows.append({"classifiers": "All Classifiers", "fusion": "Proposed", "accuracy": proposed_accuracy, "degenerate": ""})
    return rows


def best_single_stream(model: MultiStreamModel, data: RegionData) -> tuple[int, float]:
    streams, _ = predict_arrays(model, data.regions)
    accs = [balanced_accuracy(argmax_predictions(streams[:, i]), data.labels) for i in range(N_STREAMS)]
    best = int(np.argmax(accs))
    return best + 1, accs[best]


# -- class activation maps -------------------------------------------------

@dataclass
class CamHeatmap:
    stream: int
    cls: int
    grid: np.ndarray  # normalized to [0, 1] at feature-map resolution
    raw: np.ndarray = field(repr=False)
    upsampled: np.ndarray | None = field(default=None, repr=False)
    overlay: np.ndarray | None = field(default=None, repr=False)


def normalize_map(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def cam_from_features(features: np.ndarray, head_weight: np.ndarray, cls: int) -> np.ndarray:
    """Raw class activation map: sum_k w[cls, k] * F_k for features [C, h, w]."""
    return np.tensordot(np.asarray(head_weight)[cls], features, axes=(0, 0))


def _overlay(image_chw: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    from matplotlib import colormaps

    rgb = colormaps["jet"](heat)[..., :3]
    img = np.clip(np.asarray(image_chw, dtype=np.float64).transpose(1, 2, 0), 0, 1)
    return np.clip(np.round(255 * ((1 - alpha) * img + alpha * rgb)), 0, 255).astype(np.uint8)


def cam(model: MultiStreamModel, sample, stream: int = 1, cls: int = 1) -> CamHeatmap:
    """Class activation map for one image of one stream.

    ``sample`` is a RegionSet, a [5, 3, S, S] region array, or a single
    [3, S, S] image for the chosen stream.
    """
    arr = sample.as_array() if hasattr(sample, "as_array") else np.asarray(sample)
    image = arr[stream - 1] if arr.ndim == 4 else arr
    with no_grad():
        _, feats = stream_forward(model, stream, image[None].astype(get_dtype()), mode="eval")
    w = model.streams[stream - 1].params["fc.weight"].data
    raw = cam_from_features(feats[0], w, cls)
    grid = normalize_map(raw)
    s = image.shape[-1]
    up = np.clip(resize_bilinear(grid, s), 0.0, 1.0)
    return CamHeatmap(stream, cls, grid, raw, up, _overlay(image, up))


def save_cam_png(heat: CamHeatmap, path: str | Path) -> None:
    Image.fromarray(heat.overlay).save(path, format="PNG")


def cam_region_ratio(heat: np.ndarray, mask: np.ndarray) -> float:
    """Mean heat inside ``mask`` divided by mean heat outside it."""
    inside = np.asarray(mask) > 0.5
    if inside.all() or not inside.any():
        raise ValueError("mask must have both inside and outside pixels")
    out_mean = heat[~inside].mean()
    in_mean = heat[inside].mean()
    return float(in_mean / out_mean) if out_mean > 0 else float("inf")


def cam_localization(model: MultiStreamModel, data: RegionData, stream: int = 1, cls: int = 1, limit: int | None = None) -> dict:
    """Mean CAM inside vs outside the artifact masks over altered samples."""
    if data.masks is None:
        raise ValueError("region data carries no artifact masks")
    idx = np.flatnonzero(data.labels == 1)
    if limit is not None:
        idx = idx[:limit]
    ins, outs = [], []
    for i in idx:
        h = cam(model, data.regions[i], stream, cls).upsampled
        m = data.masks[i] > 0.5
        ins.append(h[m].mean())
        outs.append(h[~m].mean())
    mi, mo = float(np.mean(ins)), float(np.mean(outs))
    return {"n": int(len(idx)), "mean_inside": mi, "mean_outside": mo, "ratio": mi / mo if mo > 0 else float("inf")}


# -- training-based sweeps -------------------------------------------------

def lambda_sweep(
    train_data: RegionData,
    val_data: RegionData,
    test_data: RegionData,
    lambdas: Sequence[float],
    train_config: TrainConfig,
    backbone: BackboneConfig | None = None,
    model_seed: int = 0,
) -> list[dict]:
    """One model per lambda (shared seed); balanced accuracy on ``test_data``."""
    backbone = backbone or BackboneConfig()
    rows = []
    for lam in lambdas:
        cfg = TrainConfig(**{**train_config.to_dict(), "lam": float(lam)})
        model = build_model(backbone, model_seed)
        res = train(model, train_data, val_data, cfg)
        rows.append({"lambda": float(lam), "balanced_accuracy": evaluate(res.model, test_data).balanced_accuracy, "best_epoch": res.best_epoch})
    return rows


def repeat_runs(run: Callable[[int], float], seeds: Sequence[int]) -> dict:
    """Mean and standard deviation of ``run(seed)`` over several seeds."""
    values = [float(run(s)) for s in seeds]
    return {"n": len(values), "mean": float(np.mean(values)), "std": float(np.std(values)), "values": values}


# -- report files ----------------------------------------------------------

def write_rows_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def write_metrics_csv(report: EvalReport, path: str | Path, extra: Mapping | None = None) -> None:
    write_rows_csv([{**(extra or {}), **report.metrics_row()}], path)


def write_roc_csv(report: EvalReport, path: str | Path) -> None:
    write_rows_csv(
        [{"threshold": t, "fpr": f, "tpr": r} for t, f, r in zip(report.thresholds, report.fpr, report.tpr)],
        path,
    )


def write_matrix_csv(rows: Sequence, cols: Sequence, mat: np.ndarray, path: str | Path, corner: str = "train\\test") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([corner, *[f"qp{c}" for c in cols]])
        for r, vals in zip(rows, mat):
            w.writerow([f"qp{r}", *[f"{v:.6f}" for v in vals]])

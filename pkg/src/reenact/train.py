"""Training loop: ADAM, step-decay learning rate, best-validation retention."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .loss import LOG_COLUMNS, total_loss
from .metrics import argmax_predictions, balanced_accuracy
from .model import MultiStreamModel, forward, predict_arrays
from .optim import AdamState, adam_step
from .preprocess import CompressionLevel, PreprocessConfig, build_region_array, region_mask
from .tensor import NumericalError

__all__ = [
    "RegionData",
    "TrainConfig",
    "TrainHistory",
    "TrainResult",
    "TrainingDiverged",
    "build_region_data",
    "load_checkpoint",
    "lr_schedule",
    "save_checkpoint",
    "train",
]

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class RegionData:
    """Preprocessed frames ready for the model."""

    regions: np.ndarray  # [N, 5, 3, S, S] float32
    labels: np.ndarray  # [N] int64
    video_ids: list[str] = field(default_factory=list)
    masks: np.ndarray | None = None  # [N, S, S] artifact masks in crop space, if known

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.regions) != len(self.labels):
            raise ValueError("regions and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "RegionData":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        vids = [self.video_ids[i] for i in idx] if self.video_ids else []
        masks = self.masks[idx] if self.masks is not None else None
        return RegionData(self.regions[idx], self.labels[idx], vids, masks)

    def has_both_classes(self) -> bool:
        return len(np.unique(self.labels)) == 2


def build_region_data(samples: Sequence, level: CompressionLevel | int = 0, config: PreprocessConfig | None = None, with_masks: bool = False) -> RegionData:
    config = config or PreprocessConfig()
    regions = build_region_array([s.image for s in samples], [s.box for s in samples], level, config)
    masks = None
    if with_masks and all(s.mask is not None for s in samples):
        masks = np.stack([region_mask(s.mask, s.box, config) for s in samples]).astype(np.float32)
    return RegionData(regions, np.array([s.label for s in samples]), [s.video_id for s in samples], masks)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 1e-4
    decay_every: int = 10
    decay_factor: float = 10.0
    lam: float = 1.0
    seed: int = 0
    qp: int = 0
    objective: str = "balanced"
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.base_lr <= 0 or self.decay_every < 1 or self.decay_factor <= 0:
            raise ValueError("batch_size, base_lr, decay_every and decay_factor must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.objective not in ("balanced", "fusion_only"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.base_lr / config.decay_factor ** (epoch // config.decay_every)


HISTORY_COLUMNS = ("epoch", "lr", "l_r1", "l_r2", "l_r3", "l_r4", "l_r5", "l_fusion", "l_total", "val_balanced_accuracy", "seconds")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path: str | Path, columns: Sequence[str] = HISTORY_COLUMNS) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def write_loss_log(self, path: str | Path) -> None:
        """Per-epoch loss components (epoch, l_r1..l_r5, l_fusion, l_total)."""
        self.write_csv(path, LOG_COLUMNS)

    def deterministic_rows(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]


@dataclass
class TrainResult:
    model: MultiStreamModel
    history: TrainHistory
    best_epoch: int | None
    best_val: float | None


def validation_accuracy(model: MultiStreamModel, data: RegionData, batch_size: int = 100) -> float:
    _, fused = predict_arrays(model, data.regions, batch_size)
    return balanced_accuracy(argmax_predictions(fused), data.labels)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(epoch), 0x7EA1])))
    return rng.permutation(n)


def train(
    model: MultiStreamModel,
    train_data: RegionData,
    val_data: RegionData | None,
    config: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Minimize the balanced loss with ADAM over shuffled mini-batches.

    After every epoch the model is scored on ``val_data`` (class-balanced
    accuracy); the best epoch's weights are kept (ties go to the earlier
    epoch) and restored into ``model`` at the end.
    """
    if config.epochs > 0:
        if not train_data.has_both_classes():
            raise ValueError("training data must contain both classes")
        if val_data is not None and not val_data.has_both_classes():
            raise ValueError("validation data must contain both classes")
    params = model.named_parameters()
    state = AdamState()
    history = TrainHistory()
    best_val: float | None = None
    best_epoch: int | None = None
    best_state = None
    n = len(train_data)
    dt = model.dtype

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = _epoch_order(n, config.seed, epoch)
        sums = np.zeros(7)
        seen = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(order[start:start + config.batch_size])
            x = train_data.regions[idx].astype(dt, copy=False)
            y = train_data.labels[idx]
            model.zero_grad()
            out = forward(model, x, mode="train")
            br = total_loss(out, y, config.lam, config.objective)
            if not np.isfinite(br.l_total):
                raise TrainingDiverged(f"non-finite loss {br.l_total} at epoch {epoch}, batch {b}", epoch, b)
            br.tensor.backward()
            try:
                adam_step(params, state, lr)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            sums += len(idx) * np.array([*br.l_r, br.l_fusion, br.l_total])
            seen += len(idx)
        means = sums / max(seen, 1)
        row = {"epoch": epoch, "lr": lr}
        row.update({f"l_r{i + 1}": float(means[i]) for i in range(5)})
        row["l_fusion"] = float(means[5])
        row["l_total"] = float(means[6])
        if val_data is not None:
            acc = validation_accuracy(model, val_data, config.eval_batch_size)
            row["val_balanced_accuracy"] = acc
            if best_val is None or acc > best_val:
                best_val, best_epoch = acc, epoch
                best_state = model.copy_state()
                if checkpoint_dir is not None:
                    save_checkpoint(model, checkpoint_dir, extra={"epoch": epoch, "val_balanced_accuracy": acc})
        row["seconds"] = time.perf_counter() - t0
        history.rows.append(row)
        log.info(
            "epoch %d lr %.2e l_total %.4f l_fusion %.4f val_bacc %s (%.1fs)",
            epoch, lr, row["l_total"], row["l_fusion"], f"{row.get('val_balanced_accuracy', float('nan')):.4f}", row["seconds"],
        )
        if log_path is not None:
            history.write_loss_log(log_path)

    if best_state is not None:
        model.load_state_dict(best_state)
    elif checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, extra={"epoch": None})
    return TrainResult(model, history, best_epoch, best_val)

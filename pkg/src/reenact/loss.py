"""Balanced multi-stream objective.

``L_total = L_R1 + (L_R2 + L_R3 + L_R4 + L_R5) + lambda * L_fusion`` where every
term is a softmax cross-entropy: ``L_Ri`` on the logits of stream ``i`` and
``L_fusion`` on the fused logits. Keeping the per-stream terms in the objective
stops training from collapsing onto a single stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .model import N_STREAMS, StreamOutputs
from .tensor import Tensor

LOG_COLUMNS = ("epoch", "l_r1", "l_r2", "l_r3", "l_r4", "l_r5", "l_fusion", "l_total")


def cross_entropy_from_logits(logits, y: int, clamp: float = ops.PROB_CLAMP) -> float:
    """``-log(softmax(logits)[y])`` for a single pair, probability clamped."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    z = z - z.max()
    p = np.exp(z[int(y)]) / np.exp(z).sum()
    return float(-math.log(max(p, clamp)))


@dataclass
class LossBreakdown:
    l_r: list[float]
    l_fusion: float
    lam: float
    l_total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        row = {f"l_r{i + 1}": v for i, v in enumerate(self.l_r)}
        row["l_fusion"] = self.l_fusion
        row["l_total"] = self.l_total
        return row


def total_loss(outputs: StreamOutputs, y, lam: float = 1.0, objective: str = "balanced") -> LossBreakdown:
    """Batch-mean losses for every stream and the fusion head.

    ``objective="fusion_only"`` backpropagates ``L_fusion`` alone (the
    per-stream terms are still reported). ``breakdown.tensor`` is the
    differentiable total.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    stream_terms = [ops.cross_entropy(lg, labels) for lg in outputs.stream_logits]
    if len(stream_terms) != N_STREAMS:
        raise ValueError(f"expected {N_STREAMS} stream outputs, got {len(stream_terms)}")
    fusion_term = ops.cross_entropy(outputs.fused_logits, labels)

    if objective == "balanced":
        total = stream_terms[0]
        for t in stream_terms[1:]:
            total = total + t
        if lam != 0:
            total = total + fusion_term * lam
    elif objective == "fusion_only":
        total = fusion_term
    else:
        raise ValueError(f"unknown objective {objective!r}")

    return LossBreakdown(
        l_r=[t.item() for t in stream_terms],
        l_fusion=fusion_term.item(),
        lam=float(lam),
        l_total=total.item(),
        tensor=total,
    )

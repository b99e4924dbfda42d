"""ADAM with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NumericalError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, grads: Mapping[str, np.ndarray] | None = None) -> AdamState:
    """Apply one ADAM update in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``. A NaN or
    infinite gradient aborts the step before anything is modified.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in parameter {name!r} ({bad} bad entries)")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype, copy=False)
    return state

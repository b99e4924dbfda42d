"""Finite-difference gradient checks for the autodiff substrate and the full model."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .loss import total_loss
from .model import BackboneConfig, build_model, forward
from .tensor import Tensor, no_grad, precision


def rel_error(a, b) -> float:
    """Norm-relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place and restored.

    Only ``coords`` (flat indices) are filled when given; the rest stay 0.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(build: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error over the inputs of ``build`` (64-bit).

    The op output is contracted with fixed random weights so every output
    element contributes to the checked scalar.
    """
    with precision(np.float64):
        inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = build(*inputs)
        w = np.random.default_rng(seed).standard_normal(out.shape)
        (out * Tensor(w)).sum().backward()

        def f():
            with no_grad():
                return float((build(*[Tensor(t.data) for t in inputs]).data * w).sum())

        return max(rel_error(t.grad, numeric_grad(f, t.data, h)) for t in inputs)


def random_model_case(case: int) -> tuple[BackboneConfig, int, np.ndarray, np.ndarray, float]:
    rng = np.random.default_rng(1000 + case)
    n_stage = int(rng.integers(1, 3))
    widths = tuple(int(w) for w in rng.integers(2, 4, n_stage))
    cfg = BackboneConfig(widths=widths, blocks=(1,) * n_stage, resolution=int(rng.choice([8, 10])))
    n = int(rng.integers(2, 4))
    x = rng.random((n, 5, 3, cfg.resolution, cfg.resolution))
    y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    lam = float(rng.choice([0.0, 1.0, 2.5]))
    return cfg, case, x, y, lam


def check_model_gradient(case: int, n_params: int = 6, n_coords: int = 4, h: float = 1e-5) -> dict[str, float]:
    """Relative error of dL_total/dtheta on sampled coordinates of a small random model."""
    cfg, seed, x, y, lam = random_model_case(case)
    rng = np.random.default_rng(case)
    with precision(np.float64):
        model = build_model(cfg, seed)
        params = model.named_parameters()

        def loss_value():
            with no_grad():
                return total_loss(forward(model, x, mode="train"), y, lam).l_total

        model.zero_grad()
        total_loss(forward(model, x, mode="train"), y, lam).tensor.backward()
        names = sorted(params)
        picks = [names[i] for i in rng.choice(len(names), n_params, replace=False)] + ["fusion.weight"]
        errors = {}
        for name in picks:
            p = params[name]
            coords = rng.choice(p.data.size, min(n_coords, p.data.size), replace=False)
            num = numeric_grad(loss_value, p.data, h, coords).reshape(-1)[coords]
            errors[name] = rel_error(p.grad.reshape(-1)[coords], num)
    return errors


def op_cases() -> list[tuple[str, Callable[..., Tensor], tuple[np.ndarray, ...]]]:
    """(name, build, inputs) for every differentiable op, on small 64-bit inputs."""
    from . import ops

    rng = np.random.default_rng(0)
    cases = []
    a, b = rng.standard_normal((2, 3, 4))
    cases.append(("elementwise", lambda x, y: x * y + x - y * 0.5, (a, b)))
    cases.append(("reshape-mean-sum", lambda x: (x * x).reshape(12).mean() * 3.0 - x.sum(), (a,)))
    for stride, padding, k in [(1, 0, 3), (2, 1, 3), (1, 1, 1), (2, 3, 7), (1, 0, 1)]:
        x = rng.standard_normal((2, 3, 9, 8))
        w = rng.standard_normal((4, 3, k, k))
        bias = rng.standard_normal(4)
        cases.append((f"conv2d-k{k}s{stride}p{padding}",
                      lambda x_, w_, b_, s=stride, p=padding: ops.conv2d(x_, w_, b_, s, p), (x, w, bias)))
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    cases.append(("conv2d-cnhw", lambda x_, w_: ops.conv2d(x_, w_, stride=2, padding=1, layout="CNHW"), (x, w)))
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5
    for layout in ("NCHW", "CNHW"):
        for training in (True, False):
            x = rng.standard_normal((4, 3, 3, 2) if layout == "NCHW" else (3, 4, 3, 2))
            cases.append((f"batch_norm-{layout}-{'train' if training else 'eval'}",
                          lambda x_, g_, b_, lay=layout, tr=training: ops.batch_norm2d(x_, g_, b_, rm.copy(), rv.copy(), tr, layout=lay),
                          (x, rng.standard_normal(3), rng.standard_normal(3))))
    # distinct values keep relu kinks and pooling ties away from the stencil
    x = rng.permutation(np.linspace(-3, 3, 2 * 3 * 4 * 6)).reshape(2, 3, 4, 6)
    cases += [
        ("relu", ops.relu, (x,)),
        ("max_pool2d", lambda x_: ops.max_pool2d(x_, 2, 2), (x,)),
        ("global_avg_pool", ops.global_avg_pool, (x,)),
        ("global_avg_pool-cnhw", lambda x_: ops.global_avg_pool(x_, layout="CNHW"), (x,)),
        ("transpose01", ops.transpose01, (x,)),
        ("linear", ops.linear, (rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3))),
    ]
    z = rng.standard_normal((6, 2)) * 2
    y = rng.integers(0, 2, 6)
    p, q = rng.standard_normal((2, 3, 2))
    cases += [
        ("softmax", ops.softmax, (z,)),
        ("log_softmax", ops.log_softmax, (z,)),
        ("cross_entropy", lambda z_: ops.cross_entropy(z_, y), (z,)),
        ("concat", lambda p_, q_: ops.concat([p_, q_], axis=1), (p, q)),
        ("select", lambda p_: ops.select(p_, 1, axis=1), (rng.standard_normal((3, 4, 2)),)),
    ]
    return cases

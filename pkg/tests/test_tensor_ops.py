import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reenact import ops
from reenact.optim import AdamState, adam_step
from reenact.gradcheck import check_model_gradient, check_op, op_cases
from reenact.tensor import NumericalError, Tensor, check_finite, get_dtype, no_grad, precision

TOL = 1e-4


def t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


OPS = {name: (build, arrays) for name, build, arrays in op_cases()}


# -- gradient suite (64-bit, h=1e-5) ---------------------------------------

@pytest.mark.parametrize("name", list(OPS))
def test_op_gradient(name):
    build, arrays = OPS[name]
    assert check_op(build, *[a.copy() for a in arrays]) < TOL


@pytest.mark.parametrize("case", range(20))
def test_full_loss_gradient(case):
    """L_total gradient of the whole five-stream model vs finite differences."""
    errors = check_model_gradient(case)
    assert max(errors.values()) < TOL, errors


# -- forward oracles --------------------------------------------------------

def test_conv_identity_and_sum_oracle():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv_output_shape_paper_stem():
    assert ops.conv_output_size(224, 7, 2, 3) == 112
    x = Tensor(np.zeros((1, 3, 32, 32), np.float32))
    out = ops.conv2d(x, Tensor(np.zeros((4, 3, 7, 7), np.float32)), stride=2, padding=3)
    assert out.shape == (1, 4, 16, 16)


def test_conv_matches_direct_loops(f64):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    stride, pad = 2, 1
    out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ref = np.zeros_like(out)
    for n in range(2):
        for f in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, f, i, j] = np.sum(xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3] * w[f])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_batch_norm_examples(f64):
    rng = np.random.default_rng(0)
    # balanced +-1 entries: exactly zero mean and unit variance per channel;
    # eps shrinks outputs by |x|*(1 - 1/sqrt(1+eps)) ~ 5e-6 here
    x = np.stack([rng.permutation(np.repeat([-1.0, 1.0], 64)) for _ in range(2)]).reshape(2, 8, 4, 4).transpose(1, 0, 2, 3)
    args = (Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)
    out = ops.batch_norm2d(Tensor(x), *args)
    assert np.max(np.abs(out.data - x)) < 1e-5
    beta = np.array([0.3, -2.0])
    out = ops.batch_norm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape), atol=1e-12)
    const = np.full((1, 2, 3, 3), 7.0)
    out = ops.batch_norm2d(Tensor(const), Tensor(np.array([1.5, 2.0])), Tensor(beta), np.zeros(2), np.ones(2), True)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], const.shape), atol=1e-12)


def test_batch_norm_running_stats(f64):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    m = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    before = rm.copy(), rv.copy()
    ops.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
    np.testing.assert_array_equal(rm, before[0])
    np.testing.assert_array_equal(rv, before[1])


def test_small_op_examples():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    gap = ops.global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    np.testing.assert_array_equal(gap.data, [[2.5]])
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    with pytest.raises(ValueError):
        ops.max_pool2d(Tensor(np.zeros((1, 1, 1, 4))), 2, 2)
    pooled = ops.max_pool2d(Tensor(np.arange(25.0).reshape(1, 1, 5, 5)), 2, 2)
    np.testing.assert_array_equal(pooled.data, [[[[6.0, 8.0], [16.0, 18.0]]]])


def test_softmax_examples(f64):
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([[0.0, 0.0]]))).data, [[0.5, 0.5]])
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([[math.log(3), 0.0]]))).data, [[0.75, 0.25]], atol=1e-15)
    big = ops.softmax(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_backward_examples():
    x = t([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = t([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])
    unused = t([5.0])
    (x * 1.0).sum().backward()
    np.testing.assert_array_equal(unused.grad, [0.0])
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_grad_accumulates_until_cleared():
    x = t([1.0, -1.0])
    for _ in range(3):
        (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6, 6])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0, 0])


def test_no_implicit_broadcasting():
    with pytest.raises(ValueError, match="broadcast"):
        t(np.zeros(3)) + t(np.zeros((1, 3)))


def test_precision_switch():
    assert get_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_check_finite_mode():
    with check_finite():
        with pytest.raises(NumericalError):
            Tensor(np.array([1.0])) * float("inf")


# -- ADAM -------------------------------------------------------------------

def scalar_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
        out.append(w)
    return out


def test_adam_first_step():
    p = {"w": Tensor(np.zeros(1), requires_grad=True)}
    p["w"].grad = np.ones(1)
    state = adam_step(p, AdamState(), 1e-3)
    assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.step_count == 1


def test_adam_zero_gradient_is_noop():
    w0 = np.array([0.5, -2.0])
    p = {"w": Tensor(w0.copy(), requires_grad=True)}
    st_ = AdamState()
    for _ in range(5):
        adam_step(p, st_, 0.1, grads={"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, w0)
    assert st_.step_count == 5
    assert st_.first_moment["w"].shape == w0.shape


@settings(max_examples=30, deadline=None)
@given(
    w0=hnp.arrays(np.float64, 3, elements=st.floats(-5, 5)),
    gs=hnp.arrays(np.float64, (6, 3), elements=st.floats(-10, 10)),
    lr=st.floats(1e-5, 1e-1),
)
def test_adam_matches_scalar_oracle(w0, gs, lr):
    p = {"w": Tensor(w0.copy(), requires_grad=True, dtype=np.float64)}
    state = AdamState()
    for g in gs:
        adam_step(p, state, lr, grads={"w": g})
    for c in range(3):
        assert abs(p["w"].data[c] - scalar_adam(w0[c], gs[:, c], lr)[-1]) <= 1e-12 * max(1.0, abs(w0[c]))


def test_adam_nan_names_parameter():
    p = {"stream.conv": Tensor(np.zeros(2), requires_grad=True), "ok": Tensor(np.zeros(1), requires_grad=True)}
    with pytest.raises(NumericalError, match="stream.conv"):
        adam_step(p, AdamState(), 1e-3, grads={"stream.conv": np.array([0.0, np.nan]), "ok": np.zeros(1)})
    np.testing.assert_array_equal(p["ok"].data, [0.0])


# -- properties -------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.permutations(range(4)))
def test_softmax_rows_and_permutation(z, perm):
    s = ops.softmax(Tensor(z, dtype=np.float64)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s >= 0) and np.all(s <= 1)
    sp = ops.softmax(Tensor(z[:, list(perm)], dtype=np.float64)).data
    np.testing.assert_allclose(sp, s[:, list(perm)], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 3, 6, 6))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), dtype=np.float64)

    def conv(v):
        return ops.conv2d(Tensor(v, dtype=np.float64), w, stride=1, padding=1).data

    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.float32, (2, 3, 5, 5), elements=st.floats(-10, 10, width=32)))
def test_conv_identity_kernel(x):
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert a.tobytes() == b.tobytes()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reenact import ops
from reenact.loss import LossBreakdown, cross_entropy_from_logits, total_loss
from reenact.model import BackboneConfig, StreamOutputs, build_model, forward
from reenact.tensor import Tensor, precision

LN2 = math.log(2)


def outputs_from(stream_logits, fused):
    """StreamOutputs built directly from logit arrays ([N,5,2] and [N,2])."""
    f64 = np.float64
    streams = [Tensor(np.asarray(stream_logits[:, i]), requires_grad=True, dtype=f64) for i in range(5)]
    cat = ops.concat(streams, axis=1)
    return StreamOutputs(streams, cat, Tensor(np.asarray(fused), requires_grad=True, dtype=f64))


def test_ce_examples():
    assert cross_entropy_from_logits([0, 0], 0) == pytest.approx(LN2, abs=1e-12)
    assert cross_entropy_from_logits([0, 0], 1) == pytest.approx(0.693147, abs=1e-6)
    # softmax [0.25, 0.75] comes from logits [0, ln 3]
    assert cross_entropy_from_logits([0, math.log(3)], 1) == pytest.approx(0.287682, abs=1e-6)
    assert cross_entropy_from_logits([30, -30], 0) < 1e-9


def test_ce_clamp():
    assert cross_entropy_from_logits([1000, -1000], 1) == pytest.approx(-math.log(1e-12))


def test_six_ln2_fixture():
    br = total_loss(outputs_from(np.zeros((1, 5, 2)), np.zeros((1, 2))), [1], lam=1.0)
    assert br.l_total == pytest.approx(4.158883, abs=1e-5)
    assert br.l_total == pytest.approx(6 * LN2, abs=1e-12)


def test_lambda_zero_and_hundred():
    out = outputs_from(np.zeros((1, 5, 2)), np.zeros((1, 2)))
    assert total_loss(out, [0], lam=100.0).l_total == pytest.approx(105 * LN2, rel=1e-12)
    rng = np.random.default_rng(0)
    out = outputs_from(rng.standard_normal((4, 5, 2)), rng.standard_normal((4, 2)))
    br = total_loss(out, [0, 1, 1, 0], lam=0.0)
    assert br.l_total == sum(br.l_r)


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 5, 2), elements=st.floats(-20, 20)),
    hnp.arrays(np.float64, (3, 2), elements=st.floats(-20, 20)),
    st.lists(st.integers(0, 1), min_size=3, max_size=3),
    st.floats(0, 100),
)
def test_affine_in_lambda(streams, fused, y, lam):
    out = outputs_from(streams, fused)
    b0 = total_loss(out, y, 0.0)
    bl = total_loss(out, y, lam)
    assert bl.l_total == pytest.approx(b0.l_total + lam * bl.l_fusion, rel=1e-12, abs=1e-12)
    assert min(bl.l_r) >= 0 and bl.l_fusion >= 0
    expected = bl.l_r[0] + sum(bl.l_r[1:]) + lam * bl.l_fusion
    assert bl.l_total == pytest.approx(expected, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, 2, elements=st.floats(-30, 30)), st.floats(-50, 50), st.integers(0, 1))
def test_ce_shift_invariance(z, c, y):
    assert cross_entropy_from_logits(z + c, y) == pytest.approx(cross_entropy_from_logits(z, y), abs=1e-9)


def test_zero_only_at_certainty():
    big = np.tile([60.0, -60.0], (2, 5, 1))
    br = total_loss(outputs_from(big, np.tile([60.0, -60.0], (2, 1))), [0, 0], lam=1.0)
    assert br.l_total < 1e-20
    br = total_loss(outputs_from(big, np.tile([-60.0, 60.0], (2, 1))), [0, 0], lam=1.0)
    assert br.l_total > 1


def test_stream_gradient_survives_zero_fusion_row():
    """Stream parameters keep a gradient through their own term even if fusion ignores them."""
    with precision(np.float64):
        model = build_model(BackboneConfig(widths=(4,), blocks=(1,), resolution=8), 0)
        model.fusion_weight.data[:, 6:8] = 0  # stream 4 contributes nothing to fusion
        x = np.random.default_rng(0).random((2, 5, 3, 8, 8))
        model.zero_grad()
        total_loss(forward(model, x, mode="train"), [0, 1], 1.0).tensor.backward()
        g = model.streams[3].params["conv1.weight"].grad
        assert np.abs(g).sum() > 0
        model.zero_grad()
        total_loss(forward(model, x, mode="train"), [0, 1], 1.0, objective="fusion_only").tensor.backward()
        assert np.abs(model.streams[3].params["conv1.weight"].grad).sum() == 0


def test_breakdown_row_and_validation():
    br = total_loss(outputs_from(np.zeros((1, 5, 2)), np.zeros((1, 2))), [0], 1.0)
    assert isinstance(br, LossBreakdown)
    assert list(br.as_row()) == ["l_r1", "l_r2", "l_r3", "l_r4", "l_r5", "l_fusion", "l_total"]
    with pytest.raises(ValueError):
        total_loss(outputs_from(np.zeros((1, 5, 2)), np.zeros((1, 2))), [0], -1.0)
    with pytest.raises(ValueError):
        total_loss(outputs_from(np.zeros((1, 5, 2)), np.zeros((1, 2))), [0], 1.0, objective="other")

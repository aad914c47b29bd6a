import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyfqt.qcore import (
    QTensor,
    QuantParams,
    RangeTracker,
    derive_qparams,
    dequantize,
    dequantize_tensor,
    quantize,
    quantize_tensor,
    requantize,
)

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@st.composite
def qparams(draw):
    scale = draw(st.floats(1e-4, 10.0))
    zp = draw(st.integers(0, 255))
    return QuantParams(scale, zp)


# -- derive_qparams --------------------------------------------------------


def test_derive_asymmetric_range():
    qp = derive_qparams(-1.0, 1.55)
    assert qp.scale == pytest.approx(0.01, rel=1e-6)
    assert qp.zero_point == 100


def test_derive_identity_scale():
    qp = derive_qparams(0.0, 255.0)
    assert qp.scale == 1.0 and qp.zero_point == 0


def test_derive_symmetric_range():
    qp = derive_qparams(-127.5, 127.5)
    assert qp.scale == 1.0 and qp.zero_point == 127


def test_derive_widens_to_include_zero():
    qp = derive_qparams(2.0, 4.0)
    assert qp.zero_point == 0
    assert qp.scale == pytest.approx(4.0 / 255, rel=1e-6)
    qp = derive_qparams(-4.0, -2.0)
    assert qp.zero_point == 255


def test_derive_degenerate_range():
    qp = derive_qparams(0.0, 0.0)
    assert qp.scale == pytest.approx(1 / 255)
    assert qp.zero_point == 0
    assert quantize(0.0, qp) == 0


def test_derive_rejects_inverted_range():
    with pytest.raises(ValueError):
        derive_qparams(1.0, -1.0)


def test_derive_tiny_range_keeps_positive_scale():
    qp = derive_qparams(-1e-44, 1e-44)
    assert qp.scale > 0


def test_quantparams_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 256)
    with pytest.raises(ValueError):
        QuantParams(float("nan"), 3)


# -- quantize / dequantize -------------------------------------------------


def test_quantize_examples():
    assert quantize(0.0, QuantParams(0.37, 10)) == 10
    assert quantize(2.0, QuantParams(0.5, 10)) == 14
    assert quantize(1000.0, QuantParams(0.5, 10)) == 255
    assert quantize(-1000.0, QuantParams(0.5, 10)) == 0


def test_quantize_floors():
    qp = QuantParams(0.5, 10)
    assert quantize(0.99, qp) == 11
    assert quantize(-0.01, qp) == 9


def test_quantize_nearest_mode():
    qp = QuantParams(0.5, 10)
    assert quantize(0.99, qp, rounding="nearest") == 12
    assert quantize(-0.01, qp, rounding="nearest") == 10
    with pytest.raises(ValueError):
        quantize(1.0, qp, rounding="up")


def test_dequantize_examples():
    qp = QuantParams(0.5, 10)
    assert dequantize(10, qp) == 0.0
    assert dequantize(14, qp) == 2.0


def test_round_trip_example():
    qp = QuantParams(0.01, 100)
    assert abs(dequantize(quantize(1.37, qp), qp) - 1.37) <= 0.01


def test_quantize_tensor_examples():
    t = quantize_tensor(np.zeros((3, 4), np.float32))
    assert np.all(t.data == t.qparams.zero_point)
    t = quantize_tensor(np.array([-1.0, 0.0, 1.55]))
    assert t.qparams.scale == pytest.approx(0.01, rel=1e-6)
    assert t.qparams.zero_point == 100
    assert t.data.tolist() == [0, 100, 255]


def test_quantize_tensor_empty():
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((0, 3)))


def test_qtensor_requires_uint8():
    with pytest.raises(TypeError):
        QTensor(np.zeros(3, np.int32), QuantParams(1.0, 0))


def test_requantize_relu_clamps_at_zero_point():
    qp = QuantParams(0.1, 50)
    y = requantize(np.array([-100.0, 0.0, 10.0]), 0.01, qp, relu=True)
    assert y.data.tolist() == [50, 50, 51]


@settings(max_examples=300, deadline=None)
@given(qparams(), st.floats(0.0, 1.0))
def test_round_trip_within_one_step(qp, u):
    v = qp.lo + u * (qp.hi - qp.lo)
    assert abs(dequantize(quantize(v, qp), qp) - v) <= qp.scale * (1 + 1e-9)


@settings(max_examples=300, deadline=None)
@given(qparams(), finite, finite)
def test_quantize_monotone(qp, a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize(lo, qp) <= quantize(hi, qp)


@settings(max_examples=300, deadline=None)
@given(qparams(), finite)
def test_quantize_saturates(qp, v):
    assert 0 <= quantize(v, qp) <= 255


@settings(max_examples=300, deadline=None)
@given(finite, finite)
def test_zero_representable(a, b):
    qp = derive_qparams(min(a, b), max(a, b))
    assert abs(dequantize(quantize(0.0, qp), qp)) <= qp.scale


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 50))
def test_tensor_round_trip_error_bounded(seed, n):
    rng = np.random.default_rng(seed)
    t = rng.normal(0, rng.uniform(0.01, 10), size=n)
    q = quantize_tensor(t)
    err = np.abs(dequantize_tensor(q).astype(np.float64) - t)
    assert err.max() <= q.qparams.scale * (1 + 1e-6)


def test_range_tracker_ema():
    rt = RangeTracker(0.99)
    assert not rt.initialized
    with pytest.raises(RuntimeError):
        rt.qparams()
    rt.observe(-1.0, 1.0)
    assert rt.state() == (-1.0, 1.0)
    rt.observe(-3.0, 3.0)
    assert rt.lo == pytest.approx(-1.02)
    assert rt.hi == pytest.approx(1.02)
    rt.reset()
    assert not rt.initialized


def test_scale_is_float32_exact():
    qp = derive_qparams(-0.3, 0.7)
    assert float(np.float32(qp.scale)) == qp.scale
    assert math.isfinite(qp.lo) and qp.lo < 0 < qp.hi

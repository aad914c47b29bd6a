"""Forward/backward kernels and the layer objects built on them.

Quantized kernels do their integer arithmetic on float64 arrays holding
zero-point-centred integers. Every product and partial sum stays far below
2**53, so BLAS matmuls give bit-exact integer results regardless of reduction
order; for the layer sizes used here they also fit a 32-bit accumulator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .qcore import (
    QTensor,
    QuantParams,
    RangeTracker,
    derive_qparams,
    quantize_tensor,
    requantize,
)

Tensor = Union[QTensor, np.ndarray]
# Receives the dequantized error arriving at a layer; returns the structure
# indices (output channels / rows) to keep, or None for all of them.
Selector = Callable[[np.ndarray], Optional[np.ndarray]]
QParamSource = Union[QuantParams, RangeTracker, None]

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class DimensionError(ValueError):
    pass


@dataclass
class LayerGrad:
    d_input: Optional[Tensor]
    d_weight: Optional[np.ndarray]
    d_bias: Optional[np.ndarray]
    macs: int = 0
    selected: float = 1.0
    rows: Optional[np.ndarray] = None  # computed output structures, None for all


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) <= 0:
                raise DimensionError(f"{name} must be positive")
        if not 0 <= self.padding < self.kernel:
            raise DimensionError("padding must satisfy 0 <= padding < kernel")

    def output_hw(self, h: int, w: int) -> tuple:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"input {h}x{w} too small for kernel {self.kernel}")
        return ho, wo


# ---------------------------------------------------------------------------
# convolution plumbing


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, Ho*Wo) patch matrix, zero padded."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add a patch matrix back onto a (C, H, W) image."""
    c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    patches = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += patches[:, i, j]
    if padding:
        out = out[:, padding : padding + h, padding : padding + w]
    return out


def _check_conv(x_shape: tuple, w_shape: tuple, geom: ConvGeometry) -> tuple:
    if len(x_shape) != 3 or x_shape[0] != geom.in_channels:
        raise DimensionError(f"conv expects ({geom.in_channels}, H, W) input, got {tuple(x_shape)}")
    want = (geom.out_channels, geom.in_channels, geom.kernel, geom.kernel)
    if tuple(w_shape) != want:
        raise DimensionError(f"conv weight must be {want}, got {tuple(w_shape)}")
    return geom.output_hw(x_shape[1], x_shape[2])


def _check_linear(x_shape: tuple, w_shape: tuple) -> None:
    if len(x_shape) != 1 or len(w_shape) != 2 or w_shape[1] != x_shape[0]:
        raise DimensionError(f"linear weight {tuple(w_shape)} incompatible with input {tuple(x_shape)}")


def _rows(select):
    return slice(None) if select is None else select


# Propagated errors round to nearest: a floor's one-sided half-step bias
# would enter every weight gradient with the same sign.
ERROR_ROUNDING = "nearest"


def _requantize_error(acc: np.ndarray, acc_scale: float, source: QParamSource) -> QTensor:
    """Requantize a propagated error; a RangeTracker source sees the range first."""
    if isinstance(source, QuantParams):
        return requantize(acc, acc_scale, source, rounding=ERROR_ROUNDING)
    real = acc * acc_scale
    lo, hi = float(real.min()), float(real.max())
    if source is None:
        qp = derive_qparams(lo, hi)
    else:
        source.observe(lo, hi)
        qp = source.qparams()
    return requantize(acc, acc_scale, qp, rounding=ERROR_ROUNDING)


# ---------------------------------------------------------------------------
# quantized kernels


def qlinear_accumulate(x: QTensor, w: QTensor, bias: np.ndarray) -> np.ndarray:
    _check_linear(x.shape, w.shape)
    return w.centered() @ x.centered() + bias.astype(np.float64)


def qlinear_forward(x: QTensor, w: QTensor, bias: np.ndarray, out_qp: QuantParams, relu: bool = False) -> QTensor:
    """Integer matmul requantized into ``out_qp``; bias is int32 at scale s_w*s_x."""
    acc = qlinear_accumulate(x, w, bias)
    return requantize(acc, w.qparams.scale * x.qparams.scale, out_qp, relu)


def qlinear_backward(
    e_out: QTensor,
    x_cached: Optional[QTensor],
    w: QTensor,
    e_in_qp: QParamSource,
    select: Optional[np.ndarray] = None,
    need_input: bool = True,
) -> LayerGrad:
    """Propagated error and float weight gradient of a quantized linear layer.

    Only output rows in ``select`` carry error (all when None). With
    ``x_cached`` None the weight gradient is skipped. ``e_in_qp`` may be fixed
    qparams, a RangeTracker to refresh, or None for qparams fresh from the
    accumulator range.
    """
    out_f, in_f = w.shape
    if e_out.shape != (out_f,):
        raise DimensionError(f"error shape {e_out.shape} does not match {out_f} outputs")
    rows = _rows(select)
    ec = e_out.centered()[rows]
    n_sel = ec.shape[0]
    s_e = e_out.qparams.scale
    grad = LayerGrad(None, None, None, 0, n_sel / out_f, select)
    if x_cached is not None:
        _check_linear(x_cached.shape, w.shape)
        grad.d_weight = np.zeros(w.shape, np.float32)
        grad.d_weight[rows] = np.outer(ec, x_cached.centered()) * (s_e * x_cached.qparams.scale)
        grad.d_bias = np.zeros(out_f, np.float32)
        grad.d_bias[rows] = ec * s_e
        grad.macs += n_sel * in_f
    if need_input:
        acc = w.centered()[rows].T @ ec
        grad.d_input = _requantize_error(acc, w.qparams.scale * s_e, e_in_qp)
        grad.macs += n_sel * in_f
    return grad


def qconv2d_accumulate(x: QTensor, w: QTensor, bias: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    ho, wo = _check_conv(x.shape, w.shape, geom)
    cols = im2col(x.centered(), geom.kernel, geom.stride, geom.padding)
    acc = w.centered().reshape(geom.out_channels, -1) @ cols
    acc += bias.astype(np.float64)[:, None]
    return acc.reshape(geom.out_channels, ho, wo)


def qconv2d_forward(
    x: QTensor, w: QTensor, bias: np.ndarray, geom: ConvGeometry, out_qp: QuantParams, relu: bool = False
) -> QTensor:
    """Integer convolution requantized into ``out_qp``; ``relu`` clamps at its zero point."""
    acc = qconv2d_accumulate(x, w, bias, geom)
    return requantize(acc, w.qparams.scale * x.qparams.scale, out_qp, relu)


def qconv2d_backward(
    e_out: QTensor,
    x_cached: Optional[QTensor],
    w: QTensor,
    geom: ConvGeometry,
    e_in_qp: QParamSource,
    select: Optional[np.ndarray] = None,
    need_input: bool = True,
    in_shape: Optional[tuple] = None,
) -> LayerGrad:
    """Transposed convolution for the error, cross-correlation for the weights."""
    in_shape = tuple(x_cached.shape) if x_cached is not None else tuple(in_shape)
    ho, wo = _check_conv(in_shape, w.shape, geom)
    oc = geom.out_channels
    if e_out.shape != (oc, ho, wo):
        raise DimensionError(f"error shape {e_out.shape} != {(oc, ho, wo)}")
    rows = _rows(select)
    ec = e_out.centered().reshape(oc, -1)[rows]
    n_sel = ec.shape[0]
    s_e = e_out.qparams.scale
    ck = w.size // oc
    grad = LayerGrad(None, None, None, 0, n_sel / oc, select)
    if x_cached is not None:
        cols = im2col(x_cached.centered(), geom.kernel, geom.stride, geom.padding)
        dw = np.zeros((oc, ck), np.float32)
        dw[rows] = (ec @ cols.T) * (s_e * x_cached.qparams.scale)
        grad.d_weight = dw.reshape(w.shape)
        grad.d_bias = np.zeros(oc, np.float32)
        grad.d_bias[rows] = ec.sum(axis=1) * s_e
        grad.macs += n_sel * ck * ho * wo
    if need_input:
        wc = w.centered().reshape(oc, ck)[rows]
        acc = col2im(wc.T @ ec, in_shape, geom.kernel, geom.stride, geom.padding)
        grad.d_input = _requantize_error(acc, w.qparams.scale * s_e, e_in_qp)
        grad.macs += n_sel * ck * ho * wo
    return grad


# ---------------------------------------------------------------------------
# float kernels


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_linear(x.shape, w.shape)
    return w @ x + b


def linear_backward(
    e_out: np.ndarray, x_cached: Optional[np.ndarray], w: np.ndarray, select=None, need_input: bool = True
) -> LayerGrad:
    out_f, in_f = w.shape
    if e_out.shape != (out_f,):
        raise DimensionError(f"error shape {e_out.shape} does not match {out_f} outputs")
    rows = _rows(select)
    es = e_out[rows]
    grad = LayerGrad(None, None, None, 0, es.shape[0] / out_f, select)
    if x_cached is not None:
        _check_linear(x_cached.shape, w.shape)
        grad.d_weight = np.zeros_like(w)
        grad.d_weight[rows] = np.outer(es, x_cached)
        grad.d_bias = np.zeros(out_f, w.dtype)
        grad.d_bias[rows] = es
        grad.macs += es.shape[0] * in_f
    if need_input:
        grad.d_input = w[rows].T @ es
        grad.macs += es.shape[0] * in_f
    return grad


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    ho, wo = _check_conv(x.shape, w.shape, geom)
    cols = im2col(x, geom.kernel, geom.stride, geom.padding)
    y = w.reshape(geom.out_channels, -1) @ cols + b[:, None]
    return y.reshape(geom.out_channels, ho, wo)


def conv2d_backward(
    e_out: np.ndarray,
    x_cached: Optional[np.ndarray],
    w: np.ndarray,
    geom: ConvGeometry,
    select=None,
    need_input: bool = True,
    in_shape: Optional[tuple] = None,
) -> LayerGrad:
    in_shape = tuple(x_cached.shape) if x_cached is not None else tuple(in_shape)
    ho, wo = _check_conv(in_shape, w.shape, geom)
    oc = geom.out_channels
    if e_out.shape != (oc, ho, wo):
        raise DimensionError(f"error shape {e_out.shape} != {(oc, ho, wo)}")
    rows = _rows(select)
    es = e_out.reshape(oc, -1)[rows]
    ck = w.size // oc
    grad = LayerGrad(None, None, None, 0, es.shape[0] / oc, select)
    if x_cached is not None:
        cols = im2col(x_cached, geom.kernel, geom.stride, geom.padding)
        dw = np.zeros((oc, ck), w.dtype)
        dw[rows] = es @ cols.T
        grad.d_weight = dw.reshape(w.shape)
        grad.d_bias = np.zeros(oc, w.dtype)
        grad.d_bias[rows] = es.sum(axis=1)
        grad.macs += es.shape[0] * ck * ho * wo
    if need_input:
        wr = w.reshape(oc, ck)[rows]
        grad.d_input = col2im(wr.T @ es, in_shape, geom.kernel, geom.stride, geom.padding)
        grad.macs += es.shape[0] * ck * ho * wo
    return grad


def relu_forward(x: np.ndarray) -> tuple:
    mask = x > 0
    return np.where(mask, x, np.zeros_like(x)), mask


def relu_backward(e_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, e_out, np.zeros_like(e_out))


def dequant_boundary(x: QTensor) -> np.ndarray:
    return x.dequantize()


def dequant_boundary_backward(e: np.ndarray) -> QTensor:
    """Float error re-enters the quantized domain with freshly derived qparams."""
    return quantize_tensor(e, rounding=ERROR_ROUNDING)


# ---------------------------------------------------------------------------
# pooling and loss, shared by both domains


def maxpool_forward(x: np.ndarray, pool: int) -> tuple:
    """Non-overlapping max pool returning (y, winner index within each window).

    Ties go to the lowest linear index in the window. Trailing rows/columns
    that do not fill a window are dropped.
    """
    if x.ndim != 3:
        raise DimensionError(f"maxpool expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    ho, wo = h // pool, w // pool
    if ho == 0 or wo == 0:
        raise DimensionError(f"input {h}x{w} smaller than pool {pool}")
    win = x[:, : ho * pool, : wo * pool].reshape(c, ho, pool, wo, pool).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, ho, wo, pool * pool)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.uint8)


def maxpool_backward(e_out: np.ndarray, argmax: np.ndarray, in_shape: tuple, pool: int, fill=0) -> np.ndarray:
    """Route each error element to its window winner; every other slot gets ``fill``."""
    if e_out.shape != argmax.shape:
        raise DimensionError(f"error shape {e_out.shape} != pooled shape {argmax.shape}")
    c, ho, wo = argmax.shape
    hit = np.arange(pool * pool, dtype=np.uint8) == argmax[..., None]
    win = np.where(hit, e_out[..., None], np.asarray(fill, dtype=e_out.dtype))
    win = win.reshape(c, ho, wo, pool, pool).transpose(0, 1, 3, 2, 4).reshape(c, ho * pool, wo * pool)
    out = np.full(in_shape, fill, dtype=e_out.dtype)
    out[:, : ho * pool, : wo * pool] = win
    return out


def softmax_xent(logits: np.ndarray, label: int) -> tuple:
    """Cross-entropy over a max-shifted softmax; returns (loss, d_logits)."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise DimensionError(f"logits must be a vector, got {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    total = e.sum()
    loss = float(np.log(total) - z[label])
    grad = e / total
    grad[label] -= 1.0
    out_dtype = logits.dtype if logits.dtype.kind == "f" else np.float32
    return loss, grad.astype(out_dtype)


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """One node of a sequential network.

    ``forward`` returns ``(y, saved)`` where ``saved`` holds only what this
    layer's backward reads (filled when ``record`` is set). ``backward``
    returns a LayerGrad whose ``d_input`` is the error for the previous layer.
    """

    kind = "Layer"
    weighted = False
    quantized = False  # consumes and produces QTensors

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def forward_macs(self, in_shape: tuple) -> int:
        return 0

    def cache_spec(self, in_shape: tuple, need_weight: bool) -> dict:
        """Bytes of each tensor the backward needs from the forward."""
        return {}

    def forward(self, x, train=False, record=False, need_weight=False):
        raise NotImplementedError

    def backward(self, e, saved, need_input=True, need_weight=False, select: Optional[Selector] = None) -> LayerGrad:
        raise NotImplementedError

    def __repr__(self):
        return f"{self.kind}()"


class _Weighted(Layer):
    weighted = True
    relu = False

    @property
    def weight_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def out_channels(self) -> int:
        return self.weight_shape[0]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    @property
    def weight_bytes(self) -> int:
        itemsize = 1 if self.quantized else 4
        return int(np.prod(self.weight_shape)) * itemsize + self.out_channels * 4

    def cache_spec(self, in_shape, need_weight):
        itemsize = 1 if self.quantized else 4
        spec = {}
        if need_weight:
            spec["x"] = int(np.prod(in_shape)) * itemsize
        if self.relu:
            spec["mask"] = int(np.prod(self.output_shape(in_shape)))
        return spec

    def get_params(self) -> tuple:
        """Dequantized (weight, bias) as float32."""
        raise NotImplementedError

    def set_params(self, weight: np.ndarray, bias: np.ndarray) -> None:
        raise NotImplementedError


class _QWeighted(_Weighted):
    """Quantized conv/linear state.

    The weight is a QTensor and the bias int32 at ``bias_scale``. Output and
    propagated-error qparams come from EMA range trackers, which only move
    during training.
    """

    quantized = True

    def _init_state(self, weight, bias, relu):
        weight = np.asarray(weight, np.float32)
        self.relu = relu
        self.in_scale: Optional[float] = None
        self.act = RangeTracker()
        self.err = RangeTracker()
        self.set_params(weight, np.zeros(weight.shape[0]) if bias is None else bias)

    @property
    def weight_shape(self):
        return self.w.shape

    def set_weight(self, w: QTensor) -> None:
        self.w = w

    def set_bias(self, b: np.ndarray) -> None:
        s_in = self.in_scale if self.in_scale is not None else 1.0 / 255.0
        self.bias_scale = self.w.qparams.scale * s_in
        b = np.asarray(b, np.float64) / self.bias_scale
        self.bias = np.clip(np.rint(b), INT32_MIN, INT32_MAX).astype(np.int32)

    def set_params(self, weight, bias):
        self.w = quantize_tensor(np.asarray(weight, np.float32))
        self.set_bias(bias)

    def get_params(self):
        return self.w.dequantize(), (self.bias.astype(np.float64) * self.bias_scale).astype(np.float32)

    def bias_at(self, x_scale: float) -> np.ndarray:
        """Bias re-expressed at accumulator scale s_w * s_x."""
        target = self.w.qparams.scale * x_scale
        if target == self.bias_scale:
            return self.bias
        return np.clip(np.rint(self.bias.astype(np.float64) * (self.bias_scale / target)), INT32_MIN, INT32_MAX)

    def _accumulate(self, x: QTensor) -> np.ndarray:
        raise NotImplementedError

    def forward(self, x, train=False, record=False, need_weight=False):
        acc = self._accumulate(x)
        acc_scale = self.w.qparams.scale * x.qparams.scale
        if train:
            self.in_scale = x.qparams.scale
        if train or not self.act.initialized:
            real = acc * acc_scale
            lo, hi = float(real.min()), float(real.max())
            if self.relu:
                lo, hi = 0.0, max(hi, 0.0)
            if train:
                self.act.observe(lo, hi)
                qp = self.act.qparams()
            else:
                qp = derive_qparams(lo, hi)
        else:
            qp = self.act.qparams()
        y = requantize(acc, acc_scale, qp, self.relu)
        saved = {}
        if record:
            saved["in_shape"] = x.shape
            if need_weight:
                saved["x"] = x
            if self.relu:
                saved["mask"] = y.data != qp.zero_point
        return y, saved

    def _prepare_error(self, e: QTensor, saved: dict, select):
        if self.relu:
            e = QTensor(np.where(saved["mask"], e.data, np.uint8(e.qparams.zero_point)), e.qparams)
        rows = None if select is None else select(e.centered() * e.qparams.scale)
        return e, rows


class QLinear(_QWeighted):
    kind = "QLinear"

    def __init__(self, weight, bias=None, relu: bool = False):
        if np.ndim(weight) != 2:
            raise DimensionError("linear weight must be (out, in)")
        self._init_state(weight, bias, relu)

    def output_shape(self, in_shape):
        _check_linear(tuple(in_shape), self.w.shape)
        return (self.w.shape[0],)

    def forward_macs(self, in_shape):
        return int(self.w.size)

    def _accumulate(self, x):
        return qlinear_accumulate(x, self.w, self.bias_at(x.qparams.scale))

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        e, rows = self._prepare_error(e, saved, select)
        x = saved["x"] if need_weight else None
        return qlinear_backward(e, x, self.w, self.err, rows, need_input)

    def __repr__(self):
        return f"QLinear({self.w.shape[1]}->{self.w.shape[0]}, relu={self.relu})"


class QConv2d(_QWeighted):
    kind = "QConv2d"

    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0, relu: bool = True):
        shape = np.shape(weight)
        if len(shape) != 4 or shape[2] != shape[3]:
            raise DimensionError("conv weight must be (OC, C, k, k)")
        self.geom = ConvGeometry(shape[1], shape[0], shape[2], stride, padding)
        self._init_state(weight, bias, relu)

    def output_shape(self, in_shape):
        ho, wo = _check_conv(tuple(in_shape), self.w.shape, self.geom)
        return (self.geom.out_channels, ho, wo)

    def forward_macs(self, in_shape):
        oc, ho, wo = self.output_shape(in_shape)
        return int(self.w.size * ho * wo)

    def _accumulate(self, x):
        return qconv2d_accumulate(x, self.w, self.bias_at(x.qparams.scale), self.geom)

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        e, rows = self._prepare_error(e, saved, select)
        x = saved["x"] if need_weight else None
        return qconv2d_backward(e, x, self.w, self.geom, self.err, rows, need_input, saved["in_shape"])

    def __repr__(self):
        g = self.geom
        return f"QConv2d({g.in_channels}->{g.out_channels}, k={g.kernel}, s={g.stride}, p={g.padding}, relu={self.relu})"


class _FWeighted(_Weighted):
    def _init_state(self, weight, bias, relu):
        self.relu = relu
        self.set_params(weight, np.zeros(np.shape(weight)[0]) if bias is None else bias)

    @property
    def weight_shape(self):
        return self.w.shape

    def set_params(self, weight, bias):
        self.w = np.array(weight, dtype=np.float32)
        self.b = np.array(bias, dtype=np.float32)

    def get_params(self):
        return self.w.copy(), self.b.copy()

    def _affine(self, x):
        raise NotImplementedError

    def forward(self, x, train=False, record=False, need_weight=False):
        y = self._affine(x)
        saved = {}
        if self.relu:
            y, mask = relu_forward(y)
            if record:
                saved["mask"] = mask
        if record:
            saved["in_shape"] = x.shape
            if need_weight:
                saved["x"] = x
        return y, saved

    def _prepare_error(self, e, saved, select):
        if self.relu:
            e = relu_backward(e, saved["mask"])
        rows = None if select is None else select(e)
        return e, rows


class Linear(_FWeighted):
    kind = "Linear"

    def __init__(self, weight, bias=None, relu: bool = False):
        if np.ndim(weight) != 2:
            raise DimensionError("linear weight must be (out, in)")
        self._init_state(weight, bias, relu)

    def output_shape(self, in_shape):
        _check_linear(tuple(in_shape), self.w.shape)
        return (self.w.shape[0],)

    def forward_macs(self, in_shape):
        return int(self.w.size)

    def _affine(self, x):
        return linear_forward(x, self.w, self.b)

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        e, rows = self._prepare_error(e, saved, select)
        return linear_backward(e, saved["x"] if need_weight else None, self.w, rows, need_input)

    def __repr__(self):
        return f"Linear({self.w.shape[1]}->{self.w.shape[0]}, relu={self.relu})"


class Conv2d(_FWeighted):
    kind = "Conv2d"

    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0, relu: bool = True):
        shape = np.shape(weight)
        if len(shape) != 4 or shape[2] != shape[3]:
            raise DimensionError("conv weight must be (OC, C, k, k)")
        self.geom = ConvGeometry(shape[1], shape[0], shape[2], stride, padding)
        self._init_state(weight, bias, relu)

    def output_shape(self, in_shape):
        ho, wo = _check_conv(tuple(in_shape), self.w.shape, self.geom)
        return (self.geom.out_channels, ho, wo)

    def forward_macs(self, in_shape):
        oc, ho, wo = self.output_shape(in_shape)
        return int(self.w.size * ho * wo)

    def _affine(self, x):
        return conv2d_forward(x, self.w, self.b, self.geom)

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        e, rows = self._prepare_error(e, saved, select)
        x = saved["x"] if need_weight else None
        return conv2d_backward(e, x, self.w, self.geom, rows, need_input, saved["in_shape"])

    def __repr__(self):
        g = self.geom
        return f"Conv2d({g.in_channels}->{g.out_channels}, k={g.kernel}, s={g.stride}, p={g.padding}, relu={self.relu})"


class ReLU(Layer):
    """Standalone activation; works on either domain (clamp at the zero point when quantized)."""

    kind = "ReLU"

    def __init__(self, quantized: bool = False):
        self.quantized = quantized

    def cache_spec(self, in_shape, need_weight):
        return {"mask": int(np.prod(in_shape))}

    def forward(self, x, train=False, record=False, need_weight=False):
        if isinstance(x, QTensor):
            z = np.uint8(x.qparams.zero_point)
            y = QTensor(np.maximum(x.data, z), x.qparams)
            mask = y.data != z
        else:
            y, mask = relu_forward(x)
        return y, ({"mask": mask} if record else {})

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        if isinstance(e, QTensor):
            d = QTensor(np.where(saved["mask"], e.data, np.uint8(e.qparams.zero_point)), e.qparams)
        else:
            d = relu_backward(e, saved["mask"])
        return LayerGrad(d, None, None)


class MaxPool2d(Layer):
    kind = "MaxPool2d"

    def __init__(self, pool: int = 2, quantized: bool = False):
        if pool <= 0:
            raise DimensionError("pool size must be positive")
        self.pool = pool
        self.quantized = quantized

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.pool or w < self.pool:
            raise DimensionError(f"input {h}x{w} smaller than pool {self.pool}")
        return (c, h // self.pool, w // self.pool)

    def cache_spec(self, in_shape, need_weight):
        return {"argmax": int(np.prod(self.output_shape(in_shape)))}

    def forward(self, x, train=False, record=False, need_weight=False):
        if isinstance(x, QTensor):
            y, idx = maxpool_forward(x.data, self.pool)
            y = QTensor(y, x.qparams)
        else:
            y, idx = maxpool_forward(x, self.pool)
        return y, ({"argmax": idx, "in_shape": x.shape} if record else {})

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        if isinstance(e, QTensor):
            d = maxpool_backward(e.data, saved["argmax"], saved["in_shape"], self.pool, fill=e.qparams.zero_point)
            d = QTensor(d, e.qparams)
        else:
            d = maxpool_backward(e, saved["argmax"], saved["in_shape"], self.pool, fill=0.0)
        return LayerGrad(d, None, None)

    def __repr__(self):
        return f"MaxPool2d({self.pool})"


class Flatten(Layer):
    kind = "Flatten"

    def __init__(self, quantized: bool = False):
        self.quantized = quantized

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, record=False, need_weight=False):
        y = x.reshape(-1)
        return y, ({"in_shape": x.shape} if record else {})

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        return LayerGrad(e.reshape(saved["in_shape"]), None, None)


class Dequant(Layer):
    """Precision boundary: quantized in, float out; errors go back quantized."""

    kind = "Dequant"

    def forward(self, x, train=False, record=False, need_weight=False):
        return dequant_boundary(x), {}

    def backward(self, e, saved, need_input=True, need_weight=False, select=None):
        return LayerGrad(dequant_boundary_backward(e), None, None)

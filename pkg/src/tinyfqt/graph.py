"""Sequential model container, tape-based backward, memory planning and checkpoints."""
from __future__ import annotations

import copy
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .layers import (
    Conv2d,
    Dequant,
    DimensionError,
    Flatten,
    Layer,
    LayerGrad,
    Linear,
    MaxPool2d,
    QConv2d,
    QLinear,
    ReLU,
    Selector,
)
from .qcore import QTensor, QuantParams

PRECISIONS = ("uint8", "mixed", "float32")


class Model:
    """An ordered chain of layers with a single quantized -> float boundary.

    Layers before the ``Dequant`` boundary run on QTensors, layers after it on
    float32 arrays. The boundary sits first for float32, last for uint8 and
    in front of the classification head for mixed.
    """

    def __init__(self, layers: list, input_shape: tuple, trainable: Optional[Iterable[int]] = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        bounds = [i for i, l in enumerate(self.layers) if isinstance(l, Dequant)]
        if len(bounds) != 1:
            raise ValueError(f"model needs exactly one Dequant boundary, found {len(bounds)}")
        self.boundary = bounds[0]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (ReLU, MaxPool2d, Flatten)):
                layer.quantized = i < self.boundary
            elif layer.weighted and layer.quantized != (i < self.boundary):
                side = "before" if i < self.boundary else "after"
                raise ValueError(f"layer {i} ({layer.kind}) is on the wrong side of the boundary ({side})")
        self.shapes = self._infer_shapes()
        weighted = set(self.weighted_indices)
        trainable = set(weighted if trainable is None else trainable)
        if not trainable <= weighted:
            raise ValueError(f"trainable layers {sorted(trainable - weighted)} carry no weights")
        self.trainable = trainable

    def _infer_shapes(self) -> list:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
        if len(shapes[-1]) != 1:
            raise DimensionError(f"model output must be a logit vector, got shape {shapes[-1]}")
        return shapes

    @property
    def precision(self) -> str:
        if self.boundary == 0:
            return "float32"
        if self.boundary == len(self.layers) - 1:
            return "uint8"
        return "mixed"

    @property
    def weighted_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def suffix_start(self) -> Optional[int]:
        """Index of the earliest trainable layer; backward never goes below it."""
        return min(self.trainable) if self.trainable else None

    def forward_macs(self) -> int:
        return sum(l.forward_macs(self.shapes[i]) for i, l in enumerate(self.layers))

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def __repr__(self):
        body = ", ".join(repr(l) for l in self.layers)
        return f"Model[{self.precision}]({body}; trainable={sorted(self.trainable)})"


@dataclass
class Lifetime:
    name: str
    nbytes: int
    start: int
    end: int


@dataclass
class Tape:
    """What a training forward pass left behind for the backward pass."""

    start: Optional[int]
    saved: dict = field(default_factory=dict)
    visited: list = field(default_factory=list)
    forward_macs: int = 0
    backward_macs: int = 0
    lifetimes: list = field(default_factory=list)

    def cached_tensors(self) -> set:
        """(layer index, name) of every cached tensor; shape metadata excluded."""
        return {(i, k) for i, s in self.saved.items() for k in s if k != "in_shape"}


def forward(model: Model, x: QTensor, mode: str = "infer"):
    """Run the network; ``train`` mode also returns the tape for ``backward``."""
    if mode not in ("infer", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    if not isinstance(x, QTensor):
        raise TypeError("network input must be a QTensor")
    if tuple(x.shape) != model.input_shape:
        raise DimensionError(f"layer 0 ({model.layers[0].kind}): input shape {x.shape} != {model.input_shape}")
    train = mode == "train"
    tape = None
    start = None
    if train:
        start = model.suffix_start()
        tape = Tape(start=start, forward_macs=model.forward_macs())
        tape.lifetimes = [lt for lt in tensor_lifetimes(model, train=True) if lt.name.startswith("cache")]
    for i, layer in enumerate(model.layers):
        record = train and start is not None and i >= start
        try:
            x, saved = layer.forward(x, train=train, record=record, need_weight=record and i in model.trainable)
        except DimensionError as exc:
            raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
        if record:
            tape.saved[i] = saved
    return x, tape


def backward(
    model: Model,
    tape: Tape,
    d_logits: np.ndarray,
    selector: Optional[Callable[[int, Layer], Optional[Selector]]] = None,
) -> dict:
    """Propagate the loss gradient through the trainable suffix.

    Returns ``{layer index: LayerGrad}`` for trainable layers. ``selector``
    may hand each trainable layer a structure selector for sparse updates.
    """
    grads: dict = {}
    if tape is None:
        raise ValueError("backward needs a tape from a training forward pass")
    if tape.start is None:
        return grads
    if tape.start != model.suffix_start() or any(i not in tape.saved for i in range(tape.start, len(model.layers))):
        raise ValueError("tape does not match the model's trainable suffix")
    if np.shape(d_logits) != model.shapes[-1]:
        raise DimensionError(f"d_logits shape {np.shape(d_logits)} != {model.shapes[-1]}")
    e = d_logits
    for i in range(len(model.layers) - 1, tape.start - 1, -1):
        layer = model.layers[i]
        need_weight = i in model.trainable
        select = selector(i, layer) if selector is not None and need_weight else None
        g = layer.backward(e, tape.saved[i], need_input=i > tape.start, need_weight=need_weight, select=select)
        tape.visited.append(i)
        tape.backward_macs += g.macs
        if need_weight:
            grads[i] = g
        e = g.d_input
    return grads


# ---------------------------------------------------------------------------
# liveness and arena planning


def _itemsize(model: Model, pos: int) -> int:
    """Bytes per element of the activation entering layer ``pos``."""
    if pos == 0:
        return 1
    return 1 if model.layers[pos - 1].quantized else 4


def tensor_lifetimes(model: Model, train: bool = True) -> list:
    """Byte size and [first, last] step of every feature-map tensor.

    Step numbering: the input exists at 0, layer i runs forward at i+1, the
    loss at L+1 and layer j's backward at 2L+1-j. Flatten outputs alias their
    input. In train mode tensors read by the backward stay alive until the
    consuming backward step.
    """
    L = len(model.layers)
    fwd = lambda i: i + 1
    bwd = lambda j: 2 * L + 1 - j
    loss_t = L + 1
    start = model.suffix_start() if train else None

    lives: dict = {}
    alias: dict = {}

    def root(name):
        while name in alias:
            name = alias[name]
        return name

    def touch(name, t):
        lt = lives[root(name)]
        lt.end = max(lt.end, t)

    lives["act-1"] = Lifetime("act-1", int(np.prod(model.input_shape)), 0, 0)
    for i, layer in enumerate(model.layers):
        touch(f"act{i - 1}", fwd(i))
        if isinstance(layer, Flatten):
            alias[f"act{i}"] = f"act{i - 1}"
        else:
            nbytes = int(np.prod(model.shapes[i + 1])) * _itemsize(model, i + 1)
            lives[f"act{i}"] = Lifetime(f"act{i}", nbytes, fwd(i), fwd(i))
    touch(f"act{L - 1}", loss_t)

    if start is not None:
        for j in range(start, L):
            spec = model.layers[j].cache_spec(model.shapes[j], j in model.trainable)
            for key, nbytes in spec.items():
                if key == "x":
                    touch(f"act{j - 1}", bwd(j))
                else:
                    name = f"cache{j}.{key}"
                    lives[name] = Lifetime(name, nbytes, fwd(j), bwd(j))
        lives[f"err{L}"] = Lifetime(f"err{L}", 4 * int(np.prod(model.shapes[L])), loss_t, loss_t)
        for j in range(L - 1, start - 1, -1):
            touch(f"err{j + 1}", bwd(j))
            if j == start:
                break
            if isinstance(model.layers[j], Flatten):
                alias[f"err{j}"] = f"err{j + 1}"
            else:
                nbytes = int(np.prod(model.shapes[j])) * _itemsize(model, j)
                lives[f"err{j}"] = Lifetime(f"err{j}", nbytes, bwd(j), bwd(j))
    return list(lives.values())


def first_fit(lifetimes: list) -> tuple:
    """Greedy arena placement in order of first use.

    Each tensor goes to the lowest offset that does not collide with an
    already placed tensor whose lifetime overlaps. Returns (peak, offsets).
    """
    order = sorted(range(len(lifetimes)), key=lambda k: (lifetimes[k].start, -lifetimes[k].nbytes, k))
    offsets: dict = {}
    peak = 0
    for k in order:
        lt = lifetimes[k]
        busy = sorted(
            (offsets[o], offsets[o] + lifetimes[o].nbytes)
            for o in offsets
            if lifetimes[o].start <= lt.end and lt.start <= lifetimes[o].end
        )
        off = 0
        for lo, hi in busy:
            if off + lt.nbytes <= lo:
                break
            off = max(off, hi)
        offsets[k] = off
        peak = max(peak, off + lt.nbytes)
    return peak, offsets


@dataclass(frozen=True)
class MemoryReport:
    feature_map_bytes: int
    trainable_weight_and_gradbuf_bytes: int
    static_weight_bytes: int

    @property
    def ram_bytes(self) -> int:
        return self.feature_map_bytes + self.trainable_weight_and_gradbuf_bytes

    @property
    def flash_bytes(self) -> int:
        return self.static_weight_bytes

    def as_dict(self) -> dict:
        return {
            "feature_map_bytes": self.feature_map_bytes,
            "trainable_weight_and_gradbuf_bytes": self.trainable_weight_and_gradbuf_bytes,
            "static_weight_bytes": self.static_weight_bytes,
        }


def gradient_buffer_bytes(layer: Layer) -> int:
    """Size of a layer's gradient buffer: float32 weight and bias accumulators,
    float64 per-channel mean/M2, int64 per-channel sample counts, float64
    bias mean/M2 and an int64 sample counter."""
    n_w = int(np.prod(layer.weight_shape))
    oc = layer.out_channels
    return 4 * n_w + 4 * oc + 24 * oc + 16 + 8


def plan_memory(model: Model, config=None, mode: str = "train") -> MemoryReport:
    """Three-segment RAM/Flash estimate.

    ``config`` (a TrainConfig) is accepted for interface symmetry; batch size
    deliberately plays no part since gradients are buffered per layer.
    """
    peak, _ = first_fit(tensor_lifetimes(model, train=mode == "train"))
    trainable = static = 0
    for i in model.weighted_indices:
        layer = model.layers[i]
        if i in model.trainable:
            trainable += layer.weight_bytes + gradient_buffer_bytes(layer)
        else:
            static += layer.weight_bytes
    return MemoryReport(peak, trainable, static)


# ---------------------------------------------------------------------------
# construction


def init_weights(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-r, r] with r = sqrt(1 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    r = math.sqrt(1.0 / fan_in)
    return rng.uniform(-r, r, size=shape).astype(np.float32)


def build_small_cnn(
    precision: str = "uint8",
    input_shape: tuple = (1, 28, 28),
    num_classes: int = 10,
    conv1: int = 8,
    conv2: int = 16,
    hidden: int = 32,
    kernel: int = 3,
    seed: int = 0,
) -> Model:
    """Two ReLU convolutions, a 2x2 max pool and two linear layers."""
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    w1 = init_weights((conv1, c, kernel, kernel), rng)
    w2 = init_weights((conv2, conv1, kernel, kernel), rng)
    h2, w2_ = h - 2 * (kernel - 1), w - 2 * (kernel - 1)
    flat = conv2 * (h2 // 2) * (w2_ // 2)
    w3 = init_weights((hidden, flat), rng)
    w4 = init_weights((num_classes, hidden), rng)

    q = precision != "float32"
    conv = QConv2d if q else Conv2d
    layers = [conv(w1, relu=True), conv(w2, relu=True), MaxPool2d(2), Flatten(), (QLinear if q else Linear)(w3, relu=True)]
    if precision == "uint8":
        layers += [QLinear(w4), Dequant()]
    elif precision == "mixed":
        layers += [Dequant(), Linear(w4)]
    else:
        layers = [Dequant()] + layers + [Linear(w4)]
    return Model(layers, input_shape)


def calibrate(model: Model, inputs: Iterable[QTensor]) -> None:
    """Seed the activation range trackers with a few training-mode forwards."""
    for x in inputs:
        forward(model, x, mode="train")


def reset_layers(model: Model, k: int, seed: int = 0) -> Model:
    """Reinitialise the last ``k`` weighted layers and make only them trainable.

    Returns a new model; ``k == 0`` returns an unchanged copy.
    """
    weighted = model.weighted_indices
    if not 0 <= k <= len(weighted):
        raise ValueError(f"k must be in [0, {len(weighted)}], got {k}")
    out = model.copy()
    if k == 0:
        return out
    rng = np.random.default_rng(seed)
    targets = weighted[len(weighted) - k :]
    for i in targets:
        layer = out.layers[i]
        layer.set_params(init_weights(layer.weight_shape, rng), np.zeros(layer.out_channels, np.float32))
        if layer.quantized:
            layer.act.reset()
            layer.err.reset()
    out.trainable = set(targets)
    return out


# ---------------------------------------------------------------------------
# checkpoint format
#
#   "QTRN" | u16 version | u16 layer count | u8 ndim | u32 dims...
#   per layer: u8 kind | u8 precision | u8 trainable | u32 geometry fields...
#   weighted layers then add: f32 scale | u8 zero point | weight payload
#   (u8 or f32) | bias payload (i32 or f32); quantized ones additionally
#   f64 bias scale, f64 input scale, 4 x f64 activation/error EMA ranges
#   (NaN when unset).
#   optional trailer: "TRST" | f64 max loss observed | u64 steps
# Little-endian throughout.

MAGIC = b"QTRN"
VERSION = 1
KIND_TAGS = {"QConv2d": 1, "QLinear": 2, "Conv2d": 3, "Linear": 4, "MaxPool2d": 5, "ReLU": 6, "Flatten": 7, "Dequant": 8}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _nan(v):
    return math.nan if v is None else v


def _unnan(v):
    return None if math.isnan(v) else v


def _geometry(layer: Layer) -> list:
    if isinstance(layer, (QConv2d, Conv2d)):
        g = layer.geom
        return [g.in_channels, g.out_channels, g.kernel, g.stride, g.padding, int(layer.relu)]
    if isinstance(layer, (QLinear, Linear)):
        o, i = layer.weight_shape
        return [i, o, int(layer.relu)]
    if isinstance(layer, MaxPool2d):
        return [layer.pool]
    return []


_GEOMETRY_FIELDS = {1: 6, 2: 3, 3: 6, 4: 3, 5: 1, 6: 0, 7: 0, 8: 0}


def save_checkpoint(model: Model, path, trainer_state: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, len(model.layers)))
    buf.write(struct.pack("<B", len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for i, layer in enumerate(model.layers):
        geom = _geometry(layer)
        buf.write(struct.pack("<BBB", KIND_TAGS[layer.kind], int(layer.quantized), int(i in model.trainable)))
        buf.write(struct.pack(f"<{len(geom)}I", *geom))
        if not layer.weighted:
            continue
        if layer.quantized:
            qp = layer.w.qparams
            buf.write(struct.pack("<fB", qp.scale, qp.zero_point))
            buf.write(layer.w.data.tobytes())
            buf.write(layer.bias.astype("<i4").tobytes())
            extra = [layer.bias_scale, _nan(layer.in_scale), *map(_nan, layer.act.state()), *map(_nan, layer.err.state())]
            buf.write(struct.pack("<6d", *extra))
        else:
            buf.write(struct.pack("<fB", 1.0, 0))
            buf.write(layer.w.astype("<f4").tobytes())
            buf.write(layer.b.astype("<f4").tobytes())
    if trainer_state is not None:
        buf.write(b"TRST")
        buf.write(struct.pack("<dQ", float(trainer_state.get("max_loss", 0.0)), int(trainer_state.get("steps", 0))))
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {self.pos + n} bytes, have {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path_or_bytes) -> tuple:
    """Returns (model, trainer_state or None)."""
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a QTRN checkpoint")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    layers, trainable = [], set()
    for i in range(count):
        tag, quantized, is_trainable = r.unpack("<BBB")
        if tag not in _TAG_KINDS:
            raise CheckpointError(f"layer {i}: unknown kind tag {tag}")
        geom = r.unpack(f"<{_GEOMETRY_FIELDS[tag]}I")
        kind = _TAG_KINDS[tag]
        if is_trainable:
            trainable.add(i)
        if kind in ("QConv2d", "Conv2d"):
            cin, cout, k, stride, pad, relu = geom
            shape = (cout, cin, k, k)
        elif kind in ("QLinear", "Linear"):
            cin, cout, relu = geom
            shape = (cout, cin)
        if kind == "MaxPool2d":
            layers.append(MaxPool2d(geom[0]))
        elif kind == "ReLU":
            layers.append(ReLU())
        elif kind == "Flatten":
            layers.append(Flatten())
        elif kind == "Dequant":
            layers.append(Dequant())
        elif quantized:
            scale, zp = r.unpack("<fB")
            n = int(np.prod(shape))
            w = QTensor(np.frombuffer(r.take(n), np.uint8).reshape(shape).copy(), QuantParams(scale, zp))
            bias = np.frombuffer(r.take(4 * cout), "<i4").astype(np.int32)
            bias_scale, in_scale, alo, ahi, elo, ehi = r.unpack("<6d")
            layer = QConv2d(np.zeros(shape), stride=stride, padding=pad, relu=bool(relu)) if kind == "QConv2d" else QLinear(np.zeros(shape), relu=bool(relu))
            layer.w, layer.bias, layer.bias_scale, layer.in_scale = w, bias, bias_scale, _unnan(in_scale)
            layer.act.lo, layer.act.hi = _unnan(alo), _unnan(ahi)
            layer.err.lo, layer.err.hi = _unnan(elo), _unnan(ehi)
            layers.append(layer)
        else:
            r.unpack("<fB")
            n = int(np.prod(shape))
            w = np.frombuffer(r.take(4 * n), "<f4").reshape(shape).astype(np.float32)
            b = np.frombuffer(r.take(4 * cout), "<f4").astype(np.float32)
            if kind == "Conv2d":
                layers.append(Conv2d(w, b, stride=stride, padding=pad, relu=bool(relu)))
            else:
                layers.append(Linear(w, b, relu=bool(relu)))
    state = None
    rest = r.data[r.pos :]
    if rest:
        if rest[:4] != b"TRST" or len(rest) != 4 + 16:
            raise CheckpointError("trailing bytes after layer records")
        max_loss, steps = struct.unpack("<dQ", rest[4:])
        state = {"max_loss": max_loss, "steps": steps}
    try:
        model = Model(layers, input_shape, trainable)
    except (ValueError, DimensionError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None
    return model, state

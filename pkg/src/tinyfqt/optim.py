"""Buffered SGD with per-channel gradient standardization and sparse updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import Model, backward, forward
from .layers import LayerGrad, softmax_xent
from .qcore import QTensor, derive_qparams, quantize

SIGMA_FLOOR = 1e-8


class GradientBuffer:
    """Sum of per-sample gradients over one minibatch plus running statistics.

    Mean and (population) variance are tracked per output channel over every
    gradient element of every accumulated sample, using Welford's merge. The
    bias gradient forms a single statistics group of its own. A channel
    skipped by sparse selection was never computed, so that sample adds
    nothing to its statistics; ``seen`` counts the samples per channel.
    """

    def __init__(self, weight_shape: tuple):
        self.weight_shape = tuple(weight_shape)
        oc = self.weight_shape[0]
        self.accum = np.zeros(self.weight_shape, np.float32)
        self.bias_accum = np.zeros(oc, np.float32)
        self.mean = np.zeros(oc, np.float64)
        self.m2 = np.zeros(oc, np.float64)
        self.seen = np.zeros(oc, np.int64)
        self.bias_mean = 0.0
        self.bias_m2 = 0.0
        self.count = 0

    @property
    def per_channel(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    @property
    def nbytes(self) -> int:
        return (
            self.accum.nbytes + self.bias_accum.nbytes + self.mean.nbytes + self.m2.nbytes + self.seen.nbytes
            + 16  # bias mean and M2
            + 8  # sample counter
        )

    def sigma(self) -> np.ndarray:
        n = np.maximum(self.seen * self.per_channel, 1)
        return np.maximum(np.sqrt(self.m2 / n), SIGMA_FLOOR)

    def bias_sigma(self) -> float:
        n = max(int(self.seen.sum()), 1)
        return max(math.sqrt(self.bias_m2 / n), SIGMA_FLOOR)

    def reset(self) -> None:
        self.accum.fill(0.0)
        self.bias_accum.fill(0.0)
        self.mean.fill(0.0)
        self.m2.fill(0.0)
        self.seen.fill(0)
        self.bias_mean = self.bias_m2 = 0.0
        self.count = 0


def accumulate(buf: GradientBuffer, grad: LayerGrad) -> None:
    """Add one sample's gradient and fold it into the running statistics."""
    if grad.d_weight is None or tuple(grad.d_weight.shape) != buf.weight_shape:
        got = None if grad.d_weight is None else grad.d_weight.shape
        raise ValueError(f"gradient shape {got} does not match buffer {buf.weight_shape}")
    if grad.d_bias is None or grad.d_bias.shape != buf.bias_accum.shape:
        raise ValueError("bias gradient does not match buffer")
    rows = slice(None) if grad.rows is None else np.asarray(grad.rows)
    g = grad.d_weight.astype(np.float64).reshape(buf.weight_shape[0], -1)[rows]
    m = g.shape[1]
    n_a = buf.seen[rows] * m
    mean_b = g.mean(axis=1)
    m2_b = ((g - mean_b[:, None]) ** 2).sum(axis=1)
    n = n_a + m
    delta = mean_b - buf.mean[rows]
    buf.mean[rows] += delta * (m / n)
    buf.m2[rows] += m2_b + delta**2 * (n_a * m / n)

    gb = grad.d_bias.astype(np.float64)[rows]
    mb = gb.shape[0]
    if mb:
        nb_a = int(buf.seen.sum())
        bmean = float(gb.mean())
        bm2 = float(((gb - bmean) ** 2).sum())
        nb = nb_a + mb
        d = bmean - buf.bias_mean
        buf.bias_mean += d * (mb / nb)
        buf.bias_m2 += bm2 + d * d * (nb_a * mb / nb)

    buf.accum += grad.d_weight
    buf.bias_accum += grad.d_bias
    buf.seen[rows] += 1
    buf.count += 1


def standardized(buf: GradientBuffer) -> tuple:
    """(weight step, bias step) before scaling by the learning rate.

    Equals the sum, over the samples that computed each channel, of that
    sample's gradient standardized with the channel statistics. A constant
    added to one channel's per-sample gradients therefore cancels for any
    batch size.
    """
    oc = buf.weight_shape[0]
    seen = buf.seen.astype(np.float64)
    acc = buf.accum.astype(np.float64).reshape(oc, -1)
    sw = ((acc - seen[:, None] * buf.mean[:, None]) / buf.sigma()[:, None]).reshape(buf.weight_shape)
    sb = (buf.bias_accum.astype(np.float64) - seen * buf.bias_mean) / buf.bias_sigma()
    return sw, sb


def apply_update(layer, buf: GradientBuffer, lr: float, batch_size: Optional[int] = None) -> None:
    """Standardized SGD step on one layer, then clear the buffer.

    Quantized layers get new weight qparams from the range of the updated
    float candidates; the bias is re-expressed in the int32 scheme.
    """
    if buf.count == 0 or (batch_size is not None and buf.count != batch_size):
        raise RuntimeError(f"apply_update needs a full minibatch, buffer holds {buf.count} samples")
    sw, sb = standardized(buf)
    w, b = layer.get_params()
    new_b = b.astype(np.float64) - lr * sb
    if layer.quantized:
        f = layer.w.centered() * layer.w.qparams.scale - lr * sw
        qp = derive_qparams(float(f.min()), float(f.max()))
        # round to nearest: most steps are below one quantization step and a
        # floor would move every such weight down by a full step
        layer.set_weight(QTensor(quantize(f, qp, rounding="nearest"), qp))
        layer.set_bias(new_b)
    else:
        layer.set_params((w.astype(np.float64) - lr * sw).astype(np.float32), new_b.astype(np.float32))
    buf.reset()


# ---------------------------------------------------------------------------
# sparse updates


@dataclass
class SparseConfig:
    lambda_min: float = 1.0
    lambda_max: float = 1.0
    max_loss_observed: float = 0.0
    per_layer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_min <= self.lambda_max <= 1.0:
            raise ValueError(
                f"need 0 <= lambda_min <= lambda_max <= 1, got lambda_min={self.lambda_min}, lambda_max={self.lambda_max}"
            )

    def observe(self, loss: float) -> None:
        self.max_loss_observed = max(self.max_loss_observed, float(loss))


def update_fraction(cfg: SparseConfig, current_loss: float, max_loss: float) -> float:
    """Loss-adaptive fraction of structures to keep."""
    r = 1.0 if max_loss <= 0 else min(max(current_loss / max_loss, 0.0), 1.0)
    lam = cfg.lambda_min + r * (cfg.lambda_max - cfg.lambda_min)
    return min(lam, cfg.lambda_max, 1.0)


def rate_for(cfg: SparseConfig, current_loss: float, n: int) -> int:
    """Structure count for a loss, given the already-updated maximum."""
    if n <= 0:
        return 0
    k = math.floor(update_fraction(cfg, current_loss, cfg.max_loss_observed) * n)
    return max(k, 1)


def sparse_rate(cfg: SparseConfig, current_loss: float, n: int) -> int:
    """Record ``current_loss`` as a candidate maximum, then size the update."""
    if current_loss < 0:
        raise ValueError("loss must be non-negative")
    cfg.observe(current_loss)
    return rate_for(cfg, current_loss, n)


def structure_l1(e: np.ndarray) -> np.ndarray:
    """L1 norm per structure (leading axis) of a dequantized error."""
    e = np.asarray(e, np.float64)
    return np.abs(e.reshape(e.shape[0], -1)).sum(axis=1)


def select_structures(e, k: int) -> Optional[np.ndarray]:
    """Indices (ascending) of the ``k`` structures with the largest error L1.

    Accepts a QTensor or a dequantized array. Ties go to the lower index.
    Returns None when every structure is kept so the dense path runs.
    """
    if isinstance(e, QTensor):
        e = e.centered() * e.qparams.scale
    l1 = structure_l1(e)
    n = l1.shape[0]
    if k >= n:
        return None
    order = np.argsort(-l1, kind="stable")
    return np.sort(order[: max(k, 0)])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 48
    precision: str = "uint8"
    sparse: Optional[SparseConfig] = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.precision not in ("uint8", "mixed", "float32"):
            raise ValueError(f"precision must be uint8, mixed or float32, got {self.precision!r}")


@dataclass
class StepMetrics:
    step: int
    loss: float
    macs_fwd: int
    macs_bwd: int
    selected: dict = field(default_factory=dict)
    updated: bool = False

    @property
    def selected_frac_mean(self) -> float:
        return float(np.mean(list(self.selected.values()))) if self.selected else 1.0


class Trainer:
    """Owns the gradient buffers and schedule state for one model."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.buffers = {i: GradientBuffer(model.layers[i].weight_shape) for i in sorted(model.trainable)}
        self.steps = 0
        self.visits: dict = {}

    @property
    def max_loss(self) -> float:
        return self.cfg.sparse.max_loss_observed if self.cfg.sparse else 0.0

    def state(self) -> dict:
        return {"max_loss": self.max_loss, "steps": self.steps}

    def load_state(self, state: Optional[dict]) -> None:
        if not state:
            return
        self.steps = int(state.get("steps", 0))
        if self.cfg.sparse is not None:
            self.cfg.sparse.max_loss_observed = float(state.get("max_loss", 0.0))

    def buffer_bytes(self) -> int:
        return sum(b.nbytes for b in self.buffers.values())

    def train_step(self, x: QTensor, label: int) -> StepMetrics:
        model = self.model
        logits, tape = forward(model, x, mode="train")
        loss, d_logits = softmax_xent(logits, label)
        selector = None
        sparse = self.cfg.sparse
        if sparse is not None:
            sparse.observe(loss)
            # the classifier's own error is the loss gradient; its entries sum
            # to zero and keeping only the largest one pushes a single logit
            head = model.weighted_indices[-1]

            def selector(i, layer):
                if i == head:
                    return None
                return lambda e: select_structures(e, rate_for(sparse, loss, e.shape[0]))

        grads = backward(model, tape, d_logits, selector)
        for i in tape.visited:
            self.visits[i] = self.visits.get(i, 0) + 1
        for i, g in grads.items():
            accumulate(self.buffers[i], g)
        self.steps += 1
        updated = False
        if self.buffers and next(iter(self.buffers.values())).count >= self.cfg.batch_size:
            for i, buf in self.buffers.items():
                apply_update(model.layers[i], buf, self.cfg.learning_rate, self.cfg.batch_size)
            updated = True
        return StepMetrics(
            step=self.steps,
            loss=loss,
            macs_fwd=tape.forward_macs,
            macs_bwd=tape.backward_macs,
            selected={i: g.selected for i, g in grads.items()},
            updated=updated,
        )


def train_step(trainer: Trainer, x: QTensor, label: int) -> StepMetrics:
    return trainer.train_step(x, label)


def predict(model: Model, x: QTensor) -> int:
    logits, _ = forward(model, x, mode="infer")
    return int(np.argmax(logits))


def evaluate(model: Model, samples) -> tuple:
    """(accuracy, confusion matrix) over an iterable of (QTensor, label)."""
    n = model.num_classes
    conf = np.zeros((n, n), np.int64)
    for x, y in samples:
        conf[int(y), predict(model, x)] += 1
    total = conf.sum()
    return (float(np.trace(conf)) / total if total else 0.0), conf

"""Slow, independent float reference used by the test suite.

Everything here is written with explicit Python loops over plain float64
arrays and shares no kernel code with ``layers``; agreement between the two
is therefore evidence rather than tautology.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

MAX_ARENA_TENSORS = 6


@dataclass
class OLayer:
    """One oracle layer: kind is conv, linear, relu, maxpool or flatten."""

    kind: str
    w: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    pool: int = 2


def from_model(model) -> list:
    """Float mirror of an engine Model (weights dequantized, ReLUs split out)."""
    out = []
    for layer in model.layers:
        kind = layer.kind
        if kind in ("QConv2d", "Conv2d"):
            w, b = layer.get_params()
            g = layer.geom
            out.append(OLayer("conv", w.astype(np.float64), b.astype(np.float64), g.stride, g.padding))
        elif kind in ("QLinear", "Linear"):
            w, b = layer.get_params()
            out.append(OLayer("linear", w.astype(np.float64), b.astype(np.float64)))
        elif kind == "MaxPool2d":
            out.append(OLayer("maxpool", pool=layer.pool))
        elif kind == "Flatten":
            out.append(OLayer("flatten"))
        elif kind == "ReLU":
            out.append(OLayer("relu"))
        if getattr(layer, "relu", False) and kind != "ReLU":
            out.append(OLayer("relu"))
    return out


# -- naive kernels ----------------------------------------------------------


def _pad(x, p):
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    for ci in range(c):
        for i in range(h):
            for j in range(w):
                out[ci, i + p, j + p] = x[ci, i, j]
    return out


def conv_fwd(x, w, b, stride=1, padding=0):
    xp = _pad(np.asarray(x, np.float64), padding)
    oc, c, k, _ = w.shape
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    y = np.zeros((oc, ho, wo))
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for ci in range(c):
                    for u in range(k):
                        for v in range(k):
                            s += w[o, ci, u, v] * xp[ci, i * stride + u, j * stride + v]
                y[o, i, j] = s
    return y


def conv_bwd(e, x, w, stride=1, padding=0):
    """(d_input, d_weight, d_bias) by scattering each output's contribution."""
    xp = _pad(np.asarray(x, np.float64), padding)
    oc, c, k, _ = w.shape
    _, ho, wo = e.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape)
    db = np.zeros(oc)
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                g = e[o, i, j]
                db[o] += g
                for ci in range(c):
                    for u in range(k):
                        for v in range(k):
                            dw[o, ci, u, v] += g * xp[ci, i * stride + u, j * stride + v]
                            dxp[ci, i * stride + u, j * stride + v] += g * w[o, ci, u, v]
    h, wd = x.shape[1], x.shape[2]
    return dxp[:, padding : padding + h, padding : padding + wd], dw, db


def linear_fwd(x, w, b):
    out = np.zeros(w.shape[0])
    for o in range(w.shape[0]):
        s = b[o]
        for i in range(w.shape[1]):
            s += w[o, i] * x[i]
        out[o] = s
    return out


def linear_bwd(e, x, w):
    dx = np.zeros(w.shape[1])
    dw = np.zeros(w.shape)
    for o in range(w.shape[0]):
        for i in range(w.shape[1]):
            dw[o, i] = e[o] * x[i]
            dx[i] += e[o] * w[o, i]
    return dx, dw, np.array(e, np.float64)


def maxpool_fwd(x, pool):
    c, h, w = x.shape
    ho, wo = h // pool, w // pool
    y = np.zeros((c, ho, wo))
    win = np.zeros((c, ho, wo, 2), int)
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                best, at = -math.inf, None
                for u in range(pool):
                    for v in range(pool):
                        val = x[ci, i * pool + u, j * pool + v]
                        if val > best:
                            best, at = val, (i * pool + u, j * pool + v)
                y[ci, i, j] = best
                win[ci, i, j] = at
    return y, win


def maxpool_bwd(e, win, in_shape):
    dx = np.zeros(in_shape)
    c, ho, wo = e.shape
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                u, v = win[ci, i, j]
                dx[ci, u, v] += e[ci, i, j]
    return dx


def xent(logits, label):
    m = max(logits)
    exps = [math.exp(z - m) for z in logits]
    total = sum(exps)
    loss = math.log(total) - (logits[label] - m)
    grad = np.array([v / total for v in exps])
    grad[label] -= 1.0
    return loss, grad


# -- whole-network reference ---------------------------------------------------


def oracle_forward(layers: list, x: np.ndarray) -> tuple:
    """Returns (logits, per-layer caches)."""
    caches = []
    h = np.asarray(x, np.float64)
    for L in layers:
        caches.append(h)
        if L.kind == "conv":
            h = conv_fwd(h, L.w, L.b, L.stride, L.padding)
        elif L.kind == "linear":
            h = linear_fwd(h, L.w, L.b)
        elif L.kind == "relu":
            h = np.array([max(v, 0.0) for v in h.ravel()]).reshape(h.shape)
        elif L.kind == "maxpool":
            h, win = maxpool_fwd(h, L.pool)
            caches[-1] = (caches[-1], win)
        elif L.kind == "flatten":
            h = h.ravel().copy()
        else:
            raise ValueError(f"unknown oracle layer {L.kind}")
    return h, caches


def oracle_backward(layers: list, x: np.ndarray, label: int) -> tuple:
    """(loss, {oracle layer index: (d_weight, d_bias)}, d_input)."""
    logits, caches = oracle_forward(layers, x)
    loss, e = xent(list(logits), label)
    grads = {}
    for idx in range(len(layers) - 1, -1, -1):
        L, c = layers[idx], caches[idx]
        if L.kind == "conv":
            e, dw, db = conv_bwd(e, c, L.w, L.stride, L.padding)
            grads[idx] = (dw, db)
        elif L.kind == "linear":
            e, dw, db = linear_bwd(e, c, L.w)
            grads[idx] = (dw, db)
        elif L.kind == "relu":
            e = np.where(c > 0, e, 0.0)
        elif L.kind == "maxpool":
            inp, win = c
            e = maxpool_bwd(e, win, inp.shape)
        elif L.kind == "flatten":
            e = e.reshape(c.shape)
    return loss, grads, e


def loss_fn(layers: list, x: np.ndarray, label: int) -> float:
    logits, _ = oracle_forward(layers, x)
    return xent(list(logits), label)[0]


def finite_diff(f: Callable[[np.ndarray], float], t: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``t`` (``t`` is restored)."""
    if not h > 0:
        raise ValueError("h must be positive")
    t = np.asarray(t)
    grad = np.zeros(t.shape, np.float64)
    flat = t.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(t)
        flat[i] = orig - h
        down = f(t)
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a, b) -> float:
    """max|a - b| / max(1, max|a|)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))


def brute_force_arena(intervals: list) -> int:
    """Minimal arena peak for (nbytes, start, end) tensors, by exhaustion.

    For every placement order each tensor takes the lowest offset clear of
    the already placed, overlapping ones. Some order reproduces any optimal
    packing (place tensors by their optimal offsets, lowest first), so the
    minimum over orders is the true optimum.
    """
    n = len(intervals)
    if n > MAX_ARENA_TENSORS:
        raise ValueError(f"brute force limited to {MAX_ARENA_TENSORS} tensors, got {n}")
    if n == 0:
        return 0
    best = math.inf
    for order in itertools.permutations(range(n)):
        placed = []
        peak = 0
        for k in order:
            size, s, e = intervals[k]
            clash = sorted((o, o + sz) for (o, sz, s2, e2) in placed if s2 <= e and s <= e2)
            off = 0
            for lo, hi in clash:
                if off + size <= lo:
                    break
                off = max(off, hi)
            placed.append((off, size, s, e))
            peak = max(peak, off + size)
            if peak >= best:
                break
        best = min(best, peak)
    return int(best)

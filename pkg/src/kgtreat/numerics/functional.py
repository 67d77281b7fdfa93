"""Differentiable nonlinearities, normalisations, gathers and fused losses."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .tensor import NumericError, ShapeError, Tensor, _record, as_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _record(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def logsigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))
    return _record(out, (x,), lambda g: (g * expit(-x.data),))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. ``mask`` (broadcastable, True = keep) zeroes
    excluded entries exactly, as if their logits were -inf."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.isfinite(z[mask]).all():
            raise NumericError("softmax: non-finite logits")
        z = np.where(mask, z, -np.inf)
    elif not np.isfinite(z).all():
        raise NumericError("softmax: non-finite logits")
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gamma.data + beta.data, (x, gamma, beta), fn)


def take_rows(table, idx) -> Tensor:
    """Row gather ``table[idx]``; repeated indices accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")

    def fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (out,)

    return _record(table.data[idx], (table,), fn)


def masked_rows(x, idx, valid: np.ndarray) -> Tensor:
    """Gather rows of ``x`` where ``valid``; invalid slots are exact zeros."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    safe = np.where(valid, idx, 0)
    if x.ndim != 2:
        raise ShapeError(f"masked_rows expects a 2-D source, got {x.shape}")
    out = x.data[safe] * valid[..., None]

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, safe[valid], g[valid])
        return (full,)

    return _record(out, (x,), fn)


def segment_sum(x, segments, n_segments: int) -> Tensor:
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _record(out, (x,), lambda g: (g[seg],))


def segment_softmax(logits, segments, n_segments: int) -> Tensor:
    """Softmax of a 1-D logit vector within each segment id."""
    x = as_tensor(logits)
    seg = np.asarray(segments, dtype=np.int64)
    if not np.isfinite(x.data).all():
        raise NumericError("segment_softmax: non-finite logits")
    m = np.full(n_segments, -np.inf)
    np.maximum.at(m, seg, x.data)
    e = np.exp(x.data - m[seg])
    s = np.zeros(n_segments)
    np.add.at(s, seg, e)
    out = e / s[seg]

    def fn(g):
        t = np.zeros(n_segments)
        np.add.at(t, seg, g * out)
        return (out * (g - t[seg]),)

    return _record(out, (x,), fn)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target id outside vocabulary of size {v}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    rows = np.arange(n)
    out = lse - z[rows, t]

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * g[:, None],)

    return _record(out, (logits,), fn)


def bce_with_logits(z, y) -> Tensor:
    """Elementwise binary cross entropy of ``sigmoid(z)`` against ``y``."""
    z = as_tensor(z)
    y = np.asarray(y, dtype=np.float64)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    d = z.data
    out = np.maximum(d, 0.0) - d * y + np.log1p(np.exp(-np.abs(d)))
    return _record(out, (z,), lambda g: (g * (expit(d) - y),))

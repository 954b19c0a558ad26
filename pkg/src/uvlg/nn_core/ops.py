"""Differentiable tensor operations.

Shape rules are strict: elementwise ops require identical shapes and there is
no implicit broadcasting. Use :func:`expand` to broadcast explicitly. The only
ops that take a per-feature vector alongside a batched input are the layer
primitives :func:`linear` and :func:`layer_norm`, whose vector operands are
documented per function.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, grad_enabled

GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: ((a, g * c),))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data + a.data.dtype.type(c), (a,), lambda g: ((a, g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: ((a, g * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _result(a.data * keep, (a,), lambda g: ((a, g * keep),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return ((a, g * d),)

    return _result(out, (a,), back)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: ((a, np.full(a.shape, g, dtype=a.dtype)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: ((a, np.full(a.shape, g / n, dtype=a.dtype)),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = a.data.sum(axis=axis)
    return _result(out, (a,), lambda g: ((a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()),))


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inv)),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a, shape) -> Tensor:
    """Explicit broadcast. ``a`` is right-aligned against ``shape``; size-1 axes
    and missing leading axes are repeated."""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(a.shape, shape[lead:])):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape)
    reduce_axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(a.shape) if s == 1 and shape[lead + i] != 1)

    def back(g):
        r = g.sum(axis=reduce_axes, keepdims=True) if reduce_axes else g
        return ((a, r.reshape(a.shape)),)

    return _result(out, (a,), back)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[axis] = slice(lo, hi)
            res.append((t, g[tuple(idx)]))
        return res

    return _result(out, tensors, back)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return _result(a.data[idx], (a,), back)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return ((a, full),)

    return _result(out, (a,), back)


def detach(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product. ``a``: (..., m, k), ``b``: (..., k, n) with
    identical leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _result(np.matmul(a.data, b.data), (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis. ``x``: (..., din), ``w``: (din, dout),
    ``b``: (dout,) added to every row."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} vs weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        res = [(x, (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None),
               (w, x2.T @ g2 if w.requires_grad else None)]
        if b is not None:
            res.append((b, g2.sum(axis=0)))
        return res

    return _result(out, parents, back)


# --------------------------------------------------------------------------
# normalization / probability
# --------------------------------------------------------------------------

def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((a, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _result(p, (a,), back)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: ((a, g - p * g.sum(axis=-1, keepdims=True)),))


def masked_softmax(a, mask) -> Tensor:
    """Softmax over the last axis with ``mask`` (bool, same shape, True =
    disallowed). Disallowed entries get exactly zero weight; rows with every
    entry disallowed come out all-zero."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_softmax: mask shape {mask.shape} vs input {a.shape}")
    z = np.where(mask, -np.inf, a.data)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0).astype(a.dtype, copy=False)

    def back(g):
        return ((a, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _result(p, (a,), back)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; ``gamma``/``beta`` have shape (d,)."""
    x = as_tensor(x)
    d = x.shape[-1]
    for v in (gamma, beta):
        if v is not None and as_tensor(v).shape != (d,):
            raise ShapeError(f"layer_norm: affine shape {as_tensor(v).shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        parents.append(beta)

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gamma.data if gamma is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [(x, dx)]
        if gamma is not None:
            res.append((gamma, (g * xhat).sum(axis=lead)))
        if beta is not None:
            res.append((beta, g.sum(axis=lead)))
        return res

    return _result(out.astype(x.dtype, copy=False), parents, back)


def embedding(table, ids) -> Tensor:
    """Row lookup: ``table`` (V, d), integer ``ids`` of any shape -> ids.shape + (d,)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]}): "
                         f"min {ids.min()}, max {ids.max()}")
    return take(table, ids, axis=0)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def cross_entropy_sum(logits, targets, ignore_index: int = -100):
    """Summed token NLL. ``logits`` (N, V), ``targets`` (N,) ints; entries equal
    to ``ignore_index`` contribute nothing. Returns (loss tensor, count)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = targets != ignore_index
    count = int(keep.sum())
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    safe = np.where(keep, targets, 0)
    rows = np.arange(len(targets))
    nll = (lse - z[rows, safe]) * keep
    out = np.asarray(nll.sum(), dtype=logits.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, safe] -= 1.0
        p *= keep[:, None]
        return ((logits, p * g),)

    return _result(out, (logits,), back), count


def bce_with_logits_sum(logits, targets) -> Tensor:
    """Σ −[t·log σ(x) + (1−t)·log(1−σ(x))], computed stably."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    # log(1 + e^{-|x|}) + max(x, 0) - x·t
    val = np.logaddexp(0.0, -np.abs(x)) + np.maximum(x, 0.0) - x * t
    out = np.asarray(val.sum(), dtype=logits.dtype)
    return _result(out, (logits,), lambda g: ((logits, g * (_stable_sigmoid(x) - t)),))

"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new :class:`Tensor` carrying its backward rule.  Elementwise binary ops follow
numpy broadcasting; their gradients are summed back to the operand shapes.
Stochastic or stateful primitives (``dropout``, ``batchnorm``) take an explicit
``train`` flag, and ``dropout`` an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, ndtr

from ..errors import IndexOutOfRange, ShapeMismatch
from .tensor import Tensor, as_tensor

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _make(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (),
                  backward_fn=backward_fn if req else None, op=op)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


hadamard = mul


def div(a, b) -> Tensor:
    """Elementwise quotient ``a / b``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    q = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                unbroadcast(-g * q / b.data, b.shape) if b.requires_grad else None)

    return _make(q, (a, b), backward, "div")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` on operands of rank >= 2; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"transpose needs rank >= 2, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {src} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last one by default)."""
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def concat_last_dim(xs: Sequence) -> Tensor:
    return concat(xs, axis=-1)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([x.data for x in xs], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(xs), backward, "stack")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    count = x.data.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


def index_select(x, indices, axis: int) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    size = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexOutOfRange(f"indices {idx.min()}..{idx.max()} outside axis of length {size}")

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward, "index_select")


# ---------------------------------------------------------------- nonlinearities

def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = ndtr(x.data)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def identity(x) -> Tensor:
    return as_tensor(x)


def softmax_last_dim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


softmax = softmax_last_dim


# ---------------------------------------------------------------- normalization

def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, *,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel (last axis) normalization over every other axis.

    In train mode batch statistics are used and ``running_mean``/``running_var``
    are updated in place (unbiased variance for the running estimate).  In eval
    mode the running statistics are used, making the op affine in ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if train:
        count = x.data.size // c
        if count < 2:
            raise ShapeMismatch(f"batchnorm in train mode needs > 1 value per channel, got {x.shape}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data
        if train:
            gx = inv_std * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batchnorm")


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with learnable scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def dropout(x, p: float, *, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity in eval."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- losses and reductions

def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} with labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexOutOfRange(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


def frobenius_norm(x, axes=(-2, -1)) -> Tensor:
    """Frobenius norm over ``axes`` (per matrix for stacked input)."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axes))

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        scale_ = np.where(norm > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(scale_, axes),)

    return _make(norm, (x,), backward, "frobenius_norm")


def elementwise_max_reduce(x, axes=(-2, -1)) -> Tensor:
    """Maximum entry over ``axes``; the gradient goes to the first maximizer."""
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    keep = tuple(i for i in range(x.ndim) if i not in axes)
    moved = np.transpose(x.data, keep + axes)
    lead_shape = moved.shape[: len(keep)]
    flat = moved.reshape(lead_shape + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], np.asarray(g)[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + axes)),)

    return _make(out, (x,), backward, "max")


# ---------------------------------------------------------------- recurrent

def gru(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Run a GRU over ``x`` of shape (B, L, input) from a zero hidden state.

    Gate layout follows the usual (reset, update, candidate) stacking:
    ``w_ih`` is (3H, input), ``w_hh`` is (3H, H), biases are (3H,).
    Returns every hidden state, shape (B, L, H).  Fused into one primitive with
    a hand-written backpropagation-through-time rule.
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    if x.ndim != 3:
        raise ShapeMismatch(f"gru: input must be (B, L, input), got {x.shape}")
    bsz, length, _ = x.shape
    hid = w_hh.shape[1]
    if w_ih.shape != (3 * hid, x.shape[2]) or w_hh.shape != (3 * hid, hid) \
            or b_ih.shape != (3 * hid,) or b_hh.shape != (3 * hid,):
        raise ShapeMismatch(
            f"gru: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b_ih {b_ih.shape}, b_hh {b_hh.shape}"
        )
    gi_all = x.data @ w_ih.data.T + b_ih.data
    whh_t = w_hh.data.T
    hs = np.empty((bsz, length, hid), dtype=gi_all.dtype)
    rs = np.empty_like(hs)
    zs = np.empty_like(hs)
    ns = np.empty_like(hs)
    nhs = np.empty_like(hs)
    h = np.zeros((bsz, hid), dtype=gi_all.dtype)
    for t in range(length):
        gi = gi_all[:, t]
        gh = h @ whh_t + b_hh.data
        r = expit(gi[:, :hid] + gh[:, :hid])
        z = expit(gi[:, hid:2 * hid] + gh[:, hid:2 * hid])
        n_h = gh[:, 2 * hid:]
        n = np.tanh(gi[:, 2 * hid:] + r * n_h)
        h = (1.0 - z) * n + z * h
        hs[:, t], rs[:, t], zs[:, t], ns[:, t], nhs[:, t] = h, r, z, n, n_h

    def backward(g):
        dgi_all = np.empty((bsz, length, 3 * hid), dtype=hs.dtype)
        dw_hh = np.zeros_like(w_hh.data)
        db_hh = np.zeros_like(b_hh.data)
        dh_next = np.zeros((bsz, hid), dtype=hs.dtype)
        w_hh_d = w_hh.data
        for t in range(length - 1, -1, -1):
            dh = g[:, t] + dh_next
            r, z, n, n_h = rs[:, t], zs[:, t], ns[:, t], nhs[:, t]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros_like(dh)
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (h_prev - n) * z * (1.0 - z)
            da_r = da_n * n_h * r * (1.0 - r)
            dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
            dgi_all[:, t] = np.concatenate([da_r, da_z, da_n], axis=1)
            dw_hh += dgh.T @ h_prev
            db_hh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ w_hh_d
        flat_dgi = dgi_all.reshape(-1, 3 * hid)
        dx = (dgi_all @ w_ih.data) if x.requires_grad else None
        dw_ih = flat_dgi.T @ x.data.reshape(-1, x.shape[2])
        db_ih = flat_dgi.sum(axis=0)
        return dx, dw_ih, dw_hh, db_ih, db_hh

    return _make(hs, (x, w_ih, w_hh, b_ih, b_hh), backward, "gru")

"""Differentiable operations on :class:`~tandemnet.tensor.Tensor`.

Each op computes its result with numpy and records a closure that maps the
output gradient to input gradients. Broadcasting is deliberately narrow: an
elementwise op accepts two operands whose shapes are equal, or where one
operand expands to the other's shape along size-1 / missing leading axes.
That covers the rank-one ``(W s) 1^T`` terms and per-sample masks and
nothing more.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, record


def _new(data: np.ndarray) -> Tensor:
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out is None or out not in (a.shape, b.shape):
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry one leading batch axis."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul: expected 2-D or batched 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ for shapes {a.shape} and {b.shape}")
    out = _new(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for row-vector batches ``x`` of shape (B, in)."""
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    shape = _check_broadcast(a, b, "add")
    out = _new(a.data + b.data)
    assert out.shape == shape

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _new(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = _new(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    out = _new(a.data * k)
    return record(out, (a,), lambda g: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _new(y)
    return record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = _new(y)
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _new(a.data * mask)
    return record(out, (a,), lambda g: (g * mask,))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: ``tanh``, ``add``, ``mul`` or ``scale``."""
    table = {"tanh": tanh, "add": add, "mul": mul, "scale": scale, "sigmoid": sigmoid, "relu": relu}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# reductions and normalisers


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = _new(np.sum(a.data, axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last axis: (..., A, B) -> (..., A)."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"global_avg_pool: empty last dimension in shape {x.shape}")
    width = x.shape[-1]
    out = _new(x.data.mean(axis=-1))

    def backward(g):
        return (np.repeat(g[..., None] / width, width, axis=-1),)

    return record(out, (x,), backward)


def softmax(e: Tensor, axis: int = -1) -> Tensor:
    if e.shape[axis] < 1:
        raise DimensionError("softmax: empty axis")
    if not np.all(np.isfinite(e.data)):
        raise NumericError("softmax: input contains NaN or Inf")
    shifted = e.data - e.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = _new(y)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record(out, (e,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _new(y)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets``.

    ``logits`` is (B, classes). ``weights`` (B,) masks or reweights rows; the
    result is ``sum(w * nll) / sum(w)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy: logits contain NaN or Inf")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(targets))
    nll = -logp[rows, targets]
    out = _new(np.asarray((w * nll).sum() / total, dtype=logits.dtype))

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _new(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes by default, or apply a full permutation."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _new(np.transpose(x.data, axes))
    return record(out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = _new(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(out, tensors, backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Columns of ``a`` followed by columns of ``b`` (last-axis concatenation)."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_cols: row counts differ for shapes {a.shape} and {b.shape}")
    return concat([a, b], axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _new(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(out, tensors, backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def index(x: Tensor, idx) -> Tensor:
    """``x[idx]`` with scatter-add backward (repeated indices accumulate)."""
    out = _new(np.array(x.data[idx], copy=True))
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids``; output shape ids.shape + (K,)."""
    return index(weight, np.asarray(ids, dtype=np.int64))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# convolutional layers


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_out(size: int, k: int, stride: int, padding: int, opname: str) -> int:
    if size + 2 * padding < k:
        raise DimensionError(f"{opname}: kernel {k} larger than padded input {size + 2 * padding}")
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B, Cin, H, W) with weight (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    Ho = _conv_out(H, kh, stride, padding, "conv2d")
    Wo = _conv_out(W, kw, stride, padding, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride)[:, :, :Ho, :Wo]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = _new(y.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, inputs, backward)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    B, C, H, W = x.shape
    Ho = _conv_out(H, kernel, stride, 0, "avg_pool2d")
    Wo = _conv_out(W, kernel, stride, 0, "avg_pool2d")
    win = _windows(x.data, kernel, kernel, stride)[:, :, :Ho, :Wo]
    out = _new(win.mean(axis=(-1, -2)))
    area = float(kernel * kernel)

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / area
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += share
        return (gx,)

    return record(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are divided by ``1 - p``; eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = _new(x.data * mask)
    return record(out, (x,), lambda g: (g * mask,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = _new(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_cell(x: Tensor, h: Tensor, m: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step over a batch.

    Gate pre-activations are ``x @ w_x + h @ w_h + b`` laid out as
    [input, forget, output, candidate], each of width D. Returns the new
    hidden and memory states.
    """
    D = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * D) or w_h.shape != (D, 4 * D) or b.shape != (4 * D,):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape} inconsistent")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("lstm_cell: non-finite input")
    z = x.data @ w_x.data + h.data @ w_h.data + b.data
    i = _sigmoid(z[..., :D])
    f = _sigmoid(z[..., D:2 * D])
    o = _sigmoid(z[..., 2 * D:3 * D])
    c = np.tanh(z[..., 3 * D:])
    m_new = f * m.data + i * c
    tm = np.tanh(m_new)
    h_new = o * tm
    packed = _new(np.concatenate([h_new, m_new], axis=-1))

    def backward(g):
        gh, gm = g[..., :D], g[..., D:]
        dm = gm + gh * o * (1.0 - tm * tm)
        dz = np.concatenate([
            dm * c * i * (1.0 - i),
            dm * m.data * f * (1.0 - f),
            gh * tm * o * (1.0 - o),
            dm * i * (1.0 - c * c),
        ], axis=-1)
        gx = dz @ w_x.data.T
        gh_prev = dz @ w_h.data.T
        gm_prev = dm * f
        x2 = x.data.reshape(-1, x.shape[-1])
        h2 = h.data.reshape(-1, D)
        dz2 = dz.reshape(-1, 4 * D)
        return gx, gh_prev, gm_prev, x2.T @ dz2, h2.T @ dz2, dz2.sum(axis=0)

    record(packed, (x, h, m, w_x, w_h, b), backward)
    return index(packed, (Ellipsis, slice(0, D))), index(packed, (Ellipsis, slice(D, 2 * D)))


__all__ = [
    "add", "as_tensor", "avg_pool2d", "batch_norm", "concat", "concat_cols", "conv2d", "cross_entropy",
    "detach", "dropout", "elementwise", "embedding", "global_avg_pool", "index", "linear", "log_softmax",
    "lstm_cell", "matmul", "mean", "mul", "relu", "reshape", "scale", "sigmoid", "softmax", "stack", "sub",
    "sum", "tanh", "transpose",
]

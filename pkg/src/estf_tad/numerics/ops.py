"""Differentiable operations on :class:`Tensor`.

Elementwise binary ops require identical shapes (or a python scalar on one
side).  Broadcasting only happens through :func:`broadcast_to` and
:func:`broadcast_spatial`, so every shape in the graph is explicit.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, as_tensor, get_dtype, make_result


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast_to explicitly)")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make_result(a.data + b, (a,), lambda g: (g,), "add")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = as_tensor(b)
        return make_result(a - b.data, (b,), lambda g: (-g,), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul")
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for a python-scalar exponent; needs x >= 0 unless p is integral."""
    xd = x.data
    p = float(p)
    out = np.power(xd, p)
    if p == 0:
        return make_result(out, (x,), lambda g: (np.zeros_like(g),), "power")
    return make_result(out, (x,), lambda g: (g * p * np.power(xd, p - 1.0),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return make_result(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_result(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,), "relu")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return make_result(out, (a, b), lambda g: (g * take_a, g * ~take_a), "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return make_result(out, (a, b), lambda g: (g * take_a, g * ~take_a), "maximum")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "permute")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()
    return make_result(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(out, tensors, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    parts = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        parts.append(getitem(x, tuple(idx)))
        start += n
    return parts


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], copy=True)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(out, (x,), backward, "getitem")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def backward(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and r.shape[i] != 1)
        if axes:
            r = r.sum(axis=axes, keepdims=True)
        return (r,)

    return make_result(out, (x,), backward, "broadcast_to")


def broadcast_spatial(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """[..., T, C] -> [..., T, H, W, C] by replication over the spatial grid."""
    h, w = hw
    lead = x.shape[:-1]
    c = x.shape[-1]
    expanded = reshape(x, lead + (1, 1, c))
    return broadcast_to(expanded, lead + (h, w, c))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [k, n] -> [..., m, n]."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched [..., m, k] @ [..., k, n] with identical leading extents."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(out, (a, b), backward, "bmm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: channels {c} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gxhat = g * gd
        gx = rstd * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = (-1, c)
        ggamma = (g * xhat).reshape(flat).sum(axis=0)
        gbeta = g.reshape(flat).sum(axis=0)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# convolutions and pooling (channels-last)
# ---------------------------------------------------------------------------

def _check_odd(k: int, op: str) -> None:
    if k % 2 == 0 or k < 1:
        raise ConfigError(f"{op}: kernel size must be odd and positive, got {k}")


def dwconv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 1-D cross-correlation over axis -2 with zero 'same' padding.

    x: [..., T, C], kernel: [C, k].
    """
    c, k = kernel.shape
    _check_odd(k, "dwconv1d")
    if x.shape[-1] != c:
        raise ShapeError(f"dwconv1d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    t = x.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(k):
        out += xp[..., i:i + t, :] * kd[:, i]

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(k):
            gp[..., i:i + t, :] += g * kd[:, i]
            gk[:, i] = (xp[..., i:i + t, :] * g).reshape(-1, c).sum(axis=0)
        return gp[..., p:p + t, :], gk

    return make_result(out, (x, kernel), backward, "dwconv1d")


def dwconv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 2-D cross-correlation with zero 'same' padding.

    x: [..., H, W, C], kernel: [C, k, k].
    """
    c, k, k2 = kernel.shape
    if k != k2:
        raise ConfigError(f"dwconv2d: kernel must be square, got {kernel.shape}")
    _check_odd(k, "dwconv2d")
    if x.shape[-1] != c:
        raise ShapeError(f"dwconv2d: input channels {x.shape[-1]} vs kernel {kernel.shape}")
    h, w = x.shape[-3], x.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + h, j:j + w, :] * kd[:, i, j]

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(k):
            for j in range(k):
                gp[..., i:i + h, j:j + w, :] += g * kd[:, i, j]
                gk[:, i, j] = (xp[..., i:i + h, j:j + w, :] * g).reshape(-1, c).sum(axis=0)
        return gp[..., p:p + h, p:p + w, :], gk

    return make_result(out, (x, kernel), backward, "dwconv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense 1-D convolution over axis -2, 'same' zero padding.

    x: [B, T, Cin], weight: [k, Cin, Cout], bias: [Cout].
    """
    k, cin, cout = weight.shape
    _check_odd(k, "conv1d")
    if x.ndim != 3 or x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {weight.shape}")
    b, t, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, [(0, 0), (p, p), (0, 0)])
    cols = np.concatenate([xp[:, i:i + t, :] for i in range(k)], axis=-1)  # [B, T, k*Cin]
    wd = weight.data.reshape(k * cin, cout)
    out = cols @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gw = cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)
        gcols = (g @ wd.T).reshape(b, t, k, cin)
        gp = np.zeros_like(xp)
        for i in range(k):
            gp[:, i:i + t, :] += gcols[:, :, i, :]
        grads = [gp[:, p:p + t, :], gw.reshape(k, cin, cout)]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv1d")


def _pool_factor(factor, op):
    fh, fw = (int(f) for f in factor)
    if fh <= 0 or fw <= 0:
        raise ConfigError(f"{op}: factors must be positive, got {factor}")
    return fh, fw


def avgpool_spatial(x: Tensor, factor: tuple[int, int]) -> Tensor:
    """Block mean over the two spatial axes of [..., H, W, C]."""
    fh, fw = _pool_factor(factor, "avgpool_spatial")
    h, w, c = x.shape[-3:]
    if h % fh or w % fw:
        raise ConfigError(f"avgpool_spatial: extents ({h}, {w}) not divisible by factor ({fh}, {fw})")
    lead = x.shape[:-3]
    blocks = x.data.reshape(lead + (h // fh, fh, w // fw, fw, c))
    nl = len(lead)
    # anchor on the block's first cell so constant blocks average exactly
    anchor = blocks[(Ellipsis, slice(0, 1), slice(None), slice(0, 1), slice(None))]
    out = (anchor + (blocks - anchor).mean(axis=(nl + 1, nl + 3), keepdims=True)).reshape(
        lead + (h // fh, w // fw, c)
    )
    scale = 1.0 / (fh * fw)

    def backward(g):
        ge = np.expand_dims(g, (nl + 1, nl + 3)) * scale
        return (np.broadcast_to(ge, blocks.shape).reshape(x.shape).copy(),)

    return make_result(out, (x,), backward, "avgpool_spatial")


def upsample_nearest(x: Tensor, factor: tuple[int, int]) -> Tensor:
    """Nearest-neighbour replication of [..., H', W', C] by (f_h, f_w)."""
    fh, fw = _pool_factor(factor, "upsample_nearest")
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    nl = len(lead)
    out = np.repeat(np.repeat(x.data, fh, axis=nl), fw, axis=nl + 1)

    def backward(g):
        return (g.reshape(lead + (h, fh, w, fw, c)).sum(axis=(nl + 1, nl + 3)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def _pool1d_windows(x: np.ndarray, size: int) -> tuple[np.ndarray, int]:
    t = x.shape[-2]
    t_out = -(-t // size)
    padded = t_out * size
    if padded != t:
        fill = np.repeat(x[..., -1:, :], padded - t, axis=-2)
        x = np.concatenate([x, fill], axis=-2)
    return x.reshape(x.shape[:-2] + (t_out, size, x.shape[-1])), t_out


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max over windows of ``size`` along axis -2 (ceil mode).

    A short trailing window repeats its last element; ties resolve to the
    earliest position.
    """
    t = x.shape[-2]
    win, t_out = _pool1d_windows(x.data, size)
    arg = win.argmax(axis=-2)
    out = np.take_along_axis(win, arg[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None, :], g[..., None, :], axis=-2)
        full = gw.reshape(gw.shape[:-3] + (t_out * size, gw.shape[-1]))
        return (np.ascontiguousarray(full[..., :t, :]),)

    return make_result(out, (x,), backward, "maxpool1d")


def avgpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping mean over windows along axis -2 (ceil mode, edge-repeat)."""
    t = x.shape[-2]
    win, t_out = _pool1d_windows(x.data, size)
    out = win.mean(axis=-2)

    def backward(g):
        gw = np.repeat(g / size, size, axis=-2)
        head = gw[..., :t, :].copy()
        extra = gw[..., t:, :].sum(axis=-2)
        if t_out * size != t:
            head[..., -1, :] += extra
        return (head,)

    return make_result(out, (x,), backward, "avgpool1d")


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()))

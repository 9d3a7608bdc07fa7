"""Differentiable operations over :class:`Tensor`.

Binary elementwise ops require identical shapes, except that a 0-d
operand (or a Python number) broadcasts.  Anything else goes through an
explicit :func:`broadcast_to` or :func:`reshape`.
"""

from __future__ import annotations


import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, get_default_dtype, make_node


def _binary_operands(op, a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = _binary_operands("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary_operands("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary_operands("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_node(out, (a,), bw, "pow")


def square(a):
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0).astype(a.dtype), (a,),
                     lambda g: (g * pos,), "relu")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clamp_min(a, lo):
    a = as_tensor(a)
    keep = a.data >= lo
    out = np.where(keep, a.data, lo).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * keep,), "clamp_min")


def clamp(a, lo, hi):
    a = as_tensor(a)
    keep = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return make_node(out, (a,), lambda g: (g * keep,), "clamp")


# -- reductions and shape plumbing --------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    """Explicit broadcast; the only way to expand a non-scalar operand."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    lead = len(shape) - a.ndim
    expanded = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return make_node(np.ascontiguousarray(out), (a,), bw, "broadcast_to")


def index(a, key):
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return make_node(np.ascontiguousarray(out), (a,), bw, "index")


def take(a, indices):
    """Rows of ``a`` selected by an integer array of any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = a.data[indices]

    def bw(g):
        ga = np.zeros_like(a.data)
        flat = indices.reshape(-1)
        g2 = g.reshape((flat.size,) + a.shape[1:])
        if a.ndim == 1:
            ga += np.bincount(flat, weights=g2, minlength=a.shape[0]).astype(a.dtype)
        else:
            np.add.at(ga, flat, g2)
        return (ga,)

    return make_node(out, (a,), bw, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *(x.shape for x in tensors))
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_node(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` for x of shape (N, in), w (in, out), b (out,)."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    if b is not None and parents[2].shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, parents[2].shape)
    out = x.data @ w.data
    if b is not None:
        out = out + parents[2].data

    def bw(g):
        grads = (g @ w.data.T, x.data.T @ g)
        if b is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return make_node(out, parents, bw, "linear")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw, "softmax")


# -- convolution ----------------------------------------------------------------

def pad2d(x, pad, mode="zeros"):
    """Pad the two spatial axes of an (..., H, W, C) tensor."""
    x = as_tensor(x)
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    if mode == "zeros":
        out = np.pad(x.data, widths)
    elif mode == "edge":
        out = np.pad(x.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    H, W = x.shape[-3], x.shape[-2]

    def bw(g):
        if mode == "zeros":
            return (g[..., pad:pad + H, pad:pad + W, :].copy(),)
        gh = g[..., pad:pad + H, :, :].copy()
        gh[..., 0, :, :] += g[..., :pad, :, :].sum(axis=-3)
        gh[..., H - 1, :, :] += g[..., pad + H:, :, :].sum(axis=-3)
        gw = gh[..., :, pad:pad + W, :].copy()
        gw[..., :, 0, :] += gh[..., :, :pad, :].sum(axis=-2)
        gw[..., :, W - 1, :] += gh[..., :, pad + W:, :].sum(axis=-2)
        return (gw,)

    return make_node(out, (x,), bw, f"pad2d[{mode}]")


def conv2d(x, w, b=None, stride=1, padding="zeros"):
    """2-D cross-correlation, channels-last, 'same' padding.

    x: (H, W, Cin) or (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim not in (3, 4) or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw, cin, cout = w.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = pad2d(x, kh // 2, padding)
    out = _conv2d_valid(xp, w, None if b is None else as_tensor(b), stride)
    if x.ndim == 3:
        out = reshape(out, out.shape[1:])
    return out


def _conv2d_valid(xp, w, b, stride):
    data = xp.data if xp.ndim == 4 else xp.data[None]
    B, Hp, Wp, cin = data.shape
    kh, kw, _, cout = w.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate(
        [data[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
         for i, j in taps], axis=-1)
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols2 @ w2
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, cout)
    parents = (xp, w) if b is None else (xp, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh * kw, cin)
        gx = np.zeros((B, Hp, Wp, cin), dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gx[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, t, :]
        gx = gx.reshape(xp.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return make_node(out, parents, bw, "conv2d")


def constant(data):
    return Tensor(np.asarray(data, dtype=get_default_dtype()))


def maximum(a, b):
    a, b = _binary_operands("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_node(np.maximum(a.data, b.data), (a, b), bw, "maximum")


__all__ = [name for name in dir() if not name.startswith("_") and name not in ("builtins", "np")]

"""Minimal dense-array engine with reverse-mode differentiation.

Every forward call records its parents and a closure that maps the output
gradient to parent gradients. ``backward`` walks the tape once in reverse
topological order.

Broadcasting is deliberately narrow: a binary op accepts operands of equal
shape, a scalar, or an operand whose shape is a trailing suffix of the other
(the trailing-axis affine case). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data):
    """A differentiable leaf (parameter)."""
    return Tensor(data, requires_grad=True)


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def custom_op(data, parents, backward):
    """Register an op defined outside this module.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    return _result(data, tuple(parents), backward)


# ----------------------------------------------------------------------------
# elementwise binary ops


def _align(a, b, name):
    """Return (big, small, swapped) after checking the trailing-suffix rule."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b, False
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return a, b, False
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return b, a, True
    raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a)
    big, small, _ = _align(a, b, "add")
    shape_s = small.shape
    return _result(
        big.data + small.data,
        (big, small),
        lambda g: (g, _unbroadcast(g, shape_s)),
    )


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _align(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    a = as_tensor(a)
    big, small, _ = _align(a, b, "mul")
    bd, sd = big.data, small.data
    return _result(
        bd * sd,
        (big, small),
        lambda g: (g * sd, _unbroadcast(g * bd, sd.shape)),
    )


def matmul(a, b):
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


# ----------------------------------------------------------------------------
# elementwise unary ops


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def cos(x):
    xd = x.data
    return _result(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def sin(x):
    xd = x.data
    return _result(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def tanh(x):
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------------
# reductions and structural ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def slice_(x, idx):
    """Basic (view) indexing only: ints, slices, Ellipsis."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for item in idx:
        if not (isinstance(item, (int, np.integer, slice)) or item is Ellipsis):
            raise ShapeError(f"slice: unsupported index {item!r}")
    shape = x.shape
    out = x.data[idx]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _result(out, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ax = _norm_axis(axis, tensors[0].ndim)[0]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {ax}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return _result(out, tuple(tensors), backward)


def gather(table, idx):
    """Row lookup: table (n, d), integer idx of any shape -> idx.shape + (d,)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather: index range [{idx.min()}, {idx.max()}] outside table of {table.shape[0]} rows"
        )
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _result(table.data[idx], (table,), backward)


# ----------------------------------------------------------------------------
# fused numerics


def softmax(x, axis=-1):
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if x.shape[-1] < 1:
        raise ShapeError("layernorm: empty last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def rope_tables(length, dim, base=10000.0, offset=0):
    """cos/sin tables of shape (length, dim // 2) for positions offset..offset+length-1."""
    if dim % 2:
        raise ShapeError(f"rope: head dim {dim} must be even")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=DTYPE) / dim)
    pos = np.arange(offset, offset + length, dtype=DTYPE)
    ang = np.outer(pos, inv_freq)
    return np.cos(ang), np.sin(ang)


def rope(x, cos_t, sin_t):
    """Rotate consecutive feature pairs of x (..., L, d) by position-dependent angles."""
    xd = x.data
    L, d = xd.shape[-2:]
    if cos_t.shape != (L, d // 2):
        raise ShapeError(f"rope: table {cos_t.shape} does not match input {xd.shape}")

    def rotate(v, s):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = even * cos_t - odd * s
        out[..., 1::2] = even * s + odd * cos_t
        return out

    return _result(rotate(xd, sin_t), (x,), lambda g: (rotate(g, -sin_t),))


# ----------------------------------------------------------------------------
# reverse pass


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, leaves=None):
    """Gradients of a scalar ``loss``.

    Returns a dict keyed by leaf tensor. When ``leaves`` is given, every
    listed leaf appears in the result, with zeros if the loss ignores it.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    found = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if id(node) in found:
                found[id(node)][1] += g
            else:
                found[id(node)] = [node, g]
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {node: g for node, g in found.values()}
    if leaves is not None:
        out = {
            lf: out[lf] if lf in out else np.zeros_like(lf.data)
            for lf in leaves
        }
    return out

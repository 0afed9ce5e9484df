"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float32 or float64 ndarray. Operations build a DAG of
nodes; ``Tensor.backward()`` walks the graph once in reverse topological
order and accumulates gradients, so values reused by several consumers
receive the sum of their downstream contributions.

Everything here is CPU numpy. float64 is the verification dtype: the
finite-difference checker assumes it. float32 exists for training speed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_own_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._own_grad = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------

    def zero_grad(self):
        self.grad = None
        self._own_grad = False

    def _accumulate(self, g: np.ndarray):
        # The first contribution is borrowed, not copied: by the time a
        # node's backward hands its gradient (or a view of it) upstream,
        # that gradient is final, and borrowed arrays are never mutated
        # here - a second contribution reallocates instead of using +=.
        if self.grad is None:
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
            self.grad = g
            self._own_grad = False
        elif self._own_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._own_grad = True

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor(data)
    live = [p for p in parents if p.requires_grad]
    if _grad_enabled and live:
        out.requires_grad = True
        out._parents = tuple(live)
        out._backward = backward
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: reduce g down to the given shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NumericError("log() received non-positive values")
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt() received negative values")
    data = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps losses finite when residuals vanish
        denom = 2.0 * data
        gx = np.where(denom > 0, g / np.where(denom > 0, denom, 1.0), 0.0)
        a._accumulate(gx)

    return _node(data, (a,), backward)


def square(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * inside)

    return _node(data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact gaussian error linear unit, x * Phi(x)."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        a._accumulate(g * (cdf + x * pdf))

    return _node(data, (a,), backward)


def blend(coef, a, b) -> Tensor:
    """coef * a + (1 - coef) * b for a scalar (0-d) coefficient."""
    coef, a, b = _wrap(coef), _wrap(a), _wrap(b)
    if coef.data.ndim != 0:
        raise ShapeError(f"blend coefficient must be 0-d, got shape {coef.shape}")
    c = coef.data
    data = c * a.data + (1.0 - c) * b.data

    def backward(g):
        if coef.requires_grad:
            coef._accumulate(np.asarray((g * (a.data - b.data)).sum(), dtype=c.dtype))
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * c, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * (1.0 - c), b.shape))

    return _node(data, (coef, a, b), backward)


# -- reductions ---------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg / count, a.shape).copy())

    return _node(data, (a,), backward)


# -- shape manipulation --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a, perm) -> Tensor:
    a = _wrap(a)
    perm = tuple(perm)
    data = a.data.transpose(perm)
    inv = tuple(np.argsort(perm))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(data, (a,), backward)


def concat(parts: Iterable, axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                p._accumulate(piece)

    return _node(data, parts, backward)


def pad(a, pad_width) -> Tensor:
    """Zero padding; pad_width follows np.pad conventions."""
    a = _wrap(a)
    pad_width = tuple(tuple(p) for p in pad_width)
    data = np.pad(a.data, pad_width)

    def backward(g):
        slices = tuple(slice(b, g.shape[i] - e) for i, (b, e) in enumerate(pad_width))
        a._accumulate(g[slices])

    return _node(data, (a,), backward)


def roll(a, shifts, axes) -> Tensor:
    a = _wrap(a)
    data = np.roll(a.data, shifts, axis=axes)
    back_shifts = tuple(-s for s in np.atleast_1d(shifts))

    def backward(g):
        a._accumulate(np.roll(g, back_shifts, axis=axes))

    return _node(data, (a,), backward)


def slice_nd(a, slices) -> Tensor:
    a = _wrap(a)
    slices = tuple(slices)
    data = a.data[slices]

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[slices] = g
        a._accumulate(gx)

    return _node(data, (a,), backward)


def index_select(a, idx) -> Tensor:
    """Select rows along the first axis with an integer array."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        a._accumulate(gx)

    return _node(data, (a,), backward)


def take_rows(table, idx) -> Tensor:
    """table[idx] for an integer index array; gradient scatters back with +=."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accumulate(gt)

    return _node(data, (table,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_sum_to_shape(gb, b.shape))

    return _node(data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """x @ w.T + b with x (..., c_in), w (c_out, c_in), b (c_out,)."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    data = x.data @ w.data.T
    bt = _wrap(b) if b is not None else None
    if bt is not None:
        data += bt.data  # fresh from the matmul, safe in place
    parents = (x, w) if bt is None else (x, w, bt)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate((g @ w.data).reshape(x.shape))
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accumulate(g2.T @ x2)
        if bt is not None and bt.requires_grad:
            bt._accumulate(g2.sum(axis=0))

    return _node(data, parents, backward)


def mlp_pair(x, w1, b1, w2, b2) -> Tensor:
    """linear -> exact GELU -> linear as one graph node."""
    x, w1, b1, w2, b2 = _wrap(x), _wrap(w1), _wrap(b1), _wrap(w2), _wrap(b2)
    if x.shape[-1] != w1.shape[-1]:
        raise ShapeError(f"mlp_pair: input width {x.shape} does not match weight {w1.shape}")
    hid = x.data @ w1.data.T
    hid += b1.data
    cdf = 0.5 * (1.0 + _erf(hid / math.sqrt(2.0)))
    act = hid * cdf
    data = act @ w2.data.T
    data += b2.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if w2.requires_grad:
            w2._accumulate(g2.T @ act.reshape(-1, act.shape[-1]))
        if b2.requires_grad:
            b2._accumulate(g2.sum(axis=0))
        gh = g @ w2.data
        pdf = np.exp(-0.5 * hid * hid) / math.sqrt(2.0 * math.pi)
        gh *= cdf + hid * pdf
        gh2 = gh.reshape(-1, gh.shape[-1])
        if w1.requires_grad:
            w1._accumulate(gh2.T @ x.data.reshape(-1, x.shape[-1]))
        if b1.requires_grad:
            b1._accumulate(gh2.sum(axis=0))
        if x.requires_grad:
            x._accumulate((gh @ w1.data).reshape(x.shape))

    return _node(data, (x, w1, b1, w2, b2), backward)


def attention_core(q, k, v, heads: int, scale: float, bias=None,
                   key_mask: np.ndarray | None = None,
                   v_layout: str = "tokens") -> Tensor:
    """Multi-head softmax attention over window token stacks, one node.

    q, k are (groups, tokens, channels); channels split into heads
    internally and per-head contexts are re-concatenated, so the result
    is (groups, tokens, channels_v). v follows q and k when v_layout is
    "tokens"; "heads" passes v already shaped (heads, tokens, head_dim),
    broadcast across groups. bias is an additive (heads, tokens, tokens)
    score term; key_mask is a non-differentiable additive array whose
    leading axis tiles up to the group count.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    g_, n, c = q.shape
    if c % heads != 0:
        raise ShapeError(f"channel width {c} not divisible by {heads} heads")
    if k.shape != q.shape:
        raise ShapeError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    p = c // heads
    qh = q.data.reshape(g_, n, heads, p).transpose(0, 2, 1, 3)
    kh = k.data.reshape(g_, n, heads, p).transpose(0, 2, 1, 3)
    if v_layout == "tokens":
        if v.shape[-1] % heads != 0:
            raise ShapeError(f"value width {v.shape[-1]} not divisible by {heads} heads")
        pv = v.shape[-1] // heads
        vh = v.data.reshape(g_, n, heads, pv).transpose(0, 2, 1, 3)
    elif v_layout == "heads":
        vh = v.data  # (heads, n, head_dim), broadcasts across groups
        pv = vh.shape[-1]
    else:
        raise ShapeError(f"unknown v_layout {v_layout!r}")

    s = qh @ kh.transpose(0, 1, 3, 2)
    s *= scale
    bt = _wrap(bias) if bias is not None else None
    if bt is not None:
        s += bt.data
    if key_mask is not None:
        if key_mask.shape[0] != g_:
            key_mask = np.tile(key_mask, (g_ // key_mask.shape[0], 1, 1, 1))
        s += key_mask
    mx = s.max(axis=-1, keepdims=True)
    if np.isnan(mx).any():
        raise NumericError("attention scores contain NaN")
    s -= mx
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    w = s
    ctx = w @ vh
    data = ctx.transpose(0, 2, 1, 3).reshape(g_, n, heads * pv)

    def backward(g):
        gctx = g.reshape(g_, n, heads, pv).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gv = w.swapaxes(-1, -2) @ gctx
            if v_layout == "tokens":
                v._accumulate(gv.transpose(0, 2, 1, 3).reshape(g_, n, heads * pv))
            else:
                v._accumulate(_sum_to_shape(gv, v.shape))
        if not (q.requires_grad or k.requires_grad or (bt is not None and bt.requires_grad)):
            return
        gw = gctx @ vh.swapaxes(-1, -2)
        dot = (gw * w).sum(axis=-1, keepdims=True)
        gw -= dot
        gw *= w  # now the score gradient
        if bt is not None and bt.requires_grad:
            bt._accumulate(_sum_to_shape(gw, bt.shape))
        gw *= scale  # q/k see the scaled scores; bias enters after scaling
        if q.requires_grad:
            gq = gw @ kh
            q._accumulate(gq.transpose(0, 2, 1, 3).reshape(g_, n, c))
        if k.requires_grad:
            gk = gw.swapaxes(-1, -2) @ qh
            k._accumulate(gk.transpose(0, 2, 1, 3).reshape(g_, n, c))

    parents = (q, k, v) if bt is None else (q, k, v, bt)
    return _node(data, parents, backward)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with max subtraction for stability."""
    x = _wrap(x)
    mx = x.data.max(axis=-1, keepdims=True)
    if np.isnan(mx).any():
        raise NumericError("softmax_rows received NaN input")
    e = np.exp(x.data - mx)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - dot))

    return _node(data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        if x.requires_grad:
            gy = g * gain.data
            t1 = gy.mean(axis=-1, keepdims=True)
            t2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - t1 - xhat * t2))
        if gain.requires_grad:
            gain._accumulate(_sum_to_shape(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_sum_to_shape(g, bias.shape))

    return _node(data, (x, gain, bias), backward)


# -- image-shaped ops ----------------------------------------------------


def pixel_shuffle(x, r: int) -> Tensor:
    """(..., c*r*r, h, w) -> (..., c, h*r, w*r); channel-major sub-pixel order.

    Channel block k of size r*r fills output channel k so that the flat
    block [a, b, c, d] with r=2 lands as [[a, b], [c, d]].
    """
    x = _wrap(x)
    *lead, c2, h, w = x.shape
    if c2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channels {c2} not divisible by r*r={r * r}")
    c = c2 // (r * r)

    def fwd(arr):
        a = arr.reshape(*lead, c, r, r, h, w)
        a = np.moveaxis(a, (-4, -3), (-3, -1))  # (..., c, h, r, w, r)
        return a.reshape(*lead, c, h * r, w * r)

    def backward(g):
        a = g.reshape(*lead, c, h, r, w, r)
        a = np.moveaxis(a, (-3, -1), (-4, -3))
        x._accumulate(a.reshape(*lead, c2, h, w))

    return _node(fwd(x.data), (x,), backward)


def pixel_unshuffle(x, r: int) -> Tensor:
    """Exact inverse of pixel_shuffle."""
    x = _wrap(x)
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: extents {(hr, wr)} not divisible by r={r}")
    h, w = hr // r, wr // r

    def fwd(arr):
        a = arr.reshape(*lead, c, h, r, w, r)
        a = np.moveaxis(a, (-3, -1), (-4, -3))
        return a.reshape(*lead, c * r * r, h, w)

    def backward(g):
        a = g.reshape(*lead, c, r, r, h, w)
        a = np.moveaxis(a, (-4, -3), (-3, -1))
        x._accumulate(a.reshape(*lead, c, hr, wr))

    return _node(fwd(x.data), (x,), backward)


def _linear_interp_indices(n_in: int, n_out: int):
    """Align-corners source indices and weights for 1-d interpolation."""
    if n_out <= 0:
        raise ShapeError(f"bilinear_resize: target extent must be positive, got {n_out}")
    if n_in == 1:
        i0 = np.zeros(n_out, dtype=np.int64)
        return i0, i0, np.zeros(n_out)
    if n_out == 1:
        return np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros(1)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_in - 2)
    u = pos - i0
    return i0, i0 + 1, u


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of the trailing two axes."""
    x = _wrap(x)
    *lead, h, w = x.shape
    r0, r1, ru = _linear_interp_indices(h, out_h)
    c0, c1, cu = _linear_interp_indices(w, out_w)
    dt = x.dtype
    ruv = ru.astype(dt)[:, None]
    cuv = cu.astype(dt)

    def fwd(arr):
        rows = arr[..., r0, :] * (1 - ruv) + arr[..., r1, :] * ruv
        return rows[..., c0] * (1 - cuv) + rows[..., c1] * cuv

    def backward(g):
        grows = np.zeros((*lead, out_h, w), dtype=dt)
        np.add.at(grows, (..., slice(None), c0), g * (1 - cuv))
        np.add.at(grows, (..., slice(None), c1), g * cuv)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (..., r0, slice(None)), grows * (1 - ruv))
        np.add.at(gx, (..., r1, slice(None)), grows * ruv)
        x._accumulate(gx)

    return _node(fwd(x.data), (x,), backward)


def _pool_bounds(n: int, bins: int):
    starts = (np.arange(bins) * n) // bins
    ends = -(-(np.arange(1, bins + 1) * n) // bins)  # ceil division
    return starts, ends


def adaptive_avg_pool2d(x, bins: int) -> Tensor:
    """Average the trailing two axes into a bins x bins grid."""
    x = _wrap(x)
    *lead, h, w = x.shape
    rs, re = _pool_bounds(h, bins)
    cs, ce = _pool_bounds(w, bins)
    data = np.empty((*lead, bins, bins), dtype=x.dtype)
    for i in range(bins):
        for j in range(bins):
            data[..., i, j] = x.data[..., rs[i]:re[i], cs[j]:ce[j]].mean(axis=(-1, -2))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(bins):
            for j in range(bins):
                count = (re[i] - rs[i]) * (ce[j] - cs[j])
                gx[..., rs[i]:re[i], cs[j]:ce[j]] += g[..., i, j, None, None] / count
        x._accumulate(gx)

    return _node(data, (x,), backward)


def channel_linear(x, w, b=None) -> Tensor:
    """1x1 convolution: linear map over the channel axis of (..., c, h, w)."""
    perm = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 1, x.ndim - 3)
    moved = transpose(x, perm)
    out = linear(moved, w, b)
    back = tuple(range(x.ndim - 3)) + (x.ndim - 1, x.ndim - 3, x.ndim - 2)
    return transpose(out, back)


def window_partition(x, window: int, shift: int) -> Tensor:
    """(b, c, h, w) -> (b * windows, window**2, c) token stacks, one node.

    Extents are zero-padded up to window multiples, then the grid rolls
    by -shift in both spatial axes before cutting, so with shift=1 the
    token at (0, 0) comes from source pixel (1, 1).
    """
    x = _wrap(x)
    b, c, h, w = x.shape
    hp = ((h + window - 1) // window) * window
    wp = ((w + window - 1) // window) * window

    arr = x.data
    if hp != h or wp != w:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
    if shift:
        arr = np.roll(arr, (-shift, -shift), axis=(2, 3))
    arr = arr.reshape(b, c, hp // window, window, wp // window, window)
    data = arr.transpose(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)

    def backward(g):
        a = g.reshape(b, hp // window, wp // window, window, window, c)
        a = a.transpose(0, 5, 1, 3, 2, 4).reshape(b, c, hp, wp)
        if shift:
            a = np.roll(a, (shift, shift), axis=(2, 3))
        if hp != h or wp != w:
            a = a[:, :, :h, :w]
        x._accumulate(a)

    return _node(data, (x,), backward)


def window_merge(tokens, window: int, shift: int, b: int, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition for the same geometry."""
    tokens = _wrap(tokens)
    c = tokens.shape[-1]
    hp = ((h + window - 1) // window) * window
    wp = ((w + window - 1) // window) * window

    arr = tokens.data.reshape(b, hp // window, wp // window, window, window, c)
    arr = arr.transpose(0, 5, 1, 3, 2, 4).reshape(b, c, hp, wp)
    if shift:
        arr = np.roll(arr, (shift, shift), axis=(2, 3))
    data = arr[:, :, :h, :w] if (hp != h or wp != w) else arr

    def backward(g):
        if hp != h or wp != w:
            g = np.pad(g, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
        if shift:
            g = np.roll(g, (-shift, -shift), axis=(2, 3))
        a = g.reshape(b, c, hp // window, window, wp // window, window)
        tokens._accumulate(a.transpose(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c))

    return _node(data, (tokens,), backward)


# -- operator sugar ------------------------------------------------------

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.transpose = lambda self, perm: transpose(self, perm)


def _tensor_getitem(self, key):
    if isinstance(key, (np.ndarray, list)):
        return index_select(self, key)
    if not isinstance(key, tuple):
        key = (key,)
    return slice_nd(self, key)


Tensor.__getitem__ = _tensor_getitem


# -- verification --------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``f`` rebuilds its graph on every call and returns a scalar Tensor.
    Returns the maximum over checked coordinates of
    |fd - ad| / max(1, |fd|, |ad|). Parameters must be float64; float32
    has too little headroom under an h of 1e-5.
    """
    for p in params:
        if p.dtype != np.float64:
            raise NumericError("grad_check requires float64 parameters")
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got {out.shape}")
    out.backward()
    ad_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ad in zip(params, ad_grads):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        adf = ad.reshape(-1)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            with no_grad():
                f1 = float(f().data)
            flat[i] = keep - h
            with no_grad():
                f2 = float(f().data)
            flat[i] = keep
            fd = (f1 - f2) / (2.0 * h)
            err = abs(fd - adf[i]) / max(1.0, abs(fd), abs(adf[i]))
            if err > worst:
                worst = err
    return worst


# -- parameter containers -------------------------------------------------


def _walk_params(value, path: str):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{path}.")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk_params(v, f"{path}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_params(v, f"{path}.{i}")


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, dict):
        for v in value.values():
            yield from _walk_modules(v)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_modules(v)


class Module:
    """Minimal parameter container with dotted-path traversal.

    Traversal recurses through arbitrarily nested dicts, lists, and
    tuples of Tensors and Modules, so container attributes never hide
    parameters from optimizers or checkpoints.
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk_params(val, f"{prefix}{key}")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        """This module and every nested Module, depth-first."""
        yield self
        for val in vars(self).values():
            yield from _walk_modules(val)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

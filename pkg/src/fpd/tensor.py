"""Small reverse-mode autodiff engine on top of numpy.

Every op builds a new :class:`Tensor` whose parents and local gradient
closure are recorded when gradient tracking is on.  Node ids come from a
per-thread counter, so sorting the reachable nodes by id gives the exact
reverse creation order that :func:`backward` walks.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def _counter() -> itertools.count:
    c = getattr(_state, "counter", None)
    if c is None:
        c = _state.counter = itertools.count()
    return c


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, parameter updates)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_counter())
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def tensor_from(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False,
                dtype=np.float64) -> Tensor:
    """Build a tensor from a shape and a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"dimensions must be positive, got {shape}")
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=dtype)
    arr = arr.reshape(-1)
    if arr.size != math.prod(shape):
        raise ValueError(f"shape {shape} needs {math.prod(shape)} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return Tensor(arr.reshape(shape).copy(), requires_grad=requires_grad)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,))
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else math.prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,)))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions pass through as in ``np.matmul``."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------- activations

ACTIVATIONS = ("relu", "elu", "tanh", "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows; underflow to 0 is the right answer
    out = np.empty_like(z)
    pos = z >= 0
    with np.errstate(under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    z = x.data
    if kind == "relu":
        y = np.maximum(z, 0)
        return _make(y, (x,), lambda g: (g * (z > 0),))
    if kind == "elu":
        neg = np.expm1(np.minimum(z, 0))
        y = np.where(z >= 0, z, neg)
        return _make(y, (x,), lambda g: (g * np.where(z >= 0, 1.0, neg + 1.0).astype(z.dtype),))
    if kind == "tanh":
        y = np.tanh(z)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(z)
        return _make(y, (x,), lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def elu(x: Tensor) -> Tensor:
    return activation(x, "elu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


# ---------------------------------------------------------------- softmax & losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]``; logits are [K] or [B, K]."""
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z2.shape[-1]
    if lab.shape[0] != z2.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for a batch of {z2.shape[0]}")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label out of range [0, {k})")
    rows = np.arange(z2.shape[0])
    logp = _log_softmax(z2)
    losses = -logp[rows, lab]
    if reduction == "mean":
        scale = 1.0 / z2.shape[0]
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(losses.sum() * scale, dtype=z.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        d *= g * scale
        return (d[0] if single else d,)

    return _make(value, (logits,), bw)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"l2_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(value, (a, b), bw)


# ---------------------------------------------------------------- convolutions

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [C*k*k, B*Ho*Wo].

    Channel-major columns keep the copy's innermost runs contiguous along W,
    which is several times faster than the row-major patch layout.
    """
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Scatter-add [C*k*k, B*Ho*Wo] columns onto a zero [B,C,Hp,Wp] canvas."""
    b, c, hp, wp = shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _to_rows(g: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [C, B*H*W]."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _from_rows(m: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """[C, B*H*W] -> contiguous [B,C,H,W]."""
    return np.ascontiguousarray(m.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation. ``w`` is [C_out, C_in, k, k]."""
    x, squeeze = _batched(x)
    bsz, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xd, wdat = x.data, w.data
    wmat = wdat.reshape(cout, -1)
    parents = (x, w) if b is None else (x, w, b)

    if k == 1 and stride == 1 and pad == 0:
        x3 = xd.reshape(bsz, cin, h * wd)
        out = wmat @ x3
        if b is not None:
            out = out + b.data[:, None]

        def bw1(g):
            g3 = g.reshape(bsz, cout, h * wd)
            gx = (wmat.T @ g3).reshape(xd.shape) if x.requires_grad else None
            gw = np.einsum("bop,bcp->oc", g3, x3).reshape(wdat.shape) if w.requires_grad else None
            if b is None:
                return gx, gw
            return gx, gw, g3.sum(axis=(0, 2))

        y = _make(out.reshape(bsz, cout, h, wd), parents, bw1)
        return _unbatch(y, squeeze)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]

    def bw(g):
        g2 = _to_rows(g)
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ g2, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        gw = (g2 @ cols.T).reshape(wdat.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _unbatch(_make(_from_rows(out, bsz, ho, wo), parents, bw), squeeze)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Transposed convolution (the input-gradient of :func:`conv2d`).

    ``w`` is [C_in, C_out, k, k]; output size is ``(H-1)*stride - 2*pad + k``.
    """
    x, squeeze = _batched(x)
    bsz, cin, h, wd = x.shape
    cin_w, cout, k, _ = w.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, weight {cin_w}")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d output size would be {ho}x{wo}")
    xd, wdat = x.data, w.data
    wmat = wdat.reshape(cin, -1)
    x2 = _to_rows(xd)
    hp, wp = ho + 2 * pad, wo + 2 * pad
    full = _col2im(wmat.T @ x2, (bsz, cout, hp, wp), k, stride, h, wd)
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _im2col(gp, k, stride, h, wd)
        gx = _from_rows(wmat @ gcols, bsz, h, wd) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(wdat.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _unbatch(_make(np.ascontiguousarray(out), parents, bw), squeeze)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    z = x.data
    y = np.repeat(np.repeat(z, factor, axis=-2), factor, axis=-1)
    lead = z.shape[:-2]
    h, w = z.shape[-2:]

    def bw(g):
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With ``wrt`` only those leaves receive gradients; other leaves keep
    whatever ``.grad`` they had (attacks use this to leave parameters alone).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)

    targets = None if wrt is None else {id(t) for t in wrt}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            if targets is None or id(t) in targets:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


# ---------------------------------------------------------------- gradient oracle

def finite_diff_gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                          scale_floor: float = 0.0) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = max(1e-8, scale_floor * max|a|)`` over every input coordinate.
    A nonzero ``scale_floor`` keeps coordinates whose gradient sits below the
    round-off level of the difference quotient from dominating the result.
    Returns ``inf`` when anything evaluates to a non-finite number.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        return math.inf
    backward(out)
    pairs = []
    with no_grad():
        for t in inputs:
            analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1)
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            pairs.append((analytic, numeric))
    if not all(np.isfinite(a).all() and np.isfinite(n).all() for a, n in pairs):
        return math.inf
    scale = max((float(np.abs(a).max(initial=0.0)) for a, _ in pairs), default=0.0)
    floor = max(1e-8, scale_floor * scale)
    worst = 0.0
    for a, n in pairs:
        if a.size:
            den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst

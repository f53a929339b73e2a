"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a :class:`Tensor`.  When at least one input requires a
gradient, the result remembers its parents and a closure mapping the output
gradient to the input gradients; :func:`backward` walks that graph in reverse
topological order.  Tensors are limited to rank 3 and every result is checked
for NaN/Inf.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import HeadDivisibility, NonFiniteError, NonScalarLoss, ShapeMismatch

MAX_RANK = 3
LOG_EPS = 1e-12
_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from python data."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "const"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} tensors are not supported")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = op

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=True, op="param")


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), back, "mul")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def log(x, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data + eps)
    return _result(out, (x,), lambda g: (g / (x.data + eps),), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,), "exp")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) for i in parts)

    def back(g):
        z = np.zeros_like(x.data)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(np.array(data), (x,), back, "getitem")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        return x
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, ts, back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(data, ts, back, "stack")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), back, "sum")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeMismatch("matmul needs rank >= 1 operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    out = np.matmul(a2, b2)

    def back(g):
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],)) if a.ndim == 1 else ga
        gb = gb.reshape(gb.shape[:-1]) if b.ndim == 1 else gb
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if a.ndim == 1:
        out = out.reshape(out.shape[:-2] + (out.shape[-1],))
    if b.ndim == 1:
        out = out.reshape(out.shape[:-1])
    return _result(out, (a, b), back, "matmul")


def affine(x, W, bias=None) -> Tensor:
    """``x @ W + bias``."""
    out = matmul(x, W)
    return out if bias is None else add(out, bias)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` restricted to explicit-output subscripts
    without repeated indices inside one operand."""
    ts = [as_tensor(t) for t in operands]
    inputs, output = subscripts.replace(" ", "").split("->")
    subs = inputs.split(",")
    if len(subs) != len(ts):
        raise ShapeMismatch("einsum: operand count mismatch")
    for s, t in zip(subs, ts):
        if len(set(s)) != len(s) or len(s) != t.ndim:
            raise ShapeMismatch(f"einsum: bad subscripts {s!r} for shape {t.shape}")
    try:
        data = np.einsum(subscripts, *(t.data for t in ts), optimize=len(ts) > 2)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def back(g):
        grads = []
        for i, (s, t) in enumerate(zip(subs, ts)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(subs[j], ts[j].data) for j in range(len(ts)) if j != i]
            avail = set(output).union(*(set(o[0]) for o in others)) if others else set(output)
            kept = "".join(c for c in s if c in avail)
            spec = ",".join([output] + [o[0] for o in others]) + "->" + kept
            gi = np.einsum(spec, g, *(o[1] for o in others))
            if kept != s:
                # indices summed away inside this operand only: broadcast back
                gi = gi.reshape([t.shape[k] if c in avail else 1 for k, c in enumerate(s)])
                gi = np.broadcast_to(gi, t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _result(np.asarray(data), ts, back, "einsum")


def spmv_const(M: sp.spmatrix, v, transpose: bool = False, exclude=None) -> Tensor:
    """Product of a constant sparse matrix with a dense vector or matrix.

    ``transpose=True`` computes ``M.T @ v``.  ``exclude`` optionally removes
    individual matrix entries per column of ``v``: a tuple of integer arrays
    ``(col, src, dst)`` subtracts ``v[src, col]`` from ``out[dst, col]``
    (so the entry ``M[src, dst]`` is ignored for that column under
    ``transpose=True``).  Gradients flow into ``v`` only.
    """
    v = as_tensor(v)
    if v.ndim not in (1, 2) or v.shape[0] != M.shape[0]:
        raise ShapeMismatch(f"spmv_const: matrix {M.shape} vs vector {v.shape}")
    op = M.T if transpose else M
    back_op = M if transpose else M.T
    out = np.asarray(op @ v.data).astype(v.dtype, copy=False)
    if exclude is not None:
        col, src, dst = exclude
        out = out.copy()
        if v.ndim == 1:
            np.subtract.at(out, dst, v.data[src])
        else:
            np.subtract.at(out, (dst, col), v.data[src, col])

    def back(g):
        gv = np.asarray(back_op @ g).astype(v.dtype, copy=False)
        if exclude is not None:
            gv = gv.copy()
            if v.ndim == 1:
                np.subtract.at(gv, src, g[dst])
            else:
                np.subtract.at(gv, (src, col), g[dst, col])
        return (gv,)

    return _result(out, (v,), back, "spmv")


# ---------------------------------------------------------------------------
# normalisation and losses
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), back, "softmax")


def normalize_rows(x) -> Tensor:
    """Divide each row by its sum (rows must be positive)."""
    x = as_tensor(x)
    tot = x.data.sum(axis=-1, keepdims=True)
    y = x.data / tot

    def back(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) / tot,)

    return _result(y, (x,), back, "normalize")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        gx_h = g * gain.data
        gx = inv / n * (n * gx_h - gx_h.sum(axis=-1, keepdims=True)
                        - xh * (gx_h * xh).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xh, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), back, "layernorm")


def cross_entropy(y, p, eps: float = LOG_EPS) -> Tensor:
    """Mean binary cross-entropy ``-y log(p+eps) - (1-y) log(1-p+eps)``."""
    p = as_tensor(p)
    y = np.broadcast_to(np.asarray(y, dtype=p.dtype), p.shape)
    n = max(p.data.size, 1)
    pe, qe = p.data + eps, 1.0 - p.data + eps
    val = -(y * np.log(pe) + (1.0 - y) * np.log(qe)).sum() / n

    def back(g):
        return (g * (-y / pe + (1.0 - y) / qe) / n,)

    return _result(np.asarray(val, dtype=p.dtype), (p,), back, "xent")


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------


@dataclass
class MHAWeights:
    """Query/key/value/output projections, each ``d x d``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def mha(Q, V, weights: MHAWeights, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``Q (q x d)`` over ``V (v x d)``.

    Returns the ``q x d`` output and the ``q x v`` attention matrix, which is
    the renormalised mean of the per-head attention matrices.
    """
    Q, V = as_tensor(Q), as_tensor(V)
    if Q.ndim != 2 or V.ndim != 2 or Q.shape[1] != V.shape[1]:
        raise ShapeMismatch(f"mha: Q {Q.shape} vs V {V.shape}")
    d = Q.shape[1]
    if heads < 1 or d % heads:
        raise HeadDivisibility(f"width {d} not divisible by {heads} heads")
    if weights.wq.shape != (d, d):
        raise ShapeMismatch(f"mha: weights {weights.wq.shape} for width {d}")
    dh = d // heads
    q = matmul(Q, weights.wq)
    k = matmul(V, weights.wk)
    v = matmul(V, weights.wv)
    scale = 1.0 / np.sqrt(dh)
    outs, attns = [], []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        a = softmax_rows(matmul(qh, transpose(kh)) * scale)
        attns.append(a)
        outs.append(matmul(a, vh))
    O = matmul(outs[0] if heads == 1 else concat(outs, axis=1), weights.wo)
    if heads == 1:
        return O, attns[0]
    S = normalize_rows(mul(tsum(stack(attns, axis=0), axis=0), 1.0 / heads))
    return O, S


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack_ = [], set(), [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients are overwritten, not added to previous calls.  When ``params``
    is given, their gradients are returned (zeros when unreachable).
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
    if params is not None:
        return [p.grad for p in params]
    return None


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> float:
    """Largest elementwise relative error between backprop and central differences.

    ``fn`` must rebuild the loss from the current parameter values.  The error
    of one entry is ``|a - n| / max(|a|, |n|, floor)``.  ``max_coords`` limits
    the number of probed entries per parameter (chosen at random).
    """
    loss = fn()
    analytic = [g.copy() for g in backward(loss, params)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn().data)
            flat[i] = old - eps
            fm = float(fn().data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst

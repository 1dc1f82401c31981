"""Dense float tensors with reverse-mode gradients over a fixed op set.

Data is row-major numpy, float32 by default (float64 for gradient checks;
ops preserve the dtype of their inputs). Graphs are built eagerly by the op
functions below and walked once by ``Tensor.backward``. Every op validates
that its output is finite unless finite checks are disabled, so NaN/Inf
fails fast instead of propagating through training.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateAttentionError, NumericsError, ShapeError

_grad_enabled = True
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every forward op."""
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference, match costs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A numpy array plus an optional gradient accumulator and graph edge."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() on non-scalar tensor of shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    return Tensor(arr, requires_grad=requires_grad)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    reduce_axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if reduce_axes:
        g = g.sum(axis=reduce_axes, keepdims=True)
    return g


# -- elementwise ops -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    out = _from_op(data, (a, b), None, "add")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    out = _from_op(data, (a, b), None, "sub")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def neg(x: Tensor) -> Tensor:
    out = _from_op(-x.data, (x,), None, "neg")

    def backward():
        _accum(x, -out.grad)

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    out = _from_op(data, (a, b), None, "mul")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = a.data / b.data
    out = _from_op(data, (a, b), None, "div")

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def power(x: Tensor, exponent: float) -> Tensor:
    data = x.data ** exponent
    out = _from_op(data, (x,), None, "power")

    def backward():
        _accum(x, out.grad * exponent * x.data ** (exponent - 1.0))

    out._backward = backward if out.requires_grad else None
    return out


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    out = _from_op(data, (x,), None, "exp")

    def backward():
        _accum(x, out.grad * data)

    out._backward = backward if out.requires_grad else None
    return out


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(x.data)
    out = _from_op(data, (x,), None, "log")

    def backward():
        _accum(x, out.grad / x.data)

    out._backward = backward if out.requires_grad else None
    return out


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    out = _from_op(data, (x,), None, "sqrt")

    def backward():
        _accum(x, out.grad * 0.5 / data)

    out._backward = backward if out.requires_grad else None
    return out


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    out = _from_op(data, (x,), None, "relu")

    def backward():
        _accum(x, out.grad * (x.data > 0))

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    # 1/(1+e^-x) evaluated stably on both tails
    xd = x.data
    data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                    np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    data = data.astype(xd.dtype, copy=False)
    out = _from_op(data, (x,), None, "sigmoid")

    def backward():
        _accum(x, out.grad * data * (1.0 - data))

    out._backward = backward if out.requires_grad else None
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable on both tails."""
    data = np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False)
    out = _from_op(data, (x,), None, "softplus")

    def backward():
        xd = x.data
        sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                       np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
        _accum(x, out.grad * sig)

    out._backward = backward if out.requires_grad else None
    return out


def logsumexp(x: Tensor, axis: int) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    data = shift + np.log(np.sum(np.exp(x.data - shift), axis=axis, keepdims=True))
    data = np.squeeze(data, axis=axis)
    out = _from_op(data, (x,), None, "logsumexp")

    def backward():
        g = np.expand_dims(out.grad, axis)
        soft = np.exp(x.data - np.expand_dims(data, axis))
        _accum(x, g * soft)

    out._backward = backward if out.requires_grad else None
    return out


# -- shape ops -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _from_op(x.data.reshape(shape), (x,), None, "reshape")

    def backward():
        _accum(x, out.grad.reshape(x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _from_op(np.transpose(x.data, axes), (x,), None, "transpose")
    inverse = tuple(np.argsort(axes))

    def backward():
        _accum(x, np.transpose(out.grad, inverse))

    out._backward = backward if out.requires_grad else None
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = np.broadcast_to(x.data, shape).copy()
    out = _from_op(data, (x,), None, "broadcast_to")

    def backward():
        _accum(x, _unbroadcast(out.grad, x.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([x.data for x in xs], axis=axis)
    out = _from_op(data, xs, None, "concat")
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        for x, start, stop in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(start), int(stop))
            _accum(x, g[tuple(idx)])

    out._backward = backward if out.requires_grad else None
    return out


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("stack of zero tensors")
    data = np.stack([x.data for x in xs], axis=axis)
    out = _from_op(data, xs, None, "stack")

    def backward():
        g = out.grad
        for i, x in enumerate(xs):
            _accum(x, np.take(g, i, axis=axis))

    out._backward = backward if out.requires_grad else None
    return out


def index_select(x: Tensor, axis: int, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_select expects a 1-D index list")
    if x.data.shape[axis] == 0 or (idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[axis])):
        raise ShapeError("index_select indices out of range")
    data = np.take(x.data, idx, axis=axis)
    out = _from_op(data, (x,), None, "index_select")

    def backward():
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(out.grad, axis, 0))
        _accum(x, gx)

    out._backward = backward if out.requires_grad else None
    return out


# -- reductions ---------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = _from_op(np.asarray(data), (x,), None, "reduce_sum")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    out._backward = backward if out.requires_grad else None
    return out


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), Tensor(np.asarray(1.0 / count, dtype=x.data.dtype)))


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires >=2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    out = _from_op(data, (a, b), None, "matmul")

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) over the trailing axis of x."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} incompatible with weight {w.data.shape}")
    y = matmul(x, w)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError("linear bias shape mismatch")
        y = add(y, b)
    return y


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor | None]]) -> Tensor:
    """Linear stack with ReLU between layers (none after the last)."""
    if not layers:
        raise ShapeError("mlp needs at least one layer")
    y = x
    for i, (w, b) in enumerate(layers):
        y = linear(y, w, b)
        if i + 1 < len(layers):
            y = relu(y)
    return y


# -- normalization and attention ----------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; `mask` (bool, broadcastable) pins entries to exactly 0."""
    xd = x.data
    if xd.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateAttentionError("softmax row with all entries masked")
        shifted = np.where(mask, xd, -np.inf)
        shifted = shifted - np.max(shifted, axis=axis, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        e = np.exp(xd - np.max(xd, axis=axis, keepdims=True))
    data = (e / e.sum(axis=axis, keepdims=True)).astype(xd.dtype, copy=False)
    out = _from_op(data, (x,), None, "softmax")

    def backward():
        g = out.grad
        dot = np.sum(g * data, axis=axis, keepdims=True)
        _accum(x, data * (g - dot))

    out._backward = backward if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = (xhat * gamma.data + beta.data).astype(xd.dtype, copy=False)
    out = _from_op(data, (x, gamma, beta), None, "layer_norm")

    def backward():
        g = out.grad
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    out._backward = backward if out.requires_grad else None
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention over 2-D operands.

    q: [m, C], k/v: [n, C]; scale is 1/sqrt(C). `mask` is bool [m, n]; False
    entries receive weight exactly 0 and a row with no True entries is an
    error. Returns [m, C] (plus the weight matrix as numpy if requested).
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention expects 2-D q/k/v")
    m, c = q.data.shape
    n = k.data.shape[0]
    if c == 0:
        raise ShapeError("attention with zero-width queries")
    if k.data.shape[1] != c or v.data.shape[0] != n:
        raise ShapeError("attention q/k/v shapes are inconsistent")
    if n == 0:
        raise DegenerateAttentionError("attention over zero keys")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (m, n):
            raise ShapeError("attention mask must be [m, n]")
        if not mask.any(axis=1).all():
            raise DegenerateAttentionError("attention row with every key masked")
    scale = Tensor(np.asarray(1.0 / math.sqrt(c), dtype=q.data.dtype))
    scores = mul(matmul(q, transpose(k, (1, 0))), scale)
    weights = softmax(scores, axis=-1, mask=mask)
    out = matmul(weights, v)
    if return_weights:
        return out, weights.data.copy()
    return out


# -- convolution and resampling ----------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution, x: [B, Cin, H, W], w: [Cout, Cin, kh, kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    bsz, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output would be empty")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, Cin, OH, OW, kh, kw]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(bsz, cin * kh * kw, oh * ow)
    wmat = w.data.reshape(cout, cin * kh * kw)
    data = (wmat @ cols).reshape(bsz, cout, oh, ow)
    if b is not None:
        data = data + b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = _from_op(data, parents, None, "conv2d")

    def backward():
        g = out.grad
        gmat = g.reshape(bsz, cout, oh * ow)
        if w.requires_grad:
            gw = np.einsum("bop,bkp->ok", gmat, cols)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.einsum("ok,bop->bkp", wmat, gmat)
            g6 = gcols.reshape(bsz, cin, kh, kw, oh, ow)
            gxp = np.zeros((bsz, cin, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wid]
            _accum(x, gxp)

    out._backward = backward if out.requires_grad else None
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsample of [B, C, H, W]."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2 expects 4-D input")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out = _from_op(data, (x,), None, "upsample_nearest2")

    def backward():
        bsz, c, h2, w2 = out.grad.shape
        g = out.grad.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        _accum(x, g)

    out._backward = backward if out.requires_grad else None
    return out

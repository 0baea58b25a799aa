"""Small reverse-mode autodiff engine on top of numpy.

Only the primitives the ViT and the adaptation modules need are provided.
Every op records a closure that maps the output gradient to input gradients;
``Tensor.backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
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
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        # iterative DFS; each node is visited exactly once
        order: list[Tensor] = []
        seen: set[int] = set()
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, what: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar. ``scale(x, 1)`` returns the same values bitwise."""
    s_cast = x.data.dtype.type(s)

    def backward(g):
        return (g * s_cast,)

    return _make(x.data * s_cast, (x,), backward, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = ndtr(x.data).astype(x.dtype, copy=False)
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (materialized copy)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), backward, "expand")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the token axis (second to last)."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_rows: shapes {a.shape} and {b.shape} are incompatible")
    n = a.shape[-2]

    def backward(g):
        return g[..., :n, :], g[..., n:, :]

    return _make(np.concatenate([a.data, b.data], axis=-2), (a, b), backward, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-2]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of bounds for shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :], (x,), backward, "slice_rows")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation / attention pieces


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = LN_EPS) -> Tensor:
    """LayerNorm over the last axis. ``gamma``/``beta`` may be None for a parameter-free norm."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm: parameter shape {p.shape} does not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (x, gamma, beta) if p is not None)

    def backward(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "layernorm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch; log-softmax computed internally."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} are incompatible")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()
    n = labels.shape[0]

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# convolution


def _pad_for(k: int) -> int:
    if k == 1:
        return 0
    if k == 3:
        return 1
    raise ShapeError(f"conv2d: unsupported kernel size {k} (expected 1 or 3)")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution: [B, Cin, H, W] x [Cout, Cin, k, k] -> [B, Cout, H, W]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, hh, ww = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {w.shape}")
    pad = _pad_for(k)
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")

    if k == 1:
        cols = x.data.reshape(bsz, cin, hh * ww)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        # cols[b, c*k*k + di*k + dj, i*W + j] = xp[b, c, i+di, j+dj]
        cols = np.empty((bsz, cin, k, k, hh, ww), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[:, :, di:di + hh, dj:dj + ww]
        cols = cols.reshape(bsz, cin * k * k, hh * ww)
    wmat = w.data.reshape(cout, cin * k * k)
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(bsz, cout, hh, ww)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(bsz, cout, hh * ww)
        gw = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = wmat.T @ g2
        if k == 1:
            gx = gcols.reshape(x.shape)
        else:
            gcols = gcols.reshape(bsz, cin, k, k, hh, ww)
            gxp = np.zeros((bsz, cin, hh + 2 * pad, ww + 2 * pad), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + hh, dj:dj + ww] += gcols[:, :, di, dj]
            gx = gxp[:, :, pad:pad + hh, pad:pad + ww]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")

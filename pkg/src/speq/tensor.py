"""Small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the upstream gradient to one gradient per parent. :func:`backward` walks
the graph in reverse topological order and accumulates into ``.grad``.

Training runs in float32; the gradient checks build float64 tensors and the
ops keep whatever dtype they are given.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (teacher paths, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def detach(self) -> "Tensor":
        """Same values, no history: gradients never flow through the result."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; broadcasting is limited to same shape or scalar operands
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar():
    raise ValueError("item() needs a single-element tensor")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every graph participant reachable from ``loss``.

    Gradients accumulate; call ``zero_grad`` on parameters between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._prev:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op}: grad shape {pg.shape} != {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.size == 1:
        return _make(a.data + b.data.reshape(()), (a, b), lambda g: (g, g.sum().reshape(b.shape)), "add")
    if a.size == 1:
        return add(b, a)
    # per-feature bias: (N, F) + (F,)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.shape not in ((), a.shape):
            raise ShapeError(f"mul: constant shape {c.shape} vs {a.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    if a.shape == b.shape:
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if b.size == 1:
        bs = b.data.reshape(())
        return _make(a.data * bs, (a, b), lambda g: (g * bs, (g * a.data).sum().reshape(b.shape)), "mul")
    if a.size == 1:
        return mul(b, a)
    raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def sum_(a: Tensor, axis=None) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def log(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Natural log with inputs clamped at ``eps``; no gradient below the clamp."""
    clamped = np.maximum(a.data, eps)
    return _make(np.log(clamped), (a,), lambda g: (np.where(a.data > eps, g / clamped, 0.0),), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)
    return _make(np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,), "relu6")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather ``x[i, index[i]]`` for a 2-D tensor."""
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _make(x.data[rows, index], (x,), grad_fn, "pick")


# ---------------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T + bias`` with ``w`` stored as (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}")
    parents = (x, w) if bias is None else (x, w, bias)
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _make(out, parents, grad_fn, "linear")


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    # channels-last columns ordered (kh, kw, C) so each copy is a contiguous slice
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(0, 2, 3, 1)
    n, h, w, c = xp.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += d[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``k`` (F,C,kh,kw), zero padding."""
    if stride not in (1, 2):
        raise ValueError(f"conv2d supports stride 1 or 2, got {stride}")
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, kernel {k.shape}")
    f, c, kh, kw = k.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    kmat = k.data.transpose(0, 2, 3, 1).reshape(f, -1)
    n = x.shape[0]
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (gf.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        dx = _col2im(gf @ kmat, x.shape, kh, kw, stride, pad, ho, wo) if x.requires_grad else None
        return dx, dk

    return _make(np.ascontiguousarray(out), (x, k), grad_fn, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        d = d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (d,)

    return _make(out, (x,), grad_fn, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),), "avgpool")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mean_: np.ndarray | None = None,
              var: np.ndarray | None = None, eps: float = 1e-5):
    """Per-channel batch normalization for (N,C) or (N,C,H,W) inputs.

    With ``mean_``/``var`` omitted the batch statistics are used and the
    gradient flows through them. When they are given they are treated as
    constants. Returns ``(out, mean, var)``.
    """
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: {x.shape} with gamma {gamma.shape}")
    batch_stats = mean_ is None
    if batch_stats:
        mean_ = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    mean_ = np.asarray(mean_, dtype=x.dtype)
    var = np.asarray(var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean_.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    m = x.data.size // x.shape[1]

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if batch_stats:
            dx = (inv.reshape(shape) / m) * (
                m * dxhat - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
        else:
            dx = dxhat * inv.reshape(shape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), grad_fn, "batchnorm"), mean_, var


# ---------------------------------------------------------------------------
# softmax family


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ValueError(f"temperature must be > 0, got {t}")


def softmax(z: Tensor, t: float = 1.0) -> Tensor:
    """Softmax of ``z / t`` along the last axis (max-subtracted)."""
    _check_temperature(t)
    z = _as_tensor(z)
    s = z.data / t
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / t,)

    return _make(p, (z,), grad_fn, "softmax")


def log_softmax(z: Tensor, t: float = 1.0) -> Tensor:
    _check_temperature(t)
    z = _as_tensor(z)
    s = z.data / t
    shifted = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def grad_fn(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / t,)

    return _make(out, (z,), grad_fn, "log_softmax")


def softmax_t(z, t: float) -> np.ndarray:
    """Plain-array temperature softmax; ``t = inf`` gives the uniform vector."""
    _check_temperature(t)
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    s = z / t if np.isfinite(t) else np.zeros_like(z)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)

"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive lives in this module. Layers elsewhere are
compositions of these functions; nothing outside this file writes an
adjoint.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

EPS = 1e-8
DEFAULT_DTYPE = np.float32

_grad_enabled = True
_seq = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_branch_log: list[bytes] | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern of every piecewise op evaluated inside the block.

    Two evaluations with equal logs took the same linear piece of every kink.
    """
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _note_branch(mask: np.ndarray):
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask).tobytes())


class Tensor:
    """n-dimensional float array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors can be converted to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return _wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(array: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = array
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t._seq = -1
    t._op = ""
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return _wrap(x)
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = _wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# graph replay


class Graph:
    """Recorded primitives reachable from a root, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Graph:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t._op for t in self.nodes]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls and across repeated uses.
    Returns the replayed graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def push(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        if t._backward is None:
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    if loss._backward is None:
        push(loss, grads.pop(id(loss)))
        return graph
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is not None:
                push(p, pg)
    return graph


# --------------------------------------------------------------------------
# element-wise arithmetic


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; a bare Python or NumPy scalar takes the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, (Tensor, np.ndarray)):
        return a, Tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, (Tensor, np.ndarray)):
        return Tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    """Element-wise quotient; denominators of magnitude below EPS are pushed to +-EPS."""
    a, b = _operands(a, b)
    den = np.where(np.abs(b.data) < EPS, np.where(b.data < 0, -EPS, EPS), b.data).astype(b.data.dtype)
    out = a.data / den

    def bw(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / den, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log of ``max(a, EPS)``."""
    a = as_tensor(a)
    safe = np.maximum(a.data, EPS)
    return _result(np.log(safe), (a,), lambda g: (g / safe,), "log")


# --------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    _note_branch(mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    _note_branch(positive)
    scale = np.where(positive, 1.0, slope).astype(a.data.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("degenerate softmax axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# shape and reduction


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[ax] for ax in axes)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.data.dtype), (a,), bw, "mean")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# convolution and normalization


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    dtype = np.result_type(x.data, weight.data)
    cols = kernels.im2col(x.data.astype(dtype, copy=False), kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1).astype(dtype, copy=False)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1)
        parents.append(bias)
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            gx = kernels.col2im(gcols, x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", g2, cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _result(out, parents, bw, "conv2d")


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W) for ``x`` of shape (N, C, H, W).

    In training mode batch statistics are used and, while the tape is
    recording, the running buffers are updated in place. Otherwise the
    running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    count = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if is_grad_enabled():
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                gx = (inv_std.reshape(shape) / count) * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, gg, gbeta

    return _result(out.astype(np.result_type(x.data, gamma.data), copy=False), (x, gamma, beta), bw, "batch_norm")


# --------------------------------------------------------------------------
# similarity and losses


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along ``axis``, clipped to [-1, 1]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    if u.shape[axis] < 1:
        raise ValueError("cosine_similarity needs vectors of length >= 1")
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    den = np.maximum(nu * nv, EPS)
    dot = (u.data * v.data).sum(axis=axis, keepdims=True)
    cos = dot / den
    out = np.clip(cos, -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis) if g.ndim < u.ndim else g
        live = (nu * nv) >= EPS
        gu = gv = None
        if u.requires_grad:
            gu = g * (v.data / den - np.where(live, cos / np.maximum(nu * nu, EPS), 0.0) * u.data)
        if v.requires_grad:
            gv = g * (u.data / den - np.where(live, cos / np.maximum(nv * nv, EPS), 0.0) * v.data)
        return gu, gv

    return _result(np.squeeze(out, axis=axis), (u, v), bw, "cosine_similarity")


def _upper_clamp(dtype, eps: float) -> float:
    return float(min(1.0 - eps, np.nextafter(np.array(1.0, dtype=dtype), 0)))


def clamp_probability(p, eps: float = EPS) -> Tensor:
    """Clamp into [eps, 1 - eps] (upper bound representable in the dtype); gradient passes straight through."""
    p = as_tensor(p)
    out = np.clip(p.data, eps, _upper_clamp(p.data.dtype, eps))
    return _result(out.astype(p.data.dtype, copy=False), (p,), lambda g: (g,), "clamp")


def binary_cross_entropy(p, target, eps: float = EPS, reduction: str = "mean",
                         positive_only: bool = False) -> Tensor:
    """Pixel-averaged BCE of probabilities ``p`` against a {0,1} ``target``.

    ``p`` is clamped to [eps, 1 - eps] in float64 before the logs. With
    ``positive_only`` only the ``-target * log(p)`` term is kept. With
    ``reduction='none'`` one value per leading index is returned.
    """
    p, target = as_tensor(p), as_tensor(target)
    q = np.clip(p.data.astype(np.float64), eps, 1.0 - eps)
    t = target.data.astype(np.float64)
    if positive_only:
        elem = -t * np.log(q)
        dq = -t / q
    else:
        elem = -(t * np.log(q) + (1 - t) * np.log(1 - q))
        dq = -(t / q) + (1 - t) / (1 - q)
    if reduction == "mean":
        out = np.asarray(elem.mean())
        denom = elem.size
    elif reduction == "none":
        out = elem.reshape(elem.shape[0], -1).mean(axis=1)
        denom = elem[0].size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    dtype = p.data.dtype

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        if reduction == "none":
            g = g.reshape((-1,) + (1,) * (p.ndim - 1))
        return ((g * dq / denom).astype(dtype), None)

    return _result(out.astype(dtype), (p, target), bw, "bce")


def cross_entropy(logits, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy of ``logits`` (N, K) against integer ``labels`` (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError("cross_entropy: one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    target = np.full((n, k), smoothing / k, dtype=np.float64)
    target[np.arange(n), labels] += 1.0 - smoothing
    logp = _log_softmax(logits.data.astype(np.float64), axis=1)
    out = -(target * logp).sum() / n
    dtype = logits.data.dtype

    def bw(g):
        return ((float(g) * (np.exp(logp) - target) / n).astype(dtype),)

    return _result(np.asarray(out, dtype=dtype), (logits,), bw, "cross_entropy")


def mse(pred, target, reduction: str = "mean") -> Tensor:
    """Mean squared error; ``reduction='none'`` averages per leading index."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    if reduction == "mean":
        out = np.asarray((diff * diff).mean())
        denom = diff.size
    elif reduction == "none":
        out = (diff * diff).reshape(diff.shape[0], -1).mean(axis=1)
        denom = diff[0].size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        if reduction == "none":
            g = g.reshape((-1,) + (1,) * (pred.ndim - 1))
        gp = 2.0 * g * diff / denom
        return gp, (-gp if target.requires_grad else None)

    return _result(out.astype(pred.data.dtype), (pred, target), bw, "mse")


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat([reshape(v, (1,)) for v in values], axis=0)

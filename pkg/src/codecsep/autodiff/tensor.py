"""Reverse-mode tensor engine on top of numpy.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the recorded nodes in exact reverse creation order, so a tensor used k times
receives the sum of k contributions before its own closure runs.

Shape conventions used by the models:

* conv ops take ``(batch, channels, time)``;
* ``matmul`` follows numpy rules, a 2-D right operand is shared across batch;
* elementwise binary ops accept numpy broadcasting of size-1 axes only
  (per-channel bias/gain and per-example scalars); gradients are summed back.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._consumed = False

    # -- basic info -------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

        The graph is released afterwards; a second call without a fresh
        forward pass raises :class:`GraphConsumedError`.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if self._consumed:
            raise GraphConsumedError("backward already ran on this graph; run the forward pass again")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor with requires_grad=True")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._consumed:
                raise GraphConsumedError(f"node {t.op} was already back-propagated")
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if not np.all(np.isfinite(pg)):
                        raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def _raise_not_scalar(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        names = [p.name or p.op or "leaf" for p in parents]
        raise NonFiniteError(f"{op} produced non-finite values (inputs: {', '.join(names)})")
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd   # non-finite results are rejected by _make

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def snake(x: Tensor) -> Tensor:
    """x + sin(x)**2, derivative 1 + sin(2x)."""
    xd = x.data
    s = np.sin(xd)
    return _make(xd + s * s, (x,), lambda g: (g * (1.0 + np.sin(2.0 * xd)),), "snake")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def log10(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log10 of a non-positive value")
    return _make(np.log10(xd), (x,), lambda g: (g / (xd * math.log(10.0)),), "log10")


def passthrough_grad(a: Tensor, b: Tensor) -> Tensor:
    """Forward value of ``b``; backward routes the whole gradient to ``a``."""
    if a.shape != b.shape:
        raise ValueError(f"passthrough_grad shape mismatch {a.shape} vs {b.shape}")
    return _make(b.data.copy(), (a,), lambda g: (g,), "passthrough_grad")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.array(x.data[idx]), (x,), backward, "slice")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


# ---------------------------------------------------------------------------
# linear algebra / nn
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        red = tuple(range(xd.ndim - 1))
        ggain = np.sum(g * xhat, axis=red)
        gbias = np.sum(g, axis=red)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (B, Cin, T), weight: (Cout, Cin, K) -> (B, Cout, Tout)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv1d shape mismatch x{x.shape} w{weight.shape}")
    B, cin, T = x.shape
    cout, _, K = weight.shape
    tout = conv_out_len(T, K, stride, padding)
    if tout < 1:
        raise ValueError(f"conv1d input of length {T} too short for kernel {K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, : stride * (tout - 1) + 1 : stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * tout, cin * K)
    w2 = weight.data.reshape(cout, cin * K)
    out = (cols @ w2.T).reshape(B, tout, cout).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * tout, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(B, tout, cin, K)
        gxp = np.zeros((B, cin, xp.shape[2]), dtype=x.dtype)
        span = stride * (tout - 1) + 1
        for k in range(K):
            gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + T] if padding else gxp
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv1d")


def conv_transposed_out_len(length: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def conv1d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d`. x: (B, Cin, T), weight: (Cin, Cout, K) -> (B, Cout, Tout)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"conv1d_transposed shape mismatch x{x.shape} w{weight.shape}")
    B, cin, T = x.shape
    _, cout, K = weight.shape
    full_len = (T - 1) * stride + K + output_padding
    tout = conv_transposed_out_len(T, K, stride, padding, output_padding)
    if tout < 1:
        raise ValueError("conv1d_transposed output would be empty")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 1)).reshape(B * T, cin)
    w2 = weight.data.reshape(cin, cout * K)
    cols = (x2 @ w2).reshape(B, T, cout, K)
    full = np.zeros((B, cout, full_len), dtype=np.result_type(x.dtype, weight.dtype))
    span = stride * (T - 1) + 1
    for k in range(K):
        full[:, :, k : k + span : stride] += cols[:, :, :, k].transpose(0, 2, 1)
    out = full[:, :, padding : padding + tout]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((B, cout, full_len), dtype=g.dtype)
        gfull[:, :, padding : padding + tout] = g
        gcols = np.empty((B, T, cout, K), dtype=g.dtype)
        for k in range(K):
            gcols[:, :, :, k] = gfull[:, :, k : k + span : stride].transpose(0, 2, 1)
        gcols2 = gcols.reshape(B * T, cout * K)
        gx = (gcols2 @ w2.T).reshape(B, T, cin).transpose(0, 2, 1)
        gw = (x2.T @ gcols2).reshape(weight.shape)
        if bias is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "conv1d_transposed")

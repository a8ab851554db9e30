"""Minimal define-by-run reverse-mode automatic differentiation on numpy arrays.

Every operation builds a fresh node that remembers its operands and a closure
propagating the output gradient back to them.  ``Tensor.backward`` walks the
graph in reverse topological order.  Gradients flow to any tensor created with
``requires_grad=True``: network parameters for training and raw inputs for
sample synthesis.

Arrays are float32 by default.  Everything is dtype-preserving, so the same
code runs in float64 when a gradient check needs the extra precision.

A graph can be backpropagated once.  A second ``backward`` through the same
nodes raises ``ContractError``; run the forward pass again instead.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        for node in order:
            if node._consumed:
                raise ContractError("graph was already backpropagated; rerun the forward pass")
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape), dtype=like.dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its operands."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)

    def backward(g):
        _acc(a, g * c_arr)

    return _node(a.data * c_arr, (a,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _acc(x, g * mask)

    return _node(np.maximum(x.data, x.data.dtype.type(0)), (x,), backward, "relu")


def abs_(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    sign = np.sign(x.data)

    def backward(g):
        _acc(x, g * sign)

    return _node(np.abs(x.data), (x,), backward, "abs")


def square(x: Tensor) -> Tensor:
    def backward(g):
        _acc(x, 2 * g * x.data)

    return _node(x.data * x.data, (x,), backward, "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        _acc(x, g * out)

    return _node(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        _acc(x, g / x.data)

    return _node(np.log(x.data), (x,), backward, "log")


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e

    def backward(g):
        _acc(x, g.reshape(x.shape))

    return _node(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        _acc(x, g.T)

    return _node(np.ascontiguousarray(x.data.T), (x,), backward, "transpose")


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.shape))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference ``x[k+1] - x[k]`` along ``axis``."""
    n = x.shape[axis]
    hi = [slice(None)] * x.data.ndim
    lo = [slice(None)] * x.data.ndim
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    hi, lo = tuple(hi), tuple(lo)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[hi] += g
        dx[lo] -= g
        _acc(x, dx)

    return _node(x.data[hi] - x.data[lo], (x,), backward, "diff")


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (dense rows or conv channels)."""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    red = tuple(i for i in range(x.data.ndim) if i != 1)

    def backward(g):
        _acc(x, g)
        if bias.requires_grad:
            _acc(bias, g.sum(axis=red, dtype=np.float64))

    return _node(x.data + bias.data.reshape(view), (x, bias), backward, "add_bias")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation, stride 1: (B,C,H,W) * (F,C,kh,kw) -> (B,F,H-kh+1,W-kw+1)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({F},)")
    Ho, Wo = H - kh + 1, W - kw + 1
    P, K = Ho * Wo, C * kh * kw

    # per-sample column blocks (B, C*kh*kw, Ho*Wo) keep the output in NCHW order
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, K, P)
    kmat = kernel.data.reshape(F, K)
    out = np.matmul(kmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, F, Ho, Wo)

    def backward(g):
        gm = g.reshape(B, F, P)
        if kernel.requires_grad:
            dk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            _acc(kernel, dk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _acc(bias, gm.sum(axis=(0, 2), dtype=np.float64))
        if x.requires_grad:
            dcols = np.matmul(kmat.T, gm).reshape(B, C, kh, kw, Ho, Wo)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + Ho, j : j + Wo] += dcols[:, :, i, j]
            _acc(x, dx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"maxpool2d: spatial dims {H}x{W} not divisible by {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]  # row-major scan
    views = [x.data[:, :, i::size, j::size] for i, j in offsets]
    out = views[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for k, v in enumerate(views[1:], start=1):
        better = v > out  # strict, so ties keep the earlier position
        np.copyto(out, v, where=better)
        idx[better] = k

    def backward(g):
        dx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            dx[:, :, i::size, j::size] = g * (idx == k)
        _acc(x, dx)

    return _node(out, (x,), backward, "maxpool2d")


# ---------------------------------------------------------------------------
# fused numerics for the losses


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, max-shifted for stability."""
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64)).astype(z.dtype)
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        _acc(z, g - probs * g.sum(axis=-1, keepdims=True))

    return _node(out, (z,), backward, "log_softmax")


def pairwise_sqdist(z: Tensor) -> Tensor:
    """(B,D) -> (B,B) matrix of squared Euclidean distances between rows."""
    if z.data.ndim != 2:
        raise DimensionError(f"pairwise_sqdist expects a matrix, got {z.shape}")
    delta = z.data[:, None, :] - z.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", delta, delta)

    def backward(g):
        sym = g + g.T
        _acc(z, 2 * (sym.sum(axis=1, keepdims=True) * z.data - sym @ z.data))

    return _node(out, (z,), backward, "pairwise_sqdist")


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    h: float = 1e-3,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences of ``f``.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor.  The error is
    ``max_i |analytic_i - central_i| / (|central_i| + 1e-8)`` over the flat
    coordinates in ``indices`` (all of them by default).  Precision follows
    ``point``'s dtype, so pass float64 for tight tolerances.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point)
    if not np.issubdtype(base.dtype, np.floating):
        base = base.astype(np.float64)
    x = Tensor(base, requires_grad=True, dtype=base.dtype)
    f(x).backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = float(f(Tensor(base, dtype=base.dtype)).data)
        flat[i] = orig - h
        with no_grad():
            fm = float(f(Tensor(base, dtype=base.dtype)).data)
        flat[i] = orig
        central = (fp - fm) / (2 * h)
        err = abs(float(analytic[i]) - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst

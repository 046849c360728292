"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. :func:`backward`
orders the recorded graph topologically and runs those closures in reverse.
Only the operations the acoustic model needs are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = ()):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    for p in parents:
        if p.requires_grad:
            out = Tensor(data, requires_grad=True, _parents=tuple(parents))
            out._backward = backward
            return out
    return Tensor(data)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo the row-vector broadcasts used by add/mul
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_sum_to_shape(g, a.shape))
        if b.requires_grad:
            b._accum(_sum_to_shape(g, b.shape))

    return _result(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_sum_to_shape(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_sum_to_shape(g * a.data, b.shape))

    return _result(out_data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accum(g * c)

    return _result(a.data * c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(2.0 * g * a.data)

    return _result(a.data * a.data, (a,), bw)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape

    def bw(g):
        a._accum(np.broadcast_to(g, shape))

    return _result(np.asarray(a.data.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def bw(g):
        a._accum(np.broadcast_to(g / n, shape))

    return _result(np.asarray(a.data.sum() / n), (a,), bw)


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.dims} and {b.dims}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.dims} @ {b.dims}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g.T)

    return _result(a.data.T, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        a._accum(full)

    return _result(a.data[:, start:stop], (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accum(g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather ``x[index]``; the gradient scatter-adds back onto source rows."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accum(full)

    return _result(x.data[index], (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    z = x.data - x.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=1, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an elementwise affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[1]
    xc = x.data - x.data.sum(axis=1, keepdims=True) / d
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=1, keepdims=True) / d + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accum(inv * (gx - gx.sum(axis=1, keepdims=True) / d
                            - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d))

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bw)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 'same' convolution along time.

    ``x`` is ``[T, c_in]``, ``kernel`` is ``[k, c_in, c_out]`` with odd ``k``.
    Output row ``t`` sums ``x[t + j - k//2] @ kernel[j]`` over ``j``.
    """
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d_same needs an odd kernel size, got {k}")
    T = x.shape[0]
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d_same channel mismatch: input {x.dims}, kernel {kernel.dims}")
    pad = k // 2
    xp = np.zeros((T + 2 * pad, c_in))
    xp[pad:pad + T] = x.data
    cols = np.concatenate([xp[j:j + T] for j in range(k)], axis=1)  # [T, k*c_in]
    w = kernel.data.reshape(k * c_in, c_out)
    out = cols @ w + bias.data

    def bw(g):
        if kernel.requires_grad:
            kernel._accum((cols.T @ g).reshape(k, c_in, c_out))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gcols = g @ w.T
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + T] += gcols[:, j * c_in:(j + 1) * c_in]
            x._accum(gxp[pad:pad + T])

    return _result(out, (x, kernel, bias), bw)


def embedding_lookup(table: Tensor, ids: Iterable[int]) -> Tensor:
    ids = np.asarray(list(ids), dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    return gather_rows(table, ids)


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.dims} vs {target.dims}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        if pred.requires_grad:
            pred._accum(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accum(-g * 2.0 * diff / n)

    return _result(np.asarray((diff * diff).sum() / n), (pred, target), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, each after all its inputs."""
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf feeding ``loss``.

    Leaf gradients accumulate across calls; intermediate buffers are released
    as soon as they have been propagated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None
        node._backward(g)

"""
Dense float64 tensors with an explicit reverse-mode tape.

A `Tape` is created per forward pass. Leaves are registered with
`tape.watch(...)`; every op whose inputs live on a tape records a node with
its parents and a vector-Jacobian closure. `backward(tape, root)` walks the
tape once, from the root down, and returns a gradient map keyed by node id.

Usage example:
  tape = Tape()
  w = tape.watch(np.array([[3.0]]))
  x = Tensor(np.array([[2.0]]))
  loss = sum_(matmul(x, w))
  grads = backward(tape, loss)
  grads.of(w)   # -> array([[2.]])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DomainError, LabelError, ShapeError, TapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


# -----------------------------
# Tape
# -----------------------------
@dataclass
class Node:
    """One recorded operation.

    Attributes:
        parents: node ids of the differentiable inputs (None for constants).
        vjp: maps the output gradient to one gradient per parent; None for leaves.
        shape: shape of the produced value.
    """

    parents: Tuple[Optional[int], ...]
    vjp: Optional[Vjp]
    shape: Tuple[int, ...]


class Tape:
    """Append-only record of operations; ids are topologically ordered."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, parents: Tuple[Optional[int], ...], vjp: Optional[Vjp], shape: Tuple[int, ...]) -> int:
        self.nodes.append(Node(parents=parents, vjp=vjp, shape=tuple(shape)))
        return len(self.nodes) - 1

    def watch(self, value: ArrayLike) -> "Tensor":
        """Register `value` as a leaf and return the tracked tensor."""
        data = value.data if isinstance(value, Tensor) else _as_array(value)
        node = self.record((), None, data.shape)
        return Tensor(data, node=node, tape=self)


class Gradients(dict):
    """node id -> Tensor; nodes the root does not depend on map to zeros."""

    def __init__(self, tape: Tape, values: Dict[int, np.ndarray]):
        super().__init__({k: Tensor(v) for k, v in values.items()})
        self._tape = tape

    def __missing__(self, node: int) -> "Tensor":
        if not 0 <= node < len(self._tape.nodes):
            raise TapeError(f"node {node} is not on this tape")
        return Tensor(np.zeros(self._tape.nodes[node].shape))

    def of(self, tensor: "Tensor") -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node is None:
            raise TapeError("tensor is not on the tape these gradients came from")
        return self[tensor.node].data


# -----------------------------
# Tensor
# -----------------------------
class Tensor:
    """Immutable float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, node: Optional[int] = None, tape: Optional[Tape] = None):
        array = _as_array(data)
        array.flags.writeable = False
        self.data = array
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        suffix = f", node={self.node}" if self.node is not None else ""
        return f"Tensor({self.data!r}{suffix})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)


def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.array(value, dtype=np.float64)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(value: ArrayLike) -> Tensor:
    """Same values, no tape."""
    return Tensor(as_tensor(value).data)


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape: Optional[Tape] = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands are recorded on different tapes")
    return tape


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node if t.tape is tape else None for t in inputs)
    node = tape.record(parents, vjp, data.shape)
    return Tensor(data, node=node, tape=tape)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -----------------------------
# Elementwise binary ops
# -----------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), vjp)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


# -----------------------------
# Elementwise unary ops
# -----------------------------
def relu(a: ArrayLike) -> Tensor:
    """max(0, a); the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,))


def sign(a: ArrayLike) -> Tensor:
    """sign with sign(0) = 0; zero gradient everywhere."""
    a = as_tensor(a)
    return _result(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        bad = a.data[~(a.data > 0)].reshape(-1)[0]
        raise DomainError(f"log of non-positive value {bad}")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a: ArrayLike, lo: Optional[ArrayLike] = None, hi: Optional[ArrayLike] = None) -> Tensor:
    """Clip into [lo, hi]; bounds are constants. Gradient passes where lo <= a <= hi."""
    a = as_tensor(a)
    lo_arr = None if lo is None else _as_array(lo)
    hi_arr = None if hi is None else _as_array(hi)
    out = np.clip(a.data, lo_arr, hi_arr)
    mask = np.ones(a.shape, dtype=bool)
    if lo_arr is not None:
        mask &= a.data >= lo_arr
    if hi_arr is not None:
        mask &= a.data <= hi_arr
    return _result(out, (a,), lambda g: (g * mask,))


# -----------------------------
# Reductions and shape ops
# -----------------------------
def _normalize_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis=axes, keepdims=keepdims) / float(count)


def max_(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        if keepdims:
            out = np.reshape(out, (1,) * a.ndim)

        def vjp_all(g):
            grad = np.zeros(flat.shape)
            grad[idx] = np.reshape(g, -1)[0]
            return (grad.reshape(a.shape),)

        return _result(np.asarray(out, dtype=np.float64), (a,), vjp_all)

    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _result(out, (a,), vjp)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


# -----------------------------
# Linear algebra
# -----------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), vjp)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, Ho, Wo, kh, kw) strided view."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with filters w (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and filters {w.shape} are not compatible")
    _, _, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                    gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]]
        return grad_x, grad_w

    return _result(np.ascontiguousarray(out), (x, w), vjp)


# -----------------------------
# Loss
# -----------------------------
def one_hot(labels: Iterable[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes - 1}]: {labels.tolist()}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits: ArrayLike, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy via log-sum-exp with max subtraction.

    logits: (N, k) or (k,); labels: (N,) ints or a single int.
    reduction: "mean", "sum" or "none" (per-sample vector).
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, k) logits, got {logits.shape}")
    n, k = logits.shape
    target = one_hot(labels, k)
    if target.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {target.shape[0]} labels")

    z = logits.data
    shift = z.max(axis=1, keepdims=True)
    e = np.exp(z - shift)
    total = e.sum(axis=1, keepdims=True)
    per_sample = (np.log(total) + shift - (z * target).sum(axis=1, keepdims=True)).reshape(-1)
    probs = e / total

    if reduction == "none":
        out = per_sample
        scale = None
    elif reduction == "sum":
        out = np.asarray(per_sample.sum())
        scale = 1.0
    elif reduction == "mean":
        out = np.asarray(per_sample.mean())
        scale = 1.0 / n
    else:
        raise ConfigError(f"unknown reduction '{reduction}'", field="reduction")

    def vjp(g):
        if scale is None:
            weights = g.reshape(-1, 1)
        else:
            weights = np.full((n, 1), float(g) * scale)
        return ((probs - target) * weights,)

    return _result(out, (logits,), vjp)


# -----------------------------
# Backward pass
# -----------------------------
def backward(tape: Tape, root: Tensor) -> Gradients:
    """Gradient of scalar `root` w.r.t. every node of `tape`."""
    if root.tape is not tape or root.node is None:
        raise TapeError("root is not on the tape")
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
    for nid in range(root.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            grads[pid] = grads[pid] + pg if pid in grads else pg
    return Gradients(tape, grads)

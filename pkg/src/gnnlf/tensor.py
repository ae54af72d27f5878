"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is written with the same differentiable operations it
differentiates, so a gradient can itself be differentiated by passing
``create_graph=True``.  Force-matching training needs this: forces are the
gradient of the energy and the loss on them is differentiated again with
respect to the parameters.

The computation graph is implicit: each result keeps references to its
inputs.  Nodes carry a creation counter, so sorting reachable nodes by that
counter gives a topological order (inputs are always created before the
outputs that consume them).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "SegmentIndex",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "grad",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "absolute",
    "sigmoid",
    "silu",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "take",
    "segment_sum",
    "concat",
    "narrow",
    "pad",
]

_ids = itertools.count()
_local = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the floating dtype for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _local.enabled = enabled
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """An immutable n-dimensional array that can take part in a graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_default_dtype if not _is_float(data) else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors can be converted to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        out._id = next(_ids)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def backward(self, grad_output=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        tape = Tape(self)
        grads = tape.gradients(grad_output)
        for node in tape.nodes:
            if node.is_leaf and node._id in grads:
                g = grads[node._id].data
                node.grad = g.copy() if node.grad is None else node.grad + g


def _is_float(data) -> bool:
    return isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# graph traversal


class Tape:
    """Recorded operations reachable from one output, in topological order.

    ``nodes`` lists every graph node that requires a gradient, ordered so
    that each node comes after all of its inputs.
    """

    def __init__(self, output: Tensor):
        if not isinstance(output, Tensor):
            raise TypeError("output must be a Tensor")
        self.output = output
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            for p in node._parents:
                if p._id >= node._id:
                    raise RuntimeError("tape cycle: an input was created after its output")
                stack.append(p)
        self.nodes: list[Tensor] = [seen[k] for k in sorted(seen)]

    def gradients(self, grad_output=None, create_graph: bool = False, inputs=None) -> dict[int, Tensor]:
        """Return a map node-id -> gradient of the output w.r.t. that node.

        When ``inputs`` is given, only nodes that depend on one of them are
        visited.
        """
        out = self.output
        if grad_output is None:
            if out.data.size != 1:
                raise ValueError("backward needs a scalar output or an explicit grad_output")
            grad_output = Tensor(np.ones_like(out.data))
        grad_output = as_tensor(grad_output)
        if grad_output.shape != out.shape:
            raise ValueError(f"grad_output shape {grad_output.shape} != output shape {out.shape}")
        if inputs is None:
            relevant = {n._id for n in self.nodes}
        else:
            relevant = {x._id for x in inputs}
            for node in self.nodes:
                if any(p._id in relevant for p in node._parents):
                    relevant.add(node._id)
        grads: dict[int, Tensor] = {out._id: grad_output}
        with _grad_mode(create_graph):
            for node in reversed(self.nodes):
                g = grads.get(node._id)
                if g is None or node._backward is None or node._id not in relevant:
                    continue
                needs = tuple(p.requires_grad and p._id in relevant for p in node._parents)
                parent_grads = node._backward(g, node, needs)
                for parent, pg, need in zip(node._parents, parent_grads, needs):
                    if pg is None or not need:
                        continue
                    prev = grads.get(parent._id)
                    grads[parent._id] = pg if prev is None else add(prev, pg)
        return grads


def grad(
    output: Tensor,
    inputs: Sequence[Tensor] | Tensor,
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs that do not influence the output get a zero gradient.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    grads = Tape(output).gradients(grad_output, create_graph=create_graph, inputs=inputs)
    result = []
    for x in inputs:
        g = grads.get(x._id)
        result.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return result[0] if single else result


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, eps: float = 1e-12) -> float:
    """Max relative error between the analytic gradient and central differences.

    The error for each coordinate is ``|analytic - numeric| / (|analytic| + eps)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError("f must be scalar-valued")
    analytic = grad(y, xt).data.reshape(-1)
    numeric = np.empty_like(analytic)
    flat = x0.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[k] += h
            xm[k] -= h
            fp = float(f(Tensor(xp.reshape(x0.shape))).data.reshape(-1)[0])
            fm = float(f(Tensor(xm.reshape(x0.shape))).data.reshape(-1)[0])
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"f is not finite at perturbed coordinate {k}")
            numeric[k] = (fp - fm) / (2 * h)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + eps)))


# ----------------------------------------------------------------------
# elementwise operations

_FP = dict(over="raise", invalid="raise", divide="raise", under="ignore")


def _binary_shapes(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return shape


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    with np.errstate(**_FP):
        data = a.data + b.data

    def backward(g, out, needs):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return Tensor._result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    with np.errstate(**_FP):
        data = a.data - b.data

    def backward(g, out, needs):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return Tensor._result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    with np.errstate(**_FP):
        data = a.data * b.data

    def backward(g, out, needs):
        ga = sum_to(mul(g, b), a.shape) if needs[0] else None
        gb = sum_to(mul(g, a), b.shape) if needs[1] else None
        return ga, gb

    return Tensor._result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero")
    with np.errstate(**_FP):
        data = a.data / b.data

    def backward(g, out, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return Tensor._result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, out, needs):
        return (neg(g),)

    return Tensor._result(-a.data, (a,), backward)


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    with np.errstate(**_FP):
        data = a.data**p

    def backward(g, out, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return Tensor._result(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(**_FP):
        data = np.exp(a.data)

    def backward(g, out, needs):
        return (mul(g, out),)

    return Tensor._result(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    data = np.log(a.data)

    def backward(g, out, needs):
        return (div(g, a),)

    return Tensor._result(data, (a,), backward)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, out, needs):
        return (mul(g, cos(a)),)

    return Tensor._result(np.sin(a.data), (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, out, needs):
        return (neg(mul(g, sin(a))),)

    return Tensor._result(np.cos(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt of a negative value")
    data = np.sqrt(a.data)

    def backward(g, out, needs):
        return (div(mul(g, 0.5), out),)

    return Tensor._result(data, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))

    def backward(g, out, needs):
        return (mul(g, sign),)

    return Tensor._result(np.abs(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g, out, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    return Tensor._result(data, (a,), backward)


def silu(a) -> Tensor:
    """SiLU activation ``x * sigmoid(x)``."""
    a = as_tensor(a)
    s = sigmoid(a.detach()).data
    data = a.data * s

    def backward(g, out, needs):
        sa = sigmoid(a)
        # d/dx x*s(x) = s * (1 + x * (1 - s))
        return (mul(g, mul(sa, add(1.0, mul(a, sub(1.0, sa))))),)

    return Tensor._result(data, (a,), backward)


# ----------------------------------------------------------------------
# shape and reduction operations


def sum_to(a, shape: tuple[int, ...]) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + k for k, n in enumerate(shape) if n == 1 and a.shape[lead + k] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)

    def backward(g, out, needs):
        return (broadcast_to(g, a.shape),)

    return Tensor._result(data, (a,), backward)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g, out, needs):
        return (sum_to(g, a.shape),)

    return Tensor._result(data, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, out, needs):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if k in axes else n for k, n in enumerate(a.shape))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return Tensor._result(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ZeroDivisionError("mean over an empty axis")
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g, out, needs):
        return (reshape(g, a.shape),)

    return Tensor._result(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g, out, needs):
        return (transpose(g, inverse),)

    return Tensor._result(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    with np.errstate(**_FP):
        data = a.data @ b.data

    def backward(g, out, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return ga, gb

    return Tensor._result(data, (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, out, needs):
        return tuple(narrow(g, ax, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor._result(data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``a`` to ``[start, stop)`` along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    data = a.data[tuple(index)]

    def backward(g, out, needs):
        return (pad(g, ax, start, a.shape[ax]),)

    return Tensor._result(data, (a,), backward)


def pad(a, axis: int, start: int, total: int) -> Tensor:
    """Embed ``a`` at offset ``start`` in a zero tensor of length ``total`` along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    shape = list(a.shape)
    shape[ax] = total
    data = np.zeros(shape, dtype=a.data.dtype)
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, start + a.shape[ax])
    data[tuple(index)] = a.data

    def backward(g, out, needs):
        return (narrow(g, ax, start, start + a.shape[ax]),)

    return Tensor._result(data, (a,), backward)


# ----------------------------------------------------------------------
# gather / scatter


class SegmentIndex:
    """Row-to-segment assignment with a cached summation matrix.

    Sums run in ascending row order within each segment, so results are
    reproducible bit for bit regardless of how the ids are laid out.
    """

    __slots__ = ("ids", "n_segments", "_matrix")

    def __init__(self, ids, n_segments: int):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        n_segments = int(n_segments)
        if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
            raise IndexError(f"segment id out of range [0, {n_segments})")
        ids.flags.writeable = False
        self.ids = ids
        self.n_segments = n_segments
        self._matrix = None

    def __len__(self) -> int:
        return self.ids.size

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            n = self.ids.size
            self._matrix = sp.csr_matrix(
                (np.ones(n), (self.ids, np.arange(n))), shape=(self.n_segments, n)
            )
            self._matrix.sort_indices()
        return self._matrix


def _as_segments(ids, n_segments) -> SegmentIndex:
    if isinstance(ids, SegmentIndex):
        if n_segments is not None and int(n_segments) != ids.n_segments:
            raise ValueError("n_segments disagrees with SegmentIndex")
        return ids
    ids = np.asarray(ids, dtype=np.int64)
    if n_segments is None:
        n_segments = int(ids.max()) + 1 if ids.size else 0
    return SegmentIndex(ids, n_segments)


def segment_sum(a, segment_ids, n_segments: int | None = None) -> Tensor:
    """Sum the rows of ``a`` that share a segment id; empty segments are zero."""
    a = as_tensor(a)
    seg = _as_segments(segment_ids, n_segments)
    if a.shape[0] != len(seg):
        raise ValueError(f"segment_ids length {len(seg)} != leading dimension {a.shape[0]}")
    tail = a.shape[1:]
    if a.data.size == 0:
        data = np.zeros((seg.n_segments,) + tail, dtype=a.data.dtype)
    else:
        flat = a.data.reshape(a.shape[0], -1)
        data = np.asarray(seg.matrix @ flat).reshape((seg.n_segments,) + tail)

    def backward(g, out, needs):
        return (take(g, seg),)

    return Tensor._result(data, (a,), backward)


def take(a, index) -> Tensor:
    """Gather rows ``a[index]`` along the leading axis."""
    a = as_tensor(a)
    if isinstance(index, SegmentIndex):
        seg = index
        if seg.n_segments != a.shape[0]:
            raise IndexError("gather index built for a different row count")
    else:
        seg = SegmentIndex(index, a.shape[0])
    data = a.data[seg.ids]

    def backward(g, out, needs):
        return (segment_sum(g, seg),)

    return Tensor._result(data, (a,), backward)

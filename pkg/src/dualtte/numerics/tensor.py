"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its result with numpy and, when at least one input
is tracked and a :class:`Tape` is active on the current thread, appends a node
holding the inputs and a vector-Jacobian product.  Node order on the tape is
execution order, which is a topological order of the computation, so the
backward sweep is a single reversed pass.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _SliceGrad:
    """Gradient that is zero except on ``full[idx]``; avoids dense zero-fills."""

    __slots__ = ("shape", "idx", "g")

    def __init__(self, shape, idx, g):
        self.shape, self.idx, self.g = shape, idx, g

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.idx] = self.g
        return full


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes are thread-local so separate threads can
    differentiate separate computations over shared read-only parameters.
    Leaving the context drops the recorded nodes, so gradients must be taken
    inside it; this also breaks the tensor/tape reference cycle at once.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.closed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.nodes = []
        self.closed = True

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Return d(loss)/d(w) for each tensor in ``wrt`` (zeros if unused).

        The tape itself is not modified, so replaying it gives identical
        results.
        """
        if self.closed:
            raise RuntimeError("tape is closed; take gradients inside the 'with Tape()' block")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # buffers allocated here, safe to update in place
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            if g is None:
                continue
            owned.discard(key)
            if isinstance(g, _SliceGrad):
                g = g.dense()
            parts = node.vjp(g)
            for inp, gi in zip(node.inputs, parts):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = gi
                    continue
                if isinstance(prev, _SliceGrad):
                    prev = prev.dense()
                    grads[key] = prev
                elif key not in owned:
                    prev = np.array(prev, dtype=np.float64)
                    grads[key] = prev
                owned.add(key)
                if isinstance(gi, _SliceGrad):
                    prev[gi.idx] += gi.g
                else:
                    prev += gi
        out = []
        for w in wrt:
            g = grads.get(id(w))
            if isinstance(g, _SliceGrad):
                g = g.dense()
            out.append(np.zeros_like(w.data) if g is None else np.array(g, dtype=np.float64).reshape(w.shape))
        return out


class Tensor:
    """A float64 array that may participate in differentiation.

    Leaves created with ``requires_grad=True`` are parameters; results of
    primitives recorded on a tape carry a reference to that tape.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad or t._tape is not None:
                out._tape = tape
                tape.nodes.append(_Node(out, inputs, vjp))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(op: str, fn, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        return fn(A, B)
    except ValueError:
        raise ShapeError(f"{op}: shapes {A.shape} and {B.shape} do not broadcast") from None


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = _binary("add", np.add, a.data, b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = _binary("sub", np.subtract, a.data, b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = _binary("mul", np.multiply, A, B)

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.tracked else None,
            _unbroadcast(g * A, B.shape) if b.tracked else None,
        )

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = _binary("div", np.divide, A, B)

    def vjp(g):
        return (
            _unbroadcast(g / B, A.shape) if a.tracked else None,
            _unbroadcast(-g * out / B, B.shape) if b.tracked else None,
        )

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


# elementwise unary ----------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting.

    Two layouts get a fast path: stacked rows times a weight
    matrix (``(..., n, k) @ (k, m)``) and a square operator mixing the row
    axis of a stack (``(n, m) @ (..., m, d)``), which is how graph
    propagation is applied to ``T x N x d`` blocks.
    """
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {A.shape} @ {B.shape}")

    if B.ndim == 2:
        k, m = B.shape
        A2 = A.reshape(-1, k)
        out = (A2 @ B).reshape(A.shape[:-1] + (m,))

        def vjp(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ B.T).reshape(A.shape) if a.tracked else None
            gb = A2.T @ g2 if b.tracked else None
            return ga, gb

        return _record(out, (a, b), vjp)

    if A.ndim == 2:
        n, m = A.shape
        out = np.matmul(A, B)

        def vjp(g):
            ga = gb = None
            if a.tracked:
                gm = np.moveaxis(g, -2, 0).reshape(n, -1)
                ga = gm @ np.moveaxis(B, -2, 0).reshape(m, -1).T
            if b.tracked:
                gb = np.matmul(A.T, g)
            return ga, gb

        return _record(out, (a, b), vjp)

    try:
        out = np.matmul(A, B)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {A.shape} and {B.shape} do not broadcast") from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.tracked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.tracked else None
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs >=2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),))


# structural -----------------------------------------------------------------

def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, ts, vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack of an empty sequence")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: unequal shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _record(out, ts, vjp)


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = a.data[idx]
    shape = a.shape
    fancy = _has_array_index(idx)

    def vjp(g):
        if not fancy:
            return (_SliceGrad(shape, idx, g),)
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.asarray(out, dtype=np.float64), (a,), vjp)


def gather_rows(a, index) -> Tensor:
    """Rows of ``a`` (axis 0) selected by an integer array."""
    index = np.asarray(index, dtype=np.int64)
    a = as_tensor(a)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape[0]} rows")
    return getitem(a, index)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(count))


# temporal convolution -------------------------------------------------------

def conv1d_prepad(x, kernel, bias, time_axis: int = -2) -> Tensor:
    """Causal 1-D convolution with ``k - 1`` leading zero steps.

    ``x`` has channels last and time on ``time_axis`` (default ``(..., T,
    d_in)``), ``kernel`` is ``(k, d_in, d_out)`` and ``bias`` ``(d_out,)``.
    Kernel tap ``k - 1`` multiplies the current step, tap ``0`` the step
    ``k - 1`` slots earlier, so output step t only sees input steps <= t.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    X, K, b = x.data, kernel.data, bias.data
    if K.ndim != 3 or K.shape[0] < 1:
        raise ShapeError(f"kernel must be (k>=1, d_in, d_out), got {K.shape}")
    if X.ndim < 2 or X.shape[-1] != K.shape[1]:
        raise ShapeError(f"conv1d_prepad: input {X.shape} does not match kernel {K.shape}")
    if b.shape != (K.shape[2],):
        raise ShapeError(f"bias shape {b.shape} does not match kernel output width {K.shape[2]}")
    ax = time_axis % X.ndim
    if ax == X.ndim - 1:
        raise ShapeError("time axis cannot be the channel axis")
    k, d_in, d_out = K.shape
    T = X.shape[ax]
    # (pre, T, post, d_in) view of the input
    pre = int(np.prod(X.shape[:ax], dtype=np.int64))
    post = int(np.prod(X.shape[ax + 1:-1], dtype=np.int64))
    Xp = np.zeros((pre, T + k - 1, post, d_in))
    Xp[:, k - 1:] = X.reshape(pre, T, post, d_in)
    # im2col: every output step sees its k input steps side by side
    cols = np.concatenate([Xp[:, j:j + T] for j in range(k)], axis=-1).reshape(-1, k * d_in)
    K2 = K.reshape(k * d_in, d_out)
    out = cols @ K2
    out += b
    out_shape = X.shape[:-1] + (d_out,)

    def vjp(g):
        g2 = g.reshape(-1, d_out)
        gx = gk = gb = None
        if x.tracked:
            gc = (g2 @ K2.T).reshape(pre, T, post, k, d_in)
            gxp = np.zeros_like(Xp)
            for j in range(k):
                gxp[:, j:j + T] += gc[..., j, :]
            gx = gxp[:, k - 1:].reshape(X.shape)
        if kernel.tracked:
            gk = (cols.T @ g2).reshape(k, d_in, d_out)
        if bias.tracked:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _record(out.reshape(out_shape), (x, kernel, bias), vjp)


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to named parameters.

    Parameters that did not take part in the computation get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    names = list(params)
    tensors = [params[n] for n in names]
    if loss._tape is None:
        return {n: (np.ones_like(t.data) if t is loss else np.zeros_like(t.data)) for n, t in zip(names, tensors)}
    values = loss._tape.backward(loss, tensors)
    return dict(zip(names, values))

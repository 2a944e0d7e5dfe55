"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records a node on the active :class:`Tape` when any of
its inputs requires a gradient.  ``backward`` replays the tape in reverse
creation order, which is a valid topological order because a node can only be
recorded after all of its inputs exist.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import AxisError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __neg__(self):
        return hadamard(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes = []


_state = {"tape": Tape(), "enabled": True}


def active_tape() -> Tape:
    return _state["tape"]


@contextlib.contextmanager
def tape_scope(tape: Tape | None = None):
    """Record onto a fresh (or given) tape for the duration of the block."""
    prev = _state["tape"]
    _state["tape"] = tape if tape is not None else Tape()
    try:
        yield _state["tape"]
    finally:
        _state["tape"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["enabled"]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if _state["enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _state["tape"].record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise AxisError(f"{op}: axis {axis} invalid for {ndim}-d input")
    return int(axis) % ndim


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(a.data - b.data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("hadamard", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(a.data @ b.data, (a, b), backward)


# -- structural ---------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ax = _check_axis(axis, tensors[0].ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _finish(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    ax = _check_axis(axis, x.ndim, "slice")
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis of length {n}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _finish(x.data[index], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(_check_axis(a, x.ndim, "transpose") for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise AxisError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _finish(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def pad_left(x: Tensor, axis: int, k: int) -> Tensor:
    """Prepend ``k`` zeros along ``axis``."""
    x = as_tensor(x)
    ax = _check_axis(axis, x.ndim, "pad_left")
    if k < 0:
        raise ShapeError(f"pad_left: negative pad {k}")
    widths = [(0, 0)] * x.ndim
    widths[ax] = (k, 0)

    def backward(g):
        return (slice_view(g, ax, k, g.shape[ax]),)

    return _finish(np.pad(x.data, widths), (x,), backward)


def slice_view(arr: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    index = [slice(None)] * arr.ndim
    index[axis] = slice(start, stop)
    return arr[tuple(index)]


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (tuple, list)):
        return tuple(_check_axis(a, ndim, op) for a in axis)
    return (_check_axis(axis, ndim, op),)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim, "sum")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim, "mean")
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _finish(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


# -- elementwise unary --------------------------------------------------------

def _unary(x, out, dfn):
    x = as_tensor(x)

    def backward(g):
        return (g * dfn(x.data, out),)

    return _finish(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda d, o: (d > 0).astype(DTYPE))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    if slope < 0:
        raise ValueError(f"leaky_relu: slope must be non-negative, got {slope}")
    out = np.where(x.data > 0, x.data, slope * x.data)
    return _unary(x, out, lambda d, o: np.where(d > 0, 1.0, slope))


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg)
    return _unary(x, out, lambda d, o: np.where(d > 0, 1.0, o + 1.0))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary(x, out, lambda d, o: o * (1.0 - o))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.tanh(x.data), lambda d, o: 1.0 - o * o)


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda d, o: np.sign(d))


def softmax(x: Tensor, axis: int = -1, weights: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    With ``weights`` (non-negative, broadcastable to ``x``) the result is
    ``w * exp(x) / sum(w * exp(x))``: entries with zero weight are masked out
    and contribute exactly 0.  Every slice must keep at least one positive
    weight.
    """
    x = as_tensor(x)
    ax = _check_axis(axis, x.ndim, "softmax")
    d = x.data
    if weights is None:
        shifted = d - d.max(axis=ax, keepdims=True)
        ex = np.exp(shifted)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=DTYPE), d.shape)
        live = w > 0
        if not live.any(axis=ax).all():
            raise ShapeError("softmax: a slice has no positive weight")
        m = np.where(live, d, -np.inf).max(axis=ax, keepdims=True)
        ex = np.where(live, np.exp(np.where(live, d - m, 0.0)), 0.0) * w
    out = ex / ex.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _finish(out, (x,), backward)


# -- temporal convolution -----------------------------------------------------

def conv_time(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution along the time axis.

    ``x`` is ``[..., C_in, T, S]``, ``kernel`` ``[C_out, C_in, k]`` and ``bias``
    ``[C_out]``; the result is ``[..., C_out, T-k+1, S]``.  Each column ``S`` is
    convolved independently.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 3 or kernel.ndim != 3:
        raise ShapeError(f"conv_time: input {x.shape} / kernel {kernel.shape} have wrong rank")
    c_out, c_in, k = kernel.shape
    *lead, xc, t, s = x.shape
    if xc != c_in:
        raise ShapeError(f"conv_time: input channels {x.shape} do not match kernel {kernel.shape}")
    if t < k:
        raise ShapeError(f"conv_time: time length {t} shorter than kernel {k} ({x.shape}, {kernel.shape})")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv_time: bias {bias.shape} does not match kernel {kernel.shape}")
    t_out = t - k + 1
    if k == 1:
        unf = x.data.reshape(*lead, c_in, t * s)
    else:
        unf = np.stack([x.data[..., i:i + t_out, :] for i in range(k)], axis=-3)
        unf = unf.reshape(*lead, c_in * k, t_out * s)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = w2 @ unf
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(*lead, c_out, t_out, s)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(*lead, c_out, t_out * s)
        gx = gw = gb = None
        if kernel.requires_grad:
            gm = g2.reshape(-1, c_out, t_out * s)
            um = unf.reshape(-1, c_in * k, t_out * s)
            gw = np.einsum("lop,lqp->oq", gm, um, optimize=True).reshape(kernel.shape)
        if x.requires_grad:
            gu = w2.T @ g2
            if k == 1:
                gx = gu.reshape(x.shape)
            else:
                gu = gu.reshape(*lead, c_in, k, t_out, s)
                gx = np.zeros(x.shape)
                for i in range(k):
                    gx[..., i:i + t_out, :] += gu[..., i, :, :]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=tuple(a for a in range(g.ndim) if a != g.ndim - 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _finish(out, inputs, backward)


# -- backward ------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on, then free the tape.

    Leaf gradients accumulate, so callers zero them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = tape if tape is not None else _state["tape"]
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

"""Dense tensors with reverse-mode automatic differentiation on a gradient tape.

All convolutional data uses the [N, C, (T,) H, W] layout. Binary ops require
exact shape equality; the only ops that broadcast are `bias_add` and
`channel_affine`, which do so explicitly along one channel axis. Ops record
themselves on the thread's active `GradientTape` in creation order, and
`backward` replays the tape in reverse, summing gradients where a tensor feeds
several consumers.

Forward results are checked for overflow: NaN or +Inf in an op output raises
`NumericsError`. -Inf is permitted only when an input already carried it (the
additive attention mask is the one sanctioned source).
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand extents or dtypes are incompatible."""


class NumericsError(ArithmeticError):
    """A forward op overflowed to Inf or produced NaN."""


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            arr = np.array(data)
        else:
            arr = np.array(data, dtype=np.dtype(dtype) if dtype is not None else np.float32)
        if arr.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        """The backing array. Treat as read-only; ops never mutate written data."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class GradientTape:
    """Op recorder: node order is creation order, backward replays it reversed.

    `activation_bytes` accumulates the bytes of op outputs plus any extra
    arrays materialized for backward; it scales exactly with batch size.
    Nodes computed purely from leaf parameters (kernel fusion buffers and the
    like) go to `param_buffer_bytes` instead, since they are model-side
    memory, not activations.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.activation_bytes = 0
        self.param_buffer_bytes = 0
        self._produced: set[int] = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a GradientTape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False


@contextlib.contextmanager
def no_grad():
    """Temporarily stop recording on the active tape (if any)."""
    prev = _active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


def _record(out: Tensor, parents: tuple, backward_fn: Callable, saved_bytes: int = 0) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    tape.nodes.append((out, parents, backward_fn))
    tape._produced.add(id(out))
    param_derived = all(
        p.requires_grad and id(p) not in tape._produced for p in parents)
    if param_derived:
        tape.param_buffer_bytes += out.data.nbytes + saved_bytes
    else:
        # rank-0 outputs (loss scalars) are bookkeeping, not activation
        # buffers; excluding them keeps the estimate exactly linear in batch
        if out.data.ndim:
            tape.activation_bytes += out.data.nbytes
        tape.activation_bytes += saved_bytes
    return out


def _guard(data: np.ndarray, op: str, parent_arrays: Sequence[np.ndarray] = ()) -> None:
    if np.isfinite(data).all():
        return
    if np.isnan(data).any():
        raise NumericsError(f"{op}: NaN in result")
    if np.isposinf(data).any():
        raise NumericsError(f"{op}: overflow to +Inf")
    # -Inf may only propagate from an input that already carried it (mask constants)
    if not any(np.isneginf(p).any() for p in parent_arrays):
        raise NumericsError(f"{op}: overflow to -Inf")


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError(f"{op}: operands must be Tensors")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} must match")


# ---------------------------------------------------------------------------
# constructors


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    t = Tensor._wrap(np.zeros(shape, dtype=dtype))
    t.requires_grad = requires_grad
    return t


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    t = Tensor._wrap(np.ones(shape, dtype=dtype))
    t.requires_grad = requires_grad
    return t


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


def uniform_param(rng: np.random.Generator, shape, bound: float, dtype=np.float32) -> Tensor:
    """Trainable tensor drawn uniformly from [-bound, bound]."""
    t = Tensor._wrap(rng.uniform(-bound, bound, size=shape).astype(dtype))
    t.requires_grad = True
    return t


def fanin_param(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Conv/linear kernel init: uniform in +-1/sqrt(fan_in)."""
    return uniform_param(rng, shape, 1.0 / math.sqrt(fan_in), dtype)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    data = a.data + b.data
    _guard(data, "add", (a.data, b.data))
    out = Tensor._wrap(data)

    def bwd(g):
        return g, g

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    data = a.data - b.data
    _guard(data, "sub", (a.data, b.data))
    out = Tensor._wrap(data)

    def bwd(g):
        return g, -g

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    data = a.data * b.data
    _guard(data, "mul", (a.data, b.data))
    out = Tensor._wrap(data)

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NumericsError(f"scale: factor {s} is not finite")
    data = x.data * s
    _guard(data, "scale", (x.data,))
    out = Tensor._wrap(data)

    def bwd(g):
        return (g * s,)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: overflow-free and one ufunc pass
    half = x.data.dtype.type(0.5)
    data = half * (np.tanh(half * x.data) + x.data.dtype.type(1.0))
    _guard(data, "sigmoid")
    out = Tensor._wrap(data)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _record(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    _guard(data, "tanh")
    out = Tensor._wrap(data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return _record(out, (x,), bwd)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    xd = x.data
    data = np.where(xd >= 0, xd, xd * xd.dtype.type(alpha))
    _guard(data, "leaky_relu", (xd,))
    out = Tensor._wrap(data)

    def bwd(g):
        return (np.where(xd >= 0, g, g * xd.dtype.type(alpha)),)

    return _record(out, (x,), bwd, saved_bytes=0)


def bias_add(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Per-channel bias along `axis`; the one sanctioned broadcasting add."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not match axis {axis} of {x.shape}")
    if bias.dtype != x.dtype:
        raise ShapeError(f"bias_add: dtypes {x.dtype} and {bias.dtype} must match")
    shape = [1] * x.ndim
    shape[axis] = bias.shape[0]
    data = x.data + bias.data.reshape(shape)
    _guard(data, "bias_add", (x.data,))
    out = Tensor._wrap(data)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bwd(g):
        gb = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return g, gb

    return _record(out, (x, bias), bwd)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1) -> Tensor:
    """y = x * gamma + beta with 1-D gamma/beta broadcast along `axis`."""
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.ndim != 1 or p.shape[0] != x.shape[axis]:
            raise ShapeError(f"channel_affine: {name} shape {p.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    gd = gamma.data.reshape(shape)
    data = x.data * gd + beta.data.reshape(shape)
    _guard(data, "channel_affine", (x.data,))
    out = Tensor._wrap(data)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bwd(g):
        gx = g * gd if x.requires_grad else None
        gg = (g * x.data).sum(axis=reduce_axes) if gamma.requires_grad else None
        gb = g.sum(axis=reduce_axes) if beta.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(x: Tensor, num_axes: int, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing `num_axes` axes of x to mean 0, variance 1.

    Learned scale/shift are deliberately separate (see `channel_affine`).
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    if not 1 <= num_axes <= x.ndim:
        raise ShapeError(f"layer_norm: num_axes {num_axes} out of range for rank {x.ndim}")
    axes = tuple(range(x.ndim - num_axes, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    data = (x.data - mu) * inv
    _guard(data, "layer_norm")
    out = Tensor._wrap(data)

    def bwd(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * data).mean(axis=axes, keepdims=True)
        return ((g - gm - data * gym) * inv,)

    return _record(out, (x,), bwd, saved_bytes=inv.nbytes)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax. -Inf entries (mask) get exactly zero weight."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=axis, keepdims=True)
    _guard(data, "softmax")
    out = Tensor._wrap(data)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape and contraction ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; rank >= 2 with identical leading (batch) extents."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} must be equal and >= 2")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} must match")
    data = a.data @ b.data
    _guard(data, "matmul", (a.data, b.data))
    out = Tensor._wrap(data)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    data = np.ascontiguousarray(x.data.transpose(axes))
    out = Tensor._wrap(data)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape} (element counts differ)")
    data = np.ascontiguousarray(x.data).reshape(shape)
    out = Tensor._wrap(data)
    old_shape = x.data.shape

    def bwd(g):
        return (g.reshape(old_shape),)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.dtype != ref.dtype:
            raise ShapeError("concat: rank/dtype mismatch between operands")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise ShapeError(
                    f"concat: extent mismatch on axis {ax}: {ref.shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._wrap(data)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                pieces.append(None)
        return tuple(pieces)

    return _record(out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    data = np.ascontiguousarray(x.data[tuple(sl)])
    out = Tensor._wrap(data)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[tuple(sl)] = g
        return (gx,)

    return _record(out, (x,), bwd)


def _norm_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    data = x.data.sum(axis=axes)
    _guard(data, "reduce_sum", (x.data,))
    out = Tensor._wrap(data)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.data.shape).copy(),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    data = x.data.mean(axis=axes)
    _guard(data, "reduce_mean", (x.data,))
    out = Tensor._wrap(data)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), x.data.shape).copy(),)

    return _record(out, (x,), bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that blocks all gradient flow."""
    return Tensor._wrap(x.data)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from a [K, D] table; gradient scatter-adds into rows."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range [0, {table.shape[0]})")
    data = table.data[idx]
    out = Tensor._wrap(data)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# backward


def backward(tape: GradientTape, loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) onto .grad of every requires_grad leaf.

    Gradients sum across consumers; repeated calls keep accumulating until
    the caller zeroes them.
    """
    if not isinstance(tape, GradientTape):
        raise TypeError("backward: first argument must be a GradientTape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {}
    for out, parents, bwd in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = bwd(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                holders[key] = p
    for key, g in grads.items():
        leaf = holders[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

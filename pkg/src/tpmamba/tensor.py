"""Dense tensor engine with tape-based reverse-mode differentiation.

Values are numpy arrays in row-major order (f32 for training, f64 for the
check suites).  Every differentiable primitive records a node on the active
tape; replaying the tape in reverse order accumulates gradients into the
trainable leaves.  With no tape active the same numpy code runs, so recorded
and unrecorded forward passes are bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional value, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_is_node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._is_node = False  # set when produced by a recorded primitive

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Convenience arithmetic (thin wrappers over the module primitives).
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)


class Parameter:
    """A named tensor in a model; frozen parameters never allocate a grad."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        self.name = name
        self.value = Tensor(data, dtype=dtype, requires_grad=trainable)
        self.trainable = trainable

    @property
    def data(self) -> Array:
        return self.value.data

    @data.setter
    def data(self, arr: Array) -> None:
        if arr.shape != self.value.data.shape:
            raise ShapeError(
                f"parameter {self.name}: cannot assign shape {arr.shape} over {self.value.data.shape}"
            )
        self.value.data = np.ascontiguousarray(arr, dtype=self.value.data.dtype)

    @property
    def grad(self) -> Optional[Array]:
        return self.value.grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {kind})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: Optional[Array] = None) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every trainable leaf."""
        grads: dict[int, Array] = {}
        if seed is None:
            seed = np.ones_like(loss.data)
        grads[id(loss)] = np.asarray(seed, dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for _, t in _leaf_items(self, grads):
            if t.grad is None:
                t.grad = grads[id(t)].copy()
            else:
                t.grad = t.grad + grads[id(t)]


def _leaf_items(tape: Tape, grads: dict):
    produced = {id(n.output) for n in tape.nodes}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced and id(t) in grads and id(t) not in seen:
                seen.add(id(t))
                yield id(t), t


_ACTIVE_TAPE: Optional[Tape] = None


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Activate a tape; yields it.  Nested recording is not supported."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RuntimeError("a tape is already recording")
    tape = tape if tape is not None else Tape()
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def as_value(x) -> Tensor:
    """Unwrap a Parameter to its Tensor; Tensors pass through."""
    return x.value if isinstance(x, Parameter) else x


def _record(inputs: Sequence[Tensor], out_data: Array, backward: Callable) -> Tensor:
    """Wrap a primitive result, recording a tape node when gradients flow."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    out._is_node = needs
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant (no dtype promotion)."""
    out = a.data * a.data.dtype.type(s)
    return _record((a,), out, lambda g: (g * a.data.dtype.type(s),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _record((a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record((a,), out, lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    return _record((a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record((a,), out, backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        g = np.asarray(g) / a.data.dtype.type(denom)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record((a,), out, backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}: element count differs")
    # materialize: downstream kernels must see values only, never strides
    out = np.ascontiguousarray(a.data.reshape(shape))
    return _record((a,), out, lambda g: (np.ascontiguousarray(g).reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute spec {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record((a,), out, lambda g: (np.transpose(g, inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[idx] = g
        return (full,)

    return _record((a,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i, t in enumerate(tensors):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _record(tuple(tensors), out, backward)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(tuple(tensors), out, backward)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents must match exactly,
    or one operand may be a plain 2-D matrix shared across the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.ascontiguousarray(np.swapaxes(bd, -1, -2)))
        gb = np.matmul(np.ascontiguousarray(np.swapaxes(ad, -1, -2)), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record((a, b), out, backward)


def linear(x: Tensor, weight, bias=None) -> Tensor:
    """y = x @ weight.T (+ bias) with weight of shape (out, in)."""
    weight = as_value(weight)
    bias = as_value(bias) if bias is not None else None
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape} vs weight {weight.shape}")
    xd = np.ascontiguousarray(x.data)
    out = np.matmul(xd, weight.data.T)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = np.matmul(g, weight.data)
        flat_g = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
        flat_x = xd.reshape(-1, x.shape[-1])
        gw = flat_g.T @ flat_x
        if bias is not None:
            return gx, gw, flat_g.sum(axis=0)
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, backward)


# ---------------------------------------------------------------------------
# nonlinear primitives


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _record((a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _record((a,), out, lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(a.data.dtype.type(0), a.data)
    return _record((a,), out, lambda g: (g * _sigmoid_np(a.data),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d.astype(x.dtype),)

    return _record((a,), out.astype(x.dtype), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record((a,), out, backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record((a,), out, backward)


def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# helpers


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Array:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)

"""Dense f64 tensors with reverse-mode differentiation on an explicit tape.

The design follows the usual tiny-autograd recipe: a `Tensor` wraps a numpy
array, every differentiable operation appends a backward closure to the
active `Tape`, and `Tape.backward` replays the closures in reverse.  The
execution order of a tape is topological by construction (an op can only be
recorded after its inputs exist), so the reverse sweep applies the chain rule
to each op exactly once and accumulates (sums) gradients at shared inputs.

Scope is deliberately small: the op set is exactly what the adapter zoo and
the toy clip-QA model need.  Broadcasting is restricted to leading axes (the
smaller operand's shape must be a suffix of the larger's), which keeps every
gradient rule a plain sum over the broadcast axes.  gelu uses the tanh
approximation so its derivative is closed-form.

Tapes are not shared between threads; one training step owns its tape and
tensors exclusively.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "record",
    "set_debug_checks",
    "debug_checks_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "pow_scalar",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "slice_axis",
    "concat",
    "embedding",
    "cross_entropy",
    "layer_norm",
    "depthwise_conv_time",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised by debug checks when an op produces NaN or Inf."""


_local = threading.local()
_DEBUG = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf scan after every op (off by default for speed)."""
    global _DEBUG
    _DEBUG = enabled


def debug_checks_enabled() -> bool:
    return _DEBUG


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """Dense multidimensional array, optionally tracked for gradients.

    `data` is a row-major (C-order) numpy array, f64 unless the caller asks
    otherwise.  `grad`, once populated by a backward pass, always matches
    `data` in shape.  Leaves with `requires_grad=True` are the trainable
    parameters; op outputs get `requires_grad=True` only while a tape is
    recording.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; scalars go through scale/add_scalar.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of executed differentiable ops for one backward pass."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Reverse-replay the tape, seeding d(loss)/d(loss) = 1.

        `loss` must be a scalar.  Each recorded op is visited exactly once,
        in reverse execution order; gradients sum at tensors used more than
        once.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        _accumulate(loss, np.ones((), dtype=loss.data.dtype))
        for fn in reversed(self._entries):
            fn()


@contextmanager
def record():
    """Context manager activating a fresh tape; yields it for backward()."""
    tape = Tape()
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _out(data: np.ndarray, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return Tensor(data)


def _suffix_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the leading broadcast axes so g matches `shape` (a suffix)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a_shape: tuple[int, ...], b_shape: tuple[int, ...], op: str) -> None:
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) > 0 and big[len(big) - len(small):] != small:
        raise ShapeError(
            f"{op}: shapes {a_shape} and {b_shape} do not broadcast "
            "(smaller shape must be a trailing suffix of the larger)"
        )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse extra leading axes of g (from batched matmul) down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contraction over the last axis of `a` and second-to-last of `b`.

    Supports a with leading batch axes against a 2-D b, and fully batched
    operands with equal leading axes (used by the attention ops).
    """
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = np.matmul(a.data, b.data)
    out = _out(data, "matmul")
    tape = _active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        a_data, b_data = a.data, b.data

        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, _reduce_to(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_data.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(np.matmul(np.swapaxes(a_data, -1, -2), g), b_data.shape))

        tape._entries.append(bw)
    return out


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data.shape, b.data.shape, "add")
    out = _out(a.data + b.data, "add")
    tape = _active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, _suffix_reduce(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _suffix_reduce(g, b.data.shape))

        tape._entries.append(bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data.shape, b.data.shape, "sub")
    out = _out(a.data - b.data, "sub")
    tape = _active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, _suffix_reduce(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _suffix_reduce(-g, b.data.shape))

        tape._entries.append(bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data.shape, b.data.shape, "mul")
    out = _out(a.data * b.data, "mul")
    tape = _active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        a_data, b_data = a.data, b.data

        def bw():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, _suffix_reduce(g * b_data, a_data.shape))
            if b.requires_grad:
                _accumulate(b, _suffix_reduce(g * a_data, b_data.shape))

        tape._entries.append(bw)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _out(x.data * c, "scale")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad * c)

        tape._entries.append(bw)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = _out(x.data + c, "add_scalar")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad)

        tape._entries.append(bw)
    return out


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a constant p (used for norms via p=2, 0.5, -0.5)."""
    out = _out(x.data ** p, "pow_scalar")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        x_data = x.data

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad * p * x_data ** (p - 1.0))

        tape._entries.append(bw)
    return out


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    out = _out(data, "tanh")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad * (1.0 - data * data))

        tape._entries.append(bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))
    out = _out(data, "sigmoid")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad * data * (1.0 - data))

        tape._entries.append(bw)
    return out


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    out = _out(data, "relu")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        mask = x.data > 0.0

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad * mask)

        tape._entries.append(bw)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """gelu with the tanh approximation; derivative is closed-form."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)
    out = _out(data, "gelu")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            if out.grad is None:
                return
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
            _accumulate(x, out.grad * d)

        tape._entries.append(bw)
    return out


# ---------------------------------------------------------------------------
# softmax / loss


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _out(data, "softmax")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, data * (g - dot))

        tape._entries.append(bw)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of `target`; returns a scalar tensor."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy: target {target} out of range for {n} classes")
    m = logits.data.max()
    e = np.exp(logits.data - m)
    z = e.sum()
    loss_val = np.log(z) + m - logits.data[target]
    out = _out(np.asarray(loss_val), "cross_entropy")
    tape = _active_tape()
    if tape is not None and logits.requires_grad:
        out.requires_grad = True
        probs = e / z

        def bw():
            g = out.grad
            if g is None:
                return
            d = probs.copy()
            d[target] -= 1.0
            _accumulate(logits, d * g)

        tape._entries.append(bw)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=False)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=True)


def _reduce(x: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if mean:
        data = x.data.mean(axis=axis, keepdims=keepdims)
    else:
        data = x.data.sum(axis=axis, keepdims=keepdims)
    out = _out(np.asarray(data), "reduce")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        x_shape = x.data.shape
        if axis is None:
            axes = tuple(range(len(x_shape)))
        elif isinstance(axis, int):
            axes = (axis % len(x_shape),)
        else:
            axes = tuple(a % len(x_shape) for a in axis)
        count = 1
        for a in axes:
            count *= x_shape[a]

        def bw():
            g = out.grad
            if g is None:
                return
            if not keepdims:
                kd = list(x_shape)
                for a in axes:
                    kd[a] = 1
                g = g.reshape(kd)
            g = np.broadcast_to(g, x_shape)
            _accumulate(x, g / count if mean else g)

        tape._entries.append(bw)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    out = _out(x.data.reshape(shape), "reshape")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        orig = x.data.shape

        def bw():
            if out.grad is not None:
                _accumulate(x, out.grad.reshape(orig))

        tape._entries.append(bw)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes for shape {x.data.shape}")
    out = _out(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        inverse = tuple(np.argsort(axes))

        def bw():
            if out.grad is not None:
                _accumulate(x, np.transpose(out.grad, inverse))

        tape._entries.append(bw)
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    axis = axis % x.data.ndim
    sl = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.data.ndim))
    out = _out(np.ascontiguousarray(x.data[sl]), "slice_axis")
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[sl] += g

        tape._entries.append(bw)
    return out


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _out(data, "concat")
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parts):
        out.requires_grad = True
        ax = axis % data.ndim
        offsets = []
        pos = 0
        for p in parts:
            offsets.append((pos, pos + p.data.shape[ax]))
            pos += p.data.shape[ax]

        def bw():
            g = out.grad
            if g is None:
                return
            for p, (lo, hi) in zip(parts, offsets):
                if p.requires_grad:
                    sl = tuple(slice(None) if i != ax else slice(lo, hi) for i in range(g.ndim))
                    _accumulate(p, g[sl])

        tape._entries.append(bw)
    return out


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup table[ids]; the backward scatter-adds into the table rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.data.shape[0]} rows")
    out = _out(table.data[idx], "embedding")
    tape = _active_tape()
    if tape is not None and table.requires_grad:
        out.requires_grad = True

        def bw():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

        tape._entries.append(bw)
    return out


# ---------------------------------------------------------------------------
# fused primitives with hand-derived backwards


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = _out(xhat * gain.data + bias.data, "layer_norm")
    tape = _active_tape()
    if tape is not None and (x.requires_grad or gain.requires_grad or bias.requires_grad):
        out.requires_grad = True
        gain_data = gain.data

        def bw():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _accumulate(gain, _suffix_reduce(g * xhat, gain.data.shape))
            if bias.requires_grad:
                _accumulate(bias, _suffix_reduce(g, bias.data.shape))
            if x.requires_grad:
                dxhat = g * gain_data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

        tape._entries.append(bw)
    return out


def depthwise_conv_time(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise convolution over the middle (time) axis of x[N, T, C].

    kernel[k, C] with odd k; zero padding keeps the output length at T.
    Each channel is convolved independently with its own k-tap kernel.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"depthwise_conv_time expects [N, T, C], got {x.data.shape}")
    k, c = kernel.data.shape
    if c != x.data.shape[2]:
        raise ShapeError(f"kernel channels {c} != input channels {x.data.shape[2]}")
    if k % 2 == 0:
        raise ShapeError(f"kernel length must be odd, got {k}")
    n, t, _ = x.data.shape
    pad = k // 2
    xp = np.zeros((n, t + 2 * pad, c), dtype=x.data.dtype)
    xp[:, pad:pad + t, :] = x.data
    data = np.zeros_like(x.data)
    for j in range(k):
        data += kernel.data[j] * xp[:, j:j + t, :]
    out = _out(data, "depthwise_conv_time")
    tape = _active_tape()
    if tape is not None and (x.requires_grad or kernel.requires_grad):
        out.requires_grad = True
        kernel_data = kernel.data

        def bw():
            g = out.grad
            if g is None:
                return
            if kernel.requires_grad:
                dk = np.empty_like(kernel_data)
                for j in range(k):
                    dk[j] = (g * xp[:, j:j + t, :]).sum(axis=(0, 1))
                _accumulate(kernel, dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for j in range(k):
                    dxp[:, j:j + t, :] += kernel_data[j] * g
                _accumulate(x, dxp[:, pad:pad + t, :])

        tape._entries.append(bw)
    return out

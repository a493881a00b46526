"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous row-major numpy float array. Operations
executed while a :class:`Tape` is active are recorded in execution order, and
``Tape.backward`` replays the recording in exact reverse order, accumulating
gradients (``+=``) into every participating tensor whose ``requires_grad`` is
set. Without an active tape the same operations run eagerly with zero
bookkeeping, which is the inference path.

Every forward op checks its output for NaN/Inf and raises
:class:`~mmdial.errors.NumericsError` rather than propagating silent garbage.

A tape and the tensors recorded on it belong to one thread; independent
model instances with their own tapes may run in parallel threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, NumericsError, ShapeMismatchError

__all__ = [
    "Tensor",
    "Tape",
    "set_default_dtype",
    "default_dtype",
    "as_tensor",
    "zero_grad",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "tensor_sum",
    "mean",
    "gather_log_softmax",
    "cross_entropy",
]

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float64


def set_default_dtype(bits: int) -> None:
    """Select the float width (32 or 64) used for newly created tensors.

    64-bit is the default and is required for finite-difference gradient
    checks; 32-bit is an opt-in for faster training runs.
    """
    global _default_dtype
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits!r}")
    _default_dtype = _DTYPES[bits]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients.

    ``grad`` holds the accumulated gradient as a plain numpy array of the
    same shape, populated by ``Tape.backward`` and cleared by ``zero_grad``.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _default_dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; all routing goes through the module-level ops so
    # everything lands on the active tape.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# Tape machinery

class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered recording of differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``. Recording order is execution order, so every node's
    inputs exist before the node; the backward sweep walks the list in exact
    reverse order, which is a valid reverse-topological order.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape context exited out of order")
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every recorded tensor reachable from ``loss``.

        Gradients accumulate across calls: a second ``backward`` without an
        intervening ``zero_grad`` doubles them.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise ContractError("backward on an empty tape")
        if all(node.output is not loss for node in self._nodes):
            raise ContractError("loss was not computed on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue  # output not on any path to the loss
            input_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    owners[key] = inp

        for key, g in grads.items():
            t = owners[key]
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g


def _record(inputs: tuple[Tensor, ...], output: Tensor, backward: Callable) -> None:
    tape = active_tape()
    if tape is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    output.requires_grad = True
    tape._nodes.append(_Node(inputs, output, backward))


def _result(arr: np.ndarray, op: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(arr)
    out.requires_grad = False
    out.grad = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Operations

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result(data, "add")

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    _record((a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result(data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    _record((a, b), out, backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * s, "scale")

    def backward(g):
        return (g * s,)

    _record((a,), out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors, or a stacked batch of them (3-d
    with equal leading dimension)."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ShapeMismatchError(f"matmul needs two 2-d or two 3-d tensors, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeMismatchError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = _result(ad @ bd, "matmul")

    def backward(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        gb = ad.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    _record((a, b), out, backward)
    return out


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    out = _result(a.data.transpose(axes), "transpose")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    _record((a,), out, backward)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old_shape = a.data.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot view {old_shape} as {tuple(shape)}") from None
    out = _result(data, "reshape")

    def backward(g):
        return (g.reshape(old_shape),)

    _record((a,), out, backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    arrays = [p.data for p in parts]
    try:
        data = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat along axis {axis}: incompatible shapes {[p.shape for p in parts]}"
        ) from None
    out = _result(data, "concat")
    sizes = [arr.shape[axis] for arr in arrays]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(tuple(parts), out, backward)
    return out


def _relu_grad(x_data: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Module-level so test fixtures can monkeypatch it to model a corrupted
    # backward rule.
    return g * (x_data > 0)


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), "relu")
    ad = a.data

    def backward(g):
        return (_relu_grad(ad, g),)

    _record((a,), out, backward)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, "softmax")

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    _record((a,), out, backward)
    return out


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - log_z
    out = _result(y, "log_softmax")

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    _record((a,), out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine
    ``gain * xhat + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _result(xhat * gain.data + bias.data, "layer_norm")
    gain_data = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        g_bias = g.sum(axis=lead) if bias.requires_grad else None
        if x.requires_grad:
            gg = g * gain_data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            g_x = (gg - m1 - xhat * m2) * inv_std
        else:
            g_x = None
        return g_x, g_gain, g_bias

    _record((x, gain, bias), out, backward)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table`` by integer id; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"embedding ids must be 1-d, got shape {idx.shape}")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise DataError(f"embedding id out of range [0, {n_rows})")
    out = _result(table.data[idx], "embedding")

    def backward(g):
        g_table = np.zeros_like(table.data)
        np.add.at(g_table, idx, g)
        return (g_table,)

    _record((table,), out, backward)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), "sum")
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    _record((a,), out, backward)
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(np.asarray(a.data.mean()), "mean")
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    _record((a,), out, backward)
    return out


def gather_log_softmax(logits: Tensor, ids) -> Tensor:
    """Row-wise log-softmax gathered at the given ids: out[i] = log p(ids[i] | row i).

    This is the numerically-stable core of both sequence scoring and the
    cross-entropy training loss.
    """
    idx = np.asarray(ids, dtype=np.intp)
    if logits.ndim != 2 or idx.ndim != 1 or idx.size != logits.shape[0]:
        raise ShapeMismatchError(
            f"gather_log_softmax: logits {logits.shape} incompatible with {idx.size} ids"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= logits.shape[1]):
        raise DataError(f"target id out of range [0, {logits.shape[1]})")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(idx.size)
    out = _result(log_probs[rows, idx], "gather_log_softmax")

    def backward(g):
        g_logits = -np.exp(log_probs) * g[:, None]
        g_logits[rows, idx] += g
        return (g_logits,)

    _record((logits,), out, backward)
    return out


def cross_entropy(logits: Tensor, ids) -> Tensor:
    """Mean negative log-likelihood of ``ids`` under row-wise softmax(logits)."""
    return scale(mean(gather_log_softmax(logits, ids)), -1.0)

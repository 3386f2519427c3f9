"""Dense float64 tensors with a recording tape and reverse-mode differentiation.

Operations run eagerly on numpy arrays. Inside ``with Tape() as tape:`` every
primitive whose operands depend on a `Parameter` is recorded together with a
vector-Jacobian closure; outside a tape nothing is recorded (inference mode).
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ShapeError, TapeError, TrainingFault

logger = logging.getLogger(__name__)

ArrayLike = Any
Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("value", "_tape")

    def __init__(self, value: ArrayLike) -> None:
        self.value = np.array(value, dtype=np.float64)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def ndim(self) -> int:
        return int(self.value.ndim)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, as_tensor(other))

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, as_tensor(other))

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf with an accumulated gradient of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, value: ArrayLike, name: str = "") -> None:
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x: Tensor | ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Vjp


_local = threading.local()


def _active_tape() -> Tape | None:
    stack: list[Tape] = getattr(_local, "stack", [])
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations; each tape supports one backward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return isinstance(t, Parameter) or t._tape is self

    def backward(self, loss: Tensor, wrt: Iterable[Parameter] | None = None) -> None:
        backward(self, loss, wrt)


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        out._tape = tape
        tape.nodes.append(_Node(output=out, inputs=inputs, vjp=vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# Forward primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    try:
        value = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    return _record(value, (a, b), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (or `axis`)."""
    if not tensors:
        raise ShapeError("concat: no operands")
    lead = [t.shape[:axis] + t.shape[axis + 1 :] if axis != -1 else t.shape[:-1] for t in tensors]
    if any(s != lead[0] for s in lead):
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _record(value, (a,), lambda g: (g.reshape(src),))


def _scatter_add(values: np.ndarray, index: np.ndarray, n: int, axis: int) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    out = np.zeros((n,) + moved.shape[1:])
    np.add.at(out, index, moved)
    return np.moveaxis(out, 0, axis)


def _scatter_max(values: np.ndarray, index: np.ndarray, n: int, axis: int) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    out = np.full((n,) + moved.shape[1:], -np.inf)
    np.maximum.at(out, index, moved)
    return np.moveaxis(out, 0, axis)


def gather_rows(a: Tensor, index: np.ndarray | Sequence[int]) -> Tensor:
    """Select rows (second-to-last axis) by index; repeated indices allowed."""
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim < 2:
        raise ShapeError(f"gather_rows: need a matrix, got shape {a.shape}")
    n = a.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    return _record(
        np.take(a.value, idx, axis=-2), (a,), lambda g: (_scatter_add(g, idx, n, -2),)
    )


def scatter_rows(a: Tensor, index: np.ndarray | Sequence[int], n_rows: int) -> Tensor:
    """Sum rows of `a` into an `n_rows` output at `index` (inverse of gather_rows)."""
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim < 2 or a.shape[-2] != len(idx):
        raise ShapeError(f"scatter_rows: {len(idx)} indices for shape {a.shape}")
    return _record(
        _scatter_add(a.value, idx, n_rows, -2), (a,), lambda g: (np.take(g, idx, axis=-2),)
    )


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.value.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {a.shape}")
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def row_mean(a: Tensor) -> Tensor:
    """Mean over rows (second-to-last axis)."""
    if a.ndim < 2:
        raise ShapeError(f"row_mean: need a matrix, got shape {a.shape}")
    return mean(a, axis=-2)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.value > 0.0, 1.0, slope)
    return _record(a.value * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to `a`."""
    _broadcast("minimum", a, b)
    pick_a = a.value <= b.value
    sa, sb = a.shape, b.shape
    return _record(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def _softmax_vjp(y: np.ndarray, axis: int) -> Callable[[np.ndarray], tuple[np.ndarray]]:
    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return vjp


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis over entries where `mask` is true; others get 0."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not np.all(m.any(axis=-1)):
        raise ShapeError("masked_softmax: a row has no admissible entry")
    shifted = np.where(m, scores.value, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (scores,), _softmax_vjp(y, -1))


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of the last-axis entries within each segment id.

    The edge-list form of `masked_softmax`: entry k belongs to row `segments[k]`.
    """
    seg = np.asarray(segments, dtype=np.intp)
    if scores.shape[-1] != len(seg):
        raise ShapeError(f"segment_softmax: {len(seg)} segment ids for shape {scores.shape}")
    peak = _scatter_max(scores.value, seg, n_segments, -1)
    e = np.exp(scores.value - np.take(peak, seg, axis=-1))
    total = _scatter_add(e, seg, n_segments, -1)
    y = e / np.take(total, seg, axis=-1)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        dot = _scatter_add(g * y, seg, n_segments, -1)
        return (y * (g - np.take(dot, seg, axis=-1)),)

    return _record(y, (scores,), vjp)


def constant(value: ArrayLike) -> Tensor:
    return Tensor(value)


# Reverse pass


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(param) into every Parameter reached on `tape`.

    With `wrt`, only those parameters receive gradient.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape; record the computation again")
    if loss.value.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    allowed = None if wrt is None else {id(p) for p in wrt}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not tape.tracks(inp):
                continue
            if isinstance(inp, Parameter):
                if allowed is None or id(inp) in allowed:
                    inp.grad = inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    if isinstance(loss, Parameter) and (allowed is None or id(loss) in allowed):
        loss.grad = loss.grad + np.ones_like(loss.value)


class ParameterStore:
    """Named parameters plus their Adam moments and step count."""

    def __init__(self, params: Sequence[Parameter] | None = None) -> None:
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0
        for p in params or ():
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if not param.name or param.name in self._params:
            raise ValueError(f"parameter name {param.name!r} missing or duplicated")
        self._params[param.name] = param
        self.moments[param.name] = (np.zeros_like(param.value), np.zeros_like(param.value))
        return param

    def create(self, name: str, value: ArrayLike) -> Parameter:
        return self.add(Parameter(value, name=name))

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in values:
                raise ShapeError(f"no value for parameter {name!r}")
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: shape {v.shape} vs {p.shape}")
            p.value = v.copy()

    def count(self) -> int:
        return int(np.sum([p.value.size for p in self]))


def optimizer_step(
    store: ParameterStore,
    lr: float,
    *,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One Adam update of every parameter in `store`; gradients are cleared afterwards."""
    for p in store:
        if p.grad.shape != p.shape:
            raise ShapeError(f"gradient of {p.name!r} has shape {p.grad.shape}, expected {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise TrainingFault(f"non-finite gradient in parameter {p.name!r}")
    store.step_count += 1
    b1, b2 = betas
    k = store.step_count
    for p in store:
        m, v = store.moments[p.name]
        m = b1 * m + (1.0 - b1) * p.grad
        v = b2 * v + (1.0 - b2) * p.grad * p.grad
        store.moments[p.name] = (m, v)
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def numerical_gradient(
    fn: Callable[[], float], params: Sequence[Parameter], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences of `fn` with respect to every entry of `params`."""
    out: dict[str, np.ndarray] = {}
    for p in params:
        grad = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        g_flat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn()
            flat[k] = orig - h
            down = fn()
            flat[k] = orig
            g_flat[k] = (up - down) / (2.0 * h)
        out[p.name] = grad
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor), entrywise."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if np.size(a) else 0.0

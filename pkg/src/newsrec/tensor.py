"""Small dense-tensor engine with a reverse-mode tape and Adam.

Only the primitives the recommender needs are provided.  Every op records
itself on the active :class:`Tape` (if any) together with a closure that
pushes the output gradient back to its inputs.  Outside a tape, ops run in
plain inference mode and nothing is recorded.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from newsrec.errors import NumericError, ShapeError

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A value node.  ``data`` is a numpy array; ``grad`` is filled by backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "const"):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar keeps model code readable
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

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf with Adam moments and a per-parameter step counter."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        self.grad += g

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of the ops executed inside ``with Tape():``."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


check_finite = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor(data, op=op)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accum(g * y * (1.0 - y))

    return _make(y, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - y * y))

    return _make(y, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0.0)

    def backward(g):
        x._accum(g * pos)

    return _make(y, (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        x._accum(g * y)

    return _make(y, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def backward(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), (x,), backward, "log")


def log_sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        e = np.exp(-np.abs(d))
        s_neg = np.where(d >= 0, e / (1.0 + e), 1.0 / (1.0 + e))  # sigmoid(-d)
        x._accum(g * s_neg)

    return _make(y, (x,), backward, "log_sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accum(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward, "clip")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(np.asarray(y), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    d = x.data
    if mask is not None:
        if mask.shape != d.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {d.shape}")
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax: a row has no unmasked entry")
        d = np.where(mask, d, -np.inf)
    shifted = d - np.max(d, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        x._accum(y * (g - dot))

    return _make(y, (x,), backward, "softmax")


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for a 2-D right operand; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            k, m = b.shape
            b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return _make(y, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} for weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ weight.data)
        out_dim, in_dim = weight.shape
        g2 = g.reshape(-1, out_dim)
        if weight.requires_grad:
            weight._accum(g2.T @ x.data.reshape(-1, in_dim))
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _make(y, parents, backward, "linear")


# ------------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(y, tensors, backward, "concat")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = x.data.reshape(shape)

    def backward(g):
        x._accum(g.reshape(x.shape))

    return _make(y, (x,), backward, "reshape")


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table``; backward scatters into the touched rows only."""
    index = np.asarray(index)
    y = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full)

    return _make(y, (table,), backward, "embedding")


# --------------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter reachable from scalar ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not any(node is loss for node in reversed(tape.nodes)):
        raise ValueError("loss was not produced on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)
        if check_finite and not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient at {node.op}")
    for node in tape.nodes:
        node.grad = None


# ------------------------------------------------------------------------ Adam


class Adam:
    """Adam with bias correction.  Gradients are cleared after every step."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = p.grad
            p.step += 1
            p.m *= b1
            p.m += (1.0 - b1) * g
            p.v *= b2
            p.v += (1.0 - b2) * g * g
            m_hat = p.m / (1.0 - b1 ** p.step)
            v_hat = p.v / (1.0 - b2 ** p.step)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()

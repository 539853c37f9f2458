"""Reverse-mode automatic differentiation on float64 numpy arrays.

Operations on :class:`Tensor` are recorded on the innermost active
:class:`Tape` (define-by-run) whenever one of their inputs requires a
gradient.  Outside a ``with Tape():`` block nothing is recorded, which is how
evaluation-only passes avoid bookkeeping.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)   # {w: 2 * w.data}
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "as_tensor",
    "broadcast_to",
    "concat",
    "cos",
    "finite_diff_check",
    "gradients",
    "matmul",
    "relu",
    "set_check_finite",
    "sin",
    "stack",
]


class DimensionError(ValueError):
    """Incompatible operand shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle the per-op finiteness check; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check(data: np.ndarray, op: str) -> None:
    if not _CHECK_FINITE or data.size == 0:
        return
    # a single reduction is cheaper than isfinite().all(); confirm on failure
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total) and not np.isfinite(data).all():
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteError(f"{op} produced a non-finite value at index {tuple(bad)}")


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as they are created, so parents always precede
    children and a reversed sweep is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse guard
            raise RuntimeError("tapes must be exited in LIFO order")

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every leaf it reaches.

        Leaves are tensors created with ``requires_grad=True`` (parameters).
        Fan-out contributions are summed.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("backward() needs a scalar loss tensor")
        if loss.backward_fn is None or not any(node is loss for node in reversed(self.nodes)):
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, gp in zip(node.parents, node.backward_fn(g)):
                if gp is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.backward_fn is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        return {leaf: np.asarray(grads[key]).reshape(leaf.shape) for key, leaf in leaves.items()}


def gradients(tape: Tape, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
    """Gradients aligned with ``wrt``; leaves the loss does not reach get zeros."""
    found = tape.backward(loss)
    return [found[t] if t in found else np.zeros_like(t.data) for t in wrt]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
    _check(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward
        tape.nodes.append(out)
    return out


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # reductions and elementwise
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def square(self) -> "Tensor":
        return square(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., m, k) and ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    k, n = b.shape

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at the kink

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def square(x):
    if not isinstance(x, Tensor):
        return np.square(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sin(x):
    if not isinstance(x, Tensor):
        return np.sin(x)
    return _result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x):
    if not isinstance(x, Tensor):
        return np.cos(x)
    return _result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = tuple(a % len(shape) for a in np.atleast_1d(axis))
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward, "getitem")


def broadcast_to(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    parts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(pc if p.requires_grad else None for p, pc in zip(parts, pieces))

    return _result(data, tuple(parts), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, i, axis=axis) if p.requires_grad else None for i, p in enumerate(parts)
        )

    return _result(data, tuple(parts), backward, "stack")


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst entrywise relative error between ``backward`` and central differences.

    ``f`` maps a dict of named tensors to a scalar tensor.  The relative error
    of one entry is ``|a - n| / max(|a|, |n|, 1e-12)``.  ``max_entries``
    optionally subsamples the entries checked per parameter.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = f(leaves)
    analytic = dict(zip(leaves, gradients(tape, loss, list(leaves.values()))))

    def value(name: str, idx: tuple, delta: float) -> float:
        shifted = {k: Tensor(t.data) for k, t in leaves.items()}
        arr = shifted[name].data.copy()
        arr[idx] += delta
        shifted[name] = Tensor(arr)
        return float(f(shifted).data)

    worst = 0.0
    for name, leaf in leaves.items():
        indices: Iterable = list(np.ndindex(leaf.shape))
        if max_entries is not None and len(indices) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        for idx in indices:
            numeric = (value(name, idx, step) - value(name, idx, -step)) / (2.0 * step)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst

"""Reverse-mode differentiation over a small, closed set of array operations.

Every model in this package (the NODE right-hand sides, the basis network,
the loss) is written against the op vocabulary below, so the backward rules
can be checked by hand and by finite differences.

Two interchangeable backends expose the same methods:

* :class:`Tape` records every op and can run :meth:`Tape.backward`.
* :class:`Eager` just evaluates with numpy; it is used for inference, where
  keeping every intermediate of a long rollout alive would be wasteful.

Arrays are float64 numpy arrays. Elementwise binary ops broadcast with numpy
rules and their gradients are summed back to the operand shape.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from .errors import NonFiniteError, NonScalarLossError, ShapeError

PRIMITIVES = (
    "add",
    "sub",
    "hadamard",
    "matvec",
    "scale",
    "relu",
    "tanh",
    "sum",
    "mean",
    "square",
    "abs",
    "concat",
    "slice",
    "axpy",
)

# derivative assigned to relu at exactly 0
RELU_GRAD_AT_ZERO = 0.0


def relu_subgradient_convention() -> float:
    return RELU_GRAD_AT_ZERO


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, out: np.ndarray) -> None:
    # one reduction is cheaper than isfinite().all(); confirm before raising
    # because the sum itself may overflow
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _product_unbroadcast(g: np.ndarray, other: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """``_unbroadcast(g * other, shape)`` as one contraction, without the
    full-size temporary (the hot path of every hadamard backward)."""
    out_shape = g.shape
    nd = len(out_shape)
    if nd > len(_LETTERS):
        return _unbroadcast(g * other, shape)
    pad_o = (1,) * (nd - other.ndim) + other.shape
    pad_t = (1,) * (nd - len(shape)) + tuple(shape)
    sub_g = _LETTERS[:nd]
    sub_o = "".join(c for c, s, o in zip(sub_g, pad_o, out_shape) if not (s == 1 and o != 1))
    sub_t = "".join(c for c, s, o in zip(sub_g, pad_t, out_shape) if not (s == 1 and o != 1))
    o = other.reshape(tuple(s for s, o_ in zip(pad_o, out_shape) if not (s == 1 and o_ != 1)))
    res = np.einsum(f"{sub_g},{sub_o}->{sub_t}", g, o)
    return np.asarray(res).reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- forward rules ----------------------------------------------------------
# each takes the input values and op attributes and returns the output value


def _fwd_add(xs, attrs):
    _broadcast_shape("add", *xs)
    return xs[0] + xs[1]


def _fwd_sub(xs, attrs):
    _broadcast_shape("sub", *xs)
    return xs[0] - xs[1]


def _fwd_hadamard(xs, attrs):
    _broadcast_shape("hadamard", *xs)
    return xs[0] * xs[1]


def _fwd_matvec(xs, attrs):
    m, x = xs
    if m.ndim != 2 or x.ndim < 1 or x.shape[-1] != m.shape[1]:
        raise ShapeError(f"matvec: matrix {m.shape} cannot act on {x.shape}")
    return x @ m.T


def _fwd_scale(xs, attrs):
    return attrs["alpha"] * xs[0]


def _fwd_relu(xs, attrs):
    return np.maximum(xs[0], 0.0)


def _fwd_tanh(xs, attrs):
    return np.tanh(xs[0])


def _fwd_sum(xs, attrs):
    x, axis = xs[0], attrs["axis"]
    if axis is None or x.ndim > len(_LETTERS):
        return np.asarray(x.sum(axis=axis, keepdims=attrs["keepdims"]))
    # einsum reduces a middle axis about twice as fast as ndarray.sum
    axis = axis % x.ndim
    sub = _LETTERS[: x.ndim]
    out = np.einsum(f"{sub}->{sub.replace(sub[axis], '')}", x)
    return np.expand_dims(out, axis) if attrs["keepdims"] else np.asarray(out)


def _fwd_mean(xs, attrs):
    return np.asarray(xs[0].mean(axis=attrs["axis"], keepdims=attrs["keepdims"]))


def _fwd_square(xs, attrs):
    return xs[0] * xs[0]


def _fwd_abs(xs, attrs):
    return np.abs(xs[0])


def _fwd_concat(xs, attrs):
    try:
        return np.concatenate(xs, axis=attrs["axis"])
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc


def _fwd_slice(xs, attrs):
    return np.array(xs[0][attrs["index"]], dtype=np.float64)


def _fwd_axpy(xs, attrs):
    _broadcast_shape("axpy", *xs)
    return attrs["alpha"] * xs[0] + xs[1]


# -- backward rules ---------------------------------------------------------
# g is the adjoint of the output; ``need`` flags which inputs want a gradient


def _bwd_add(g, xs, out, attrs, need):
    return [_unbroadcast(g, x.shape) if n else None for x, n in zip(xs, need)]


def _bwd_sub(g, xs, out, attrs, need):
    return [
        _unbroadcast(g, xs[0].shape) if need[0] else None,
        _unbroadcast(-g, xs[1].shape) if need[1] else None,
    ]


def _bwd_hadamard(g, xs, out, attrs, need):
    a, b = xs
    return [
        _product_unbroadcast(g, b, a.shape) if need[0] else None,
        _product_unbroadcast(g, a, b.shape) if need[1] else None,
    ]


def _bwd_matvec(g, xs, out, attrs, need):
    m, x = xs
    gm = gx = None
    if need[0]:
        gm = g.reshape(-1, m.shape[0]).T @ x.reshape(-1, m.shape[1])
    if need[1]:
        gx = g @ m
    return [gm, gx]


def _bwd_scale(g, xs, out, attrs, need):
    return [attrs["alpha"] * g]


def _bwd_relu(g, xs, out, attrs, need):
    # strict inequality encodes relu'(0) = 0
    return [g * (xs[0] > 0.0)]


def _bwd_tanh(g, xs, out, attrs, need):
    return [g * (1.0 - out * out)]


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, xs, out, attrs, need):
    return [_expand_reduced(g, xs[0].shape, attrs["axis"], attrs["keepdims"])]


def _bwd_mean(g, xs, out, attrs, need):
    x = xs[0]
    count = x.size // max(out.size, 1)
    return [_expand_reduced(g / count, x.shape, attrs["axis"], attrs["keepdims"])]


def _bwd_square(g, xs, out, attrs, need):
    return [2.0 * xs[0] * g]


def _bwd_abs(g, xs, out, attrs, need):
    # np.sign(0) == 0: the L1 subgradient at 0 is taken as 0
    return [np.sign(xs[0]) * g]


def _bwd_concat(g, xs, out, attrs, need):
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return [p if n else None for p, n in zip(parts, need)]


def _bwd_slice(g, xs, out, attrs, need):
    full = np.zeros_like(xs[0])
    full[attrs["index"]] = g
    return [full]


def _bwd_axpy(g, xs, out, attrs, need):
    x, y = xs
    return [
        _unbroadcast(attrs["alpha"] * g, x.shape) if need[0] else None,
        _unbroadcast(g, y.shape) if need[1] else None,
    ]


_RULES: dict[str, tuple[Callable, Callable]] = {
    "add": (_fwd_add, _bwd_add),
    "sub": (_fwd_sub, _bwd_sub),
    "hadamard": (_fwd_hadamard, _bwd_hadamard),
    "matvec": (_fwd_matvec, _bwd_matvec),
    "scale": (_fwd_scale, _bwd_scale),
    "relu": (_fwd_relu, _bwd_relu),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "square": (_fwd_square, _bwd_square),
    "abs": (_fwd_abs, _bwd_abs),
    "concat": (_fwd_concat, _bwd_concat),
    "slice": (_fwd_slice, _bwd_slice),
    "axpy": (_fwd_axpy, _bwd_axpy),
}

# ops that cannot turn finite inputs into non-finite outputs
_FINITE_PRESERVING = frozenset({"relu", "tanh", "abs", "concat", "slice"})

_ARITY = {"concat": None, "add": 2, "sub": 2, "hadamard": 2, "matvec": 2, "axpy": 2}


class Var:
    """Handle to one node recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


class _OpMethods:
    """Convenience wrappers shared by both backends."""

    def record(self, op: str, *inputs, **attrs):  # pragma: no cover - overridden
        raise NotImplementedError

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def hadamard(self, a, b):
        return self.record("hadamard", a, b)

    def matvec(self, m, x):
        """``x @ m.T``: apply matrix ``m`` to every vector along the last axis."""
        return self.record("matvec", m, x)

    def scale(self, a, alpha: float):
        return self.record("scale", a, alpha=float(alpha))

    def relu(self, a):
        return self.record("relu", a)

    def tanh(self, a):
        return self.record("tanh", a)

    def sum(self, a, axis: int | None = None, keepdims: bool = False):
        return self.record("sum", a, axis=axis, keepdims=keepdims)

    def mean(self, a, axis: int | None = None, keepdims: bool = False):
        return self.record("mean", a, axis=axis, keepdims=keepdims)

    def square(self, a):
        return self.record("square", a)

    def abs(self, a):
        return self.record("abs", a)

    def concat(self, items: Sequence, axis: int = 0):
        return self.record("concat", *items, axis=axis)

    def slice(self, a, index):
        return self.record("slice", a, index=index)

    def axpy(self, alpha: float, x, y):
        """``alpha * x + y`` with a constant scalar ``alpha``."""
        return self.record("axpy", x, y, alpha=float(alpha))

    def activation(self, name: str, a):
        if name == "relu":
            return self.relu(a)
        if name == "tanh":
            return self.tanh(a)
        raise ValueError(f"unknown activation {name!r}")


def _check_op(op: str, n_inputs: int) -> None:
    if op not in _RULES:
        raise ValueError(f"unknown primitive {op!r}; expected one of {PRIMITIVES}")
    arity = _ARITY.get(op, 1)
    if arity is not None and n_inputs != arity:
        raise ShapeError(f"{op} takes {arity} input(s), got {n_inputs}")


class Eager(_OpMethods):
    """Evaluate the op vocabulary directly on arrays, recording nothing."""

    def param(self, name: str, value) -> np.ndarray:
        return _as_array(value)

    def constant(self, value) -> np.ndarray:
        return _as_array(value)

    def value(self, x) -> np.ndarray:
        return x

    def record(self, op: str, *inputs, **attrs) -> np.ndarray:
        _check_op(op, len(inputs))
        out = _RULES[op][0]([_as_array(x) for x in inputs], attrs)
        if op not in _FINITE_PRESERVING:
            _check_finite(op, out)
        return out


class Tape(_OpMethods):
    """Record of primitive ops in topological order.

    Parameters are registered by name with :meth:`param`; :meth:`backward`
    returns gradients keyed by those names.
    """

    def __init__(self, track_relu_margin: bool = False):
        self.ops: list[tuple[str, tuple[int, ...], dict[str, Any]]] = []
        self.values: list[np.ndarray] = []
        self.needs_grad: list[bool] = []
        self.params: dict[str, int] = {}
        self.track_relu_margin = track_relu_margin
        # smallest |pre-activation| seen by any relu, for kink-aware gradient checks
        self.relu_margin = np.inf

    def __len__(self) -> int:
        return len(self.values)

    def _append(self, op, ids, attrs, value, needs) -> Var:
        self.ops.append((op, ids, attrs))
        self.values.append(value)
        self.needs_grad.append(needs)
        return Var(self, len(self.values) - 1)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = _as_array(value)
        _check_finite("param", arr)
        var = self._append("param", (), {}, arr, True)
        self.params[name] = var.id
        return var

    def constant(self, value) -> Var:
        arr = _as_array(value)
        _check_finite("constant", arr)
        return self._append("const", (), {}, arr, False)

    def value(self, x: Var) -> np.ndarray:
        return x.value

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, op: str, *inputs, **attrs) -> Var:
        """Append ``op`` applied to ``inputs`` and return the new node."""
        _check_op(op, len(inputs))
        vars_ = [self._lift(x) for x in inputs]
        xs = [self.values[v.id] for v in vars_]
        out = _RULES[op][0](xs, attrs)
        if op not in _FINITE_PRESERVING:
            _check_finite(op, out)
        if op == "relu" and self.track_relu_margin and xs[0].size:
            self.relu_margin = min(self.relu_margin, float(np.abs(xs[0]).min()))
        needs = any(self.needs_grad[v.id] for v in vars_)
        return self._append(op, tuple(v.id for v in vars_), attrs, out, needs)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``loss`` with respect to every parameter."""
        loss = self._lift(loss)
        if self.values[loss.id].size != 1:
            raise NonScalarLossError(
                f"loss must be scalar, got shape {self.values[loss.id].shape}"
            )
        adj: list[np.ndarray | None] = [None] * (loss.id + 1)
        adj[loss.id] = np.ones_like(self.values[loss.id])
        for node in range(loss.id, -1, -1):
            g = adj[node]
            if g is None or not self.needs_grad[node]:
                continue
            op, ids, attrs = self.ops[node]
            if not ids:
                continue
            xs = [self.values[i] for i in ids]
            need = [self.needs_grad[i] for i in ids]
            grads = _RULES[op][1](g, xs, self.values[node], attrs, need)
            for i, gi in zip(ids, grads):
                if gi is None or not self.needs_grad[i]:
                    continue
                # never accumulate in place: gi may be a broadcast view
                adj[i] = gi if adj[i] is None else adj[i] + gi
        out = {}
        for name, pid in self.params.items():
            g = adj[pid] if pid < len(adj) else None
            if g is None:
                out[name] = np.zeros_like(self.values[pid])
            else:
                out[name] = np.array(g, dtype=np.float64).reshape(self.values[pid].shape)
        return out


def record_op(tape: Tape, op: str, inputs: Sequence, **attrs) -> Var:
    """Functional alias for :meth:`Tape.record`."""
    return tape.record(op, *inputs, **attrs)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)

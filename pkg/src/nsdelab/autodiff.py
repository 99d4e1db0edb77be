"""Reverse-mode automatic differentiation on a recorded tape.

Values are read-only float64 numpy arrays. Every operation appends a node to
a :class:`Tape` holding its op name, parent indices, cached value, and the
closures needed to replay and differentiate it. Nodes are appended in
evaluation order, so the node list is already a topological order and
:func:`backward` is a single reverse sweep.

Example::

    tape = Tape()
    w = tape.param(np.ones((3, 2)))
    x = tape.const(np.eye(3))
    loss = cross_entropy(x @ w, np.array([0, 1, 0]))
    (dw,) = backward(tape, loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "relu",
    "tanh",
    "softmax",
    "log",
    "sum",
    "mean",
    "squared_norm",
    "l1_norm",
    "cross_entropy",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tape:
    """Append-only computation record owned by a single forward/backward pass."""

    __slots__ = ("ops", "parents", "values", "fwds", "vjps", "params")

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.fwds: list[Callable | None] = []
        self.vjps: list[Callable | None] = []
        self.params: list[int] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _push(self, op, parents, value, fwd, vjp) -> "Var":
        self.ops.append(op)
        self.parents.append(parents)
        self.values.append(value)
        self.fwds.append(fwd)
        self.vjps.append(vjp)
        return Var(self, len(self.ops) - 1)

    def param(self, value) -> "Var":
        """Register a differentiable leaf."""
        var = self._push("param", (), _frozen(value), None, None)
        self.params.append(var.index)
        return var

    def const(self, value) -> "Var":
        """Register a leaf that receives no gradient."""
        return self._push("const", (), _frozen(value), None, None)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves using the recorded ops."""
        out: list[np.ndarray] = []
        for op, parents, value, fwd in zip(self.ops, self.parents, self.values, self.fwds):
            if fwd is None:
                out.append(value)
            else:
                out.append(fwd(*(out[p] for p in parents)))
        return out

    def kink_signature(self) -> tuple[bytes, ...]:
        """Sign pattern at every non-differentiable op (relu, l1)."""
        sig = []
        for op, parents in zip(self.ops, self.parents):
            if op in ("relu", "l1_norm"):
                x = self.values[parents[0]]
                sig.append(np.sign(x).astype(np.int8).tobytes())
        return tuple(sig)


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, op={self.tape.ops[self.index]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _record(op: str, inputs: Sequence[Var], fwd: Callable, vjp: Callable) -> Var:
    tape = inputs[0].tape
    vals = [tape.values[v.index] for v in inputs]
    value = fwd(*vals)
    value.setflags(write=False)
    return tape._push(op, tuple(v.index for v in inputs), value, fwd, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Var, b: Var) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Var:
    """Elementwise product."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check("mul", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "mul", (a, b), np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _record("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def relu(a: Var) -> Var:
    # gradient at exactly 0 is 0
    return _record(
        "relu", (a,), lambda x: np.maximum(x, 0.0),
        lambda g, out, x: (g * (x > 0),),
    )


def tanh(a: Var) -> Var:
    return _record("tanh", (a,), np.tanh, lambda g, out, x: (g * (1.0 - out * out),))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    return _record("log", (a,), np.log, lambda g, out, x: (g / x,))


def softmax(a: Var) -> Var:
    """Softmax over the last axis."""

    def fwd(x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def vjp(g, out, x):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), fwd, vjp)


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _record(
        "matmul", (a, b), np.matmul,
        lambda g, out, x, y: (g @ y.T, x.T @ g),
    )


def concat(xs: Sequence, axis: int = -1) -> Var:
    """Concatenate along the last axis."""
    if axis != -1:
        raise ValueError("concat only supports the last axis")
    tape = _tape_of(*xs)
    vs = [_lift(tape, x) for x in xs]
    lead = vs[0].shape[:-1]
    for v in vs[1:]:
        if v.shape[:-1] != lead:
            raise ShapeError("concat", vs[0].shape, v.shape)
    cuts = np.cumsum([v.shape[-1] for v in vs])[:-1]

    def fwd(*vals):
        return np.concatenate(vals, axis=-1)

    def vjp(g, out, *vals):
        return tuple(np.split(g, cuts, axis=-1))

    return _record("concat", vs, fwd, vjp)


# ----------------------------------------------------------------- reductions


def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001
    shape = a.shape

    def vjp(g, out, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), lambda x: np.asarray(np.sum(x, axis=axis), dtype=np.float64), vjp)


def mean(a: Var, axis: int | None = None) -> Var:
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]

    def vjp(g, out, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", (a,), lambda x: np.asarray(np.mean(x, axis=axis), dtype=np.float64), vjp)


def squared_norm(a: Var) -> Var:
    """Sum of squares (scalar)."""
    return _record(
        "squared_norm", (a,), lambda x: np.asarray(np.sum(x * x)),
        lambda g, out, x: (2.0 * g * x,),
    )


def l1_norm(a: Var) -> Var:
    """Sum of absolute values (scalar); subgradient 0 at 0."""
    return _record(
        "l1_norm", (a,), lambda x: np.asarray(np.sum(np.abs(x))),
        lambda g, out, x: (g * np.sign(x),),
    )


def cross_entropy(logits: Var, targets, reduction: str = "mean") -> Var:
    """Softmax cross-entropy with integer class targets.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"``
    (one loss per row).
    """
    if logits.value.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    rows = np.arange(n)

    def per_sample(x):
        m = x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=1)) + m[:, 0]
        return lse - x[rows, targets]

    def dlogits(x):
        z = np.exp(x - x.max(axis=1, keepdims=True))
        p = z / z.sum(axis=1, keepdims=True)
        p[rows, targets] -= 1.0
        return p

    if reduction == "none":
        return _record(
            "cross_entropy", (logits,), per_sample,
            lambda g, out, x: (dlogits(x) * g[:, None],),
        )
    if reduction == "sum":
        return _record(
            "cross_entropy", (logits,), lambda x: np.asarray(per_sample(x).sum()),
            lambda g, out, x: (dlogits(x) * g,),
        )
    if reduction == "mean":
        return _record(
            "cross_entropy", (logits,), lambda x: np.asarray(per_sample(x).mean()),
            lambda g, out, x: (dlogits(x) * (g / n),),
        )
    raise ValueError(f"unknown reduction {reduction!r}")


# ------------------------------------------------------------------- backward


def backward(tape: Tape, output: Var) -> list[np.ndarray]:
    """Gradients of a scalar node with respect to every ``tape.param`` leaf.

    Returned in registration order; leaves off every path get zeros.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: list[np.ndarray | None] = [None] * (output.index + 1)
    grads[output.index] = np.ones_like(output.value)
    values, parents, vjps = tape.values, tape.parents, tape.vjps
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None or vjps[i] is None:
            continue
        ps = parents[i]
        contribs = vjps[i](g, values[i], *(values[p] for p in ps))
        for p, c in zip(ps, contribs):
            if grads[p] is None:
                grads[p] = c
            else:
                grads[p] = grads[p] + c
    out = []
    for idx in tape.params:
        g = grads[idx] if idx < len(grads) else None
        out.append(np.zeros_like(values[idx]) if g is None else np.asarray(g, dtype=np.float64))
    return out


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)
    failures: list[tuple[int, int, float]] = field(default_factory=list)


def grad_check(
    f: Callable[[Tape, list[Var]], Var],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences, coordinate by coordinate.

    ``f(tape, vars)`` builds a scalar on ``tape`` from leaves ``vars``. The
    relative error is ``|a - n| / max(|a|, |n|, floor)``. A coordinate whose
    ± perturbations land on different sides of a relu/abs kink is excluded
    rather than compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(ps):
        tape = Tape()
        vs = [tape.param(p) for p in ps]
        out = f(tape, vs)
        return tape, out

    tape, out = evaluate(params)
    analytic = backward(tape, out)
    worst = 0.0
    n_checked = 0
    excluded: list[tuple[int, int]] = []
    failures: list[tuple[int, int, float]] = []
    for pi, p in enumerate(params):
        for j in range(p.size):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[pi].flat[j] += step
            minus[pi].flat[j] -= step
            tp, op = evaluate(plus)
            tm, om = evaluate(minus)
            if tp.kink_signature() != tm.kink_signature() or tape.kink_signature() != tp.kink_signature():
                excluded.append((pi, j))
                continue
            numeric = (float(op.value) - float(om.value)) / (2.0 * step)
            a = float(analytic[pi].flat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n_checked += 1
            worst = max(worst, err)
            if err > tol:
                failures.append((pi, j, err))
    return GradCheckReport(worst, not failures, n_checked, excluded, failures)

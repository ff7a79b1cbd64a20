"""Tape-based reverse-mode differentiation over scalar primitives.

Every primitive appends one node to a :class:`Tape` holding the indices of its
operands and the local partial derivatives evaluated at the operand values.
:func:`backpropagate` walks the tape once, in reverse, accumulating adjoints.

Node values may be Python floats or numpy arrays of identical shape, in which
case each array element is an independent path and all arithmetic is
elementwise. One tape then records a whole block of Monte-Carlo paths at once.
"""
from __future__ import annotations

import math
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr

Number = Union[float, np.ndarray]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class TapeError(RuntimeError):
    """Raised on tape misuse (foreign variables, output not recorded...)."""


class Tape:
    """Append-only record of primitive operations.

    Each node is a pair ``(operand_indices, local_partials)``. Leaves have no
    operands. Operand indices are always smaller than the node index.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[int, ...], tuple[Number, ...]]] = []
        self.ops: list[str] = []
        self._generation = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def next_index(self) -> int:
        return len(self.nodes)

    def reset(self):
        """Drop all nodes. Variables recorded before the reset become invalid."""
        self.nodes.clear()
        self.ops.clear()
        self._generation += 1

    def variable(self, value: Number) -> "Var":
        """Register an input (leaf) and return its variable."""
        value = _check_finite(_as_value(value), "input")
        return self._push("input", value, (), ())

    def _push(self, op, value, operands, partials) -> "Var":
        index = len(self.nodes)
        self.nodes.append((tuple(operands), tuple(partials)))
        self.ops.append(op)
        return Var(value, index, self)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "index", "tape", "_generation")
    __array_priority__ = 100  # numpy defers to our reflected operators

    def __init__(self, value: Number, index: int, tape: Tape):
        self.value = value
        self.index = index
        self.tape = tape
        self._generation = tape._generation

    def __repr__(self):
        return f"Var({self.value!r}, index={self.index})"

    def __add__(self, other):
        return record("add", self, other)

    def __radd__(self, other):
        return record("add", other, self)

    def __sub__(self, other):
        return record("sub", self, other)

    def __rsub__(self, other):
        return record("sub", other, self)

    def __mul__(self, other):
        return record("mul", self, other)

    def __rmul__(self, other):
        return record("mul", other, self)

    def __truediv__(self, other):
        return record("div", self, other)

    def __rtruediv__(self, other):
        return record("div", other, self)

    def __neg__(self):
        return record("mul", self, -1.0)


def _as_value(x):
    if isinstance(x, np.ndarray):
        return x.astype(float, copy=False)
    return float(x)


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{op} produced a non-finite value")
    return value


def _value(x):
    return x.value if isinstance(x, Var) else _as_value(x)


def _tape_of(operands: Sequence) -> Tape:
    tape = None
    for x in operands:
        if isinstance(x, Var):
            if x._generation != x.tape._generation:
                raise TapeError("variable was recorded before a tape reset")
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    if tape is None:
        raise TapeError("at least one operand must be a recorded Var")
    return tape


def smooth_indicator(x: Number, level: float, half_width: float) -> Number:
    """Piecewise-linear ramp from 0 to 1 across ``[level - h, level + h]``.

    A call spread standing in for the digital ``1{x > level}``.
    """
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    return np.clip((np.asarray(x, dtype=float) - level + half_width) / (2.0 * half_width), 0.0, 1.0)[()]


def smooth_indicator_slope(x: Number, level: float, half_width: float) -> Number:
    """Derivative of :func:`smooth_indicator` (``1/(2h)`` strictly inside the ramp)."""
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    inside = np.abs(np.asarray(x, dtype=float) - level) < half_width
    return np.where(inside, 1.0 / (2.0 * half_width), 0.0)[()]


def smooth_max(x: Number, half_width: float) -> Number:
    """C1 smoothing of ``max(x, 0)``: quadratic on ``[-h, h]``, exact outside.

    Its derivative is ``smooth_indicator(x, 0, h)``.
    """
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    x = np.asarray(x, dtype=float)
    h = half_width
    quad = (x + h) ** 2 / (4.0 * h)
    return np.where(x >= h, x, np.where(x <= -h, 0.0, quad))[()]


def _normal_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.asarray(x) ** 2)[()]


def _eval(op, vals, params):
    """Return (value, partials wrt each operand) for a primitive."""
    if op == "add":
        a, b = vals
        return a + b, (1.0, 1.0)
    if op == "sub":
        a, b = vals
        return a - b, (1.0, -1.0)
    if op == "mul":
        a, b = vals
        return a * b, (b, a)
    if op == "div":
        a, b = vals
        if np.any(b == 0):
            raise DomainError("division by zero")
        return a / b, (1.0 / b, -a / (b * b))
    if op == "exp":
        (a,) = vals
        with np.errstate(over="ignore"):
            v = np.exp(a)[()]
        return v, (v,)
    if op == "log":
        (a,) = vals
        if np.any(np.asarray(a) <= 0):
            raise DomainError("log of a nonpositive value")
        return np.log(a)[()], (1.0 / a,)
    if op == "sqrt":
        (a,) = vals
        if np.any(np.asarray(a) <= 0):
            raise DomainError("sqrt of a nonpositive value (derivative undefined at 0)")
        v = np.sqrt(a)[()]
        return v, (0.5 / v,)
    if op == "max-smooth":
        (a,) = vals
        h = params["half_width"]
        return smooth_max(a, h), (smooth_indicator(a, 0.0, h),)
    if op == "smooth-indicator":
        (a,) = vals
        lv, h = params["level"], params["half_width"]
        return smooth_indicator(a, lv, h), (smooth_indicator_slope(a, lv, h),)
    if op == "cdf-normal":
        (a,) = vals
        return ndtr(a)[()], (_normal_pdf(a),)
    raise ValueError(f"unknown primitive {op!r}")


_ARITY = {"add": 2, "sub": 2, "mul": 2, "div": 2, "exp": 1, "log": 1, "sqrt": 1,
          "max-smooth": 1, "smooth-indicator": 1, "cdf-normal": 1}


def record(op: str, *operands, **params) -> Var:
    """Evaluate primitive ``op`` on ``operands`` and append it to their tape.

    Operands may mix :class:`Var` and plain constants; only variables get an
    entry in the node's operand list.

    Raises:
        DomainError: log/sqrt of nonpositive values, division by zero, or a
            non-finite result.
    """
    if op not in _ARITY:
        raise ValueError(f"unknown primitive {op!r}")
    if len(operands) != _ARITY[op]:
        raise TypeError(f"{op} takes {_ARITY[op]} operand(s), got {len(operands)}")
    tape = _tape_of(operands)
    value, partials = _eval(op, [_value(x) for x in operands], params)
    _check_finite(value, op)
    idx, parts = [], []
    for x, p in zip(operands, partials):
        if isinstance(x, Var):
            idx.append(x.index)
            parts.append(p)
    return tape._push(op, value, idx, parts)


def exp(x: Var) -> Var:
    return record("exp", x)


def log(x: Var) -> Var:
    return record("log", x)


def sqrt(x: Var) -> Var:
    return record("sqrt", x)


def max_smooth(x: Var, half_width: float) -> Var:
    """Smoothed ``max(x, 0)``; the only form of max available on the tape."""
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    return record("max-smooth", x, half_width=half_width)


def indicator_smooth(x: Var, level: float, half_width: float) -> Var:
    """Tape-recorded :func:`smooth_indicator`."""
    if not half_width > 0:
        raise ValueError(f"half_width must be positive, got {half_width}")
    return record("smooth-indicator", x, level=level, half_width=half_width)


def cdf_normal(x: Var) -> Var:
    return record("cdf-normal", x)


class AdjointVector:
    """Adjoints of every tape node wrt one output."""

    def __init__(self, adjoints: list, visits: int):
        self.adjoints = adjoints
        self.visits = visits

    def __len__(self):
        return len(self.adjoints)

    def __getitem__(self, var: Union[Var, int]) -> Number:
        i = var.index if isinstance(var, Var) else var
        return self.adjoints[i]


def backpropagate(tape: Tape, output: Var) -> AdjointVector:
    """Propagate adjoints from ``output`` back to every node of ``tape``.

    One reverse sweep from the output node down to index 0; forward values are
    never recomputed. The output adjoint is seeded to 1 (elementwise for
    array-valued nodes).
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise TapeError("output is not recorded on this tape")
    if output._generation != tape._generation or output.index >= len(tape.nodes):
        raise TapeError("output is not recorded on this tape (stale after reset?)")
    adj: list = [0.0] * len(tape.nodes)
    adj[output.index] = np.ones_like(output.value) if isinstance(output.value, np.ndarray) else 1.0
    visits = 0
    nodes = tape.nodes
    for i in range(output.index, -1, -1):
        visits += 1
        a = adj[i]
        operands, partials = nodes[i]
        if not operands:
            continue
        if isinstance(a, float) and a == 0.0:
            continue
        for j, p in zip(operands, partials):
            adj[j] = adj[j] + a * p
    return AdjointVector(adj, visits)


def gradient(f, x: Sequence[float]) -> tuple[float, np.ndarray]:
    """Value and gradient of ``f(*vars)`` at point ``x`` using a fresh tape."""
    tape = Tape()
    xs = [tape.variable(v) for v in x]
    y = f(*xs)
    adj = backpropagate(tape, y)
    return y.value, np.array([adj[v] for v in xs])

"""Scalar reverse-mode differentiation on an append-only tape.

Every differentiated quantity in the pipeline is a :class:`DiffValue`: a float
plus the index of the node that produced it.  Elementary operations record
their exact local partials; heavier routines (SVD, minimal solvers, residual
vectors) record *composite* nodes through :meth:`Tape.custom`, one node per
output scalar whose partials are computed analytically in numpy.  A single
reverse sweep over the tape then yields gradients in time linear in its size.

Plain floats are accepted everywhere a ``DiffValue`` is, and functions in this
module return plain floats when none of their inputs live on a tape.  The same
pipeline code therefore runs in value-only mode, which is what the
finite-difference auditor relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when a primitive's domain contract is violated."""


TINY_DIVISOR = 1e-300
ACOS_SLACK = 1e-9


class Tape:
    """Append-only record of operations.

    Node ``i`` stores its parents (indices strictly below ``i``) and the local
    partial derivative of its value with respect to each parent.  Leaves have
    no parents.
    """

    __slots__ = ("_parents", "_partials", "_kinds")

    def __init__(self):
        self._parents: list = []
        self._partials: list = []
        self._kinds: list[str] = []

    def __len__(self):
        return len(self._parents)

    def _push(self, kind, parents, partials) -> int:
        self._parents.append(parents)
        self._partials.append(partials)
        self._kinds.append(kind)
        return len(self._parents) - 1

    def leaf(self, value: float) -> "DiffValue":
        return DiffValue(float(value), self, self._push("leaf", None, None))

    def leaves(self, values) -> np.ndarray:
        """Object array of leaves with the shape of ``values``."""
        arr = np.asarray(values, dtype=float)
        out = np.empty(arr.shape, dtype=object)
        flat = out.reshape(-1)
        for i, v in enumerate(arr.reshape(-1)):
            flat[i] = self.leaf(v)
        return out

    def node(self, kind: str, value: float, parents: tuple, partials: tuple) -> "DiffValue":
        return DiffValue(value, self, self._push(kind, parents, partials))

    def custom(self, kind: str, values, parents: Sequence, jacobian) -> list:
        """Record one composite node per entry of ``values``.

        ``jacobian[i, j]`` is the exact partial of ``values[i]`` with respect
        to ``parents[j]``.  Parents that are plain floats (or live on no tape)
        are treated as constants.  If no parent is on this tape the outputs
        are returned as plain floats.
        """
        values = np.asarray(values, dtype=float).reshape(-1)
        idx = []
        cols = []
        for j, p in enumerate(parents):
            if isinstance(p, DiffValue) and p.tape is not None:
                if p.tape is not self:
                    raise TapeError("parents live on a different tape")
                idx.append(p.index)
                cols.append(j)
        if not idx:
            return [float(v) for v in values]
        jac = np.asarray(jacobian, dtype=float).reshape(len(values), len(parents))[:, cols]
        pidx = np.asarray(idx, dtype=np.int64)
        uniq, inverse = np.unique(pidx, return_inverse=True)
        if len(uniq) != len(pidx):
            merged = np.zeros((jac.shape[0], len(uniq)))
            for c, u in enumerate(inverse):
                merged[:, u] += jac[:, c]
            jac = merged
            pidx = uniq
        out = []
        for i, v in enumerate(values):
            out.append(DiffValue(float(v), self, self._push(kind, pidx, jac[i].copy())))
        return out

    def push_rows(self, kind: str, values, index_rows, jac_rows) -> list:
        """Fast path for many composite nodes with pre-resolved parents.

        ``index_rows[i]`` holds tape indices of the parents of output ``i``,
        with -1 marking constants; indices within a row must be distinct.
        """
        values = np.asarray(values, dtype=float).reshape(-1)
        index_rows = np.asarray(index_rows, dtype=np.int64)
        jac_rows = np.asarray(jac_rows, dtype=float)
        out = []
        for v, idx, jac in zip(values, index_rows, jac_rows):
            keep = idx >= 0
            out.append(DiffValue(float(v), self, self._push(kind, idx[keep], jac[keep])))
        return out

    def backward(self, loss: "DiffValue") -> np.ndarray:
        """Adjoint of ``loss`` with respect to every node, in one reverse sweep."""
        n = len(self._parents)
        adj = np.zeros(n)
        if not isinstance(loss, DiffValue) or loss.tape is not self:
            return adj
        adj[loss.index] = 1.0
        parents = self._parents
        partials = self._partials
        for i in range(loss.index, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            p = parents[i]
            if p is None:
                continue
            w = partials[i]
            if type(p) is tuple:
                for j, d in zip(p, w):
                    adj[j] += a * d
            else:
                adj[p] += a * w
        return adj

    def gradient(self, loss: "DiffValue", wrt) -> np.ndarray:
        """Gradient of ``loss`` with respect to the leaves in ``wrt`` (any shape)."""
        adj = self.backward(loss)
        wrt_arr = np.asarray(wrt, dtype=object)
        out = np.zeros(wrt_arr.shape)
        flat = out.reshape(-1)
        for i, v in enumerate(wrt_arr.reshape(-1)):
            if isinstance(v, DiffValue) and v.tape is self:
                flat[i] = adj[v.index]
        return out


def _other(x):
    if isinstance(x, DiffValue):
        return x.value, x.tape, x.index
    return float(x), None, -1


def _binary(kind, a, b, value, da, db):
    av, at, ai = _other(a)
    bv, bt, bi = _other(b)
    tape = at or bt
    if tape is None:
        return value
    if at is not None and bt is not None:
        if at is not bt:
            raise TapeError("operands live on different tapes")
        return tape.node(kind, value, (ai, bi), (da, db))
    if at is not None:
        return tape.node(kind, value, (ai,), (da,))
    return tape.node(kind, value, (bi,), (db,))


class DiffValue:
    """A float that remembers which tape node produced it."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: float, tape: Tape | None = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self):
        return f"DiffValue({self.value!r}, node={self.index})"

    def __float__(self):
        return float(self.value)

    def __add__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented  # let numpy broadcast elementwise
        ov = other.value if isinstance(other, DiffValue) else other
        return _binary("add", self, other, self.value + ov, 1.0, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        ov = other.value if isinstance(other, DiffValue) else other
        return _binary("sub", self, other, self.value - ov, 1.0, -1.0)

    def __rsub__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        return _binary("sub", other, self, other - self.value, 1.0, -1.0)

    def __mul__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        ov = other.value if isinstance(other, DiffValue) else float(other)
        return _binary("mul", self, other, self.value * ov, ov, self.value)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        ov = other.value if isinstance(other, DiffValue) else float(other)
        if abs(ov) < TINY_DIVISOR:
            raise TapeError("division by a value indistinguishable from zero")
        q = self.value / ov
        return _binary("div", self, other, q, 1.0 / ov, -q / ov)

    def __rtruediv__(self, other):
        if isinstance(other, np.ndarray):
            return NotImplemented
        if abs(self.value) < TINY_DIVISOR:
            raise TapeError("division by a value indistinguishable from zero")
        q = float(other) / self.value
        return _binary("div", other, self, q, 1.0 / self.value, -q / self.value)

    def __neg__(self):
        return self.tape.node("neg", -self.value, (self.index,), (-1.0,)) if self.tape else -self.value

    def __pos__(self):
        return self

    def __pow__(self, exponent):
        if isinstance(exponent, DiffValue):
            return exp(exponent * log(self))
        p = float(exponent)
        v = self.value ** p
        d = p * self.value ** (p - 1.0) if p != 0.0 else 0.0
        return _unary("pow", self, v, d)

    def __abs__(self):
        s = 1.0 if self.value > 0 else (-1.0 if self.value < 0 else 0.0)
        return _unary("abs", self, abs(self.value), s)

    # comparisons act on values so ordinary control flow keeps working
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)


def _unary(kind, x, value, d):
    if isinstance(x, DiffValue) and x.tape is not None:
        return x.tape.node(kind, value, (x.index,), (d,))
    return value


def value_of(x):
    """Float value of a DiffValue or number; arrays are mapped elementwise."""
    if isinstance(x, DiffValue):
        return x.value
    if isinstance(x, np.ndarray) and x.dtype == object:
        flat = [v.value if isinstance(v, DiffValue) else float(v) for v in x.flat]
        return np.array(flat, dtype=float).reshape(x.shape)
    if isinstance(x, (list, tuple)):
        return np.array([value_of(v) for v in x], dtype=float)
    return x


def tape_of(*xs) -> Tape | None:
    """First tape found among the arguments (which may be nested sequences)."""
    for x in xs:
        if isinstance(x, DiffValue):
            if x.tape is not None:
                return x.tape
        elif isinstance(x, np.ndarray) and x.dtype == object:
            for v in x.reshape(-1):
                if isinstance(v, DiffValue) and v.tape is not None:
                    return v.tape
        elif isinstance(x, (list, tuple)):
            t = tape_of(*x)
            if t is not None:
                return t
    return None


def indices_of(xs) -> tuple:
    """(tape, index array) for a flat sequence; constants get index -1."""
    tape = None
    idx = np.full(len(xs), -1, dtype=np.int64)
    for i, x in enumerate(xs):
        if isinstance(x, DiffValue) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
            idx[i] = x.index
    return tape, idx


def custom(kind: str, values, parents: Sequence, jacobian) -> list:
    """Composite node on whatever tape the parents live on (floats if none)."""
    tape = tape_of(list(parents))
    if tape is None:
        return [float(v) for v in np.asarray(values, dtype=float).reshape(-1)]
    return tape.custom(kind, values, parents, jacobian)


# elementary functions ----------------------------------------------------


def sqrt(x):
    v = math.sqrt(value_of(x))
    if not isinstance(x, DiffValue):
        return v
    if v == 0.0:
        raise TapeError("sqrt is not differentiable at 0")
    return _unary("sqrt", x, v, 0.5 / v)


def exp(x):
    v = math.exp(value_of(x))
    return _unary("exp", x, v, v) if isinstance(x, DiffValue) else v


def log(x):
    xv = value_of(x)
    if xv <= 0.0:
        raise TapeError("log of a nonpositive value")
    return _unary("log", x, math.log(xv), 1.0 / xv) if isinstance(x, DiffValue) else math.log(xv)


def sin(x):
    xv = value_of(x)
    return _unary("sin", x, math.sin(xv), math.cos(xv)) if isinstance(x, DiffValue) else math.sin(xv)


def cos(x):
    xv = value_of(x)
    return _unary("cos", x, math.cos(xv), -math.sin(xv)) if isinstance(x, DiffValue) else math.cos(xv)


def tan(x):
    xv = value_of(x)
    t = math.tan(xv)
    return _unary("tan", x, t, 1.0 + t * t) if isinstance(x, DiffValue) else t


def atan2(y, x):
    yv, xv = value_of(y), value_of(x)
    v = math.atan2(yv, xv)
    r2 = xv * xv + yv * yv
    if r2 == 0.0:
        return _binary("atan2", y, x, v, 0.0, 0.0)
    return _binary("atan2", y, x, v, xv / r2, -yv / r2)


def acos(x):
    """Arc cosine with a clamp.

    Arguments within 1e-9 outside [-1, 1] are clamped; the derivative is then
    taken at the clamped point with the radicand floored, so it stays finite.
    """
    xv = value_of(x)
    if xv > 1.0 + ACOS_SLACK or xv < -1.0 - ACOS_SLACK:
        raise TapeError(f"acos argument {xv!r} outside [-1, 1]")
    c = min(1.0, max(-1.0, xv))
    v = math.acos(c)
    if not isinstance(x, DiffValue):
        return v
    rad = max(1.0 - c * c, 1e-30)
    return _unary("acos", x, v, -1.0 / math.sqrt(rad))


def minimum(a, b):
    """Subgradient routes to the smaller argument; ties go to ``a``."""
    return a if value_of(a) <= value_of(b) else b


def maximum(a, b):
    """Subgradient routes to the larger argument; ties go to ``a``."""
    return a if value_of(a) >= value_of(b) else b


def dsum(xs: Iterable):
    """Sum as a single node (cheaper than chained additions)."""
    xs = list(xs)
    total = float(sum(value_of(x) for x in xs))
    return custom("sum", [total], xs, np.ones((1, len(xs))))[0]


def dot(a: Sequence, b: Sequence):
    a = list(a)
    b = list(b)
    av = np.array([value_of(x) for x in a])
    bv = np.array([value_of(x) for x in b])
    jac = np.concatenate([bv, av])[None, :]
    return custom("dot", [float(av @ bv)], a + b, jac)[0]


def softmax(xs: Sequence, temperature: float = 1.0) -> list:
    """Softmax of ``xs / temperature`` as N composite nodes."""
    xs = list(xs)
    v = np.array([value_of(x) for x in xs]) / temperature
    y = np.exp(v - v.max())
    y /= y.sum()
    jac = (np.diag(y) - np.outer(y, y)) / temperature
    return custom("softmax", y, xs, jac)


def straight_through(forward_value, surrogate):
    """Forward value of ``forward_value``, gradient of ``surrogate``.

    Equivalent to ``forward + surrogate - stop_gradient(surrogate)``: the
    adjoint reaching the output is routed entirely to ``surrogate``.
    """
    fv = float(value_of(forward_value))
    if isinstance(surrogate, DiffValue) and surrogate.tape is not None:
        return surrogate.tape.node("st", fv, (surrogate.index,), (1.0,))
    return fv


# finite-difference auditor -----------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: list = field(default_factory=list)

    @property
    def worst_index(self) -> int:
        err = _rel_err(self.analytic, self.numeric)
        err[self.skipped] = 0.0
        return int(np.argmax(err)) if err.size else -1


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def gradient(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    tape = Tape()
    leaves = tape.leaves(x)
    out = f(leaves)
    return float(value_of(out)), tape.gradient(out, leaves)


def grad_check(f: Callable, x, h: float | np.ndarray = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of ``f`` with central differences.

    ``f`` is called once with an object array of leaves and ``2 * x.size``
    times with plain float arrays.  Coordinates whose perturbed evaluation
    raises are skipped and listed in the report.
    """
    x = np.asarray(x, dtype=float)
    _, analytic = gradient(f, x)
    steps = np.broadcast_to(np.asarray(h, dtype=float), x.shape).reshape(-1)
    numeric = np.zeros(x.size)
    skipped = []
    flat = x.reshape(-1)
    for i in range(x.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += steps[i]
        xm[i] -= steps[i]
        try:
            fp = float(value_of(f(xp.reshape(x.shape))))
            fm = float(value_of(f(xm.reshape(x.shape))))
        except Exception:
            skipped.append(i)
            continue
        numeric[i] = (fp - fm) / (2.0 * steps[i])
    a = analytic.reshape(-1)
    err = _rel_err(a, numeric)
    if skipped:
        err[skipped] = 0.0
    return GradCheckReport(float(err.max()) if err.size else 0.0, a, numeric, skipped)

"""Reverse-mode gradients over dense float64 matrices.

Only the primitives the matching losses need are provided. Every value is a
2-D float64 array (scalars are 1x1). Operations on :class:`Var` objects are
recorded on the :class:`Tape` that owns them; ``Tape.backward`` replays the
record in reverse and fills ``.grad`` on every leaf.

There is no global state: each tape is an independent object, so separate
training runs never share anything.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

MASK_FILL = np.finfo(np.float64).min


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class GradCheckError(RuntimeError):
    def __init__(self, message: str, input_index: int, coord: tuple[int, ...]):
        super().__init__(message)
        self.input_index = input_index
        self.coord = coord


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self._nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._leaves: list[Var] = []

    def leaf(self, value, requires_grad: bool = True) -> Var:
        v = Var(_as_matrix(value).copy(), self, requires_grad)
        if requires_grad:
            self._leaves.append(v)
        return v

    def const(self, value) -> Var:
        return Var(_as_matrix(value), self, False)

    def record(self, value: np.ndarray, parents: tuple[Var, ...], vjp: Callable) -> Var:
        needs = any(p.requires_grad for p in parents)
        out = Var(value, self, needs)
        if needs:
            self._nodes.append((out, parents, vjp))
        return out

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, out: Var) -> None:
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if out.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 output, got {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones((1, 1))}
        for node, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"internal: gradient {pg.shape} for input {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.value) if g is None else g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("cannot mix values from different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Var, b: Var, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "add")
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "sub")
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


# -- elementwise nonlinearities -----------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    y = _sigmoid(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0):
        raise ValueError("log of a non-positive value")
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def relu(a: Var) -> Var:
    """Hinge ``[x]_+``; the subgradient at exactly 0 is taken as 0."""
    av = a.value
    active = av > 0
    return a.tape.record(np.where(active, av, 0.0), (a,), lambda g: (g * active,))


def clamp(a: Var, lo: float, hi: float) -> Var:
    av = a.value
    inside = (av > lo) & (av < hi)
    return a.tape.record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def detach(a: Var) -> Var:
    return a.tape.const(a.value.copy())


# -- row reductions -----------------------------------------------------------


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    excluded = np.isneginf(x)
    if mask is not None:
        excluded = excluded | mask
    if np.any(excluded.all(axis=1)):
        rows = np.flatnonzero(excluded.all(axis=1)).tolist()
        raise DegenerateRowError(f"softmax over fully masked rows {rows}")
    z = np.where(excluded, MASK_FILL, x)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(excluded, 0.0, np.exp(z))
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(a: Var) -> Var:
    """Per-row ``log sum exp``, shape (m, 1)."""
    if a.shape[1] == 0:
        raise ShapeError("logsumexp over an empty row")
    av = a.value
    y = _logsumexp(av)
    return a.tape.record(y, (a,), lambda g: (g * np.exp(av - y),))


def softmax_rows(a: Var, mask: np.ndarray | None = None) -> Var:
    """Row softmax. Positions flagged in ``mask`` (or equal to -inf) get exactly 0."""
    y = _softmax(a.value, mask)
    return a.tape.record(
        y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def l2_normalize_rows(a: Var) -> Var:
    av = a.value
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        rows = np.flatnonzero(norms[:, 0] == 0.0).tolist()
        raise DegenerateRowError(f"cannot normalize zero rows {rows}")
    y = av / norms
    return a.tape.record(
        y, (a,), lambda g: ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,))


def total(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(np.array([[a.value.sum()]]), (a,),
                         lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    if n == 0:
        raise ShapeError("mean of an empty matrix")
    return a.tape.record(np.array([[a.value.mean()]]), (a,),
                         lambda g: (np.full(shape, g[0, 0] / n),))


# -- indexing -----------------------------------------------------------------


def take_rows(a: Var, rows: Sequence[int] | np.ndarray) -> Var:
    """Masked-select of whole rows (gradients scatter back)."""
    idx = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx], (a,), vjp)


def gather(a: Var, cols: Sequence[int] | np.ndarray) -> Var:
    """Column ``cols[i]`` of row ``i``, shape (m, 1)."""
    idx = np.asarray(cols, dtype=np.intp)
    m = a.shape[0]
    if idx.shape != (m,):
        raise ShapeError(f"gather needs {m} column indices, got shape {idx.shape}")
    rows = np.arange(m)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g[:, 0]
        return (out,)

    return a.tape.record(a.value[rows, idx].reshape(m, 1), (a,), vjp)


def diag(a: Var) -> Var:
    m, n = a.shape
    if m != n:
        raise ShapeError(f"diag needs a square matrix, got {a.shape}")
    return gather(a, np.arange(m))


# -- plain-array conveniences ---------------------------------------------------


def logsumexp_row(row) -> float:
    x = np.asarray(row, dtype=np.float64).reshape(1, -1)
    if x.shape[1] == 0:
        raise ShapeError("logsumexp over an empty row")
    return float(_logsumexp(x)[0, 0])


def softmax_row(row, mask=None) -> np.ndarray:
    x = np.asarray(row, dtype=np.float64).reshape(1, -1)
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    return _softmax(x, m)[0]


def sigmoid_array(x) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64))


def softmax_array(x, mask=None) -> np.ndarray:
    return _softmax(_as_matrix(x), mask)


def logsumexp_array(x) -> np.ndarray:
    return _logsumexp(_as_matrix(x))[:, 0]


# -- finite-difference check ----------------------------------------------------


def grad_check(f: Callable[..., Var], inputs: Sequence, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives one :class:`Var` per input and must return a 1x1 Var.
    Returns ``max |analytic - numeric| / max(1, |analytic|, |numeric|)`` over
    every coordinate of every input.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    arrays = [_as_matrix(x).copy() for x in inputs]

    tape = Tape()
    leaves = [tape.leaf(x) for x in arrays]
    out = f(*leaves)
    tape.backward(out)
    analytic = [leaf.grad for leaf in leaves]

    def evaluate(k: int, coord: tuple[int, ...]) -> float:
        probe = Tape()
        try:
            value = f(*[probe.const(x) for x in arrays]).item()
        except (ValueError, FloatingPointError) as exc:
            raise GradCheckError(
                f"loss undefined when perturbing input {k} at {coord}: {exc}", k, coord) from exc
        if not np.isfinite(value):
            raise GradCheckError(
                f"non-finite loss when perturbing input {k} at {coord}", k, coord)
        return value

    worst = 0.0
    for k, x in enumerate(arrays):
        for coord in np.ndindex(x.shape):
            orig = x[coord]
            x[coord] = orig + eps
            up = evaluate(k, coord)
            x[coord] = orig - eps
            down = evaluate(k, coord)
            x[coord] = orig
            num = (up - down) / (2.0 * eps)
            ana = analytic[k][coord]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst

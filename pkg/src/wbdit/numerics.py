"""Dense float64 arithmetic and a small reverse-mode differentiation tape.

Every op in this module accepts plain ``numpy`` arrays or :class:`Var`
handles. Plain arrays are evaluated eagerly and nothing is recorded; as
soon as one argument is a ``Var`` the result is recorded on that variable's
:class:`Tape` so :func:`backward` can later push gradients through it.

Arrays may carry leading batch axes. Matrix-shaped ops act on the last two
axes and broadcast over the rest, so a ``(d, d)`` parameter can multiply a
``(batch, d, n)`` stack of token matrices.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Matrix = np.ndarray

__all__ = [
    "Matrix",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "ShapeError",
    "Rng",
    "Tape",
    "Var",
    "add",
    "as_matrix",
    "backward",
    "getitem",
    "logdet_psd",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "softmax_columns",
    "square",
    "sub",
    "sum",
    "transpose",
    "value_of",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""


# --------------------------------------------------------------------------
# Random numbers


class Rng:
    """Deterministic random stream.

    Bits come from PCG64 seeded through ``numpy.random.SeedSequence``;
    Gaussians use NumPy's ziggurat sampler (``Generator.standard_normal``).
    Both are fixed algorithms, so a seed reproduces the stream bit for bit.
    """

    algorithm = "PCG64+ziggurat"

    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent child stream addressed by ``(seed, *keys)``."""
        return cls([int(seed), *(int(k) for k in keys)])

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in ``[low, high]`` (inclusive)."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gamma(self, shape, scale, size=None) -> np.ndarray:
        return self._gen.gamma(shape, scale, size=size)

    def poisson(self, lam, size=None) -> np.ndarray:
        return self._gen.poisson(lam, size=size)

    def multinomial_labels(self, n: int, weights) -> np.ndarray:
        return self._gen.choice(len(weights), size=n, p=weights)


# --------------------------------------------------------------------------
# Tape


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100.0  # make ndarray <op> Var defer to Var

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

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

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Tape:
    """Append-only record of operations in evaluation order.

    Nodes are appended as they are computed, so the list is already in
    topological order and :func:`backward` only has to walk it in reverse.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple] = []
        self.rules: list[BackwardFn | None] = []
        self.is_param: list[bool] = []

    def __len__(self):
        return len(self.values)

    def _append(self, value, parents, rule, is_param=False) -> Var:
        node_id = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.rules.append(rule)
        self.is_param.append(is_param)
        return Var(self, node_id, value)

    def parameter(self, value) -> Var:
        """Leaf whose gradient :func:`backward` returns."""
        return self._append(_checked(np.array(value, dtype=np.float64)), (), None, True)

    def constant(self, value) -> Var:
        return self._append(_checked(np.asarray(value, dtype=np.float64)), (), None)

    def record(self, value: np.ndarray, inputs: tuple, rule: BackwardFn) -> Var:
        parents = tuple(x.id if isinstance(x, Var) else None for x in inputs)
        return self._append(_checked(value), parents, rule)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter node on ``tape``.

    Returns a mapping from parameter node id to a gradient of the same
    shape. Parameters that the loss does not depend on get zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.id] = np.ones_like(loss.value)
    for node in range(loss.id, -1, -1):
        g = grads[node]
        rule = tape.rules[node]
        if g is None or rule is None:
            continue
        parents = tape.parents[node]
        needs = tuple(p is not None for p in parents)
        for pid, pg in zip(parents, rule(g, needs)):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    out = {}
    for node, flag in enumerate(tape.is_param):
        if flag:
            g = grads[node]
            out[node] = np.zeros_like(tape.values[node]) if g is None else g
    return out


# --------------------------------------------------------------------------
# helpers


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def as_matrix(x) -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    m = np.array(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return _checked(m)


def _checked(v: np.ndarray) -> np.ndarray:
    if not np.isfinite(v).all():
        raise NonFiniteError("operation produced non-finite values")
    return v


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = a.tape
    return tape


def _emit(value, inputs, rule):
    tape = _tape_of(*inputs)
    if tape is None:
        return _checked(value)
    return tape.record(value, inputs, rule)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# ops


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def rule(g, needs):
        ga = _unbroadcast(np.matmul(g, _swap(bv)), av.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(_swap(av), g), bv.shape) if needs[1] else None
        return ga, gb

    return _emit(out, (a, b), rule)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def rule(g, needs):
        return (
            _unbroadcast(g, av.shape) if needs[0] else None,
            _unbroadcast(g, bv.shape) if needs[1] else None,
        )

    return _emit(out, (a, b), rule)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv

    def rule(g, needs):
        return (
            _unbroadcast(g, av.shape) if needs[0] else None,
            _unbroadcast(-g, bv.shape) if needs[1] else None,
        )

    return _emit(out, (a, b), rule)


def mul(a, b):
    """Elementwise product with broadcasting (scalars included)."""
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def rule(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return _emit(out, (a, b), rule)


def neg(a):
    return _emit(-value_of(a), (a,), lambda g, needs: (-g,))


def square(a):
    av = value_of(a)
    return _emit(av * av, (a,), lambda g, needs: (2.0 * av * g,))


def transpose(a):
    """Swap the last two axes."""
    return _emit(_swap(value_of(a)), (a,), lambda g, needs: (_swap(g),))


def reshape(a, shape):
    av = value_of(a)
    return _emit(av.reshape(shape), (a,), lambda g, needs: (g.reshape(av.shape),))


def getitem(a, idx):
    """Basic (slice/int) indexing."""
    av = value_of(a)

    def rule(g, needs):
        full = np.zeros_like(av)
        full[idx] = g
        return (full,)

    return _emit(av[idx], (a,), rule)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def rule(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), rule)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def relu(a):
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    av = value_of(a)
    mask = av > 0
    return _emit(np.where(mask, av, 0.0), (a,), lambda g, needs: (g * mask,))


def softmax_columns(a):
    """Softmax down each column (axis -2), stabilized by the column max."""
    av = value_of(a)
    shifted = av - av.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-2, keepdims=True)

    def rule(g, needs):
        return (y * (g - (g * y).sum(axis=-2, keepdims=True)),)

    return _emit(y, (a,), rule)


def logdet_psd(a):
    """``log det`` of a symmetric positive-definite matrix via Cholesky."""
    av = value_of(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"logdet_psd needs a square matrix, got {av.shape}")
    scale = max(1.0, float(np.abs(av).max(initial=0.0)))
    if not np.allclose(av, av.T, rtol=0.0, atol=1e-10 * scale):
        raise NotPositiveDefiniteError("logdet_psd input is not symmetric")
    try:
        chol = np.linalg.cholesky(av)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None
    out = np.asarray(2.0 * np.log(np.diag(chol)).sum())

    def rule(g, needs):
        inv_l = np.linalg.inv(chol)
        return (g * (inv_l.T @ inv_l),)

    return _emit(out, (a,), rule)

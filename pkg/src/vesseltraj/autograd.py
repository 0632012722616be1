"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations executed while a :class:`Tape` is active are recorded in order;
``backward`` replays them in exact reverse recording order. Outside a tape
every op is a plain numpy computation, which is what inference uses.

Shapes are always explicit. The only implicit broadcast is tensor-by-scalar
(:func:`scale`); row-wise bias addition and repetition along an axis are
their own named ops (:func:`add_bias`, :func:`expand`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use slice(tensor, start, stop, axis) for differentiable slicing")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


@dataclass
class Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    records: list[Record] = field(default_factory=list)
    # Leaves whose incoming gradient gets negated; used only as a negative
    # control for gradient checking.
    corrupted: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def corrupt(self, leaf: Tensor) -> None:
        self.corrupted.add(id(leaf))

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = len(tape.records)
        out.tape = tape
        tape.records.append(Record(op, out, inputs, rule))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {list(loss.shape)}")
    tape = tape or loss.tape
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data), tape)
            return
        raise ContractError("loss was not produced on an active tape")
    if loss.tape is not tape:
        raise ContractError("loss belongs to a different tape")
    pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss.node + 1]):
        g = pending.pop(rec.out.node, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None or inp.tape is not tape:
                _accumulate(inp, gi, tape)
            elif inp.node in pending:
                pending[inp.node] = pending[inp.node] + gi
            else:
                pending[inp.node] = gi


def _accumulate(leaf: Tensor, g: np.ndarray, tape: Tape | None) -> None:
    if tape is not None and id(leaf) in tape.corrupted:
        g = -g
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True).reshape(leaf.shape)
    else:
        leaf.grad += g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data

    def rule(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record("matmul", ad @ bd, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` for x (n, k), w (m, k), b (m,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {list(x.shape)} does not fit weight {list(w.shape)}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:

        def rule(g):
            return (g @ wd if x.requires_grad else None, g.T @ xd if w.requires_grad else None)

        return _record("linear", out, (x, w), rule)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {list(b.shape)} does not fit weight {list(w.shape)}")
    out += b.data

    def rule_b(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _record("linear", out, (x, w, b), rule_b)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B, m, k) x (B, k, n)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data

    def rule(g):
        return (
            g @ bd.transpose(0, 2, 1) if a.requires_grad else None,
            ad.transpose(0, 2, 1) @ g if b.requires_grad else None,
        )

    return _record("bmm", ad @ bd, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {list(a.shape)}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _record("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row: x (..., n) + b (n,)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {list(b.shape)} does not fit {list(x.shape)}")
    lead = tuple(range(x.data.ndim - 1))
    return _record("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "hadamard": mul}


def elementwise(tag: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch a pointwise op by name; ``scale`` takes a float as ``b``."""
    if tag in _UNARY:
        return _UNARY[tag](a)
    if tag in _BINARY:
        if not isinstance(b, Tensor):
            raise ContractError(f"{tag} needs a second tensor")
        return _BINARY[tag](a, b)
    if tag == "scale":
        return scale(a, float(b))
    raise ContractError(f"unknown elementwise op {tag!r}")


# -- reductions and normalisation ------------------------------------------


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    return scale(sum_(a), 1.0 / a.size)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.data.ndim
    shape = a.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum_axis", a.data.sum(axis=axis), (a,), rule)


def softmax(scores: Tensor, axis: int = -1) -> Tensor:
    if scores.size == 0 or scores.data.ndim == 0:
        raise DimensionError("softmax of an empty input")
    z = scores.data - scores.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (scores,), rule)


# -- shape manipulation -----------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of nothing")
    nd = parts[0].data.ndim
    axis = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.shape[i] != parts[0].shape[i] for i in range(nd) if i != axis
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[list(q.shape) for q in parts]} on axis {axis}"
            )
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def rule(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _record("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), rule)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    nd = a.data.ndim
    axis = axis % nd
    if not (0 <= start < stop <= a.shape[axis]):
        raise DimensionError(f"slice [{start}:{stop}] out of bounds for axis {axis} of {list(a.shape)}")
    idx = [slice(None)] * nd
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record("slice", a.data[idx].copy(), (a,), rule)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("stack of nothing")
    for p in parts[1:]:
        _same_shape(parts[0], p, "stack")
    axis = axis % (parts[0].data.ndim + 1)
    n = len(parts)

    def rule(g):
        return [np.take(g, i, axis=axis) for i in range(n)]

    return _record("stack", np.stack([p.data for p in parts], axis=axis), tuple(parts), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: {list(a.shape)} cannot become {list(shape)}")
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis and repeat ``a`` ``n`` times along it."""
    axis = axis % (a.data.ndim + 1)
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _record("expand", data, (a,), lambda g: (g.sum(axis=axis),))


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    tol: float
    valid: bool = True

    @property
    def passed(self) -> bool:
        return self.valid and self.max_rel_error < self.tol

    def line(self) -> str:
        if not self.valid:
            return f"{self.name}: INVALID (function not deterministic)"
        status = "pass" if self.passed else "FAIL"
        return f"{self.name}: {status} max_rel_err={self.max_rel_error:.3e} over {self.n_checked} coords"


def grad_check(
    f: Callable[[], Tensor],
    tensors: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    eps: float = 1e-6,
    corrupt: Iterable[Tensor] = (),
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckReport]:
    """Compare tape gradients of ``f()`` with central finite differences.

    ``f`` takes no arguments and must read the current values of ``tensors``;
    it has to be deterministic (fixed masks, fixed RNG). The relative error per
    coordinate is ``|ga - gf| / (|ga| + |gf| + eps)``.
    """
    if isinstance(tensors, Tensor):
        tensors = [tensors]
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            for t in corrupt:
                tape.corrupt(t)
            loss = f()
            base = loss.item()
        tape.backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    finally:
        for t, (rg, g) in zip(tensors, saved):
            t.requires_grad, t.grad = rg, g

    deterministic = f().item() == base
    reports = []
    for t, ga in zip(tensors, analytic):
        name = t.name or "tensor"
        if not deterministic:
            reports.append(GradCheckReport(name, float("nan"), None, 0, tol, valid=False))
            continue
        coords = list(np.ndindex(*t.shape)) if t.data.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst, worst_idx = 0.0, None
        for idx in coords:
            orig = t.data[idx]
            t.data[idx] = orig + step
            fp = f().item()
            t.data[idx] = orig - step
            fm = f().item()
            t.data[idx] = orig
            gf = (fp - fm) / (2.0 * step)
            err = abs(ga[idx] - gf) / (abs(ga[idx]) + abs(gf) + eps)
            if err > worst or worst_idx is None:
                worst, worst_idx = err, idx
        reports.append(GradCheckReport(name, float(worst), worst_idx, len(coords), tol))
    return reports

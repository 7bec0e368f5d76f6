"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the kernels needed by the feature extractor, the adapter and the loss
terms are provided.  Every kernel that touches a tensor with
``requires_grad=True`` appends a node to the active :class:`Tape`;
:func:`backward` replays that tape in reverse.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_squares(x)
    >>> backward(loss, tape)
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class OracleError(RuntimeError):
    """Raised when a finite-difference oracle cannot be evaluated."""


class Tensor:
    """A dense, row-major array of doubles with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kernel: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed kernels.

    Used as a context manager it becomes the active tape; outside any
    ``with`` block a module-level default tape collects nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_DEFAULT_TAPE = Tape()
_TAPES: list[Tape] = []
_RECORDING = [True]


def current_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad():
    """Run kernels without recording; outputs never require grad."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kernel, inputs, out_values, backward_fn) -> Tensor:
    track = _RECORDING[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=track)
    if track:
        current_tape().record(Node(kernel, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kernel}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- kernels


def matmul(a, b, *, transpose_b: bool = False, fixed_order: bool = False) -> Tensor:
    """Matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``).

    With ``fixed_order`` the product avoids BLAS blocking: row ``i`` of the
    result is bit-identical to ``a[i:i+1] @ b``, and with ``transpose_b``
    column ``j`` is bit-identical to the product with row ``j`` of ``b``
    alone.  The default path goes through BLAS, which is deterministic run
    to run but not slice-stable.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ContractError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise ContractError(
            f"matmul: shapes {a.shape} and {b.shape}"
            f"{' (transposed)' if transpose_b else ''} do not conform"
        )
    av, bv = a.values, b.values
    if fixed_order:
        mm = lambda x, y: np.einsum("ik,kj->ij", x, y, optimize=False)  # noqa: E731
    else:
        mm = np.matmul
    bm = bv.T if transpose_b else bv
    out = mm(av, bm)

    def back(g):
        ga = mm(g, bm.T) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = mm(g.T, av) if transpose_b else mm(av.T, g)
        return ga, gb

    return _emit("matmul", (a, b), out, back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _emit("scale", (a,), a.values * s, lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.values > 0
    return _emit("relu", (a,), np.where(active, a.values, 0.0), lambda g: (g * active,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.values)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def sum_squares(a) -> Tensor:
    """Squared L2 norm of all entries, reduced in row-major order."""
    a = as_tensor(a)
    v = a.values
    return _emit("sum_squares", (a,), np.sum(v * v), lambda g: (2.0 * g * v,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("mean: empty tensor")
    n = a.size
    return _emit("mean", (a,), np.sum(a.values) / n,
                 lambda g: (np.full(a.shape, g / n),))


def log(a) -> Tensor:
    """Natural log of values clamped to ``[1e-12, 1 - 1e-12]``."""
    a = as_tensor(a)
    v = a.values
    clamped = np.clip(v, LOG_EPS, 1.0 - LOG_EPS)
    inside = (v >= LOG_EPS) & (v <= 1.0 - LOG_EPS)
    return _emit("log", (a,), np.log(clamped), lambda g: (np.where(inside, g / clamped, 0.0),))


def masked_select(a, mask) -> Tensor:
    """Entries of ``a`` where ``mask`` is true, as a 1-D tensor (row-major)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ContractError(f"masked_select: mask shape {mask.shape} vs tensor shape {a.shape}")

    def back(g):
        full = np.zeros(a.shape)
        full[mask] = g
        return (full,)

    return _emit("masked_select", (a,), a.values[mask], back)


def detach(a) -> Tensor:
    """Copy of ``a`` cut off from the tape."""
    return Tensor(as_tensor(a).values.copy())


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if a.values.ndim < 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ContractError(f"gather_rows: indices {idx.tolist()} out of range for shape {a.shape}")

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("gather_rows", (a,), a.values[idx], back)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None, *, trace: list | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add onto whatever is already stored; call ``zero_grad`` on the
    parameters between steps.  The tape is left intact, so calling this
    twice doubles every gradient.
    """
    if loss.size != 1 or loss.values.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape if tape is not None else current_tape()
    adjoint: dict[int, list] = {id(loss): [loss, np.ones_like(loss.values)]}
    reached: list[list] = [adjoint[id(loss)]]
    for node in reversed(tape.nodes):
        entry = adjoint.get(id(node.output))
        if entry is None:
            continue
        if trace is not None:
            trace.append(node.kernel)
        grads = node.backward(entry[1])
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            slot = adjoint.get(id(inp))
            if slot is None:
                slot = [inp, np.asarray(g, dtype=np.float64).reshape(inp.shape)]
                adjoint[id(inp)] = slot
                reached.append(slot)
            else:
                slot[1] = slot[1] + g
    for tensor, g in reached:
        tensor.grad += g


# ---------------------------------------------------------------- oracle


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               *, indices: Iterable[int] | None = None, floor: float = 1e-6) -> float:
    """Largest relative error between backward and central differences.

    Relative error per coordinate is ``|g - d| / max(|g|, |d|, floor)``, with
    ``|g - d|`` first reduced by the round-off bound of the difference
    quotient (16 ulps of ``f`` over ``2h``); without that, coordinates whose
    true gradient is ~0 would be judged on rounding alone.  ``indices`` restricts the check to flat coordinates.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"grad_check: step {step} outside [1e-7, 1e-3]")
    base = np.array(as_tensor(point).values, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ContractError(f"grad_check: fn must return a scalar, got shape {y.shape}")
        backward(y, tape)
    analytic = x.grad.reshape(-1)

    def f_at(v: np.ndarray) -> float:
        with Tape():
            out = fn(Tensor(v)).item()
        if not np.isfinite(out):
            raise OracleError(f"grad_check: fn is non-finite ({out}) at a perturbed point")
        return out

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    flat = base.reshape(-1)
    eps = np.finfo(np.float64).eps
    for i in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        f_plus, f_minus = f_at(plus.reshape(base.shape)), f_at(minus.reshape(base.shape))
        d = (f_plus - f_minus) / (2.0 * step)
        # rounding in f alone moves d by about eps*|f|/h; discount that much
        noise = 16.0 * eps * (abs(f_plus) + abs(f_minus)) / (2.0 * step)
        g = analytic[i]
        err = max(abs(g - d) - noise, 0.0) / max(abs(g), abs(d), floor)
        worst = max(worst, err)
    return worst

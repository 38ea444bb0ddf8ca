"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: while a ``Tape`` is active, every primitive that
touches a gradient-carrying tensor appends one node (output, parents, backward
rule) to the tape. ``Tape.backward`` walks the nodes once, in reverse, and
accumulates gradients into the registered leaves. Tapes are rebuilt for every
training step; nothing is cached between steps.

Only the broadcasting actually used downstream is supported: scalar-tensor,
bias rows and keepdims reductions. Gradients of broadcast operands are folded
back by summing over the broadcast axes.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

NORM_EPS = 1e-12


class Tensor:
    """N-dimensional float64 array, optionally tracked by the active tape.

    ``grad`` is populated by ``Tape.backward`` for leaves with
    ``requires_grad=True``; it always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every branch routes through the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Usable as a context manager; tapes nest, and only the innermost one
    records. ``leaf_set`` maps ``id(tensor)`` to the leaf tensors that will
    receive gradients (registered implicitly on first use, or explicitly via
    ``watch``).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_set: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> None:
        if not tensor.requires_grad:
            raise ContractError("cannot watch a tensor with requires_grad=False")
        self.leaf_set.setdefault(id(tensor), tensor)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        out.requires_grad = True
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))
        self._produced.add(id(out))
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self.leaf_set.setdefault(id(p), p)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into every registered leaf.

        Returns the gradient map keyed by ``id(tensor)``; leaves that do not
        participate in ``loss`` receive exact zeros. Also assigns ``.grad``
        on each leaf (overwriting whatever a previous pass left there).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced and id(loss) not in self.leaf_set:
            raise ContractError("loss tensor was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        result: dict[int, np.ndarray] = {}
        for key, leaf in self.leaf_set.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
            result[key] = leaf.grad
        return result


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape._record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting introduced for `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _emit(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _emit(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / b_data, a_data.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = Tensor(out_data)

    def backward(g):
        return (g * out_data,)

    return _emit(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return _emit(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    out = Tensor(out_data)

    def backward(g):
        # floor keeps a loss that bottomed out at exactly zero from emitting
        # inf; any argument above ~1e-24 is unaffected
        return (g * 0.5 / np.maximum(out_data, NORM_EPS),)

    return _emit(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))

    def backward(g):
        return (g * mask,)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (M,K)@(K,N), got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _emit(out, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B,M,K)@(B,K,N)->(B,M,N)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm needs (B,M,K)@(B,K,N), got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.transpose(0, 2, 1), a_data.transpose(0, 2, 1) @ g

    return _emit(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _emit(out, (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _emit(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(extents)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit(out, tuple(tensors), backward)


def take_index(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis`, dropping that axis."""
    out = Tensor(np.ascontiguousarray(np.take(a.data, index, axis=axis)))
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit(out, (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row range along the leading axis."""
    out = Tensor(np.ascontiguousarray(a.data[start:stop]))
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(out, (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range along an arbitrary axis."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(a.data[sl]))
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _emit(out, (a,), backward)


def tsum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _emit(out, (a,), backward)


def tmean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


# ---------------------------------------------------------------------------
# composite operations shared across the stack
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction.

    The subtracted max is treated as a constant, which is exact: softmax is
    invariant to per-row shifts, so the shift direction carries no gradient.
    """
    if not np.isfinite(x.data).all():
        raise NumericError("softmax received non-finite input")
    shift = np.max(x.data, axis=-1, keepdims=True)
    e = exp(sub(x, Tensor(shift)))
    return div(e, tsum(e, axis=x.ndim - 1, keepdims=True))


def l2_normalize(x: Tensor, axis: int, return_flags: bool = False):
    """Scale slices along `axis` to unit Euclidean norm.

    Slices whose norm falls below 1e-12 are passed through unchanged; the
    optional flag array marks them (True = degenerate).
    """
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norms = sqrt(sq)
    degenerate = norms.data < NORM_EPS
    safe = Tensor(np.where(degenerate, 1.0, 0.0))
    out = div(x, add(norms, safe)) if degenerate.any() else div(x, norms)
    if return_flags:
        return out, np.squeeze(degenerate, axis=axis)
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the active tape's backward pass from `loss`."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def _scalar_value(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    out = f(Tensor(data))
    value = out.item() if isinstance(out, Tensor) else float(out)
    return value


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare backward() against central differences for scalar-valued f.

    Returns max over entries of |analytic - numeric| / max(1e-8,
    |analytic| + |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        tape.watch(probe)
        out = f(probe)
        if out.data.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued function")
        if not np.isfinite(out.data).all():
            raise NumericError("function value is not finite at the base point")
        tape.backward(out)
    analytic = probe.grad

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = _scalar_value(f, base)
        flat[i] = orig - h
        f_minus = _scalar_value(f, base)
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check_params(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """finite_diff_check for a closure over existing leaf tensors.

    Perturbs each parameter entry in place (restoring it afterwards), so `fn`
    must be deterministic and re-entrant.
    """
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        out = fn()
        if out.data.size != 1:
            raise ContractError("finite_diff_check_params needs a scalar-valued function")
        if not np.isfinite(out.data).all():
            raise NumericError("function value is not finite at the base point")
        tape.backward(out)

    worst = 0.0
    for p in params:
        analytic = p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst

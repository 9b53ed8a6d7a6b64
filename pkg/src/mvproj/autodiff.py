"""Reverse-mode differentiation over 2-D float64 arrays.

Every value in the computation graph is a `Var` wrapping a (rows, cols)
numpy array. Operations record their parents and a backward closure;
`backward(loss)` walks the recorded graph in reverse topological order
and accumulates gradients into every grad-requiring leaf. The operation
vocabulary is deliberately small: it is exactly what the projector
mixture, router attention and losses need, nothing more.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, GraphError, ShapeError

Array = np.ndarray


def _as_matrix(value) -> Array:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    # Sum the gradient back over axes that were broadcast in the forward pass.
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")
    return out


def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


class Var:
    """Node in the recorded computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        _parents: tuple["Var", ...] = (),
        _backward: Callable[[Array], None] | None = None,
        name: str = "",
    ):
        self.value = _as_matrix(value)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad and not self._parents else "var")
        return f"Var({tag}, shape={self.shape})"

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Var":
        other = as_var(other)
        if not _broadcastable(self.shape, other.shape):
            raise ShapeError(f"add: {self.shape} vs {other.shape}")
        out_val = self.value + other.value
        a, b = self, other

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Var(out_val, _parents=(a, b), _backward=bwd)

    __radd__ = __add__

    def __neg__(self) -> "Var":
        a = self

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(-g)

        return Var(-a.value, _parents=(a,), _backward=bwd)

    def __sub__(self, other) -> "Var":
        return self + (-as_var(other))

    def __rsub__(self, other) -> "Var":
        return as_var(other) + (-self)

    def __mul__(self, other) -> "Var":
        other = as_var(other)
        if not _broadcastable(self.shape, other.shape):
            raise ShapeError(f"mul: {self.shape} vs {other.shape}")
        a, b = self, other
        out_val = a.value * b.value

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.value, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.value, b.shape))

        return Var(out_val, _parents=(a, b), _backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        other = as_var(other)
        if not _broadcastable(self.shape, other.shape):
            raise ShapeError(f"div: {self.shape} vs {other.shape}")
        a, b = self, other
        out_val = a.value / b.value

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.value, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.shape))

        return Var(out_val, _parents=(a, b), _backward=bwd)

    def __matmul__(self, other) -> "Var":
        other = as_var(other)
        if self.cols != other.rows:
            raise ShapeError(f"matmul: {self.shape} @ {other.shape}")
        a, b = self, other
        out_val = a.value @ b.value

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g @ b.value.T)
            if b.requires_grad:
                b._accumulate(a.value.T @ g)

        return Var(out_val, _parents=(a, b), _backward=bwd)

    def t(self) -> "Var":
        a = self

        def bwd(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g.T)

        return Var(a.value.T, _parents=(a,), _backward=bwd)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(value, name: str = "") -> Var:
    return Var(value, requires_grad=False, name=name)


def parameter(value, name: str = "") -> Var:
    return Var(value, requires_grad=True, name=name)


# -- reductions and elementwise maps ---------------------------------------


def vsum(a: Var, axis: int | None = None) -> Var:
    """Sum to (1,1), or over rows (axis=0 -> 1xc) / cols (axis=1 -> rx1)."""
    if axis is None:
        out_val = a.value.sum().reshape(1, 1)
    elif axis in (0, 1):
        out_val = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum: bad axis {axis}")
    src = a

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(np.broadcast_to(g, src.shape).copy())

    return Var(out_val, _parents=(src,), _backward=bwd)


def vmean(a: Var, axis: int | None = None) -> Var:
    n = a.value.size if axis is None else a.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def vlog(a: Var) -> Var:
    src = a
    out_val = np.log(a.value)

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g / src.value)

    return Var(out_val, _parents=(src,), _backward=bwd)


def vexp(a: Var) -> Var:
    src = a
    out_val = np.exp(a.value)

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g * out_val)

    return Var(out_val, _parents=(src,), _backward=bwd)


def vsqrt(a: Var) -> Var:
    src = a
    out_val = np.sqrt(a.value)

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g * 0.5 / out_val)

    return Var(out_val, _parents=(src,), _backward=bwd)


def vtanh(a: Var) -> Var:
    src = a
    out_val = np.tanh(a.value)

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g * (1.0 - out_val * out_val))

    return Var(out_val, _parents=(src,), _backward=bwd)


def vsigmoid(a: Var) -> Var:
    src = a
    out_val = 1.0 / (1.0 + np.exp(-a.value))

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g * out_val * (1.0 - out_val))

    return Var(out_val, _parents=(src,), _backward=bwd)


def vabs(a: Var) -> Var:
    """|a| with sign subgradient (0 at 0)."""
    src = a
    out_val = np.abs(a.value)

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g * np.sign(src.value))

    return Var(out_val, _parents=(src,), _backward=bwd)


def row_softmax(a: Var) -> Var:
    """Row-wise softmax. -inf entries are allowed and map to exactly 0."""
    x = a.value
    if not np.all(np.isfinite(x) | np.isneginf(x)):
        raise DegenerateInputError("softmax input must be finite or -inf")
    m = np.max(x, axis=1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateInputError("softmax row with all entries -inf")
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m)
    e[np.isneginf(x)] = 0.0
    out_val = e / e.sum(axis=1, keepdims=True)
    src = a

    def bwd(g: Array) -> None:
        if src.requires_grad:
            inner = (g * out_val).sum(axis=1, keepdims=True)
            src._accumulate(out_val * (g - inner))

    return Var(out_val, _parents=(src,), _backward=bwd)


def row_log_softmax(a: Var) -> Var:
    x = a.value
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("log-softmax input must be finite")
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_val = z - lse
    sm = np.exp(out_val)
    src = a

    def bwd(g: Array) -> None:
        if src.requires_grad:
            src._accumulate(g - sm * g.sum(axis=1, keepdims=True))

    return Var(out_val, _parents=(src,), _backward=bwd)


# -- structural ops ---------------------------------------------------------


def concat_rows(parts: Sequence[Var]) -> Var:
    parts = [as_var(p) for p in parts]
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    out_val = np.concatenate([p.value for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi, :])

    return Var(out_val, _parents=tuple(parts), _backward=bwd)


def concat_cols(parts: Sequence[Var]) -> Var:
    parts = [as_var(p) for p in parts]
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    out_val = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return Var(out_val, _parents=tuple(parts), _backward=bwd)


def slice_rows(a: Var, lo: int, hi: int) -> Var:
    if not (0 <= lo < hi <= a.rows):
        raise ShapeError(f"slice_rows [{lo}:{hi}] on {a.shape}")
    src = a

    def bwd(g: Array) -> None:
        if src.requires_grad:
            full = np.zeros_like(src.value)
            full[lo:hi, :] = g
            src._accumulate(full)

    return Var(a.value[lo:hi, :], _parents=(src,), _backward=bwd)


def slice_cols(a: Var, lo: int, hi: int) -> Var:
    if not (0 <= lo < hi <= a.cols):
        raise ShapeError(f"slice_cols [{lo}:{hi}] on {a.shape}")
    src = a

    def bwd(g: Array) -> None:
        if src.requires_grad:
            full = np.zeros_like(src.value)
            full[:, lo:hi] = g
            src._accumulate(full)

    return Var(a.value[:, lo:hi], _parents=(src,), _backward=bwd)


def cross_entropy_rows(logits: Var, targets: Array, reduction: str = "mean") -> Var:
    """-sum_j targets_ij * log softmax(logits)_ij per row, reduced over rows.

    `targets` is a constant (rows, cols) array of per-row distributions.
    """
    targets = _as_matrix(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ShapeError(f"cross_entropy: bad reduction {reduction!r}")
    x = logits.value
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("cross_entropy logits must be finite")
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logsm = z - lse
    per_row = -(targets * logsm).sum(axis=1)
    n = logits.rows
    out_val = per_row.sum() / (n if reduction == "mean" else 1)
    sm = np.exp(logsm)
    row_mass = targets.sum(axis=1, keepdims=True)
    src = logits

    def bwd(g: Array) -> None:
        if src.requires_grad:
            scale = float(g[0, 0]) / (n if reduction == "mean" else 1)
            src._accumulate(scale * (sm * row_mass - targets))

    return Var(np.array([[out_val]]), _parents=(src,), _backward=bwd)


# -- backward pass ----------------------------------------------------------


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every grad-requiring leaf."""
    if loss.value.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any recorded parameter")
    loss._accumulate(np.ones((1, 1)))
    for node in reversed(_toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # free interior gradients; leaves keep theirs


def assert_all_finite(a: Var | Array, what: str = "value") -> None:
    v = a.value if isinstance(a, Var) else a
    if not np.all(np.isfinite(v)):
        raise DegenerateInputError(f"{what} contains NaN/Inf")

"""Named parameter sets, the model-building operations, and gradient verification.

All operations return `Var` nodes so gradients can be pulled back through any
composition with `gradient()`. `finite_diff_check` is the independent oracle
used throughout the test suite: central differences against the recorded tape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import (
    ConfigError,
    DegenerateInputError,
    GraphError,
    OracleError,
    ShapeError,
    ValidationError,
)


class ParamSet:
    """Ordered map of unique parameter names to leaf Vars with gradient slots."""

    def __init__(self):
        self._vars: dict[str, Var] = {}

    def add(self, name: str, value) -> Var:
        if name in self._vars:
            raise ConfigError(f"duplicate parameter name {name!r}")
        v = ad.parameter(value, name=name)
        self._vars[name] = v
        return v

    def __getitem__(self, name: str) -> Var:
        return self._vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self._vars

    def __len__(self) -> int:
        return len(self._vars)

    def names(self) -> list[str]:
        return list(self._vars)

    def items(self) -> Iterator[tuple[str, Var]]:
        return iter(self._vars.items())

    def zero_grad(self) -> None:
        for v in self._vars.values():
            v.grad = None

    def n_scalars(self) -> int:
        return sum(v.value.size for v in self._vars.values())

    def get_values(self) -> dict[str, Array]:
        return {k: v.value.copy() for k, v in self._vars.items()}

    def set_values(self, values: dict[str, Array]) -> None:
        for k, arr in values.items():
            cur = self._vars[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != cur.value.shape:
                raise ShapeError(f"set_values {k}: {arr.shape} vs {cur.value.shape}")
            cur.value = arr.copy()

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for k, v in self._vars.items():
            out.add(k, v.value.copy())
        return out


# -- core operations ---------------------------------------------------------


def affine(x, w, b) -> Var:
    """x @ w + b with b broadcast over rows of x."""
    x, w, b = ad.as_var(x), ad.as_var(w), ad.as_var(b)
    if x.cols != w.rows:
        raise ShapeError(f"affine: x {x.shape} @ w {w.shape}")
    if b.shape != (1, w.cols):
        raise ShapeError(f"affine: bias {b.shape}, expected (1, {w.cols})")
    return x @ w + b


def softmax(v) -> Var:
    """Row-wise stabilized softmax; -inf entries map to exactly 0."""
    return ad.row_softmax(ad.as_var(v))


def sigmoid(x: float) -> float:
    """Scalar logistic function, overflow-safe on both tails."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def cosine(u, v) -> Var:
    """Cosine similarity of two equal-length row vectors."""
    u, v = ad.as_var(u), ad.as_var(v)
    if u.shape != v.shape or u.rows != 1:
        raise ShapeError(f"cosine: {u.shape} vs {v.shape}, expected matching rows")
    nu = float(np.linalg.norm(u.value))
    nv = float(np.linalg.norm(v.value))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    dot = ad.vsum(u * v)
    return dot / (ad.vsqrt(ad.vsum(u * u)) * ad.vsqrt(ad.vsum(v * v)))


def cosine_value(u: Array, v: Array) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(u @ v / (nu * nv))


def attention_block(seq: Var, params: ParamSet, n_heads: int) -> Var:
    """One multi-head self-attention block with residual connection.

    `params` must hold square projections "wq", "wk", "wv", "wo" of size d x d,
    where d is the token width of `seq` (s x d). Per head: scaled dot-product
    attention over the head's column slice; head outputs are re-concatenated,
    projected by "wo" and added back onto the input sequence.
    """
    seq = ad.as_var(seq)
    d = seq.cols
    if d % n_heads != 0:
        raise ConfigError(f"attention: {n_heads} heads do not divide width {d}")
    for name in ("wq", "wk", "wv", "wo"):
        if name not in params:
            raise ConfigError(f"attention: missing parameter {name!r}")
        if params[name].shape != (d, d):
            raise ShapeError(f"attention: {name} is {params[name].shape}, expected ({d}, {d})")
    dh = d // n_heads
    q = seq @ params["wq"]
    k = seq @ params["wk"]
    v = seq @ params["wv"]
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = (qh @ kh.t()) * (1.0 / math.sqrt(dh))
        heads.append(ad.row_softmax(scores) @ vh)
    merged = heads[0] if n_heads == 1 else ad.concat_cols(heads)
    return seq + merged @ params["wo"]


def _as_target_rows(target, n: int, c: int) -> Array:
    """Normalize a class index / index list / distribution into (n, c) rows."""
    if isinstance(target, (int, np.integer)):
        target = [int(target)] * n
    target = np.asarray(target)
    if target.ndim == 1 and target.dtype.kind in "iu":
        if len(target) != n:
            raise ShapeError(f"target: {len(target)} labels for {n} rows")
        if np.any((target < 0) | (target >= c)):
            raise ValidationError("class index out of range")
        rows = np.zeros((n, c))
        rows[np.arange(n), target] = 1.0
        return rows
    rows = ad._as_matrix(target)
    if rows.shape != (n, c):
        raise ShapeError(f"target distribution {rows.shape}, expected ({n}, {c})")
    if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-8):
        raise ValidationError("target distribution rows must be nonnegative and sum to 1")
    return rows


def cross_entropy(logits, target, reduction: str = "mean") -> Var:
    """-sum target_j log softmax(logits)_j; batches reduce over rows."""
    logits = ad.as_var(logits)
    rows = _as_target_rows(target, logits.rows, logits.cols)
    return ad.cross_entropy_rows(logits, rows, reduction=reduction)


def gradient(loss: Var, params: ParamSet) -> dict[str, Array]:
    """Backpropagate and fill every parameter's gradient slot (zeros if unused)."""
    if not isinstance(loss, Var):
        raise GraphError("loss was not produced by recorded operations")
    params.zero_grad()
    ad.backward(loss)
    out = {}
    for name, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
        out[name] = p.grad.copy()
    return out


def _scalar_of(out) -> float:
    if isinstance(out, Var):
        return out.item()
    return float(out)


def finite_diff_check(
    f: Callable[[ParamSet], Var],
    params: ParamSet,
    h: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph from `params` on every call and return a scalar
    Var. Error per coordinate is |a - c| / (|a| + |c| + 1e-12). By default all
    coordinates are swept; `n_coords` subsamples them (seeded via `rng`) for
    large parameter sets.
    """
    out1 = f(params)
    out2 = f(params)
    if _scalar_of(out1) != _scalar_of(out2):
        raise OracleError("objective is not deterministic at the evaluation point")
    if not isinstance(out1, Var):
        raise GraphError("objective did not return a recorded value")
    analytic = gradient(out1, params)

    coords = [
        (name, i, j)
        for name, p in params.items()
        for i in range(p.value.shape[0])
        for j in range(p.value.shape[1])
    ]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in picks]

    max_err = 0.0
    for name, i, j in coords:
        p = params[name]
        orig = p.value[i, j]
        p.value[i, j] = orig + h
        f_plus = _scalar_of(f(params))
        p.value[i, j] = orig - h
        f_minus = _scalar_of(f(params))
        p.value[i, j] = orig
        central = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name][i, j]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        max_err = max(max_err, err)
    return max_err

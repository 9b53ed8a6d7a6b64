"""Mixture of projector experts: router, top-K gating, residual aggregation.

The router sees a two-token sequence (projected image feature, instruction
embedding, each with a learned positional offset), runs one attention block,
mean-pools, and emits one logit per expert. Experts are affine projectors
initialized as copies of the pretrained one. Activation bookkeeping feeds the
recommendation and bias losses and, later, pruning.

Single-sample operations define the contracts; *_batch variants compute the
same arithmetic for whole batches and are cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import ConfigError, DegenerateInputError, ShapeError, StateError
from .numerics import ParamSet, affine, attention_block
from .seeding import rng_for
from .synth import FrozenBackbone


@dataclass
class MoeConfig:
    n_experts: int = 8
    k: int = 2
    n_heads: int = 2
    renormalize_residual: bool = False  # halve (V + mix) instead of the 1/(K+1) factor
    scale_counts: bool = True           # mean gate weights, not raw sums, before softmax
    cumulative_mask_mode: str = "or"    # "or" | "sum"

    def validate(self) -> None:
        if not (1 <= self.k <= self.n_experts):
            raise ConfigError(f"need 1 <= K <= N_E, got K={self.k}, N_E={self.n_experts}")
        if self.cumulative_mask_mode not in ("or", "sum"):
            raise ConfigError(f"bad cumulative_mask_mode {self.cumulative_mask_mode!r}")


class RouterState:
    """Router parameters plus its gating configuration and frozen input projector."""

    def __init__(self, params: ParamSet, v_w: Array, v_b: Array, k: int, n_experts: int, n_heads: int):
        self.params = params
        self.v_w = v_w
        self.v_b = v_b
        self.k = k
        self.n_experts = n_experts
        self.n_heads = n_heads

    @property
    def d_tok(self) -> int:
        return self.v_w.shape[1]


def make_router(backbone: FrozenBackbone, config: MoeConfig, seed: int) -> RouterState:
    config.validate()
    d = backbone.d_tok
    if backbone.d_text != d:
        raise ConfigError(
            f"router needs instruction width {backbone.d_text} to equal token width {d}"
        )
    rng = rng_for(seed, "router-init")
    ps = ParamSet()
    for name in ("wq", "wk", "wv", "wo"):
        ps.add(name, rng.normal(size=(d, d)) / math.sqrt(d))
    ps.add("pos0", 0.02 * rng.normal(size=(1, d)))
    ps.add("pos1", 0.02 * rng.normal(size=(1, d)))
    ps.add("head_w", rng.normal(size=(d, config.n_experts)) / math.sqrt(d))
    ps.add("head_b", np.zeros((1, config.n_experts)))
    return RouterState(ps, backbone.v_w, backbone.v_b, config.k, config.n_experts, config.n_heads)


class ExpertBank:
    """Expert projectors, the frozen pretrained projector, masks and activation records."""

    def __init__(self, backbone: FrozenBackbone, config: MoeConfig):
        config.validate()
        self.config = config
        self.n_experts = config.n_experts
        self.v_w = backbone.v_w
        self.v_b = backbone.v_b
        self.params = ParamSet()
        for j in range(config.n_experts):
            self.params.add(f"expert{j}_w", backbone.v_w.copy())
            self.params.add(f"expert{j}_b", backbone.v_b.copy())
        self.cumulative_mask = np.zeros(config.n_experts, dtype=np.int64)
        self.activation_counts: dict[int, Array] = {}
        self.activation_n: dict[int, int] = {}
        self.finished_tasks: set[int] = set()

    def expert(self, j: int) -> tuple[Var, Var]:
        return self.params[f"expert{j}_w"], self.params[f"expert{j}_b"]

    def project_pretrained(self, x_img: Array) -> Array:
        return np.atleast_2d(x_img) @ self.v_w + self.v_b

    def reset_expert(self, j: int) -> None:
        """Reinitialize expert j with the pretrained projector's parameters."""
        w, b = self.expert(j)
        w.value = self.v_w.copy()
        b.value = self.v_b.copy()

    def accumulate_mask(self, task_mask: Array) -> None:
        task_mask = np.asarray(task_mask, dtype=np.int64)
        if self.config.cumulative_mask_mode == "or":
            self.cumulative_mask = np.maximum(self.cumulative_mask, (task_mask != 0).astype(np.int64))
        else:
            self.cumulative_mask = self.cumulative_mask + task_mask


@dataclass
class GateVector:
    """Sparse routing weights: softmax over the K selected logits, zeros elsewhere."""

    weights: Var            # (n, N_E), rows sum to 1
    selected: Array         # (n, K) int indices, descending logit order
    logits: Var             # raw router output before masking

    @property
    def weights_value(self) -> Array:
        return self.weights.value


def router_forward(x_img, x_text, router: RouterState) -> Var:
    """Per-expert logits for one (image feature, instruction embedding) pair."""
    x_img = np.atleast_2d(np.asarray(x_img, dtype=np.float64))
    x_text = np.atleast_2d(np.asarray(x_text, dtype=np.float64))
    if x_img.shape[0] != 1 or x_text.shape[0] != 1:
        raise ShapeError("router_forward takes single rows; use router_forward_batch")
    if x_img.shape[1] != router.v_w.shape[0]:
        raise ShapeError(f"router_forward: image width {x_img.shape[1]} vs {router.v_w.shape[0]}")
    if x_text.shape[1] != router.d_tok:
        raise ShapeError(f"router_forward: text width {x_text.shape[1]} vs {router.d_tok}")
    p = router.params
    t0 = ad.constant(x_img @ router.v_w + router.v_b) + p["pos0"]
    t1 = ad.constant(x_text) + p["pos1"]
    seq = ad.concat_rows([t0, t1])
    out = attention_block(seq, p, router.n_heads)
    pooled = ad.constant(np.array([[0.5, 0.5]])) @ out
    return affine(pooled, p["head_w"], p["head_b"])


def router_forward_batch(x_img: Array, x_text: Array, router: RouterState) -> Var:
    """Batched two-token attention; same arithmetic as router_forward per row."""
    x_img = np.atleast_2d(x_img)
    x_text = np.atleast_2d(x_text)
    if x_img.shape[0] != x_text.shape[0]:
        raise ShapeError("router_forward_batch: row counts differ")
    p = router.params
    d = router.d_tok
    heads = router.n_heads
    dh = d // heads
    t0 = ad.constant(x_img @ router.v_w + router.v_b) + p["pos0"]
    t1 = ad.constant(x_text) + p["pos1"]
    q0, k0, v0 = t0 @ p["wq"], t0 @ p["wk"], t0 @ p["wv"]
    q1, k1, v1 = t1 @ p["wq"], t1 @ p["wk"], t1 @ p["wv"]
    out0_heads, out1_heads = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        q0h, q1h = ad.slice_cols(q0, lo, hi), ad.slice_cols(q1, lo, hi)
        k0h, k1h = ad.slice_cols(k0, lo, hi), ad.slice_cols(k1, lo, hi)
        v0h, v1h = ad.slice_cols(v0, lo, hi), ad.slice_cols(v1, lo, hi)
        inv = 1.0 / math.sqrt(dh)
        s00 = ad.vsum(q0h * k0h, axis=1) * inv
        s01 = ad.vsum(q0h * k1h, axis=1) * inv
        s10 = ad.vsum(q1h * k0h, axis=1) * inv
        s11 = ad.vsum(q1h * k1h, axis=1) * inv
        a0 = ad.row_softmax(ad.concat_cols([s00, s01]))
        a1 = ad.row_softmax(ad.concat_cols([s10, s11]))
        out0_heads.append(ad.slice_cols(a0, 0, 1) * v0h + ad.slice_cols(a0, 1, 2) * v1h)
        out1_heads.append(ad.slice_cols(a1, 0, 1) * v0h + ad.slice_cols(a1, 1, 2) * v1h)
    o0 = out0_heads[0] if heads == 1 else ad.concat_cols(out0_heads)
    o1 = out1_heads[0] if heads == 1 else ad.concat_cols(out1_heads)
    y0 = t0 + o0 @ p["wo"]
    y1 = t1 + o1 @ p["wo"]
    pooled = (y0 + y1) * 0.5
    return affine(pooled, p["head_w"], p["head_b"])


def top_k_gate(logits: Var, k: int) -> GateVector:
    """Keep the K largest logits per row (ties: lowest index), softmax over them.

    Entries already at -inf (e.g. pruning-masked experts) are never selected
    as long as at least one finite logit remains in the row.
    """
    n_experts = logits.cols
    if k > n_experts:
        raise ConfigError(f"top_k_gate: K={k} > N_E={n_experts}")
    vals = logits.value
    if np.any(np.isnan(vals)) or np.any(np.isposinf(vals)):
        raise DegenerateInputError("top_k_gate: logits must not contain NaN/+inf")
    if not np.all(np.any(np.isfinite(vals), axis=1)):
        raise DegenerateInputError("top_k_gate: a row has no finite logit")
    # stable argsort of the negated row -> descending order, ties by lowest index
    order = np.argsort(-vals, axis=1, kind="stable")
    selected = order[:, :k]
    keep = np.full_like(vals, -np.inf)
    np.put_along_axis(keep, selected, 0.0, axis=1)
    weights = ad.row_softmax(logits + ad.constant(keep))
    return GateVector(weights=weights, selected=selected, logits=logits)


def mixture_forward(x_img, gate: GateVector, bank: ExpertBank) -> Var:
    """Weighted sum of the selected experts' projections for one sample."""
    x = ad.constant(np.atleast_2d(x_img))
    if gate.selected.shape[0] != 1:
        raise ShapeError("mixture_forward takes a single-sample gate")
    out = None
    for j in gate.selected[0]:
        j = int(j)
        if gate.weights.value[0, j] == 0.0:
            continue
        w, b = bank.expert(j)
        term = ad.slice_cols(gate.weights, j, j + 1) * affine(x, w, b)
        out = term if out is None else out + term
    if out is None:  # all selected weights exactly zero cannot happen post-softmax
        raise StateError("gate selected no expert")
    return out


def mixture_forward_batch(x_img: Array, gate: GateVector, bank: ExpertBank) -> Var:
    """Dense batched mixture; unselected experts contribute exactly zero."""
    x = ad.constant(np.atleast_2d(x_img))
    out = None
    for j in range(bank.n_experts):
        w, b = bank.expert(j)
        term = ad.slice_cols(gate.weights, j, j + 1) * affine(x, w, b)
        out = term if out is None else out + term
    return out


def translate_train(x_img, x_text, router: RouterState, bank: ExpertBank) -> tuple[Var, GateVector]:
    """Training-time forward: residual average of pretrained and expert tokens."""
    gate = top_k_gate(router_forward(x_img, x_text, router), router.k)
    mix = mixture_forward(x_img, gate, bank)
    vx = ad.constant(bank.project_pretrained(x_img))
    denom = 2.0 if bank.config.renormalize_residual else float(router.k + 1)
    return (vx + mix) * (1.0 / denom), gate


def translate_train_batch(
    x_img: Array, x_text: Array, router: RouterState, bank: ExpertBank, logit_mask: Array | None = None
) -> tuple[Var, GateVector]:
    logits = router_forward_batch(x_img, x_text, router)
    if logit_mask is not None:
        logits = logits + ad.constant(np.where(np.asarray(logit_mask) != 0, 0.0, -np.inf)[None, :])
    gate = top_k_gate(logits, router.k)
    mix = mixture_forward_batch(x_img, gate, bank)
    vx = ad.constant(bank.project_pretrained(x_img))
    denom = 2.0 if bank.config.renormalize_residual else float(router.k + 1)
    return (vx + mix) * (1.0 / denom), gate


def record_activation(bank: ExpertBank, gate: GateVector, task_id: int) -> None:
    """Add the gate weights (full vectors, zeros included) into the task's record."""
    if task_id in bank.finished_tasks:
        raise StateError(f"task {task_id} already finished; cannot record activations")
    w = gate.weights_value
    counts = bank.activation_counts.setdefault(task_id, np.zeros(bank.n_experts))
    counts += w.sum(axis=0)
    bank.activation_n[task_id] = bank.activation_n.get(task_id, 0) + w.shape[0]


def finish_task(bank: ExpertBank, task_id: int) -> None:
    bank.finished_tasks.add(task_id)


def _softmax_np(v: Array) -> Array:
    m = v.max()
    e = np.exp(v - m)
    return e / e.sum()


def activation_profile(bank: ExpertBank, task_id: int) -> Array:
    """Softmax-normalized activation record for one task."""
    if bank.activation_n.get(task_id, 0) < 1:
        raise StateError(f"no activations recorded for task {task_id}")
    counts = bank.activation_counts[task_id]
    if bank.config.scale_counts:
        counts = counts / bank.activation_n[task_id]
    return _softmax_np(counts)


def aggregate_history(bank: ExpertBank, up_to: int) -> Array:
    """Softmax of the summed (scaled) activation counts of tasks with id < up_to."""
    past = sorted(t for t in bank.activation_counts if t < up_to and bank.activation_n.get(t, 0) > 0)
    if not past:
        raise StateError(f"no activation history before task {up_to}")
    total = np.zeros(bank.n_experts)
    for t in past:
        c = bank.activation_counts[t]
        total += c / bank.activation_n[t] if bank.config.scale_counts else c
    return _softmax_np(total)

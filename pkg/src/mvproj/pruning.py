"""Post-task expert pruning, reinitialization, and router fine-tuning on replay.

A learnable per-expert vector is fit so that replacing the router's gate
weights with it barely changes the mixture output, while an L1 term (summed
with the cumulative mask) pushes redundant and historically overused experts
toward zero. Thresholding yields the task's survival mask. Experts never used
by any task are reset to the pretrained projector, and the router is
fine-tuned on Gaussian-sampled replay of every stored task so routing for old
tasks survives the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import StatisticsError
from .moe import ExpertBank, RouterState, router_forward_batch, top_k_gate
from .numerics import ParamSet, cross_entropy, gradient
from .optim import AdamState, adam_step
from .relevance import TaskStats
from .seeding import rng_for


@dataclass
class PruneConfig:
    steps: int = 300
    lr: float = 0.01
    patience: int = 50
    l1_weight: float = 1.0
    threshold: float = 1e-3
    fidelity_bound: float = 0.05
    n_per_task: int = 256
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    finetune_batch: int = 64
    # keep the literal Softmax(profile * mask) label distribution, which leaves
    # pruned experts with probability exp(0)/Z instead of exactly 0
    verbatim_label_softmax: bool = False


@dataclass
class PruneVector:
    e: Array
    threshold: float
    converged: bool
    initial_objective: float
    best_objective: float


@dataclass
class ReplaySet:
    x_img: Array
    x_text: Array
    labels: Array
    source_task: Array

    def __len__(self) -> int:
        return len(self.labels)


def expert_outputs(bank: ExpertBank, x_img: Array) -> Array:
    """(n_experts, n, d_tok) stack of every expert's projection of the batch."""
    x_img = np.atleast_2d(x_img)
    outs = []
    for j in range(bank.n_experts):
        w, b = bank.expert(j)
        outs.append(x_img @ w.value + b.value)
    return np.stack(outs)


def prune_objective(e: Var, gates: Array, outputs: Array, prev_mask: Array, l1_weight: float) -> Var:
    """Batch-mean output deviation plus the masked L1 sparsity term.

    `gates` is (n, n_experts) reproduced routing weights, `outputs` the
    matching (n_experts, n, d) expert projections; both enter as constants so
    only `e` is optimized.
    """
    n = gates.shape[0]
    base = np.einsum("nj,jnd->nd", gates, outputs)
    residual = ad.constant(base)
    for j in range(outputs.shape[0]):
        residual = residual - ad.slice_cols(e, j, j + 1) * ad.constant(outputs[j])
    # 1e-12 inside the root keeps the gradient finite when the residual hits zero
    row_norms = ad.vsqrt(ad.vsum(residual * residual, axis=1) + 1e-12)
    fro = ad.vsum(row_norms) * (1.0 / n)
    l1 = ad.vsum(ad.vabs(ad.constant(np.asarray(prev_mask, dtype=np.float64)) + e))
    return fro + l1 * l1_weight


def optimize_prune_vector(
    x_img: Array,
    gates: Array,
    bank: ExpertBank,
    prev_mask: Array,
    config: PruneConfig,
) -> tuple[PruneVector, dict]:
    """Fit the per-expert pruning vector by Adam with best-iterate fallback."""
    outputs = expert_outputs(bank, x_img)
    ps = ParamSet()
    e = ps.add("e", gates.mean(axis=0, keepdims=True))
    state = AdamState()
    initial = prune_objective(e, gates, outputs, prev_mask, config.l1_weight).item()
    best_val, best_e = initial, e.value.copy()
    stale = 0
    steps_run = 0
    for _ in range(config.steps):
        obj = prune_objective(e, gates, outputs, prev_mask, config.l1_weight)
        gradient(obj, ps)
        adam_step(ps, state, config.lr)
        steps_run += 1
        val = prune_objective(e, gates, outputs, prev_mask, config.l1_weight).item()
        if val < best_val - 1e-12:
            best_val, best_e = val, e.value.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    converged = best_val < initial
    info = {
        "steps": steps_run,
        "initial_objective": initial,
        "best_objective": best_val,
        "converged": converged,
    }
    pv = PruneVector(
        e=best_e.ravel(),
        threshold=config.threshold,
        converged=converged,
        initial_objective=initial,
        best_objective=best_val,
    )
    return pv, info


def threshold_mask(pv: PruneVector) -> tuple[Array, bool]:
    """Binary survival mask: |e_j| >= threshold, with an argmax fallback.

    Returns (mask, fallback_used); an all-below-threshold vector keeps the
    single largest |e_j| so the task stays routable.
    """
    mask = (np.abs(pv.e) >= pv.threshold).astype(np.int64)
    if mask.sum() > 0:
        return mask, False
    mask = np.zeros_like(mask)
    mask[int(np.argmax(np.abs(pv.e)))] = 1
    return mask, True


def reinit_unused(bank: ExpertBank, cumulative_mask: Array) -> list[int]:
    """Reset every expert absent from the cumulative mask to the pretrained projector."""
    reset = []
    for j in range(bank.n_experts):
        if cumulative_mask[j] == 0:
            bank.reset_expert(j)
            reset.append(j)
    return reset


def _masked_label_probs(profile: Array, mask: Array, verbatim: bool) -> Array:
    if verbatim:
        scores = profile * mask
    else:
        scores = np.where(mask != 0, profile, -np.inf)
    m = scores.max()
    if not np.isfinite(m):
        raise StatisticsError("task mask has no surviving expert")
    e = np.exp(scores - m)
    e[np.isneginf(scores)] = 0.0
    return e / e.sum()


def synthesize_replay(
    stats: list[TaskStats], n_per_task: int, seed: int, verbatim_label_softmax: bool = False
) -> ReplaySet:
    """Gaussian feature samples per stored task, labeled by masked profile softmax."""
    xs_img, xs_text, labels, sources = [], [], [], []
    for st in stats:
        if st.mask is None:
            raise StatisticsError(f"task {st.task_id} has no stored mask")
        try:
            l_img = np.linalg.cholesky(st.sigma_img)
            l_text = np.linalg.cholesky(st.sigma_text)
        except np.linalg.LinAlgError as exc:
            raise StatisticsError(f"covariance for task {st.task_id} is not PSD: {exc}") from exc
        rng = rng_for(seed, "replay", st.task_id)
        z_img = rng.normal(size=(n_per_task, st.mu_img.size))
        z_text = rng.normal(size=(n_per_task, st.mu_text.size))
        xs_img.append(st.mu_img + z_img @ l_img.T)
        xs_text.append(st.mu_text + z_text @ l_text.T)
        probs = _masked_label_probs(st.profile, st.mask, verbatim_label_softmax)
        labels.append(rng.choice(len(probs), size=n_per_task, p=probs))
        sources.append(np.full(n_per_task, st.task_id))
    return ReplaySet(
        x_img=np.concatenate(xs_img),
        x_text=np.concatenate(xs_text),
        labels=np.concatenate(labels),
        source_task=np.concatenate(sources),
    )


def finetune_router(
    router: RouterState, replay: ReplaySet, epochs: int, lr: float, seed: int, batch_size: int = 64
) -> None:
    """Cross-entropy fine-tuning of the router on replay; experts untouched."""
    if len(replay) == 0 or epochs == 0:
        return
    state = AdamState()
    rng = rng_for(seed, "finetune-shuffle")
    for _ in range(epochs):
        perm = rng.permutation(len(replay))
        for lo in range(0, len(perm), batch_size):
            sel = perm[lo : lo + batch_size]
            logits = router_forward_batch(replay.x_img[sel], replay.x_text[sel], router)
            gradient(cross_entropy(logits, replay.labels[sel]), router.params)
            adam_step(router.params, state, lr)


def pruned_fidelity(
    x_img: Array, x_text: Array, router: RouterState, bank: ExpertBank, task_mask: Array
) -> float:
    """Relative output deviation when gates are renormalized over the survivors."""
    logits = router_forward_batch(x_img, x_text, router)
    gate = top_k_gate(logits, router.k)
    w = gate.weights_value
    masked = w * np.asarray(task_mask)
    sums = masked.sum(axis=1, keepdims=True)
    renorm = np.divide(masked, sums, out=np.zeros_like(masked), where=sums > 0)
    # rows whose selected experts were all pruned fall back to the best survivor
    dead = (sums.ravel() == 0)
    if dead.any():
        surv_logits = np.where(np.asarray(task_mask) != 0, logits.value, -np.inf)
        best = np.argmax(surv_logits, axis=1)
        renorm[dead, :] = 0.0
        renorm[dead, best[dead]] = 1.0
    outputs = expert_outputs(bank, x_img)
    original = np.einsum("nj,jnd->nd", w, outputs)
    pruned = np.einsum("nj,jnd->nd", renorm, outputs)
    denom = np.linalg.norm(original)
    return float(np.linalg.norm(original - pruned) / denom) if denom > 0 else 0.0

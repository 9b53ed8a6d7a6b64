"""Training losses: task cross-entropy, expert recommendation, activation bias.

The recommendation loss pulls the current routing distribution toward the
activation profiles of semantically similar finished tasks; the bias loss
penalizes alignment with the aggregate historical activation vector. Both are
defined as 0 for the first task. The current routing distribution is the
softmax of the batch-mean router logits, so one auxiliary term is produced
per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import ConfigError
from .moe import ExpertBank, GateVector, RouterState, aggregate_history, translate_train_batch
from .numerics import cosine, cross_entropy
from .relevance import TaskStats, relevance_scores_batch
from .synth import Batch, FrozenBackbone, decode


@dataclass
class LossConfig:
    lambda_rec: float = 1.0
    lambda_bias: float = 1.0
    tau: float = 1.0
    alpha: float = 0.3
    # apply 1/tau only in the denominator exponents (the asymmetric printed form)
    verbatim_pi_temperature: bool = False

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.lambda_rec < 0 or self.lambda_bias < 0:
            raise ConfigError("loss weights must be nonnegative")


def task_ce_loss(batch: Batch, translated: Var, backbone: FrozenBackbone) -> Var:
    """Mean cross-entropy of the decoded answers for a batch of translated tokens."""
    logits = decode(translated, batch.x_text, backbone)
    return cross_entropy(logits, batch.answers, reduction="mean")


def current_router_distribution(logits: Var) -> Var:
    """Softmax of the batch-mean router logits: the task's current routing distribution."""
    return ad.row_softmax(ad.vmean(logits, axis=0))


def recommendation_loss(
    target_scores: Array,
    history_profiles: list[Array],
    current_dist: Var,
    tau: float,
    verbatim_pi_temperature: bool = False,
) -> Var:
    """Cross-entropy between normalized relevance scores and profile similarities.

    `target_scores` are the batch-mean relevance scores against the finished
    tasks (sum-normalized here); `history_profiles` are those tasks' activation
    profiles. Returns 0 when there is no history.
    """
    if len(history_profiles) == 0:
        return ad.constant(0.0)
    if len(target_scores) != len(history_profiles):
        raise ConfigError("one relevance score per stored profile required")
    sims = ad.concat_cols([cosine(ad.constant(p), current_dist) for p in history_profiles])
    if verbatim_pi_temperature:
        scaled = sims * (1.0 / tau)
        lse = ad.vlog(ad.vsum(ad.vexp(scaled)))
        log_pi = sims - lse
    else:
        log_pi = ad.row_log_softmax(sims * (1.0 / tau))
    target = np.asarray(target_scores, dtype=np.float64)
    target = target / target.sum()
    return -ad.vsum(ad.constant(target) * log_pi)


def bias_loss(history_aggregate: Array, current_dist: Var) -> Var:
    """Half of (1 + cosine) between the aggregate history and the current distribution."""
    return (cosine(ad.constant(history_aggregate), current_dist) + 1.0) * 0.5


@dataclass
class TaskContext:
    """Everything a training step needs besides the batch itself."""

    router: RouterState
    bank: ExpertBank
    backbone: FrozenBackbone
    task_id: int
    prev_stats: list[TaskStats]


def total_loss(batch: Batch, ctx: TaskContext, config: LossConfig) -> tuple[Var, GateVector, dict]:
    """Weighted sum of the three losses; returns (loss, gate, logged components)."""
    config.validate()
    translated, gate = translate_train_batch(batch.x_img, batch.x_text, ctx.router, ctx.bank)
    ce = task_ce_loss(batch, translated, ctx.backbone)
    if ctx.prev_stats:
        cur = current_router_distribution(gate.logits)
        scores = relevance_scores_batch(
            batch.x_img, batch.x_text, ctx.prev_stats, config.alpha
        ).mean(axis=0)
        rec = recommendation_loss(
            scores,
            [st.profile for st in ctx.prev_stats],
            cur,
            config.tau,
            config.verbatim_pi_temperature,
        )
        hist = aggregate_history(ctx.bank, up_to=ctx.task_id)
        bias = bias_loss(hist, cur)
    else:
        rec = ad.constant(0.0)
        bias = ad.constant(0.0)
    loss = ce + rec * config.lambda_rec + bias * config.lambda_bias
    parts = {
        "l_ce": ce.item(),
        "l_rec": rec.item(),
        "l_bias": bias.item(),
        "total": loss.item(),
    }
    return loss, gate, parts

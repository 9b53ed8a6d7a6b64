"""Per-task statistics, semantic relevance scoring, and inference aggregation.

After a task closes, its feature means/covariances, activation profile and
surviving-expert mask are stored. At inference each query is scored against
every stored task (sigmoid-squashed cosines of image and instruction, mixed
by alpha); the best score becomes the expert-branch weight in the residual
combination with the pretrained projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import ConfigError, DegenerateInputError, StateError, StatisticsError
from .moe import ExpertBank, GateVector, RouterState, mixture_forward, mixture_forward_batch, router_forward, router_forward_batch, top_k_gate
from .numerics import cosine_value, sigmoid
from .serialize import matrix_from_json, matrix_to_json


@dataclass
class RelevanceConfig:
    alpha: float = 0.3
    cov_jitter: float = 1e-6
    diagonal_cov: bool = False


@dataclass
class TaskStats:
    task_id: int
    mu_img: Array
    mu_text: Array
    sigma_img: Array
    sigma_text: Array
    profile: Array        # activation profile at task close
    mask: Array | None    # surviving-expert mask, set after pruning

    def set_mask(self, mask: Array) -> None:
        self.mask = np.asarray(mask, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "mu_img": matrix_to_json(self.mu_img),
            "mu_text": matrix_to_json(self.mu_text),
            "sigma_img": matrix_to_json(self.sigma_img),
            "sigma_text": matrix_to_json(self.sigma_text),
            "profile": matrix_to_json(self.profile),
            "mask": None if self.mask is None else [int(m) for m in self.mask],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskStats":
        return cls(
            task_id=int(obj["task_id"]),
            mu_img=matrix_from_json(obj["mu_img"]).ravel(),
            mu_text=matrix_from_json(obj["mu_text"]).ravel(),
            sigma_img=matrix_from_json(obj["sigma_img"]),
            sigma_text=matrix_from_json(obj["sigma_text"]),
            profile=matrix_from_json(obj["profile"]).ravel(),
            mask=None if obj["mask"] is None else np.asarray(obj["mask"], dtype=np.int64),
        )


@dataclass
class RelevanceScores:
    scores: Array  # combined per-task scores, each in (sigmoid(-1), sigmoid(1))
    s_img: Array   # raw image cosines
    s_text: Array  # raw instruction cosines


def _covariance(x: Array, jitter: float, diagonal: bool) -> Array:
    n, d = x.shape
    centered = x - x.mean(axis=0)
    if diagonal:
        var = (centered**2).sum(axis=0) / (n - 1)
        return np.diag(var) + jitter * np.eye(d)
    return centered.T @ centered / (n - 1) + jitter * np.eye(d)


def update_task_stats(
    task_id: int,
    x_img: Array,
    x_text: Array,
    profile: Array,
    config: RelevanceConfig | None = None,
) -> TaskStats:
    """Mean and jittered sample covariance of a finished task's features."""
    config = config or RelevanceConfig()
    x_img = np.atleast_2d(x_img)
    x_text = np.atleast_2d(x_text)
    for name, x in (("image", x_img), ("text", x_text)):
        if x.shape[0] < x.shape[1] + 1:
            raise StatisticsError(
                f"{name} modality has {x.shape[0]} samples, need at least {x.shape[1] + 1}"
            )
    return TaskStats(
        task_id=task_id,
        mu_img=x_img.mean(axis=0),
        mu_text=x_text.mean(axis=0),
        sigma_img=_covariance(x_img, config.cov_jitter, config.diagonal_cov),
        sigma_text=_covariance(x_text, config.cov_jitter, config.diagonal_cov),
        profile=np.asarray(profile, dtype=np.float64).copy(),
        mask=None,
    )


def relevance_scores(x_img: Array, x_text: Array, stats: list[TaskStats], alpha: float) -> RelevanceScores:
    """Combined relevance of one query against every stored task."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not stats:
        raise StateError("no stored task statistics to score against")
    s_img = np.array([cosine_value(x_img, st.mu_img) for st in stats])
    s_text = np.array([cosine_value(x_text, st.mu_text) for st in stats])
    combined = alpha * _sigmoid_np(s_img) + (1.0 - alpha) * _sigmoid_np(s_text)
    return RelevanceScores(scores=combined, s_img=s_img, s_text=s_text)


def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relevance_scores_batch(x_img: Array, x_text: Array, stats: list[TaskStats], alpha: float) -> Array:
    """(n, n_tasks) combined scores; rows are queries."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not stats:
        raise StateError("no stored task statistics to score against")
    x_img = np.atleast_2d(x_img)
    x_text = np.atleast_2d(x_text)
    img_norm = np.linalg.norm(x_img, axis=1, keepdims=True)
    text_norm = np.linalg.norm(x_text, axis=1, keepdims=True)
    if np.any(img_norm == 0) or np.any(text_norm == 0):
        raise DegenerateInputError("zero-norm query vector")
    mu_img = np.stack([st.mu_img for st in stats])
    mu_text = np.stack([st.mu_text for st in stats])
    for mu in (mu_img, mu_text):
        if np.any(np.linalg.norm(mu, axis=1) == 0):
            raise DegenerateInputError("zero-norm stored mean")
    cos_img = (x_img @ mu_img.T) / (img_norm * np.linalg.norm(mu_img, axis=1))
    cos_text = (x_text @ mu_text.T) / (text_norm * np.linalg.norm(mu_text, axis=1))
    return alpha * _sigmoid_np(cos_img) + (1.0 - alpha) * _sigmoid_np(cos_text)


def lambda_inf(scores: RelevanceScores) -> float:
    """The maximum relevance score value; the expert-branch weight at inference."""
    if scores.scores.size == 0:
        raise StateError("empty relevance scores")
    return float(scores.scores.max())


def _expert_logit_mask(mask: Array | None, n_experts: int) -> Array | None:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.sum() == 0:
        return None  # nothing recorded yet; leave routing unrestricted
    return np.where(mask != 0, 0.0, -np.inf)[None, :]


def aggregate_inference(
    x_img, x_text, router: RouterState, bank: ExpertBank, lam: float, mask: Array | None = None
) -> Var:
    """Residual combination of pretrained and expert tokens, expert side scaled by lam.

    lam=0 collapses to the pretrained projection; lam=1 reproduces the
    training-time forward. With `renormalize_residual` the denominator is
    (lam + 1) instead of (lam*K + 1) so the same endpoints hold.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    vx = ad.constant(bank.project_pretrained(x_img))
    if lam == 0.0:
        return vx * 1.0  # exactly the pretrained projection
    logits = router_forward(x_img, x_text, router)
    add = _expert_logit_mask(mask, bank.n_experts)
    if add is not None:
        logits = logits + ad.constant(add)
    gate = top_k_gate(logits, router.k)
    mix = mixture_forward(x_img, gate, bank)
    if bank.config.renormalize_residual:
        denom = lam + 1.0
    else:
        denom = lam * router.k + 1.0
    return (vx + mix * lam) * (1.0 / denom)


def aggregate_inference_batch(
    x_img: Array,
    x_text: Array,
    router: RouterState,
    bank: ExpertBank,
    lam: Array,
    mask: Array | None = None,
) -> Var:
    """Batched aggregation with one lambda per row."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    if np.any((lam < 0) | (lam > 1)):
        raise ConfigError("lambda values must lie in [0, 1]")
    logits = router_forward_batch(x_img, x_text, router)
    add = _expert_logit_mask(mask, bank.n_experts)
    if add is not None:
        logits = logits + ad.constant(add)
    gate = top_k_gate(logits, router.k)
    mix = mixture_forward_batch(x_img, gate, bank)
    vx = ad.constant(bank.project_pretrained(x_img))
    if bank.config.renormalize_residual:
        denom = lam + 1.0
    else:
        denom = lam * router.k + 1.0
    return (vx + mix * ad.constant(lam)) * ad.constant(1.0 / denom)

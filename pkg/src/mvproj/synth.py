"""Synthetic task streams and the frozen surrogate backbone.

A task draws image features from a Gaussian around a task-specific center and
instruction embeddings from a tight cluster around a family direction; the
answer is which of the task's label planes the image offset aligns with most.
Label planes mix a stream-global component (what pretraining teaches) with a
per-task random component, so a pretrained model is above chance on unseen
tasks while fully learning a task still requires adaptation. Instruction
families are deliberately repetitive: tasks in one family are nearly
indistinguishable by instruction alone, which is what makes a single shared
projector overwrite itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import GenerationError, PretrainingError, ShapeError, StatisticsError
from .numerics import ParamSet, affine, cross_entropy, gradient
from .optim import AdamState, adam_step
from .seeding import derive_seed, rng_for
from .serialize import matrix_from_json, matrix_to_json

BACKBONE_FORMAT_VERSION = 1


@dataclass
class StreamConfig:
    """Geometry of a synthetic stream; all angles in degrees."""

    n_families: int = 2
    tasks_per_family: int = 4
    d_img: int = 32
    d_text: int = 32
    n_classes: int = 4
    theta_same: float = 15.0   # max instruction angle between tasks of one family
    theta_diff: float = 75.0   # min instruction angle between different families
    image_spread: float = 0.5
    text_jitter: float = 0.02
    center_norm: float = 2.0
    image_center_min_angle: float = 45.0
    plane_angle: float = 60.0  # 0 = answer rule fully shared with pretraining
    label_dim: int = 16        # dimension of the subspace label planes live in

    @property
    def n_tasks(self) -> int:
        return self.n_families * self.tasks_per_family


@dataclass
class TaskSpec:
    task_id: int
    family_id: int
    image_center: Array
    image_spread: float
    text_center: Array
    text_jitter: float
    n_classes: int
    label_planes: Array  # (n_classes, d_img) rows


@dataclass
class Batch:
    x_img: Array
    x_text: Array
    answers: Array
    task_id: int

    def __len__(self) -> int:
        return len(self.answers)


def _unit(v: Array) -> Array:
    return v / np.linalg.norm(v)


def _angle_deg(u: Array, v: Array) -> float:
    c = float(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0))
    return math.degrees(math.acos(c))


def _separated_directions(rng, n: int, dim: int, min_angle_deg: float, budget: int = 4000) -> list[Array]:
    dirs: list[Array] = []
    for _ in range(budget):
        cand = _unit(rng.normal(size=dim))
        if all(_angle_deg(cand, d) >= min_angle_deg for d in dirs):
            dirs.append(cand)
            if len(dirs) == n:
                return dirs
    raise GenerationError(
        f"could not place {n} directions {min_angle_deg} degrees apart in {dim} dims"
    )


def _rotate_toward(u: Array, rng, angle_deg: float) -> Array:
    """Rotate unit vector u by angle_deg toward a random orthogonal direction."""
    w = rng.normal(size=u.size)
    w -= (w @ u) * u
    w = _unit(w)
    a = math.radians(angle_deg)
    return math.cos(a) * u + math.sin(a) * w


def _stream_geometry(config: StreamConfig, seed: int):
    """Shared orthonormal frame: label subspace (with global planes) + center subspace."""
    if config.label_dim < 2 * config.n_classes:
        raise GenerationError("label_dim must be at least 2 * n_classes")
    if config.label_dim >= config.d_img:
        raise GenerationError("label_dim must leave room for image centers")
    rng = rng_for(seed, "geometry")
    m = rng.normal(size=(config.d_img, config.d_img))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))  # canonical sign choice
    label_basis = q[:, : config.label_dim]
    center_basis = q[:, config.label_dim :]
    global_planes = label_basis[:, : config.n_classes].T  # (n_classes, d_img)
    free_basis = label_basis[:, config.n_classes :]       # room for per-task planes
    return global_planes, free_basis, center_basis


def _make_tasks(
    config: StreamConfig,
    seed: int,
    n_families: int,
    tasks_per_family: int,
    plane_angle: float,
    id_offset: int,
    tag: str,
) -> list[TaskSpec]:
    if config.theta_same >= config.theta_diff:
        raise GenerationError("theta_same must be smaller than theta_diff")
    global_planes, free_basis, center_basis = _stream_geometry(config, seed)
    rng = rng_for(seed, tag)
    n_tasks = n_families * tasks_per_family
    delta = config.theta_same / 2.5  # per-task tilt; pairwise angle stays < theta_same

    family_dirs = _separated_directions(
        rng, n_families, config.d_text, config.theta_diff + 2 * delta + 1.0
    )
    center_dirs = _separated_directions(
        rng, n_tasks, center_basis.shape[1], config.image_center_min_angle
    )

    phi = math.radians(plane_angle)
    tasks = []
    for f in range(n_families):
        for k in range(tasks_per_family):
            idx = f * tasks_per_family + k
            text_center = _rotate_toward(family_dirs[f], rng, delta)
            image_center = config.center_norm * (center_basis @ center_dirs[idx])
            mix = rng.normal(size=(free_basis.shape[1], config.n_classes))
            task_planes, _ = np.linalg.qr(free_basis @ mix)  # orthonormal, disjoint from global
            planes = math.cos(phi) * global_planes + math.sin(phi) * task_planes.T
            tasks.append(
                TaskSpec(
                    task_id=id_offset + idx,
                    family_id=f,
                    image_center=image_center,
                    image_spread=config.image_spread,
                    text_center=text_center,
                    text_jitter=config.text_jitter,
                    n_classes=config.n_classes,
                    label_planes=planes,
                )
            )

    _check_angles(tasks, config)
    return tasks


def _check_angles(tasks: list[TaskSpec], config: StreamConfig) -> None:
    for a in tasks:
        for b in tasks:
            if a.task_id >= b.task_id:
                continue
            ang = _angle_deg(a.text_center, b.text_center)
            if a.family_id == b.family_id and ang >= config.theta_same:
                raise GenerationError(
                    f"tasks {a.task_id},{b.task_id} same family but {ang:.1f} deg apart"
                )
            if a.family_id != b.family_id and ang < config.theta_diff:
                raise GenerationError(
                    f"tasks {a.task_id},{b.task_id} different families only {ang:.1f} deg apart"
                )


def make_task_stream(config: StreamConfig, seed: int) -> list[TaskSpec]:
    """The continual stream: task ids 0..n_tasks-1, family-major order."""
    return _make_tasks(
        config,
        seed,
        config.n_families,
        config.tasks_per_family,
        config.plane_angle,
        id_offset=0,
        tag="stream-tasks",
    )


def make_pretrain_mixture(config: StreamConfig, seed: int, n_families: int = 2, tasks_per_family: int = 4) -> list[TaskSpec]:
    """Pretraining tasks: same geometry frame, fully shared answer rule, disjoint ids."""
    return _make_tasks(
        config,
        seed,
        n_families,
        tasks_per_family,
        plane_angle=0.0,
        id_offset=10_000,
        tag="pretrain-tasks",
    )


def sample_batch(task: TaskSpec, n: int, seed: int) -> Batch:
    if n < 1:
        raise GenerationError("need at least one sample")
    rng = rng_for(seed, "batch", task.task_id)
    offsets = task.image_spread * rng.normal(size=(n, task.image_center.size))
    x_img = task.image_center + offsets
    x_text = task.text_center + task.text_jitter * rng.normal(size=(n, task.text_center.size))
    answers = np.argmax(offsets @ task.label_planes.T, axis=1)
    return Batch(x_img=x_img, x_text=x_text, answers=answers, task_id=task.task_id)


# -- frozen backbone ---------------------------------------------------------


@dataclass
class BackboneConfig:
    d_tok: int = 32
    hidden: int = 64
    n_vocab: int = 16
    samples_per_task: int = 256
    batch_size: int = 64
    lr: float = 1e-2
    max_epochs: int = 200
    accuracy_floor: float = 0.8
    # token scale augmentation so the decoder tolerates residual-mixture scaling
    scale_jitter: tuple[float, float] = (0.5, 1.2)
    pretrain_families: int = 2
    pretrain_tasks_per_family: int = 4


@dataclass
class FrozenBackbone:
    v_w: Array
    v_b: Array
    w1: Array
    b1: Array
    w2: Array
    b2: Array

    def __post_init__(self):
        for a in (self.v_w, self.v_b, self.w1, self.b1, self.w2, self.b2):
            a.flags.writeable = False

    @property
    def d_img(self) -> int:
        return self.v_w.shape[0]

    @property
    def d_tok(self) -> int:
        return self.v_w.shape[1]

    @property
    def d_text(self) -> int:
        return self.w1.shape[0] - self.d_tok

    @property
    def n_vocab(self) -> int:
        return self.w2.shape[1]

    def project(self, x_img: Array) -> Array:
        """The pretrained visual projection, plain numpy."""
        return np.atleast_2d(x_img) @ self.v_w + self.v_b

    def to_dict(self) -> dict:
        return {
            "format_version": BACKBONE_FORMAT_VERSION,
            "v_w": matrix_to_json(self.v_w),
            "v_b": matrix_to_json(self.v_b),
            "w1": matrix_to_json(self.w1),
            "b1": matrix_to_json(self.b1),
            "w2": matrix_to_json(self.w2),
            "b2": matrix_to_json(self.b2),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FrozenBackbone":
        return cls(**{k: matrix_from_json(obj[k]) for k in ("v_w", "v_b", "w1", "b1", "w2", "b2")})

    def params_snapshot(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.v_w, self.v_b, self.w1, self.b1, self.w2, self.b2))


def decode(translated_token, x_text, backbone: FrozenBackbone) -> Var:
    """Answer logits from the frozen decoder head.

    Gradients flow through `translated_token`; the backbone weights enter the
    graph as constants and never receive gradients.
    """
    token = ad.as_var(translated_token)
    text = ad.as_var(x_text)
    if token.cols != backbone.d_tok:
        raise ShapeError(f"decode: token width {token.cols}, expected {backbone.d_tok}")
    if text.cols != backbone.d_text:
        raise ShapeError(f"decode: text width {text.cols}, expected {backbone.d_text}")
    if token.rows != text.rows:
        raise ShapeError("decode: token/text row counts differ")
    h = ad.vtanh(affine(ad.concat_cols([token, text]), ad.constant(backbone.w1), ad.constant(backbone.b1)))
    return affine(h, ad.constant(backbone.w2), ad.constant(backbone.b2))


def _decode_train(token: Var, x_text: Var, ps: ParamSet) -> Var:
    h = ad.vtanh(affine(ad.concat_cols([token, x_text]), ps["w1"], ps["b1"]))
    return affine(h, ps["w2"], ps["b2"])


def backbone_accuracy(backbone: FrozenBackbone, batches: list[Batch]) -> float:
    hits = total = 0
    for b in batches:
        logits = decode(backbone.project(b.x_img), b.x_text, backbone).value
        hits += int((np.argmax(logits, axis=1) == b.answers).sum())
        total += len(b)
    return hits / total


def pretrain_backbone(mixture: list[TaskSpec], config: BackboneConfig, seed: int) -> FrozenBackbone:
    """Jointly train the projector and decoder head on the mixture, then freeze.

    Raises PretrainingError if the accuracy floor is not reached in max_epochs.
    """
    if not mixture:
        raise PretrainingError("empty pretraining mixture")
    d_img = mixture[0].image_center.size
    d_text = mixture[0].text_center.size

    rng = rng_for(seed, "pretrain-init")
    ps = ParamSet()
    ps.add("v_w", rng.normal(size=(d_img, config.d_tok)) / math.sqrt(d_img))
    ps.add("v_b", np.zeros((1, config.d_tok)))
    ps.add("w1", rng.normal(size=(config.d_tok + d_text, config.hidden)) / math.sqrt(config.d_tok + d_text))
    ps.add("b1", np.zeros((1, config.hidden)))
    ps.add("w2", rng.normal(size=(config.hidden, config.n_vocab)) / math.sqrt(config.hidden))
    ps.add("b2", np.zeros((1, config.n_vocab)))

    data = [
        sample_batch(t, config.samples_per_task, derive_seed(seed, "pretrain-data", t.task_id))
        for t in mixture
    ]
    x_img = np.concatenate([b.x_img for b in data])
    x_text = np.concatenate([b.x_text for b in data])
    answers = np.concatenate([b.answers for b in data])

    shuffle_rng = rng_for(seed, "pretrain-shuffle")
    jitter_rng = rng_for(seed, "pretrain-jitter")
    state = AdamState()
    lo, hi = config.scale_jitter

    def mixture_accuracy() -> float:
        token = ad.constant(x_img) @ ps["v_w"] + ps["v_b"]
        logits = _decode_train(token, ad.constant(x_text), ps).value
        return float((np.argmax(logits, axis=1) == answers).mean())

    for _ in range(config.max_epochs):
        perm = shuffle_rng.permutation(len(answers))
        for lo_i in range(0, len(perm), config.batch_size):
            sel = perm[lo_i : lo_i + config.batch_size]
            token = ad.constant(x_img[sel]) @ ps["v_w"] + ps["v_b"]
            scale = ad.constant(jitter_rng.uniform(lo, hi, size=(len(sel), 1)))
            logits = _decode_train(token * scale, ad.constant(x_text[sel]), ps)
            gradient(cross_entropy(logits, answers[sel]), ps)
            adam_step(ps, state, config.lr)
        if mixture_accuracy() >= config.accuracy_floor:
            vals = ps.get_values()
            return FrozenBackbone(
                v_w=vals["v_w"], v_b=vals["v_b"],
                w1=vals["w1"], b1=vals["b1"],
                w2=vals["w2"], b2=vals["b2"],
            )
    raise PretrainingError(
        f"mixture accuracy stayed below {config.accuracy_floor} after {config.max_epochs} epochs"
    )

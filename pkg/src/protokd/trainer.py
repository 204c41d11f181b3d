"""Alternating two-phase training loop and its baselines.

Each epoch runs ``phase1_iters`` matching-loss episodes followed by
``phase2_iters`` episodes trained on prototype pseudo-labels with the
distillation and/or discriminative losses. Phases whose losses are all
inactive are skipped, which yields the ProtoNet and ablation variants.
The supervised baseline trains the encoder and head with hard-label
cross-entropy on the same episodes, in the phase-2 slot.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import AugmentPolicy, make_query_set, make_rng
from .autodiff import NonFiniteError, Optimizer, Tensor, make_optimizer, no_grad
from .data import Dataset
from .encoder import Checkpoint, EncoderConfig, StudentHead, WideResNet, student_logits
from .evaluation import nearest_prototype, per_class_metrics
from .losses import (
    PrototypeSet,
    compute_prototypes,
    discriminative_loss,
    distill_loss,
    matching_loss,
    supervised_loss,
    teacher_probs,
)

log = logging.getLogger(__name__)

MATCHING, DISTILL, DISCRIMINATIVE, SUPERVISED = "matching", "distill", "discriminative", "supervised"

METHOD_LOSSES = {
    "supervised": (SUPERVISED,),
    "protonet": (MATCHING,),
    "protokd": (MATCHING, DISTILL, DISCRIMINATIVE),
}

# loss-combination rows of the ablation table; a lone distillation loss at
# tau = 1 reduces to cross-entropy, i.e. the supervised baseline
ABLATION_ROWS = {
    "Lm": (MATCHING,),
    "Ls": (SUPERVISED,),
    "Lm+Ls": (MATCHING, DISTILL),
    "Lm+Ld": (MATCHING, DISCRIMINATIVE),
    "Lm+Ls+Ld": (MATCHING, DISTILL, DISCRIMINATIVE),
}


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, epoch: int, phase: str, episode_key: tuple):
        super().__init__(f"{message} (epoch {epoch}, phase {phase}, episode key {episode_key})")
        self.epoch = epoch
        self.phase = phase
        self.episode_key = episode_key


@dataclass(frozen=True)
class TrainConfig:
    method: str = "protokd"
    losses: tuple[str, ...] | None = None  # overrides the method's loss set
    epochs: int = 100
    phase1_iters: int = 10
    phase2_iters: int = 10
    support_size: int = 1
    query_per_class: int = 5
    tau: float = 5.0
    w_s: float = 1.0
    w_d: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-3
    head_lr_scale: float = 1.0  # learning-rate multiplier for the student head
    teacher_forward: str = "shared"  # "shared": teacher reads the student's own (detached) query embeddings
    head_init: str = "prototypes"  # "prototypes": reset the head to the teacher's linear form each phase 2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    early_stop_patience: int = 20
    seed: int = 0
    distance: str = "sq_euclidean"
    pseudo_labels: str = "soft"
    eval_batch_size: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHOD_LOSSES:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHOD_LOSSES)}")
        for name in ("epochs", "phase1_iters", "phase2_iters", "support_size", "query_per_class", "early_stop_patience", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.head_lr_scale <= 0:
            raise ValueError(f"head_lr_scale must be positive, got {self.head_lr_scale}")
        if self.w_s < 0 or self.w_d < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.losses is not None:
            bad = set(self.losses) - {MATCHING, DISTILL, DISCRIMINATIVE, SUPERVISED}
            if bad or not self.losses:
                raise ValueError(f"invalid loss set {self.losses}")
            if SUPERVISED in self.losses and len(self.losses) > 1:
                raise ValueError("the supervised loss cannot be combined with the others")
        if self.distance not in ("sq_euclidean", "euclidean"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.pseudo_labels not in ("soft", "hard"):
            raise ValueError(f"pseudo_labels must be 'soft' or 'hard', got {self.pseudo_labels!r}")
        if self.teacher_forward not in ("eval", "shared"):
            raise ValueError(f"teacher_forward must be 'eval' or 'shared', got {self.teacher_forward!r}")
        if self.head_init not in ("random", "prototypes"):
            raise ValueError(f"head_init must be 'random' or 'prototypes', got {self.head_init!r}")
        if self.head_init == "prototypes" and self.distance != "sq_euclidean":
            raise ValueError("head_init 'prototypes' needs the squared Euclidean distance")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def active_losses(self) -> tuple[str, ...]:
        return tuple(self.losses) if self.losses is not None else METHOD_LOSSES[self.method]

    @property
    def runs_phase1(self) -> bool:
        return MATCHING in self.active_losses

    @property
    def runs_phase2(self) -> bool:
        return bool({DISTILL, DISCRIMINATIVE, SUPERVISED} & set(self.active_losses))

    @property
    def predict_rule(self) -> str:
        return "head" if SUPERVISED in self.active_losses else "prototype"


FULL_SCALE_TRAIN = TrainConfig(epochs=100, phase1_iters=10, phase2_iters=10, support_size=1, query_per_class=5, tau=5.0)


def config_for_losses(base: TrainConfig, row: str) -> TrainConfig:
    """Training config for one ablation row (see ``ABLATION_ROWS``)."""
    losses = ABLATION_ROWS[row]
    method = "supervised" if losses == (SUPERVISED,) else "protonet" if losses == (MATCHING,) else "protokd"
    return replace(base, method=method, losses=None if METHOD_LOSSES[method] == losses else losses)


# ------------------------------------------------------------------ episodes
@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: list[int]
    key: tuple = ()


def build_episode(train_split: Dataset, policy: AugmentPolicy, config: TrainConfig, rng: np.random.Generator, key: tuple = ()) -> Episode:
    """Support covers every class with original samples; queries are their augmentations."""
    s_img, s_lab, q_img, q_lab = [], [], [], []
    for c in range(train_split.num_classes):
        idx = np.flatnonzero(train_split.labels == c)
        if idx.size < config.support_size:
            raise ValueError(
                f"class {train_split.class_names[c]!r} has {idx.size} training items; support_size is {config.support_size}"
            )
        chosen = idx if idx.size == config.support_size else np.sort(rng.choice(idx, config.support_size, replace=False))
        for i in chosen:
            s_img.append(train_split.images[i])
            s_lab.append(c)
        # spread the queries over the class's support samples
        for j in range(config.query_per_class):
            src = chosen[j % len(chosen)]
            (img, lab), = make_query_set((train_split.images[src], c), policy, 1, rng)
            q_img.append(img)
            q_lab.append(lab)
    return Episode(
        np.stack(s_img),
        np.array(s_lab),
        np.stack(q_img).astype(train_split.images.dtype),
        np.array(q_lab),
        list(range(train_split.num_classes)),
        key,
    )


# ------------------------------------------------------------------- steps
def _as_input(images: np.ndarray, encoder: WideResNet) -> np.ndarray:
    return images.astype(encoder.params["stem.conv"].dtype, copy=False)


def phase1_loss(episode: Episode, encoder: WideResNet, config: TrainConfig, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Matching loss with gradients through both queries and prototypes."""
    ns = len(episode.support_images)
    x = _as_input(np.concatenate([episode.support_images, episode.query_images]), encoder)
    emb = encoder.embed(x, training=training, rng=rng)
    protos = compute_prototypes(emb[:ns], episode.support_labels, episode.class_ids)
    return matching_loss(emb[ns:], protos, episode.query_labels, config.distance)


def pseudo_label_targets(
    episode: Episode, encoder: WideResNet, config: TrainConfig, protos: PrototypeSet | None = None
) -> tuple[PrototypeSet, np.ndarray]:
    """Frozen prototypes and teacher distributions for a phase-2 step (eval mode, no graph).

    Prototypes come from the current encoder on the episode's support unless given.
    """
    ns = len(episode.support_images)
    with no_grad():
        if protos is None:
            emb = encoder.embed(_as_input(np.concatenate([episode.support_images, episode.query_images]), encoder))
            protos = compute_prototypes(emb[:ns], episode.support_labels, episode.class_ids)
            q = emb[ns:]
        else:
            protos = protos.detach()
            q = encoder.embed(_as_input(episode.query_images, encoder))
        teacher = teacher_probs(q, protos, config.distance).data
    return protos, _pseudo_labels(teacher, config)


def _pseudo_labels(teacher: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.pseudo_labels == "hard":
        hard = np.zeros_like(teacher)
        hard[np.arange(len(teacher)), teacher.argmax(axis=1)] = 1
        return hard
    return teacher


def phase2_loss(
    episode: Episode,
    encoder: WideResNet,
    head: StudentHead,
    config: TrainConfig,
    rng: np.random.Generator | None,
    targets: tuple[PrototypeSet, np.ndarray] | None = None,
    training: bool = True,
) -> tuple[Tensor | None, Tensor | None, Tensor]:
    """Returns ``(L_s, L_d, weighted total)``; inactive losses are ``None``."""
    protos, teacher = targets if targets is not None else pseudo_label_targets(episode, encoder, config)
    active = config.active_losses
    feats = encoder.embed(_as_input(episode.query_images, encoder), training=training, rng=rng)
    l_s = l_d = None
    total = None
    if DISTILL in active:
        if config.teacher_forward == "shared":
            with no_grad():
                teacher = _pseudo_labels(teacher_probs(Tensor(feats.data), protos, config.distance).data, config)
        l_s = distill_loss(teacher, student_logits(feats, head), config.tau)
        total = config.w_s * l_s
    if DISCRIMINATIVE in active:
        l_d = discriminative_loss(feats, protos, episode.query_labels)
        total = config.w_d * l_d if total is None else total + config.w_d * l_d
    if total is None:
        raise ValueError("phase 2 has no active loss")
    return l_s, l_d, total


def supervised_batch_loss(episode: Episode, encoder: WideResNet, head: StudentHead, rng, training: bool = True) -> Tensor:
    x = _as_input(np.concatenate([episode.support_images, episode.query_images]), encoder)
    y = np.concatenate([episode.support_labels, episode.query_labels])
    return supervised_loss(student_logits(encoder.embed(x, training=training, rng=rng), head), y)


def _check(loss: Tensor, phase: str, epoch: int, key: tuple) -> float:
    v = loss.item()
    if not math.isfinite(v):
        raise TrainingDivergence("non-finite loss", epoch, phase, key)
    return v


def phase1_step(episode: Episode, encoder: WideResNet, optimizer: Optimizer, config: TrainConfig, rng=None, epoch: int = 0) -> float:
    """One update on the matching loss; returns the pre-update loss."""
    optimizer.zero_grad()
    try:
        loss = phase1_loss(episode, encoder, config, rng)
    except NonFiniteError as err:
        raise TrainingDivergence(str(err), epoch, "1", episode.key) from err
    value = _check(loss, "1", epoch, episode.key)
    loss.backward()
    optimizer.step(encoder.parameters())
    return value


def phase2_step(
    episode: Episode,
    encoder: WideResNet,
    head: StudentHead,
    protos: PrototypeSet | None,
    config: TrainConfig,
    optimizer: Optimizer,
    rng=None,
    epoch: int = 0,
) -> tuple[float | None, float | None]:
    """One update on ``w_s * L_s + w_d * L_d`` against frozen pseudo-label targets.

    With ``protos=None`` the prototypes are recomputed from the episode support.
    """
    optimizer.zero_grad()
    try:
        targets = pseudo_label_targets(episode, encoder, config, protos)
        l_s, l_d, total = phase2_loss(episode, encoder, head, config, rng, targets)
    except NonFiniteError as err:
        raise TrainingDivergence(str(err), epoch, "2", episode.key) from err
    _check(total, "2", epoch, episode.key)
    total.backward()
    params = encoder.parameters() + (head.parameters() if l_s is not None else [])
    optimizer.step(params)
    return (None if l_s is None else l_s.item()), (None if l_d is None else l_d.item())


def supervised_step(episode, encoder, head, optimizer, rng=None, epoch: int = 0) -> float:
    optimizer.zero_grad()
    try:
        loss = supervised_batch_loss(episode, encoder, head, rng)
    except NonFiniteError as err:
        raise TrainingDivergence(str(err), epoch, "2", episode.key) from err
    value = _check(loss, "2", epoch, episode.key)
    loss.backward()
    optimizer.step(encoder.parameters() + head.parameters())
    return value


# --------------------------------------------------------------- inference
def split_prototypes(encoder: WideResNet, train_split: Dataset, batch_size: int = 128) -> np.ndarray:
    emb = encoder.embed_numpy(_as_input(train_split.images, encoder), batch_size)
    protos = compute_prototypes(Tensor(emb), train_split.labels, list(range(train_split.num_classes)))
    return protos.prototypes.data


def predict(encoder: WideResNet, head: StudentHead, prototypes: np.ndarray, images: np.ndarray, rule: str, batch_size: int = 128) -> np.ndarray:
    emb = encoder.embed_numpy(_as_input(images, encoder), batch_size)
    if rule == "prototype":
        return nearest_prototype(emb, prototypes)[0]
    with no_grad():
        logits = student_logits(Tensor(emb), head).data
    return logits.argmax(axis=1)


def set_head_from_prototypes(head: StudentHead, prototypes: np.ndarray) -> None:
    """Make the head reproduce ``-||e - p_c||^2`` up to a per-row constant: W = 2P, b = -||p||^2."""
    P = np.asarray(prototypes, dtype=head.weight.data.dtype)
    head.weight.data[...] = 2.0 * P
    head.bias.data[...] = -(P * P).sum(axis=1)


# -------------------------------------------------------------------- train
@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    total_steps: int
    step_log: list[dict] = field(default_factory=list)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def train(
    train_split: Dataset,
    val_split: Dataset | None,
    config: TrainConfig,
    encoder_config: EncoderConfig,
    policy: AugmentPolicy,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch; returns the best-validation snapshot and per-epoch history."""
    train_split.check_complete()
    if train_split.image_size != encoder_config.input_size or train_split.channels != encoder_config.in_channels:
        raise ValueError(
            f"data is {train_split.channels}x{train_split.image_size}x{train_split.image_size} but the encoder expects "
            f"{encoder_config.in_channels}x{encoder_config.input_size}x{encoder_config.input_size}"
        )
    dtype = np.dtype(config.dtype)
    C = train_split.num_classes
    encoder = WideResNet(encoder_config, make_rng(config.seed, 1), dtype=dtype)
    head = StudentHead(encoder_config.embed_dim, C, make_rng(config.seed, 2), dtype=dtype)
    optimizer = make_optimizer(config.optimizer, encoder.parameters() + head.parameters(), config.lr, config.betas, config.eps)
    optimizer.set_lr_scale(head.parameters(), config.head_lr_scale)
    dropout_rng = make_rng(config.seed, 3)
    rule = config.predict_rule
    active = config.active_losses

    history: list[dict] = []
    step_log: list[dict] = []
    best_f1, best_epoch, best_state = -1.0, 0, None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        l_m, l_s, l_d, l_sup = [], [], [], []
        if config.runs_phase1:
            for it in range(config.phase1_iters):
                key = (config.seed, epoch, 1, it)
                ep = build_episode(train_split, policy, config, make_rng(*key), key)
                l_m.append(phase1_step(ep, encoder, optimizer, config, dropout_rng, epoch))
                step_log.append({"epoch": epoch, "phase": 1, "iter": it, "L_m": l_m[-1]})
        if config.runs_phase2:
            if config.head_init == "prototypes" and DISTILL in active:
                set_head_from_prototypes(head, split_prototypes(encoder, train_split, config.eval_batch_size))
            for it in range(config.phase2_iters):
                key = (config.seed, epoch, 2, it)
                ep = build_episode(train_split, policy, config, make_rng(*key), key)
                if SUPERVISED in active:
                    l_sup.append(supervised_step(ep, encoder, head, optimizer, dropout_rng, epoch))
                    step_log.append({"epoch": epoch, "phase": 2, "iter": it, "L_ce": l_sup[-1]})
                    continue
                s, d = phase2_step(ep, encoder, head, None, config, optimizer, dropout_rng, epoch)
                if s is not None:
                    l_s.append(s)
                if d is not None:
                    l_d.append(d)
                step_log.append({"epoch": epoch, "phase": 2, "iter": it, "L_s": s, "L_d": d})

        record = {
            "epoch": epoch,
            "phase1_steps": len(l_m),
            "phase2_steps": config.phase2_iters if config.runs_phase2 else 0,
            "L_m": _mean(l_m),
            "L_s": _mean(l_s),
            "L_d": _mean(l_d),
            "L_ce": _mean(l_sup),
        }
        if val_split is not None and len(val_split):
            protos = split_prototypes(encoder, train_split, config.eval_batch_size)
            pred = predict(encoder, head, protos, val_split.images, rule, config.eval_batch_size)
            rep = per_class_metrics(pred, val_split.labels, C)
            record.update(val_precision=rep.macro_precision, val_recall=rep.macro_recall, val_f1=rep.macro_f1)
            score = rep.macro_f1
        else:
            record.update(val_precision=None, val_recall=None, val_f1=None)
            score = float(epoch)  # no validation data: keep the latest weights
        improved = score > best_f1
        if improved:
            best_f1, best_epoch, stale = score, epoch, 0
            best_state = (encoder.state_dict(), head.state_dict())
        else:
            stale += 1
        record["best_epoch"] = best_epoch
        history.append(record)
        log.debug("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
        if stale >= config.early_stop_patience or (val_split is not None and len(val_split) and best_f1 >= 1.0):
            break  # a perfect score cannot be beaten, so the snapshot is final

    encoder.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    prototypes = split_prototypes(encoder, train_split, config.eval_batch_size)
    ckpt = Checkpoint(
        encoder_config=encoder_config,
        encoder_state=best_state[0],
        head_state=best_state[1],
        prototypes=prototypes,
        class_names=list(train_split.class_names),
        predict_rule=rule,
        modality=train_split.modality,
        meta={"train_config": _jsonable(asdict(config)), "best_epoch": best_epoch},
    )
    return TrainResult(ckpt, history, best_epoch, len(step_log), step_log)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d

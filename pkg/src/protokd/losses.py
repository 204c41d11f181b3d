"""Prototype construction and the three training objectives.

* matching loss: cross-entropy of a softmax over negated query-to-prototype
  distances;
* distillation loss: temperature-softened KL from the prototype teacher to a
  linear student head;
* discriminative loss: cosine-similarity contrast of each query against its
  own prototype versus the other prototypes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    l2_normalize,
    log_softmax,
    logsumexp,
    pairwise_sq_euclidean,
    softmax,
    sqrt,
)


@dataclass
class PrototypeSet:
    prototypes: Tensor  # [C, D]
    class_ids: list[int]

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError(f"duplicate class ids: {self.class_ids}")
        if self.prototypes.shape[0] != len(self.class_ids):
            raise ValueError("one prototype per class required")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def detach(self) -> PrototypeSet:
        return PrototypeSet(self.prototypes.detach(), list(self.class_ids))

    def label_positions(self, labels: Sequence[int]) -> np.ndarray:
        """Map class ids to row positions in the prototype table."""
        pos = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.array([pos[int(y)] for y in labels], dtype=np.intp)
        except KeyError as err:
            raise ValueError(f"label {err.args[0]} is not in the class set {self.class_ids}") from None


def compute_prototypes(support_embeddings: Tensor, support_labels: Sequence[int], class_ids: Sequence[int] | None = None) -> PrototypeSet:
    """Per-class mean of the support embeddings.

    ``class_ids`` fixes the row order; by default it is the sorted set of labels.
    """
    support_embeddings = as_tensor(support_embeddings)
    labels = np.asarray(support_labels)
    if labels.shape[0] != support_embeddings.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {support_embeddings.shape[0]} embeddings")
    if class_ids is None:
        class_ids = sorted(set(labels.tolist()))
    class_ids = [int(c) for c in class_ids]
    rows = []
    for c in class_ids:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no support samples")
        if idx.size == 1:
            rows.append(support_embeddings[idx])
        else:
            rows.append(support_embeddings[idx].mean(axis=0, keepdims=True))
    return PrototypeSet(concat(rows, axis=0), class_ids)


def class_distances(query_embeddings: Tensor, protos: PrototypeSet, distance: str = "sq_euclidean") -> Tensor:
    d = pairwise_sq_euclidean(query_embeddings, protos.prototypes)
    if distance == "sq_euclidean":
        return d
    if distance == "euclidean":
        return sqrt(d + 1e-12)
    raise ValueError(f"unknown distance {distance!r}")


def teacher_log_probs(query_embeddings: Tensor, protos: PrototypeSet, distance: str = "sq_euclidean") -> Tensor:
    return log_softmax(-class_distances(query_embeddings, protos, distance), axis=1)


def teacher_probs(query_embeddings: Tensor, protos: PrototypeSet, distance: str = "sq_euclidean") -> Tensor:
    """Class distribution from a softmax over negated prototype distances."""
    return teacher_log_probs(query_embeddings, protos, distance).exp()


def _one_hot(positions: np.ndarray, n: int, dtype) -> np.ndarray:
    out = np.zeros((positions.size, n), dtype=dtype)
    out[np.arange(positions.size), positions] = 1
    return out


def matching_loss(query_embeddings: Tensor, protos: PrototypeSet, true_labels: Sequence[int], distance: str = "sq_euclidean") -> Tensor:
    """Mean negative log-probability of each query's true class."""
    pos = protos.label_positions(true_labels)
    logp = teacher_log_probs(query_embeddings, protos, distance)
    onehot = _one_hot(pos, protos.num_classes, logp.dtype)
    return -(logp * onehot).sum() / len(pos)


def soften(probs: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-soften a distribution: ``p^(1/tau)`` renormalized.

    Equivalent to dividing the underlying logits by ``tau``.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return softmax(logp / tau, axis=1)


def distill_loss(teacher: Tensor | np.ndarray, student_logits: Tensor, tau: float) -> Tensor:
    """tau^2-scaled KL(soften(teacher) || softmax(student / tau)), averaged over rows.

    The teacher is a constant target; no gradient flows into it.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    student_logits = as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher shape {t.shape} does not match student logits {student_logits.shape}")
    if (t < 0).any() or np.abs(t.sum(axis=1) - 1).max() > 1e-4:
        raise ValueError("teacher rows must be probability distributions (nonnegative, summing to 1)")
    q = soften(t.astype(student_logits.dtype), tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_logq = np.where(q > 0, q * np.log(q), 0.0).sum()
    log_s = log_softmax(student_logits * (1.0 / tau), axis=1)
    cross = -(log_s * q).sum()
    n = student_logits.shape[0]
    return (cross + float(q_logq)) * (tau * tau / n)


def supervised_loss(student_logits: Tensor, true_positions: np.ndarray) -> Tensor:
    """Hard-label cross-entropy on the student head."""
    logp = log_softmax(student_logits, axis=1)
    onehot = _one_hot(np.asarray(true_positions), student_logits.shape[1], logp.dtype)
    return -(logp * onehot).sum() / len(true_positions)


def discriminative_loss(query_embeddings: Tensor, protos: PrototypeSet, true_labels: Sequence[int]) -> Tensor:
    """Mean of ``-log(exp(s_pos) / sum_{k != pos} exp(s_k))`` over queries.

    ``s`` are cosine similarities between the normalized query and normalized
    prototypes. The positive pair is left out of the denominator, so values
    below zero are possible.
    """
    if protos.num_classes < 2:
        raise ValueError("discriminative loss needs at least two classes")
    pos = protos.label_positions(true_labels)
    f = l2_normalize(query_embeddings)
    p = l2_normalize(protos.prototypes)
    sims = f @ p.T  # [Q, C]
    onehot = _one_hot(pos, protos.num_classes, sims.dtype)
    positive = (sims * onehot).sum(axis=1)
    # masking by a large negative constant keeps every entry finite
    negatives = logsumexp(sims + onehot * sims.dtype.type(-1e4), axis=1)
    return (negatives - positive).mean()


def combined_phase2_loss(l_s, l_d, weights: tuple[float, float] = (1.0, 1.0)):
    w_s, w_d = weights
    if w_s < 0 or w_d < 0:
        raise ValueError(f"loss weights must be nonnegative, got {weights}")
    for name, v in (("L_s", l_s), ("L_d", l_d)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.isfinite(val).all():
            raise ValueError(f"{name} is not finite")
    return w_s * l_s + w_d * l_d

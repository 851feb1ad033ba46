"""Training objectives: contrastive retrieval, cross-modal KL alignment,
and the two distillation terms that tie a training step to the previous
step's snapshot.

Every loss is written against an ops backend, so the same code produces
either a differentiable graph (student side) or plain numbers (oracles,
teacher side).  Teacher quantities are always passed in as raw arrays and
enter student graphs as constants, which makes teacher detachment
structural.

Kullback-Leibler terms operate on row-wise softmax distributions.  The
log-probabilities are computed as ``x - max - log(sum(exp(x - max)))``
with the row max injected as a detached constant: the value and gradient
are unchanged by the shift, while saturated logits (hence exact zeros in
the softmax) stay finite end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the total objective."""

    lam: float = 0.5      # contrastive weight
    alpha: float = 0.1    # similarity-distillation weight
    tau: float = 0.07     # similarity temperature

    def __post_init__(self):
        # lam/alpha of exactly 0 isolate individual terms in ablations;
        # tau divides, so it must stay strictly positive.
        for name in ("lam", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class BatchEmbeddings:
    """Row-aligned unit-norm embeddings of one batch: row i of both
    matrices comes from the same audio/text pair."""

    audio: object  # N x d_s, backend value
    text: object   # N x d_s, backend value


@dataclass
class SimilarityPair:
    """Scaled cosine similarities, text-to-audio being the exact transpose."""

    a2t: object  # N x N, rows are audio queries
    t2a: object  # N x N, rows are text queries
    tau: float


def _teacher_array(x) -> np.ndarray:
    # Teacher values may arrive as raw arrays or as graph nodes; either way
    # they re-enter the student graph as detached constants.
    return x.value if hasattr(x, "value") else np.asarray(x, dtype=np.float64)


def log_softmax_rows(ops, x):
    """Row-wise log-softmax from primitive ops; safe for saturated logits."""
    xv = ops.raw(x)
    n, d = xv.shape
    shift = ops.constant(np.repeat(xv.max(axis=1, keepdims=True), d, axis=1))
    centered = ops.add(x, ops.scale(shift, -1.0))
    z = ops.matmul(ops.exp(centered), ops.constant(np.ones((d, 1))))
    log_z = ops.matmul(ops.log(z), ops.constant(np.ones((1, d))))
    return ops.add(centered, ops.scale(log_z, -1.0))


def mean_row_kl(ops, p_logits, q_logits):
    """Mean over rows of KL(softmax(p_logits) || softmax(q_logits))."""
    pv, qv = ops.raw(p_logits), ops.raw(q_logits)
    if pv.shape != qv.shape:
        raise ValueError(f"KL operand shapes differ: {pv.shape} vs {qv.shape}")
    p = ops.row_softmax(p_logits)
    diff = ops.add(log_softmax_rows(ops, p_logits),
                   ops.scale(log_softmax_rows(ops, q_logits), -1.0))
    # mean_all averages over n*d entries; row-KL wants the row sums' mean.
    return ops.scale(ops.mean_all(ops.mul(p, diff)), float(pv.shape[1]))


def similarity_matrices(ops, e_audio, e_text, tau: float) -> SimilarityPair:
    """Cosine similarities of unit-norm embeddings, scaled by 1/tau."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    av, tv = ops.raw(e_audio), ops.raw(e_text)
    if av.shape[0] != tv.shape[0]:
        raise ValueError(
            f"batch sizes differ: audio {av.shape[0]} vs text {tv.shape[0]}")
    a2t = ops.scale(ops.matmul(e_audio, e_text, transpose_b=True), 1.0 / tau)
    return SimilarityPair(a2t=a2t, t2a=ops.transpose(a2t), tau=tau)


def contrastive_loss(ops, pair: SimilarityPair):
    """Symmetric retrieval loss: negative mean log-likelihood of the
    diagonal under row softmax, summed over both directions."""
    n, m = ops.raw(pair.a2t).shape
    if n != m:
        raise ValueError(f"contrastive loss needs square similarities, got {n}x{m}")
    eye = ops.constant(np.eye(n))

    def direction(c):
        picked = ops.mul(log_softmax_rows(ops, c), eye)
        return ops.scale(ops.mean_all(picked), -float(n))

    return ops.add(direction(pair.t2a), direction(pair.a2t))


def kl_alignment_loss(ops, batch: BatchEmbeddings):
    """Symmetric KL between the audio and text embedding distributions."""
    av, tv = ops.raw(batch.audio), ops.raw(batch.text)
    if av.shape != tv.shape:
        raise ValueError(f"embedding shapes differ: {av.shape} vs {tv.shape}")
    return ops.add(mean_row_kl(ops, batch.audio, batch.text),
                   mean_row_kl(ops, batch.text, batch.audio))


def feature_distillation_loss(ops, student: BatchEmbeddings,
                              teacher: Optional[BatchEmbeddings]):
    """KL of current embeddings against the previous step's, per modality.

    The first incremental step has no teacher; the loss is defined as 0.
    """
    if teacher is None:
        return ops.constant(np.zeros((1, 1)))
    t_audio = ops.constant(_teacher_array(teacher.audio))
    t_text = ops.constant(_teacher_array(teacher.text))
    return ops.add(mean_row_kl(ops, student.audio, t_audio),
                   mean_row_kl(ops, student.text, t_text))


def similarity_distillation_loss(ops, student: SimilarityPair,
                                 teacher: Optional[SimilarityPair]):
    """KL of row-softmaxed similarity matrices against the teacher's,
    both directions; 0 at the first step."""
    if teacher is None:
        return ops.constant(np.zeros((1, 1)))
    t_t2a = ops.constant(_teacher_array(teacher.t2a))
    t_a2t = ops.constant(_teacher_array(teacher.a2t))
    return ops.add(mean_row_kl(ops, student.t2a, t_t2a),
                   mean_row_kl(ops, student.a2t, t_a2t))


@dataclass
class TeacherOutputs:
    """Previous-step snapshot outputs on the current batch, detached."""

    embeddings: BatchEmbeddings
    similarity: SimilarityPair


def total_loss(ops, batch: BatchEmbeddings, pair: SimilarityPair,
               teacher: Optional[TeacherOutputs], weights: LossWeights,
               use_feature_distillation: bool = True,
               use_similarity_distillation: bool = True):
    """Weighted combination: alignment + lam*contrastive + feature
    distillation + alpha*similarity distillation."""
    components = {}

    def guard(name, fn):
        try:
            value = fn()
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss component {name!r} is non-finite: {exc}") from exc
        if not np.isfinite(ops.raw(value)).all():
            raise NonFiniteError(f"loss component {name!r} is non-finite")
        components[name] = value
        return value

    kl = guard("kl_alignment", lambda: kl_alignment_loss(ops, batch))
    contrast = guard("contrastive", lambda: contrastive_loss(ops, pair))
    total = ops.add(kl, ops.scale(contrast, weights.lam))
    if use_feature_distillation:
        fd = guard("feature_distillation", lambda: feature_distillation_loss(
            ops, batch, teacher.embeddings if teacher else None))
        total = ops.add(total, fd)
    if use_similarity_distillation:
        sd = guard("similarity_distillation", lambda: similarity_distillation_loss(
            ops, pair, teacher.similarity if teacher else None))
        total = ops.add(total, ops.scale(sd, weights.alpha))
    return total, components

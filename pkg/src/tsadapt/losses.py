"""Training objectives for supervised training and teacher-student transfer.

Every objective here is a cross-entropy of the student's per-step posteriors
against some target distribution; the objectives differ only in how the
target rows are built:

    ce_loss            smoothed one-hot of the ground truth
    kl_token_ts_loss   the teacher's soft posterior rows (frozen constants)
    seq_ts_loss        one-hot of the teacher's one-best decode
    its_loss           fixed global blend of teacher row and one-hot
    cts_loss           per-step hard switch: teacher row if the teacher's
                       argmax is correct, else one-hot
    ats_loss           per-step adaptive blend weighted by the teacher's
                       confidence on the correct token

Losses are mean-reduced over (unmasked) tokens. Student rows arrive as
logits and go through log-softmax; teacher rows and all blend weights are
plain numpy, detached from any graph, so gradients flow into the student
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import ConfigError
from .model import PosteriorSeq


@dataclass
class SoftTarget:
    """Detached per-step teacher distributions; row layout matches PosteriorSeq.

    `mask` (optional, same length) marks which rows count; padded rows are
    ignored by every loss.
    """

    probs: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ShapeError("soft targets must be a (steps, vocab) matrix")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != (self.probs.shape[0],):
                raise ShapeError("mask length must match the number of target rows")
        valid = self.probs if self.mask is None else self.probs[self.mask > 0]
        if valid.size:
            if valid.min() < -1e-12:
                raise ValueError("teacher posteriors must be nonnegative")
            sums = valid.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise ValueError("teacher posterior rows must sum to 1")

    @classmethod
    def from_posteriors(cls, posts: PosteriorSeq, mask: np.ndarray | None = None) -> "SoftTarget":
        return cls(probs=posts.probs(), mask=mask)


@dataclass
class AdaptiveWeights:
    """Per-step blend weights w = c / (c + d), with confidences c, d."""

    w: np.ndarray
    c: np.ndarray
    d: np.ndarray
    lam: float


def one_hot_rows(y: np.ndarray, vocab: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= vocab):
        raise ShapeError(f"token id out of range for vocabulary of {vocab}")
    rows = np.zeros((y.shape[0], vocab))
    rows[np.arange(y.shape[0]), y] = 1.0
    return rows


def _target_ce(student: PosteriorSeq, target_rows: np.ndarray, mask: np.ndarray | None) -> Tensor:
    """-mean over tokens of sum_u target(u) * log p_student(u)."""
    if target_rows.shape != student.logits.data.shape:
        raise ShapeError(f"target shape {target_rows.shape} != posterior shape {student.logits.data.shape}")
    logp = ad.log_softmax(student.logits, axis=1)
    per_step = ad.sum_(ad.mul(logp, Tensor(target_rows)), axis=1)
    if mask is None:
        count = target_rows.shape[0]
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (target_rows.shape[0],):
            raise ShapeError("mask length must match the number of steps")
        per_step = ad.mul(per_step, Tensor(mask))
        count = float(mask.sum())
        if count <= 0:
            raise ValueError("loss mask selects no tokens")
    return ad.scale(ad.sum_(per_step), -1.0 / count)


def _check_lengths(student: PosteriorSeq, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != student.logits.data.shape[0]:
        raise ShapeError(f"{y.shape[0] if y.ndim == 1 else y.shape} labels for {student.logits.data.shape[0]} posterior rows")
    return y


def ce_loss(student: PosteriorSeq, y_true: np.ndarray, smoothing: float = 0.0, mask: np.ndarray | None = None) -> Tensor:
    """Label-smoothed cross-entropy against ground-truth tokens."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {smoothing}")
    y_true = _check_lengths(student, y_true)
    vocab = student.logits.data.shape[1]
    target = one_hot_rows(y_true, vocab)
    if smoothing > 0.0:
        target = (1.0 - smoothing) * target + smoothing / vocab
    return _target_ce(student, target, mask)


def kl_token_ts_loss(teacher: SoftTarget, student: PosteriorSeq, mask: np.ndarray | None = None) -> Tensor:
    """Token-level transfer: CE of the student against the teacher's soft rows.

    Equals KL(teacher || student) up to the teacher's entropy, which is
    constant while the teacher is frozen.
    """
    if mask is None:
        mask = teacher.mask
    return _target_ce(student, teacher.probs, mask)


def seq_ts_loss(student: PosteriorSeq, y_teacher: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Sequence-level transfer: plain CE on the teacher's one-best tokens."""
    return ce_loss(student, y_teacher, smoothing=0.0, mask=mask)


def adaptive_weights(teacher: SoftTarget, y_true: np.ndarray, lam: float) -> AdaptiveWeights:
    """Confidence-normalized blend weights from the teacher's correct-token posterior.

    c = p**lam, d = (1-p)**lam, w = c / (c + d); w is exactly p at lam=1 and
    hits the endpoints exactly for p in {0, 1}.
    """
    if lam <= 0:
        raise ConfigError(f"confidence exponent must be positive, got {lam}")
    y_true = np.asarray(y_true, dtype=np.int64)
    p = teacher.probs[np.arange(y_true.shape[0]), y_true]
    c = np.power(p, lam)
    d = np.power(1.0 - p, lam)
    return AdaptiveWeights(w=c / (c + d), c=c, d=d, lam=lam)


def _blend_rows(teacher: SoftTarget, y_true: np.ndarray, w: np.ndarray) -> np.ndarray:
    onehot = one_hot_rows(y_true, teacher.probs.shape[1])
    return w[:, None] * teacher.probs + (1.0 - w)[:, None] * onehot


def its_loss(
    teacher: SoftTarget,
    y_true: np.ndarray,
    student: PosteriorSeq,
    weight: float,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Fixed-weight interpolation of teacher rows and one-hot ground truth."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"interpolation weight must be in [0, 1], got {weight}")
    y_true = _check_lengths(student, y_true)
    if mask is None:
        mask = teacher.mask
    w = np.full(y_true.shape[0], float(weight))
    return _target_ce(student, _blend_rows(teacher, y_true, w), mask)


def cts_loss(
    teacher: SoftTarget,
    y_true: np.ndarray,
    student: PosteriorSeq,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Per-step switch: teacher row where its argmax is correct, else one-hot."""
    y_true = _check_lengths(student, y_true)
    if mask is None:
        mask = teacher.mask
    correct = teacher.probs.argmax(axis=1) == y_true
    onehot = one_hot_rows(y_true, teacher.probs.shape[1])
    target = np.where(correct[:, None], teacher.probs, onehot)
    return _target_ce(student, target, mask)


def ats_loss(
    teacher: SoftTarget,
    y_true: np.ndarray,
    student: PosteriorSeq,
    lam: float,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Adaptive per-step blend of teacher rows and one-hot ground truth.

    `weights` overrides the computed blend weights (used for cross-checks
    against cts_loss); normally leave it None.
    """
    y_true = _check_lengths(student, y_true)
    if mask is None:
        mask = teacher.mask
    if weights is None:
        weights = adaptive_weights(teacher, y_true, lam).w
    else:
        weights = np.asarray(weights, dtype=np.float64)
    return _target_ce(student, _blend_rows(teacher, y_true, weights), mask)

"""Soft labels, the KL/CE terms, the cosine KL weight and the combined loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, log_softmax, mul, scale, tsum


class IndexMisalignmentError(RuntimeError):
    """Teacher and student rows refer to different samples."""


@dataclass
class SoftLabelSet:
    """Temperature-softened class distributions for a set of samples.

    ``probs`` is a detached (n, K) array.  Student sets produced under a
    tape also carry ``log_probs``, the traced log-probabilities.
    """

    step: int
    channel: str
    tau: float
    indices: np.ndarray
    probs: np.ndarray
    log_probs: Tensor | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.indices)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def soften(logits, tau: float) -> np.ndarray:
    """Row-wise softmax(logits / tau), max-stabilized; no gradient."""
    _check_tau(tau)
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("soften: non-finite logits")
    return _softmax(z / tau)


def soft_labels(logits, tau: float, indices, step: int = 0, channel: str = "A") -> SoftLabelSet:
    """Detached soft labels, the kind stored for the next step."""
    probs = soften(logits, tau)
    return SoftLabelSet(step, channel, float(tau), np.asarray(indices), probs)


def student_labels(logits: Tensor, tau: float, indices, step: int = 0, channel: str = "A") -> SoftLabelSet:
    """Soft labels whose log-probabilities stay on the gradient tape."""
    _check_tau(tau)
    z = logits if tau == 1 else scale(logits, 1.0 / tau)
    logp = log_softmax(z)
    return SoftLabelSet(step, channel, float(tau), np.asarray(indices), np.exp(logp.data), logp)


def _student_logp(student: SoftLabelSet, targets: np.ndarray) -> Tensor:
    if student.log_probs is not None:
        return student.log_probs
    # untraced student: entries with zero target weight contribute 0, not 0 * -inf
    with np.errstate(divide="ignore"):
        return Tensor(np.where(targets > 0, np.log(student.probs), 0.0))


def kl_loss(teacher: SoftLabelSet, student: SoftLabelSet) -> Tensor:
    """Mean over rows of KL(teacher || student); 0*ln0 counts as 0.

    The teacher is treated as a constant: no gradient reaches it.
    """
    if len(teacher.indices) != len(student.indices) or not np.array_equal(teacher.indices, student.indices):
        raise IndexMisalignmentError(
            f"teacher rows (channel {teacher.channel}, step {teacher.step}) do not match "
            f"student rows (channel {student.channel}, step {student.step})"
        )
    t = teacher.probs.data if isinstance(teacher.probs, Tensor) else np.asarray(teacher.probs)
    if t.shape[-1] != student.probs.shape[-1]:
        raise ValueError(f"class count mismatch: teacher K={t.shape[-1]}, student K={student.probs.shape[-1]}")
    n = len(t)
    logp = _student_logp(student, t)
    t = t.astype(logp.dtype, copy=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.where(t > 0, t * np.log(t), 0.0).sum() / n
    cross = scale(tsum(mul(logp, t)), -1.0 / n)
    return add(cross, np.asarray(entropy_term, dtype=logp.dtype))


def soft_target_ce(targets: np.ndarray, log_probs: Tensor) -> Tensor:
    """Mean over rows of -sum_k target_k * log p_k."""
    targets = np.asarray(targets, dtype=log_probs.dtype)
    if targets.shape != log_probs.shape:
        raise ValueError(f"target shape {targets.shape} does not match {log_probs.shape}")
    return scale(tsum(mul(log_probs, targets)), -1.0 / len(targets))


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def smoothed_targets(labels, num_classes: int, eps: float, dtype=np.float64) -> np.ndarray:
    """(1 - eps) * onehot + eps / K."""
    if not 0 <= eps < 1:
        raise ValueError(f"smoothing must lie in [0, 1), got {eps}")
    return (1 - eps) * one_hot(labels, num_classes, dtype) + eps / num_classes


def ce_loss(labels, student) -> Tensor:
    """Hard-label cross-entropy from temperature-1 log-probabilities.

    ``student`` is a :class:`SoftLabelSet` at tau=1 or a log-probability tensor.
    """
    if isinstance(student, SoftLabelSet):
        if student.tau != 1:
            raise ValueError("cross-entropy uses temperature-1 probabilities")
        targets = one_hot(labels, student.probs.shape[-1])
        logp = _student_logp(student, targets)
    else:
        logp = student
        targets = one_hot(labels, logp.shape[-1], logp.dtype)
    return soft_target_ce(targets, logp)


def lambda_schedule(alpha: float, s: float, S: float) -> float:
    """Cosine KL weight: alpha * (1 - 0.5 * (1 + cos(pi * s / S))).

    Rises from 0 at ``s = 0`` to ``alpha`` at ``s = S``.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if S < 1 or not 0 <= s <= S:
        raise ValueError(f"need 0 <= s <= S and S >= 1, got s={s}, S={S}")
    return alpha * (1 - 0.5 * (1 + math.cos(math.pi * s / S)))


@dataclass
class LossBreakdown:
    ce: float
    kl: list[float]
    lam: float
    total: float

    @property
    def kl_sum(self) -> float:
        return float(sum(self.kl))


def total_loss(ce, kls: Sequence = (), lam: float = 0.0):
    """Combine CE and KL terms as (1 - lam) * CE + lam * sum(KL).

    With no KL terms (cold start) the total is CE itself, whatever ``lam``.
    Tensors in, ``(Tensor, LossBreakdown)`` out; floats in, a
    :class:`LossBreakdown` out.
    """
    kls = list(kls)
    if not isinstance(ce, Tensor):
        vals = [float(ce), *map(float, kls)]
        if not all(map(math.isfinite, vals)):
            raise FloatingPointError("non-finite loss component")
        total = float(ce) if not kls else (1 - lam) * float(ce) + lam * math.fsum(map(float, kls))
        return LossBreakdown(float(ce), [float(k) for k in kls], lam, total)

    if not kls:
        total = ce
    else:
        kl_sum = kls[0]
        for k in kls[1:]:
            kl_sum = add(kl_sum, k)
        total = add(scale(ce, 1 - lam), scale(kl_sum, lam))
    breakdown = LossBreakdown(ce.item(), [k.item() for k in kls], lam, total.item())
    if not math.isfinite(breakdown.total):
        raise FloatingPointError(f"non-finite loss: {breakdown}")
    return total, breakdown

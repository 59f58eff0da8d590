"""Classification and distillation losses of the three branches."""

import logging
from dataclasses import dataclass

import numpy as np

from darkformer import tensor as T
from darkformer.model import TripleOutput
from darkformer.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the training objective."""

    source: float = 1.0
    # target-branch cross-entropy; 0 for strictly unlabeled targets
    target: float = 1.0
    bridge: float = 1.0
    distill: float = 1.0
    temperature: float = 1.0

    def validate(self) -> str | None:
        """Return a description of the first violated invariant, or None."""
        weights = (self.source, self.target, self.bridge, self.distill)
        if min(weights) < 0:
            return f"loss weights must be >= 0, got {weights}"
        if max(weights) == 0:
            return "at least one loss weight must be positive"
        if self.temperature <= 0:
            return f"temperature must be > 0, got {self.temperature}"
        return None


@dataclass(frozen=True)
class LossTerms:
    """Unweighted per-term values of one objective evaluation (None when the term was skipped)."""

    total: float
    source: float | None = None
    target: float | None = None
    bridge: float | None = None
    distill: float | None = None

    def is_finite(self) -> bool:
        """True when every computed term is finite."""
        values = [self.total, self.source, self.target, self.bridge, self.distill]
        return all(np.isfinite(v) for v in values if v is not None)


def _as_rows(logits: Tensor) -> Tensor:
    return T.reshape(logits, (1, logits.shape[0])) if logits.ndim == 1 else logits


def cross_entropy(logits: Tensor, labels: np.ndarray | int) -> Tensor:
    """Mean of −log softmax(logits)[label] over the batch.

    Parameters:
    -----------
        logits: Tensor
            [K] or [B, K].
        labels: np.ndarray | int
            One class index per row.

    Returns:
    --------
        Tensor:
            Scalar loss.

    Raises:
    -------
        ValueError:
            When a label is outside [0, K) or the label count does not match.
    """
    rows = _as_rows(logits)
    batch, classes = rows.shape
    ids = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if ids.shape != (batch,):
        raise ValueError(f"cross_entropy: {ids.shape[0]} labels for {batch} logit rows")
    if ids.min() < 0 or ids.max() >= classes:
        raise ValueError(f"cross_entropy: labels {ids.tolist()} outside [0, {classes})")
    picked = T.log_softmax(rows, axis=-1)[np.arange(batch), ids]
    return -T.mean(picked)


def distillation_loss(teacher_logits: Tensor, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Soft-label cross-entropy −Σ p log q averaged over the batch.

    p = softmax(teacher / τ) is computed from a detached copy of the teacher, so no
    gradient reaches the teacher. q = softmax(student / τ).

    Raises:
    -------
        ShapeError:
            When the logit shapes differ.
        ValueError:
            When temperature is not positive.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"distillation_loss: teacher {teacher_logits.shape} and student {student_logits.shape} differ")
    if temperature <= 0:
        raise ValueError(f"distillation_loss: temperature must be > 0, got {temperature}")
    teacher = _as_rows(teacher_logits.detach())
    student = _as_rows(student_logits)
    p = T.softmax(T.scale(teacher, 1.0 / temperature), axis=-1).data
    log_q = T.log_softmax(T.scale(student, 1.0 / temperature), axis=-1)
    per_row = T.sum(log_q * Tensor(p), axis=-1)
    return -T.mean(per_row)


def total_loss(
    triple: TripleOutput, labels: np.ndarray, weights: LossWeights, teacher: Tensor | None = None
) -> tuple[Tensor, LossTerms]:
    """Weighted sum of the branch cross-entropies and the bridge-to-target distillation.

    Terms with weight 0 are not computed at all, and bridge terms are skipped when the
    triple has no bridge branch. teacher replaces the bridge logits as the distillation
    target when given; it is always treated as a constant.

    Returns:
    --------
        tuple[Tensor, LossTerms]:
            The scalar objective and its unweighted parts.
    """
    parts: list[Tensor] = []
    values: dict[str, float] = {}

    def add(name: str, weight: float, loss: Tensor) -> None:
        values[name] = loss.item()
        parts.append(T.scale(loss, weight))

    if weights.source > 0:
        add("source", weights.source, cross_entropy(triple.source.logits, labels))
    if weights.target > 0:
        add("target", weights.target, cross_entropy(triple.target.logits, labels))
    if triple.bridge is not None:
        if weights.bridge > 0:
            add("bridge", weights.bridge, cross_entropy(triple.bridge.logits, labels))
        if weights.distill > 0:
            add(
                "distill",
                weights.distill,
                distillation_loss(
                    triple.bridge.logits if teacher is None else teacher,
                    triple.target.logits,
                    weights.temperature,
                ),
            )
    if not parts:
        raise ValueError("total_loss: every active term has weight 0")
    loss = parts[0]
    for part in parts[1:]:
        loss = loss + part
    return loss, LossTerms(total=loss.item(), **values)

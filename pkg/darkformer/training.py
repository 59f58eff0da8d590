"""Optimizers, the training loop, evaluation, ablation grids and their CSV outputs."""

import csv
import dataclasses
import logging
import math
import pathlib
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from result import Err, Ok, Result

from darkformer import tensor as T
from darkformer.attention import count_scores
from darkformer.config import RunConfig
from darkformer.losses import LossTerms, total_loss
from darkformer.model import ModelParams, forward_branch, forward_triple, infer, init_params
from darkformer.synth import PairedDataset, worker_count
from darkformer.tensor import RngState, Tensor
from darkformer.tokenizer import sample_frames
from darkformer.types import ClipSpec, Domain, OptimizerKind, Schedule, VideoClip

logger = logging.getLogger(__name__)

# RngState stream keys
STREAM_INIT = 1
STREAM_PAIRING = 2

METRICS_HEADER = (
    "epoch",
    "lr",
    "loss_total",
    "loss_source",
    "loss_target",
    "loss_bridge",
    "loss_distill",
    "source_top1",
    "source_top5",
    "target_top1",
    "target_top5",
)
ABLATION_COLUMNS = ("seeds", "source_top1", "target_top1", "target_top5", "attention_scores")


class NonFiniteLossError(ArithmeticError):
    """Raised when the training objective is NaN or infinite."""

    def __init__(self, epoch: int, step: int, terms: LossTerms) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {terms}")
        self.epoch = epoch
        self.step = step
        self.terms = terms


class Optimizer:
    """Base class: decoupled weight decay plus a rule-specific gradient step."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0) -> None:
        self.params = list(params)
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        """Update every parameter in place; missing gradients count as zero."""
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            update = self._update(i, grad)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        """Drop all gradients."""
        for p in self.params:
            p.zero_grad()

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Sgd(Optimizer):
    """SGD with heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        super().__init__(params, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        self.velocity[index] = self.momentum * self.velocity[index] + grad
        return self.velocity[index]


class Adam(Optimizer):
    """Adam with bias correction (decoupled decay, i.e. AdamW)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        super().__init__(params, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        """Advance the bias-correction step count, then update."""
        self.t += 1
        super().step(lr)

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        self.m[index] = self.beta1 * self.m[index] + (1.0 - self.beta1) * grad
        self.v[index] = self.beta2 * self.v[index] + (1.0 - self.beta2) * grad * grad
        m_hat = self.m[index] / (1.0 - self.beta1**self.t)
        v_hat = self.v[index] / (1.0 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: ModelParams, cfg: RunConfig) -> Optimizer:
    """Optimizer selected by cfg.optimizer."""
    match cfg.optimizer:
        case OptimizerKind.Sgd:
            return Sgd(params.parameters(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        case OptimizerKind.Adam:
            return Adam(params.parameters(), weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer}")


def learning_rate(schedule: Schedule, base: float, step: int, total_steps: int) -> float:
    """Learning rate at a zero-based step; cosine decays from base to 0 over total_steps."""
    match schedule:
        case Schedule.Constant:
            return base
        case Schedule.Cosine:
            return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))
    raise ValueError(f"unknown schedule {schedule}")


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    norm = T.global_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass(frozen=True)
class EvalResult:
    """Accuracy of one labeled split."""

    top1: float
    # None when the class count is 5 or fewer
    top5: float | None
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray

    @property
    def count(self) -> int:
        """Number of evaluated clips."""
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class MetricsRecord:
    """Per-epoch training losses and test accuracies."""

    epoch: int
    lr: float
    losses: LossTerms
    source: EvalResult
    target: EvalResult


def sample_clips(clips: Sequence[VideoClip], spec: ClipSpec) -> Result[list[VideoClip], str]:
    """Apply sample_frames to every clip."""
    out = []
    for i, clip in enumerate(clips):
        match sample_frames(clip, spec):
            case Ok(sampled):
                out.append(sampled)
            case Err(msg):
                return Err(f"clip {i} (label {clip.label}, {clip.domain}): {msg}")
    return Ok(out)


def sample_dataset(dataset: PairedDataset, spec: ClipSpec) -> Result[PairedDataset, str]:
    """Dataset with every clip reduced to the N frames the model consumes."""
    sampled = PairedDataset(num_classes=dataset.num_classes)
    for key, clips in dataset.splits().items():
        match sample_clips(clips, spec):
            case Ok(result):
                sampled.splits()[key].extend(result)
            case Err(msg):
                return Err(f"{key}: {msg}")
    return Ok(sampled)


def evaluate(
    params: ModelParams, clips: Sequence[VideoClip], batch_size: int = 16, workers: int | None = None
) -> Result[EvalResult, str]:
    """Single-branch accuracy and confusion matrix over sampled, labeled clips.

    Parameters:
    -----------
        params: ModelParams
            Model to evaluate (read only).
        clips: Sequence[VideoClip]
            Clips with exactly N frames.
        batch_size: int
            Clips per forward pass.
        workers: int | None
            Threads over batches; defaults to DKTF_THREADS (1 when unset).

    Returns:
    --------
        Result[EvalResult, str]:
            Ok(EvalResult), or Err(str) for an empty clip list or a label outside the class range.
    """
    if not clips:
        return Err("cannot evaluate an empty clip set")
    k = params.config.num_classes
    labels = np.array([clip.label for clip in clips], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= k:
        return Err(f"labels outside [0, {k})")
    chunks = [np.stack([c.frames for c in clips[i : i + batch_size]]) for i in range(0, len(clips), batch_size)]
    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        probs = np.concatenate([p.probabilities for p in pool.map(lambda x: infer(x, params), chunks)])
    predictions = np.argmax(probs, axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    top5 = None
    if k > 5:
        best5 = np.argsort(-probs, axis=1, kind="stable")[:, :5]
        top5 = float(np.mean(np.any(best5 == labels[:, None], axis=1)))
    top1 = float(np.trace(confusion) / confusion.sum())
    return Ok(EvalResult(top1=top1, top5=top5, confusion=confusion, predictions=predictions, labels=labels))


def build_model(cfg: RunConfig) -> ModelParams:
    """Fresh parameters seeded from cfg.seed."""
    return init_params(cfg.model_config(), RngState(cfg.seed).generator(STREAM_INIT))


def _mean_terms(terms: list[LossTerms]) -> LossTerms:
    def avg(name: str) -> float | None:
        values = [getattr(t, name) for t in terms if getattr(t, name) is not None]
        return float(np.mean(values)) if values else None

    return LossTerms(
        total=float(np.mean([t.total for t in terms])),
        source=avg("source"),
        target=avg("target"),
        bridge=avg("bridge"),
        distill=avg("distill"),
    )


def train(
    params: ModelParams,
    dataset: PairedDataset,
    cfg: RunConfig,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
) -> Result[tuple[ModelParams, list[MetricsRecord]], str]:
    """Train params in place on freshly re-paired batches each epoch.

    Each step runs forward_triple, total_loss, backward, gradient clipping, the
    optimizer update and gradient zeroing. Each epoch ends with evaluation of both
    test splits.

    Parameters:
    -----------
        params: ModelParams
            Parameters to update.
        dataset: PairedDataset
            Raw clips; frames are sampled with the config's ClipSpec.
        cfg: RunConfig
            Optimization settings and loss weights.
        on_epoch: Callable[[MetricsRecord], None] | None
            Called with each epoch's record.

    Returns:
    --------
        Result[tuple[ModelParams, list[MetricsRecord]], str]:
            Ok((params, records)), or Err(str) when the data does not fit the model.

    Raises:
    -------
        NonFiniteLossError:
            When a step's objective is not finite.
    """
    if dataset.num_classes != cfg.num_classes:
        return Err(f"dataset has {dataset.num_classes} classes, config expects {cfg.num_classes}")
    match sample_dataset(dataset, cfg.clip_spec()):
        case Ok(data):
            pass
        case Err(msg):
            return Err(msg)
    if not data.train_source:
        return Err("dataset has no training clips")
    weights = cfg.loss_weights()
    optimizer = make_optimizer(params, cfg)
    steps_per_epoch = math.ceil(len(data.train_source) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    streams = RngState(cfg.seed)
    records = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        batches = data.batches(streams.generator(STREAM_PAIRING, epoch), cfg.batch_size, cfg.target_fraction)
        terms = []
        lr = cfg.lr
        for batch in batches:
            lr = learning_rate(cfg.schedule, cfg.lr, step, total_steps)
            try:
                loss, parts = total_loss(forward_triple(batch, params), batch.labels, weights)
            except T.NonFiniteError as ex:
                raise NonFiniteLossError(epoch, step, LossTerms(total=math.nan)) from ex
            if not parts.is_finite():
                raise NonFiniteLossError(epoch, step, parts)
            loss.backward()
            norm = clip_grad_norm(optimizer.params, cfg.clip_norm)
            optimizer.step(lr)
            optimizer.zero_grad()
            terms.append(parts)
            logger.debug("epoch %d step %d lr %.3g loss %.6f grad norm %.4f", epoch, step, lr, parts.total, norm)
            step += 1
        source = evaluate(params, data.test_source, cfg.batch_size)
        target = evaluate(params, data.test_target, cfg.batch_size)
        if source.is_err() or target.is_err():
            return Err(f"evaluation failed: {source.err() or target.err()}")
        record = MetricsRecord(
            epoch=epoch, lr=lr, losses=_mean_terms(terms), source=source.unwrap(), target=target.unwrap()
        )
        records.append(record)
        logger.info(
            "epoch %d/%d loss %.4f source top1 %.3f target top1 %.3f",
            epoch,
            cfg.epochs,
            record.losses.total,
            record.source.top1,
            record.target.top1,
        )
        if on_epoch is not None:
            on_epoch(record)
    return Ok((params, records))


def attention_scores_per_layer(params: ModelParams) -> int:
    """Self-attention scores one branch computes per clip, head and layer."""
    spec = params.config.clip
    if params.config.layers == 0:
        return 0
    clip = np.zeros((1, spec.frames, spec.height, spec.width, spec.channels))
    with T.no_grad(), count_scores() as counter:
        forward_branch(clip, params)
    return counter.total // params.config.layers


@dataclass(frozen=True)
class AblationRow:
    """Mean final-epoch metrics of one grid cell over the ablation seeds."""

    cell: dict[str, str]
    seeds: tuple[int, ...]
    source_top1: float
    target_top1: float
    target_top5: float | None
    attention_scores: int
    records: list[list[MetricsRecord]] = field(default_factory=list)


def ablate(
    dataset: PairedDataset, base: RunConfig, cells: list[dict[str, str]]
) -> Result[list[AblationRow], str]:
    """Train every grid cell for every seed in base.ablation_seeds and average the final epochs.

    Parameters:
    -----------
        dataset: PairedDataset
            Raw clips long enough for the largest frame count in the grid.
        base: RunConfig
            Settings shared by all cells.
        cells: list[dict[str, str]]
            Per-cell overrides, e.g. from grid_cells.

    Returns:
    --------
        Result[list[AblationRow], str]:
            One row per cell in order, or the first error.
    """
    rows = []
    for cell in cells:
        match base.with_overrides(cell):
            case Ok(cfg):
                pass
            case Err(msg):
                return Err(f"grid cell {cell}: {msg}")
        runs = []
        for seed in cfg.ablation_seeds:
            seeded = dataclasses.replace(cfg, seed=seed)
            match train(build_model(seeded), dataset, seeded):
                case Ok((_, records)):
                    runs.append(records)
                case Err(msg):
                    return Err(f"grid cell {cell}, seed {seed}: {msg}")
        finals = [records[-1] for records in runs]
        top5 = [r.target.top5 for r in finals if r.target.top5 is not None]
        row = AblationRow(
            cell=cell,
            seeds=cfg.ablation_seeds,
            source_top1=float(np.mean([r.source.top1 for r in finals])),
            target_top1=float(np.mean([r.target.top1 for r in finals])),
            target_top5=float(np.mean(top5)) if top5 else None,
            attention_scores=attention_scores_per_layer(build_model(cfg)),
            records=runs,
        )
        logger.info("ablation %s: target top1 %.3f", cell, row.target_top1)
        rows.append(row)
    return Ok(rows)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.17g}"


def write_metrics_csv(path: pathlib.Path, records: Sequence[MetricsRecord]) -> None:
    """One row per epoch under METRICS_HEADER."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.epoch,
                    _fmt(r.lr),
                    _fmt(r.losses.total),
                    _fmt(r.losses.source),
                    _fmt(r.losses.target),
                    _fmt(r.losses.bridge),
                    _fmt(r.losses.distill),
                    _fmt(r.source.top1),
                    _fmt(r.source.top5),
                    _fmt(r.target.top1),
                    _fmt(r.target.top5),
                ]
            )


def write_confusion_csv(path: pathlib.Path, confusion: np.ndarray) -> None:
    """Confusion counts, one row per true class."""
    k = confusion.shape[0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred", *range(k)])
        for i in range(k):
            writer.writerow([i, *confusion[i].tolist()])


def write_ablation_csv(path: pathlib.Path, keys: Sequence[str], rows: Sequence[AblationRow]) -> None:
    """Grid keys, then ABLATION_COLUMNS, one row per cell."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([*keys, *ABLATION_COLUMNS])
        for row in rows:
            writer.writerow(
                [
                    *(row.cell[k] for k in keys),
                    " ".join(str(s) for s in row.seeds),
                    _fmt(row.source_top1),
                    _fmt(row.target_top1),
                    _fmt(row.target_top5),
                    row.attention_scores,
                ]
            )


def evaluate_split(params: ModelParams, dataset: PairedDataset, domain: Domain) -> Result[EvalResult, str]:
    """Sample and evaluate one test split."""
    match sample_clips(dataset.test_split(domain), params.config.clip):
        case Ok(clips):
            return evaluate(params, clips)
        case Err(msg):
            return Err(msg)
    raise AssertionError("unreachable")

"""Finite-difference gradient checks for the primitives, the attention kernels and the full objective."""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from darkformer import tensor as T
from darkformer.attention import AttentionParams, attend_cross, attend_space, attend_time
from darkformer.config import RunConfig
from darkformer.losses import cross_entropy, distillation_loss, total_loss
from darkformer.model import forward_triple, init_params
from darkformer.tensor import RngState, Tensor
from darkformer.types import Domain, PairBatch, VideoClip

logger = logging.getLogger(__name__)

# differences below this are accepted whatever their relative size
ABS_TOLERANCE = 1e-9

LossFn = Callable[[], Tensor]


@dataclass(frozen=True)
class CheckResult:
    """Worst sampled disagreement between analytic and numeric gradients of one check."""

    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status:4} {self.name:32} entries={self.checked:5d} "
            f"rel={self.max_rel_error:.3e} abs={self.max_abs_error:.3e}"
        )


@dataclass
class GradcheckReport:
    """Results of a suite run."""

    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """True when every check passed."""
        return bool(self.results) and all(r.passed for r in self.results)

    def failures(self) -> list[CheckResult]:
        """Checks that did not pass."""
        return [r for r in self.results if not r.passed]


def check_gradients(
    name: str,
    loss_fn: LossFn,
    params: dict[str, Tensor],
    rng: np.random.Generator,
    samples: int = 24,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> CheckResult:
    """Compare backward() against central differences on sampled parameter entries.

    The relative error of an entry is |a − n| / (|a| + |n| + 1e-8). An entry passes
    when that is below tolerance or |a − n| is below ABS_TOLERANCE.

    Parameters:
    -----------
        name: str
            Label for the report.
        loss_fn: LossFn
            Builds a scalar from the tensors in params; called repeatedly.
        params: dict[str, Tensor]
            Tensors to differentiate, requires_grad set.
        rng: np.random.Generator
            Picks the entries; every entry is checked when a tensor has at most `samples`.
        samples: int
            Entries per tensor.
        step: float
            Central-difference step h.
        tolerance: float
            Relative error bound.

    Returns:
    --------
        CheckResult:
            Worst errors over all sampled entries.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {key: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for key, p in params.items()}

    worst_rel = worst_abs = 0.0
    checked = 0
    passed = True
    with T.no_grad():
        for key, p in params.items():
            size = p.data.size
            picks = np.arange(size) if size <= samples else rng.choice(size, size=samples, replace=False)
            flat = p.data.reshape(-1)
            for index in picks:
                original = flat[index]
                flat[index] = original + step
                plus = loss_fn().item()
                flat[index] = original - step
                minus = loss_fn().item()
                flat[index] = original
                numeric = (plus - minus) / (2.0 * step)
                a = float(analytic[key].reshape(-1)[index])
                diff = abs(a - numeric)
                rel = diff / (abs(a) + abs(numeric) + 1e-8)
                if rel >= tolerance and diff >= ABS_TOLERANCE:
                    passed = False
                    logger.debug("%s: %s[%d] analytic %.6e numeric %.6e", name, key, index, a, numeric)
                worst_rel = max(worst_rel, rel)
                worst_abs = max(worst_abs, diff)
                checked += 1
    for p in params.values():
        p.zero_grad()
    return CheckResult(name=name, checked=checked, max_rel_error=worst_rel, max_abs_error=worst_abs, passed=passed)


def _leaf(rng: np.random.Generator, *shape: int, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _attention_params(rng: np.random.Generator, dim: int) -> dict[str, Tensor]:
    return {n: Tensor(rng.normal(0.0, 0.5, size=(dim, dim)), requires_grad=True) for n in ("w_q", "w_k", "w_v", "w_o")}


def primitive_checks(rng: np.random.Generator) -> list[tuple[str, LossFn, dict[str, Tensor]]]:
    """Loss builders covering every differentiable primitive and attention kernel."""
    checks: list[tuple[str, LossFn, dict[str, Tensor]]] = []

    def add(name: str, params: dict[str, Tensor], build: Callable[[], Tensor]) -> None:
        weights = Tensor(rng.normal(size=build().shape))
        checks.append((name, lambda: T.sum(build() * weights), params))

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    add("matmul", {"a": a, "b": b}, lambda: T.matmul(a, b))
    x = _leaf(rng, 3, 5)
    add("add/sub/mul", {"x": x}, lambda: (x + x * x) - T.scale(x, 0.5))
    add("softmax", {"x": x}, lambda: T.softmax(x, axis=-1))
    add("log_softmax", {"x": x}, lambda: T.log_softmax(x, axis=0))
    add("gelu", {"x": x}, lambda: T.gelu(x))
    add("exp", {"x": x}, lambda: T.exp(T.scale(x, 0.3)))
    pos = _leaf(rng, 3, 4, positive=True)
    add("log", {"p": pos}, lambda: T.log(pos))
    gain, bias = _leaf(rng, 5), _leaf(rng, 5)
    add("layernorm", {"x": x, "gain": gain, "bias": bias}, lambda: T.layernorm(x, gain, bias))
    y = _leaf(rng, 2, 3, 4)
    add(
        "reshape/transpose/concat",
        {"y": y},
        lambda: T.concat([T.reshape(T.transpose(y, (2, 0, 1)), (4, 6)), T.swapaxes(T.reshape(y, (6, 4)), 0, 1)], 1),
    )
    add("index", {"y": y}, lambda: y[np.array([0, 0, 1])])
    add("broadcast_to", {"y": y}, lambda: T.broadcast_to(y[:, 1:, :], (3, 2, 2, 4)))
    table = _leaf(rng, 6, 3)
    add("embedding/sum/mean", {"t": table}, lambda: T.sum(T.embedding(table, np.array([1, 4, 1])), axis=0))
    checks.append(("mean", lambda: T.mean(table * table), {"t": table}))

    m, n, d, h = 4, 3, 8, 2
    z = _leaf(rng, 2, 1 + m * n, d)
    zt = _leaf(rng, 2, 1 + m * n, d)
    w = _attention_params(rng, d)
    ap = AttentionParams(heads=h, **w)
    add("attend_time", {"z": z, **w}, lambda: attend_time(z, ap, n, m)[0])
    add("attend_space", {"z": z, **w}, lambda: attend_space(z, ap, n, m)[0])
    add("attend_cross", {"z_q": z, "z_kv": zt, **w}, lambda: attend_cross(z, zt, ap)[0])

    logits, teacher = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    checks.append(("cross_entropy", lambda: cross_entropy(logits, labels), {"logits": logits}))
    checks.append(
        ("distillation_loss", lambda: distillation_loss(teacher, logits, 2.0), {"student": logits})
    )
    return checks


def tiny_pairs(cfg: RunConfig, rng: np.random.Generator, count: int = 2) -> PairBatch:
    """Random same-label clip pairs shaped for cfg."""
    spec = cfg.clip_spec()
    shape = (spec.frames, spec.height, spec.width, spec.channels)
    pairs = []
    for i in range(count):
        label = i % cfg.num_classes
        pairs.append(
            (
                VideoClip(frames=rng.uniform(size=shape), label=label, domain=Domain.Source),
                VideoClip(frames=rng.uniform(size=shape) * 0.3, label=label, domain=Domain.Target),
            )
        )
    return PairBatch(pairs=pairs)


def model_check(cfg: RunConfig, rng: np.random.Generator) -> tuple[str, LossFn, dict[str, Tensor]]:
    """The full three-branch objective against every model parameter."""
    params = init_params(cfg.model_config(), rng)
    # move off the symmetric init so layernorm and class-token gradients are non-trivial
    for name, t in params:
        t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)
    batch = tiny_pairs(cfg, rng)
    weights = cfg.loss_weights()
    # teacher held fixed, as the detached teacher is in training
    with T.no_grad():
        bridge = forward_triple(batch, params).bridge
    teacher = None if bridge is None else bridge.logits.detach()

    def loss() -> Tensor:
        return total_loss(forward_triple(batch, params), batch.labels, weights, teacher)[0]

    return "total_loss", loss, dict(params)


def run_gradcheck(cfg: RunConfig) -> GradcheckReport:
    """Run every check at 64-bit precision with cfg's sampling settings.

    The caller's precision is restored afterwards.
    """
    previous = T.get_dtype()
    T.set_precision(64)
    report = GradcheckReport()
    try:
        rng = RngState(cfg.seed).generator(9)
        checks = [*primitive_checks(rng), model_check(cfg, rng)]
        for name, fn, params in checks:
            result = check_gradients(
                name, fn, params, rng, cfg.gradcheck_samples, cfg.gradcheck_step, cfg.gradcheck_tolerance
            )
            logger.info("%s", result)
            report.results.append(result)
    finally:
        T.set_precision(32 if previous == np.float32 else 64)
    return report

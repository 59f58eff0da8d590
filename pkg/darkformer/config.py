"""Run configuration: a flat ``key = value`` text file plus command-line overrides."""

import dataclasses
import itertools
import logging
import pathlib
from dataclasses import dataclass
from typing import Any

from result import Err, Ok, Result

from darkformer.losses import LossWeights
from darkformer.model import ModelConfig
from darkformer.synth import SynthConfig
from darkformer.types import AttentionMode, BridgeInit, ClipSpec, OptimizerKind, Schedule

logger = logging.getLogger(__name__)

_TRUE = ("on", "true", "yes", "1")
_FALSE = ("off", "false", "no", "0")


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run, with desk-scale defaults."""

    seed: int = 1
    precision: int = 64
    # data
    num_classes: int = 8
    train_per_class: int = 20
    test_per_class: int = 10
    height: int = 32
    width: int = 32
    channels: int = 1
    frames: int = 8
    stride: int = 2
    gamma: float = 2.2
    contrast: float = 0.4
    noise: float = 0.05
    position_jitter: float = 1.0
    speed_jitter: float = 1.0
    size_jitter: float = 1.0
    texture: float = 1.0
    # model
    patch: int = 8
    dim: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 2
    attention_mode: AttentionMode = AttentionMode.SpaceTime
    cross_attention: bool = True
    share_qkv: bool = True
    bridge_init: BridgeInit = BridgeInit.Source
    # objective
    w_src: float = 1.0
    w_tgt_ce: float = 1.0
    w_bridge: float = 1.0
    w_dtl: float = 1.0
    temperature: float = 1.0
    distillation: bool = True
    strict_uda: bool = False
    # optimization
    optimizer: OptimizerKind = OptimizerKind.Adam
    lr: float = 3e-4
    schedule: Schedule = Schedule.Cosine
    weight_decay: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    clip_norm: float = 1.0
    target_fraction: float = 1.0
    # ablation and verification
    ablation_seeds: tuple[int, ...] = (1, 2, 3)
    gradcheck_samples: int = 24
    gradcheck_step: float = 1e-5
    gradcheck_tolerance: float = 1e-4

    @classmethod
    def tiny(cls) -> "RunConfig":
        """Configuration small enough for exhaustive gradient checks (M=4, N=3, D=8, h=2, L=2, K=3)."""
        return cls(
            num_classes=3,
            train_per_class=2,
            test_per_class=2,
            height=4,
            width=4,
            frames=3,
            stride=1,
            patch=2,
            dim=8,
            heads=2,
            layers=2,
            texture=0.0,
            batch_size=2,
            epochs=1,
        )

    def clip_spec(self) -> ClipSpec:
        """Clip geometry."""
        return ClipSpec(
            frames=self.frames,
            height=self.height,
            width=self.width,
            channels=self.channels,
            patch=self.patch,
            stride=self.stride,
            dim=self.dim,
        )

    def model_config(self) -> ModelConfig:
        """Architecture."""
        return ModelConfig(
            clip=self.clip_spec(),
            heads=self.heads,
            layers=self.layers,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes,
            attention_mode=self.attention_mode,
            cross_attention=self.cross_attention,
            share_qkv=self.share_qkv,
            bridge_init=self.bridge_init,
        )

    def synth_config(self) -> SynthConfig:
        """Synthetic dataset with raw clips just long enough for sample_frames."""
        return SynthConfig(
            num_classes=self.num_classes,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            height=self.height,
            width=self.width,
            channels=self.channels,
            raw_frames=self.clip_spec().raw_frames,
            position_jitter=self.position_jitter,
            speed_jitter=self.speed_jitter,
            size_jitter=self.size_jitter,
            texture=self.texture,
            gamma=self.gamma,
            contrast=self.contrast,
            noise=self.noise,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        """Objective weights after the distillation and strict_uda switches."""
        return LossWeights(
            source=self.w_src,
            target=0.0 if self.strict_uda else self.w_tgt_ce,
            bridge=self.w_bridge,
            distill=self.w_dtl if self.distillation else 0.0,
            temperature=self.temperature,
        )

    def validate(self) -> str | None:
        """Return a description of the first violated invariant, or None."""
        if self.precision not in (32, 64):
            return f"precision: must be 32 or 64, got {self.precision}"
        if self.lr < 0:
            return f"lr: must be >= 0, got {self.lr}"
        if self.epochs < 1:
            return f"epochs: must be >= 1, got {self.epochs}"
        if self.batch_size < 1:
            return f"batch_size: must be >= 1, got {self.batch_size}"
        if self.clip_norm <= 0:
            return f"clip_norm: must be > 0, got {self.clip_norm}"
        if not 0.0 < self.target_fraction <= 1.0:
            return f"target_fraction: must be in (0, 1], got {self.target_fraction}"
        if not self.ablation_seeds:
            return "ablation_seeds: at least one seed is required"
        if self.gradcheck_samples < 1 or self.gradcheck_step <= 0 or self.gradcheck_tolerance <= 0:
            return "gradcheck_samples, gradcheck_step and gradcheck_tolerance must be positive"
        for check in (self.model_config().validate, self.synth_config().validate, self.loss_weights().validate):
            if (msg := check()) is not None:
                return msg
        return None

    def to_text(self) -> str:
        """Echo every key in declaration order, one ``key = value`` line each."""
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    def with_overrides(self, overrides: dict[str, str]) -> Result["RunConfig", str]:
        """Apply textual overrides; unknown keys and malformed values are errors."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        values: dict[str, Any] = {}
        for key, text in overrides.items():
            if key not in fields:
                return Err(f"unknown config key '{key}'")
            match _coerce(fields[key].type, text.strip()):
                case Ok(value):
                    values[key] = value
                case Err(msg):
                    return Err(f"config key '{key}': {msg}")
        cfg = dataclasses.replace(self, **values)
        if (msg := cfg.validate()) is not None:
            return Err(f"invalid config: {msg}")
        return Ok(cfg)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(kind: Any, text: str) -> Result[Any, str]:
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return Ok(True)
            if text.lower() in _FALSE:
                return Ok(False)
            return Err(f"expected on/off, got '{text}'")
        if kind is int:
            return Ok(int(text))
        if kind is float:
            return Ok(float(text))
        if kind in (AttentionMode, BridgeInit, OptimizerKind, Schedule):
            return Ok(kind.from_string(text))
        if kind == tuple[int, ...]:
            return Ok(tuple(int(part) for part in text.split(",") if part.strip()))
    except ValueError as ex:
        return Err(str(ex))
    return Err(f"unsupported type {kind}")


def parse_pairs(text: str) -> Result[dict[str, str], str]:
    """Split ``key = value`` lines; '#' starts a comment, blank lines are skipped."""
    pairs: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            return Err(f"line {number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            return Err(f"line {number}: missing key")
        pairs[key] = value
    return Ok(pairs)


def load_config(
    path: pathlib.Path | None, overrides: dict[str, str] | None = None, base: RunConfig | None = None
) -> Result[RunConfig, str]:
    """Build a RunConfig from defaults (or base), an optional file, then overrides.

    Parameters:
    -----------
        path: pathlib.Path | None
            Config file; None uses only defaults and overrides.
        overrides: dict[str, str] | None
            Values that win over the file, e.g. from ``--set key=value``.
        base: RunConfig | None
            Starting values; RunConfig() when None.

    Returns:
    --------
        Result[RunConfig, str]:
            Ok(RunConfig) if every key is known and valid, Err(str) naming the offending key otherwise.
    """
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = path.read_text()
        except OSError as ex:
            return Err(f"Can't read config {path}: {ex}")
        match parse_pairs(text):
            case Ok(pairs):
                values.update(pairs)
            case Err(msg):
                return Err(f"{path}: {msg}")
    values.update(overrides or {})
    return (base or RunConfig()).with_overrides(values)


def parse_set_flags(flags: list[str]) -> Result[dict[str, str], str]:
    """Turn ``key=value`` strings into a dict."""
    out = {}
    for flag in flags:
        if "=" not in flag:
            return Err(f"--set expects key=value, got '{flag}'")
        key, value = flag.split("=", 1)
        out[key.strip()] = value.strip()
    return Ok(out)


def parse_grid(text: str) -> Result[list[tuple[str, list[str]]], str]:
    """Parse an ablation grid: ``key = v1, v2, ...`` per line, values kept as text.

    Values for ``attention_mode`` may contain '+', so they are split on commas only.
    """
    match parse_pairs(text):
        case Ok(pairs):
            pass
        case Err(msg):
            return Err(msg)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    axes = []
    for key, value in pairs.items():
        if key not in known:
            return Err(f"unknown grid key '{key}'")
        options = [v.strip() for v in value.split(",") if v.strip()]
        if not options:
            return Err(f"grid key '{key}' has no values")
        axes.append((key, options))
    if not axes:
        return Err("ablation grid is empty")
    return Ok(axes)


def grid_cells(axes: list[tuple[str, list[str]]]) -> list[dict[str, str]]:
    """Cartesian product of grid axes, first axis slowest."""
    keys = [key for key, _ in axes]
    return [dict(zip(keys, combo, strict=True)) for combo in itertools.product(*(opts for _, opts in axes))]

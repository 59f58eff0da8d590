"""Synthetic paired-domain action videos.

Each class is a motion program for a bright soft-edged sprite over a smooth textured
background. Source clips are rendered as is; target clips are independently rendered
motions of the same class passed through :func:`darken`.
"""

import enum
import logging
import math
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from darkformer.tensor import RngState
from darkformer.types import Domain, PairBatch, VideoClip

logger = logging.getLogger(__name__)

SPRITE_LEVEL = 0.95
BACKGROUND_LEVEL = 0.25
# nominal sprite radius and travel, as fractions of the frame side
SPRITE_RADIUS = 0.12
TRAVEL = 0.5

_TRAIN, _TEST = 0, 1
_SOURCE, _TARGET = 0, 1
_RENDER, _DARKEN = 0, 1


def worker_count() -> int:
    """Thread count from DKTF_THREADS; 1 when unset, malformed or below 1."""
    text = os.getenv("DKTF_THREADS", "1")
    try:
        return max(1, int(text))
    except ValueError:
        logger.warning("ignoring DKTF_THREADS=%r, using 1 thread", text)
        return 1


class MotionProgram(enum.Enum):
    """Class-defining sprite motion."""

    MoveRight = 0
    MoveLeft = 1
    MoveUp = 2
    MoveDown = 3
    Diagonal = 4
    Zigzag = 5
    Grow = 6
    RotateOrbit = 7

    def __str__(self) -> str:
        return _PROGRAM_NAMES[self]

    def path(self, u: np.ndarray, start: tuple[float, float], speed: float, radius: float) -> np.ndarray:
        """Sprite (x, y, radius) in frame fractions at normalized times u in [0, 1].

        Returns:
        --------
            np.ndarray:
                [len(u), 3] rows of (x, y, radius).
        """
        x0, y0 = start
        d = TRAVEL * speed
        x = np.full_like(u, x0)
        y = np.full_like(u, y0)
        r = np.full_like(u, radius)
        match self:
            case MotionProgram.MoveRight:
                x = x0 - d / 2 + d * u
            case MotionProgram.MoveLeft:
                x = x0 + d / 2 - d * u
            case MotionProgram.MoveUp:
                y = y0 + d / 2 - d * u
            case MotionProgram.MoveDown:
                y = y0 - d / 2 + d * u
            case MotionProgram.Diagonal:
                x = x0 - d / 2 + d * u
                y = y0 - d / 2 + d * u
            case MotionProgram.Zigzag:
                x = x0 - d / 2 + d * u
                y = y0 + 0.15 * speed * np.sin(4.0 * math.pi * u)
            case MotionProgram.Grow:
                r = radius * (1.0 + u)
            case MotionProgram.RotateOrbit:
                angle = 2.0 * math.pi * u
                x = x0 + 0.2 * np.cos(angle)
                y = y0 + 0.2 * np.sin(angle)
        return np.stack([x, y, r], axis=1)


_PROGRAM_NAMES = {
    MotionProgram.MoveRight: "move-right",
    MotionProgram.MoveLeft: "move-left",
    MotionProgram.MoveUp: "move-up",
    MotionProgram.MoveDown: "move-down",
    MotionProgram.Diagonal: "diagonal",
    MotionProgram.Zigzag: "zigzag",
    MotionProgram.Grow: "grow",
    MotionProgram.RotateOrbit: "rotate-orbit",
}


@dataclass(frozen=True)
class SynthConfig:
    """Dataset size, geometry, class-preserving randomness and the domain shift."""

    num_classes: int = 8
    train_per_class: int = 20
    test_per_class: int = 10
    height: int = 32
    width: int = 32
    channels: int = 1
    # rendered clip length; sample_frames later picks N of them
    raw_frames: int = 15
    # randomness ranges in [0, 1]; all zero gives identical renders per class
    position_jitter: float = 1.0
    speed_jitter: float = 1.0
    size_jitter: float = 1.0
    texture: float = 1.0
    gamma: float = 2.2
    contrast: float = 0.4
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> str | None:
        """Return a description of the first violated invariant, or None."""
        if not 1 <= self.num_classes <= len(MotionProgram):
            return f"num_classes must be in [1, {len(MotionProgram)}], got {self.num_classes}"
        if min(self.train_per_class, self.test_per_class) < 1:
            return "train_per_class and test_per_class must be >= 1"
        if min(self.height, self.width, self.raw_frames) < 1 or self.channels not in (1, 3):
            return f"invalid clip geometry {self.raw_frames}x{self.height}x{self.width}x{self.channels}"
        for name in ("position_jitter", "speed_jitter", "size_jitter", "texture"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                return f"{name} must be in [0, 1], got {getattr(self, name)}"
        return _darken_params_error(self.gamma, self.contrast, self.noise)


def _darken_params_error(gamma: float, contrast: float, noise: float) -> str | None:
    if gamma < 1.0:
        return f"gamma must be >= 1, got {gamma}"
    if not 0.0 < contrast <= 1.0:
        return f"contrast must be in (0, 1], got {contrast}"
    if noise < 0.0:
        return f"noise must be >= 0, got {noise}"
    return None


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.texture == 0.0:
        return np.full((cfg.height, cfg.width), BACKGROUND_LEVEL)
    noise = gaussian_filter(rng.random((cfg.height, cfg.width)), sigma=2.0, mode="wrap")
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    return np.clip(BACKGROUND_LEVEL + 0.08 * cfg.texture * noise, 0.0, 0.5)


def render_action(class_id: int, rng: np.random.Generator, cfg: SynthConfig) -> VideoClip:
    """Render one source-domain clip of a class.

    Parameters:
    -----------
        class_id: int
            Index of the MotionProgram, below cfg.num_classes.
        rng: np.random.Generator
            Source of start position, speed, size and background.
        cfg: SynthConfig
            Geometry and randomness ranges.

    Returns:
    --------
        VideoClip:
            cfg.raw_frames frames [F, H, W, C] in [0, 1].

    Raises:
    -------
        ValueError:
            When class_id is out of range.
    """
    if not 0 <= class_id < cfg.num_classes:
        raise ValueError(f"class {class_id} is outside [0, {cfg.num_classes})")
    program = MotionProgram(class_id)
    jitter = rng.uniform(-1.0, 1.0, size=4)
    start = (0.5 + 0.08 * cfg.position_jitter * jitter[0], 0.5 + 0.08 * cfg.position_jitter * jitter[1])
    speed = 1.0 + 0.2 * cfg.speed_jitter * jitter[2]
    radius = SPRITE_RADIUS * (1.0 + 0.25 * cfg.size_jitter * jitter[3])
    background = _background(cfg, rng)

    u = np.linspace(0.0, 1.0, cfg.raw_frames) if cfg.raw_frames > 1 else np.zeros(1)
    side = min(cfg.height, cfg.width)
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64) + 0.5
    frames = np.empty((cfg.raw_frames, cfg.height, cfg.width), dtype=np.float64)
    for i, (x, y, r) in enumerate(program.path(u, start, speed, radius)):
        dist = np.hypot(xx - x * cfg.width, yy - y * cfg.height)
        alpha = np.clip(r * side - dist + 0.5, 0.0, 1.0)
        frames[i] = background * (1.0 - alpha) + SPRITE_LEVEL * alpha
    frames = np.repeat(frames[..., None], cfg.channels, axis=-1)
    return VideoClip(frames=np.clip(frames, 0.0, 1.0).astype(np.float32), label=class_id, domain=Domain.Source)


def darken(clip: VideoClip, gamma: float, contrast: float, noise: float, rng: np.random.Generator) -> VideoClip:
    """Apply the low-light shift clamp(c · pᵞ + N(0, σ²), 0, 1) to every pixel.

    Raises:
    -------
        ValueError:
            When gamma < 1, contrast is outside (0, 1] or noise < 0.
    """
    if (msg := _darken_params_error(gamma, contrast, noise)) is not None:
        raise ValueError(msg)
    pixels = contrast * np.power(clip.frames.astype(np.float64), gamma)
    if noise > 0.0:
        pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
    return VideoClip(frames=np.clip(pixels, 0.0, 1.0).astype(np.float32), label=clip.label, domain=Domain.Target)


def mean_brightness(clips: Sequence[VideoClip]) -> float:
    """Average pixel value over clips."""
    return float(np.mean([clip.frames.mean() for clip in clips]))


@dataclass
class PairedDataset:
    """Training pools per domain plus labeled test clips per domain."""

    num_classes: int
    train_source: list[VideoClip] = field(default_factory=list)
    train_target: list[VideoClip] = field(default_factory=list)
    test_source: list[VideoClip] = field(default_factory=list)
    test_target: list[VideoClip] = field(default_factory=list)

    def splits(self) -> dict[str, list[VideoClip]]:
        """Clip lists keyed by manifest directory ('train/src', ...)."""
        return {
            "train/src": self.train_source,
            "train/tgt": self.train_target,
            "test/src": self.test_source,
            "test/tgt": self.test_target,
        }

    def test_split(self, domain: Domain) -> list[VideoClip]:
        """Test clips of one domain."""
        return self.test_source if domain is Domain.Source else self.test_target

    def pairs(self, rng: np.random.Generator, target_fraction: float = 1.0) -> list[tuple[VideoClip, VideoClip]]:
        """Pair every training source clip with a same-class target clip.

        Target clips of a class are permuted and matched one to one when the pools are
        equally sized and target_fraction is 1. Otherwise only the first
        ceil(target_fraction · pool) target clips of a class are kept and drawn with
        replacement. The pair list is shuffled.

        Raises:
        -------
            ValueError:
                When target_fraction is outside (0, 1] or a class has source clips but no
                target clips.
        """
        if not 0.0 < target_fraction <= 1.0:
            raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction}")
        pairs: list[tuple[VideoClip, VideoClip]] = []
        for label in range(self.num_classes):
            sources = [c for c in self.train_source if c.label == label]
            targets = [c for c in self.train_target if c.label == label]
            if not sources:
                continue
            if not targets:
                raise ValueError(f"class {label} has no target training clips")
            keep = max(1, math.ceil(target_fraction * len(targets)))
            if keep == len(targets) == len(sources):
                picks = rng.permutation(len(targets))
            else:
                picks = rng.integers(0, keep, size=len(sources))
            pairs.extend((src, targets[int(j)]) for src, j in zip(sources, picks, strict=True))
        order = rng.permutation(len(pairs))
        return [pairs[int(i)] for i in order]

    def batches(
        self, rng: np.random.Generator, batch_size: int, target_fraction: float = 1.0
    ) -> list[PairBatch]:
        """Freshly paired training set cut into batches of at most batch_size."""
        pairs = self.pairs(rng, target_fraction)
        return [PairBatch(pairs=pairs[i : i + batch_size]) for i in range(0, len(pairs), batch_size)]


def _render_clip(job: tuple[SynthConfig, int, int, int, int]) -> VideoClip:
    cfg, split, domain, label, index = job
    streams = RngState(cfg.seed)
    clip = render_action(label, streams.generator(split, domain, label, index, _RENDER), cfg)
    if domain == _TARGET:
        clip = darken(clip, cfg.gamma, cfg.contrast, cfg.noise, streams.generator(split, domain, label, index, _DARKEN))
    return clip


def make_dataset(cfg: SynthConfig, workers: int | None = None) -> PairedDataset:
    """Generate the full synthetic benchmark.

    Every clip draws from its own stream keyed by (split, domain, class, index), so
    the result is identical for any worker count and train/test never share streams.

    Parameters:
    -----------
        cfg: SynthConfig
            Validated dataset config.
        workers: int | None
            Thread count; defaults to DKTF_THREADS (1 when unset).

    Raises:
    -------
        ValueError:
            When the config is invalid.
    """
    if (msg := cfg.validate()) is not None:
        raise ValueError(msg)
    if workers is None:
        workers = worker_count()
    dataset = PairedDataset(num_classes=cfg.num_classes)
    layout = (
        (dataset.train_source, _TRAIN, _SOURCE, cfg.train_per_class),
        (dataset.train_target, _TRAIN, _TARGET, cfg.train_per_class),
        (dataset.test_source, _TEST, _SOURCE, cfg.test_per_class),
        (dataset.test_target, _TEST, _TARGET, cfg.test_per_class),
    )
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for clips, split, domain, count in layout:
            jobs = [(cfg, split, domain, label, i) for label in range(cfg.num_classes) for i in range(count)]
            clips.extend(pool.map(_render_clip, jobs))
    logger.info(
        "generated %d classes: %d train pairs, %d/%d test clips",
        cfg.num_classes,
        len(dataset.train_source),
        len(dataset.test_source),
        len(dataset.test_target),
    )
    return dataset

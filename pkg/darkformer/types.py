"""Common data types and constants."""

import enum
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self


class Domain(enum.Enum):
    """Domain a clip was recorded (or rendered) in."""

    Source = enum.auto()
    Target = enum.auto()

    def __str__(self) -> str:
        return self.tag

    @property
    def tag(self) -> str:
        """Short tag used in dataset manifests."""
        return "src" if self is Domain.Source else "tgt"

    @classmethod
    def from_string(cls, value: str) -> Self:
        """Convert a manifest tag or name to a Domain.

        Arguments:
        ----------
            value: str
                'src'/'source' or 'tgt'/'target'. Case insensitive.

        Returns:
        --------
            Domain:
                The matching domain.

        Raises:
        -------
            ValueError:
                When the value names no domain.
        """
        match value.lower():
            case "src" | "source":
                return cls(cls.Source)
            case "tgt" | "target":
                return cls(cls.Target)
        raise ValueError(f"'{value}' is not a valid Domain")


class AttentionMode(enum.Enum):
    """Which divided self-attention passes an encoder block runs."""

    Space = enum.auto()
    Time = enum.auto()
    SpaceTime = enum.auto()

    def __str__(self) -> str:
        match self:
            case AttentionMode.Space:
                return "S"
            case AttentionMode.Time:
                return "T"
        return "S+T"

    @property
    def uses_time(self) -> bool:
        """True when the temporal pass runs."""
        return self in (AttentionMode.Time, AttentionMode.SpaceTime)

    @property
    def uses_space(self) -> bool:
        """True when the spatial pass runs."""
        return self in (AttentionMode.Space, AttentionMode.SpaceTime)

    @classmethod
    def from_string(cls, value: str) -> Self:
        """Convert 'S', 'T' or 'S+T' (case insensitive) to an AttentionMode.

        Raises:
        -------
            ValueError:
                When the value names no mode.
        """
        match value.upper().replace(" ", ""):
            case "S" | "SPACE":
                return cls(cls.Space)
            case "T" | "TIME":
                return cls(cls.Time)
            case "S+T" | "ST" | "T+S" | "SPACETIME":
                return cls(cls.SpaceTime)
        raise ValueError(f"'{value}' is not a valid AttentionMode")


class BridgeInit(enum.Enum):
    """Token stream the source-to-target bridge starts from."""

    Source = enum.auto()
    Target = enum.auto()
    Mean = enum.auto()

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def from_string(cls, value: str) -> Self:
        """Convert 'source', 'target' or 'mean' to a BridgeInit.

        Raises:
        -------
            ValueError:
                When the value names no initialization.
        """
        match value.lower():
            case "source":
                return cls(cls.Source)
            case "target":
                return cls(cls.Target)
            case "mean":
                return cls(cls.Mean)
        raise ValueError(f"'{value}' is not a valid BridgeInit")


class OptimizerKind(enum.Enum):
    """Parameter update rule."""

    Sgd = enum.auto()
    Adam = enum.auto()

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def from_string(cls, value: str) -> Self:
        """Convert 'sgd' or 'adam' to an OptimizerKind.

        Raises:
        -------
            ValueError:
                When the value names no optimizer.
        """
        match value.lower():
            case "sgd":
                return cls(cls.Sgd)
            case "adam":
                return cls(cls.Adam)
        raise ValueError(f"'{value}' is not a valid OptimizerKind")


class Schedule(enum.Enum):
    """Learning rate schedule."""

    Constant = enum.auto()
    Cosine = enum.auto()

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def from_string(cls, value: str) -> Self:
        """Convert 'constant' or 'cosine' to a Schedule.

        Raises:
        -------
            ValueError:
                When the value names no schedule.
        """
        match value.lower():
            case "constant":
                return cls(cls.Constant)
            case "cosine":
                return cls(cls.Cosine)
        raise ValueError(f"'{value}' is not a valid Schedule")


@dataclass(frozen=True)
class ClipSpec:
    """Geometry of the clips the model consumes."""

    # frames per clip (N)
    frames: int
    height: int
    width: int
    channels: int
    # patch side in pixels (S)
    patch: int
    # temporal sampling stride
    stride: int
    # embedding dimension (D)
    dim: int

    @property
    def patches_per_frame(self) -> int:
        """M = (H/S)·(W/S)."""
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_size(self) -> int:
        """Length of a flattened patch, S·S·C."""
        return self.patch * self.patch * self.channels

    @property
    def seq_len(self) -> int:
        """Token count 1 + M·N."""
        return 1 + self.patches_per_frame * self.frames

    @property
    def raw_frames(self) -> int:
        """Shortest source video that sample_frames accepts."""
        return (self.frames - 1) * self.stride + 1

    def validate(self) -> str | None:
        """Return a description of the first violated invariant, or None."""
        if min(self.frames, self.height, self.width, self.channels, self.patch, self.stride, self.dim) < 1:
            return f"all clip dimensions must be positive: {self}"
        if self.height % self.patch or self.width % self.patch:
            return f"frame {self.height}x{self.width} is not divisible by patch {self.patch}"
        return None


@dataclass(frozen=True)
class VideoClip:
    """Frames [N, H, W, C] in [0, 1] with a class label and domain."""

    frames: np.ndarray
    label: int
    domain: Domain

    def __str__(self) -> str:
        return f"VideoClip(shape={self.frames.shape}, label={self.label}, domain={self.domain})"

    @property
    def num_frames(self) -> int:
        """Number of frames held."""
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class PairBatch:
    """Aligned (source clip, target clip) pairs that share a label."""

    pairs: list[tuple[VideoClip, VideoClip]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        """Shared labels, one per pair."""
        return np.array([src.label for src, _ in self.pairs], dtype=np.int64)

    def mismatched(self) -> list[int]:
        """Indices of pairs whose source and target labels differ."""
        return [i for i, (src, tgt) in enumerate(self.pairs) if src.label != tgt.label]

    def source_frames(self) -> np.ndarray:
        """Stacked source frames [B, N, H, W, C]."""
        return np.stack([src.frames for src, _ in self.pairs])

    def target_frames(self) -> np.ndarray:
        """Stacked target frames [B, N, H, W, C]."""
        return np.stack([tgt.frames for _, tgt in self.pairs])

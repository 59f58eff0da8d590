"""Video tokenization: frame sampling, patch extraction and embedding."""

import logging
from dataclasses import dataclass

import numpy as np
from result import Err, Ok, Result

from darkformer import tensor as T
from darkformer.tensor import ShapeError, Tensor
from darkformer.types import ClipSpec, VideoClip

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TokenSequence:
    """Embedded tokens [B, 1 + M·N, D].

    Index 0 is the class token; patch s of frame t sits at 1 + t·M + s.
    """

    tokens: Tensor
    frames: int
    patches_per_frame: int

    @property
    def seq_len(self) -> int:
        """Token count 1 + M·N."""
        return 1 + self.frames * self.patches_per_frame

    def index_of(self, s: int, t: int) -> int:
        """Token index of patch s in frame t (both zero based)."""
        if not (0 <= s < self.patches_per_frame and 0 <= t < self.frames):
            raise IndexError(f"patch ({s}, {t}) outside {self.patches_per_frame}x{self.frames} grid")
        return 1 + t * self.patches_per_frame + s

    def position_of(self, index: int) -> tuple[int, int]:
        """Inverse of index_of for patch tokens."""
        if not 1 <= index < self.seq_len:
            raise IndexError(f"token {index} is not a patch token")
        t, s = divmod(index - 1, self.patches_per_frame)
        return s, t


def sample_frames(video: VideoClip, spec: ClipSpec) -> Result[VideoClip, str]:
    """Pick N frames at indices 0, stride, 2·stride, ...

    Parameters:
    -----------
        video: VideoClip
            Source video with at least (N-1)·stride + 1 frames.
        spec: ClipSpec
            Supplies N and the stride.

    Returns:
    --------
        Result[VideoClip, str]:
            Ok(VideoClip) with exactly N frames, Err(str) when the video is too short.
    """
    required = spec.raw_frames
    if video.num_frames < required:
        return Err(f"video too short: need {required} frames for N={spec.frames} stride={spec.stride}, got "
                   f"{video.num_frames}")
    indices = np.arange(spec.frames) * spec.stride
    return Ok(VideoClip(frames=video.frames[indices], label=video.label, domain=video.domain))


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """Split frames [..., N, H, W, C] into patch rows [..., N·M, S·S·C].

    Row t·M + s holds the S×S×C block of patch s (row-major over the patch grid) in
    frame t, flattened in (y, x, c) order.

    Raises:
    -------
        ShapeError:
            When H or W is not divisible by the patch side.
    """
    *lead, n, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ShapeError(f"patchify: frame {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, n, gh, patch, gw, patch, c)
    k = len(lead)
    x = np.moveaxis(x, k + 3, k + 2)
    return x.reshape(*lead, n * gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Inverse of patchify for the geometry in spec."""
    *lead, _, _ = patches.shape
    gh, gw, s = spec.height // spec.patch, spec.width // spec.patch, spec.patch
    x = patches.reshape(*lead, spec.frames, gh, gw, s, s, spec.channels)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 3)
    return x.reshape(*lead, spec.frames, spec.height, spec.width, spec.channels)


def embed(patches: Tensor, e: Tensor, pos: Tensor, cls: Tensor, frames: int) -> TokenSequence:
    """Build Z = (z_cls, v·E ...) + P for a batch of patch rows.

    Parameters:
    -----------
        patches: Tensor
            [B, N·M, S·S·C] patch rows from patchify.
        e: Tensor
            [S·S·C, D] linear patch embedding.
        pos: Tensor
            [1 + M·N, D] learned spatiotemporal positions.
        cls: Tensor
            [D] class token.
        frames: int
            N, used to recover M.

    Returns:
    --------
        TokenSequence:
            tokens [B, 1 + M·N, D].

    Raises:
    -------
        ShapeError:
            When the shapes disagree.
    """
    if patches.ndim != 3:
        raise ShapeError(f"embed: patches must be [B, N*M, P], got {patches.shape}")
    batch, count, _ = patches.shape
    dim = e.shape[-1]
    if pos.shape != (count + 1, dim) or cls.shape != (dim,):
        raise ShapeError(f"embed: positions {pos.shape} / class token {cls.shape} do not fit {count} patches, D={dim}")
    if count % frames:
        raise ShapeError(f"embed: {count} patches do not split into {frames} frames")
    projected = T.matmul(patches, e)
    cls_rows = T.broadcast_to(T.reshape(cls, (1, 1, dim)), (batch, 1, dim))
    tokens = T.concat([cls_rows, projected], axis=1) + pos
    return TokenSequence(tokens=tokens, frames=frames, patches_per_frame=count // frames)


def tokenize(frames: np.ndarray, spec: ClipSpec, e: Tensor, pos: Tensor, cls: Tensor) -> TokenSequence:
    """Patchify and embed a batch of sampled clips [B, N, H, W, C]."""
    if frames.shape[1:] != (spec.frames, spec.height, spec.width, spec.channels):
        raise ShapeError(f"tokenize: clips {frames.shape[1:]} do not match {spec}")
    rows = Tensor(patchify(frames, spec.patch))
    return embed(rows, e, pos, cls, spec.frames)

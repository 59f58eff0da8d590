"""Multi-head attention kernels: divided temporal, divided spatial, and cross attention.

All kernels take token tensors laid out as [B, 1 + M·N, D] with the class token at
index 0 and patch s of frame t at 1 + t·M + s. Patch queries attend within their
group (same patch across frames, or same frame across patches) plus the class token;
the class token query attends to every token.
"""

import contextlib
import enum
import logging
import math
import threading
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from darkformer import tensor as T
from darkformer.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


class AttentionKind(enum.Enum):
    """Which attention kernel produced a map."""

    Time = enum.auto()
    Space = enum.auto()
    Cross = enum.auto()
    Joint = enum.auto()

    def __str__(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class AttentionParams:
    """Projections for one attention pass.

    w_q, w_k, w_v and w_o are [D, D]; heads split D into equal widths D_h = D / heads.
    Passes of one block hold the same w_q/w_k/w_v objects when they share weights.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def dim(self) -> int:
        """Model width D."""
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        """Per-head width D_h."""
        return self.dim // self.heads


@dataclass
class ScoreCounter:
    """Counts attention scores computed per clip, summed over kernels and heads-averaged.

    patch_scores counts scores whose query is a patch token; cls_scores counts the
    class-token query rows.
    """

    patch_scores: int = 0
    cls_scores: int = 0

    @property
    def total(self) -> int:
        """All counted scores."""
        return self.patch_scores + self.cls_scores

    def reset(self) -> None:
        """Zero both counters."""
        self.patch_scores = 0
        self.cls_scores = 0


_counting = threading.local()


@contextlib.contextmanager
def count_scores() -> Iterator[ScoreCounter]:
    """Count attention scores computed inside the block, per clip and per head, on the calling thread only."""
    prev = getattr(_counting, "counter", None)
    counter = _counting.counter = ScoreCounter()
    try:
        yield counter
    finally:
        _counting.counter = prev


def _record(patch: int, cls: int) -> None:
    counter: ScoreCounter | None = getattr(_counting, "counter", None)
    if counter is not None:
        counter.patch_scores += patch
        counter.cls_scores += cls


@dataclass(frozen=True)
class AttentionMap:
    """Attention weights of one kernel call.

    For divided kernels, ``groups`` holds the patch-query weights
    [B, h, G, Q, 1 + K] (class-token key first) and ``cls_row`` the class-token query
    weights [B, h, T]. For cross and joint attention ``full`` holds [B, h, T, T].
    """

    kind: AttentionKind
    frames: int
    patches_per_frame: int
    groups: np.ndarray | None = None
    cls_row: np.ndarray | None = None
    full: np.ndarray | None = None

    def dense(self) -> np.ndarray:
        """Expand to [B, h, T, T] with zeros outside each query's key group."""
        if self.full is not None:
            return self.full
        assert self.groups is not None and self.cls_row is not None
        m, n = self.patches_per_frame, self.frames
        b, h = self.groups.shape[:2]
        size = 1 + m * n
        out = np.zeros((b, h, size, size), dtype=self.groups.dtype)
        out[:, :, 0, :] = self.cls_row
        grid = 1 + np.arange(m * n).reshape(n, m)  # token index [t, s]
        if self.kind is AttentionKind.Time:
            grid = grid.T  # groups over s, members over t
        for g, members in enumerate(grid):
            for qi, query in enumerate(members):
                out[:, :, query, 0] = self.groups[:, :, g, qi, 0]
                out[:, :, query, members] = self.groups[:, :, g, qi, 1:]
        return out


def _batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 2:
        return T.reshape(z, (1, *z.shape)), True
    if z.ndim != 3:
        raise ShapeError(f"attention expects [T, D] or [B, T, D], got {z.shape}")
    return z, False


def _unbatched(z: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(z, z.shape[1:]) if squeeze else z


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def qkv(z: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head query, key and value projections.

    Parameters:
    -----------
        z: Tensor
            Tokens [T, D] or [B, T, D].
        params: AttentionParams
            Projections.

    Returns:
    --------
        tuple[Tensor, Tensor, Tensor]:
            Q, K, V shaped [h, T, D_h] (or [B, h, T, D_h] for batched input).

    Raises:
    -------
        ShapeError:
            When the last axis of z is not D, or D is not divisible by the head count.
    """
    if params.dim % params.heads:
        raise ShapeError(f"qkv: D={params.dim} is not divisible by {params.heads} heads")
    if z.shape[-1] != params.dim:
        raise ShapeError(f"qkv: tokens {z.shape} do not match projection {params.w_q.shape}")
    zb, squeeze = _batched(z)
    q, k, v = (_split_heads(T.matmul(zb, w), params.heads) for w in (params.w_q, params.w_k, params.w_v))
    if squeeze:
        q, k, v = (T.reshape(x, x.shape[1:]) for x in (q, k, v))
    return q, k, v


def _check_layout(z: Tensor, frames: int, patches_per_frame: int) -> None:
    if z.shape[-2] != 1 + frames * patches_per_frame:
        raise ShapeError(
            f"token layout mismatch: {z.shape[-2]} tokens for N={frames}, M={patches_per_frame} "
            f"(expected {1 + frames * patches_per_frame})"
        )


def _divided(
    z: Tensor, params: AttentionParams, frames: int, patches_per_frame: int, kind: AttentionKind
) -> tuple[Tensor, AttentionMap]:
    _check_layout(z, frames, patches_per_frame)
    zb, squeeze = _batched(z)
    q, k, v = qkv(zb, params)
    b, h, _, dh = q.shape
    m, n = patches_per_frame, frames
    scale = 1.0 / math.sqrt(dh)

    cls_q, cls_k, cls_v = (x[:, :, 0:1, :] for x in (q, k, v))
    cls_w = T.softmax(T.scale(T.matmul(cls_q, T.swapaxes(k, -1, -2)), scale), axis=-1)
    cls_out = T.matmul(cls_w, v)

    def grouped(x: Tensor) -> Tensor:
        x = T.reshape(x[:, :, 1:, :], (b, h, n, m, dh))
        return T.transpose(x, (0, 1, 3, 2, 4)) if kind is AttentionKind.Time else x

    pq, pk, pv = grouped(q), grouped(k), grouped(v)
    groups, members = pq.shape[2], pq.shape[3]
    keys = T.concat([T.broadcast_to(T.reshape(cls_k, (b, h, 1, 1, dh)), (b, h, groups, 1, dh)), pk], axis=3)
    values = T.concat([T.broadcast_to(T.reshape(cls_v, (b, h, 1, 1, dh)), (b, h, groups, 1, dh)), pv], axis=3)
    weights = T.softmax(T.scale(T.matmul(pq, T.swapaxes(keys, -1, -2)), scale), axis=-1)
    out = T.matmul(weights, values)
    if kind is AttentionKind.Time:
        out = T.transpose(out, (0, 1, 3, 2, 4))
    patch_out = T.reshape(out, (b, h, m * n, dh))

    _record(patch=m * n * (members + 1), cls=1 + m * n)
    merged = _merge_heads(T.concat([cls_out, patch_out], axis=2))
    result = T.matmul(merged, params.w_o)
    amap = AttentionMap(
        kind=kind,
        frames=n,
        patches_per_frame=m,
        groups=weights.data,
        cls_row=cls_w.data[:, :, 0, :],
    )
    logger.trace(  # type: ignore[attr-defined]
        "%s attention: tokens %s, groups %d x %d", kind, z.shape, groups, members
    )
    return _unbatched(result, squeeze), amap


def attend_time(
    z: Tensor, params: AttentionParams, frames: int, patches_per_frame: int
) -> tuple[Tensor, AttentionMap]:
    """Divided temporal self-attention.

    Each patch (s, t) attends to {(s, t'): all t'} plus the class token; the class
    token attends to all tokens. Scores are Q·Kᵀ/√D_h, heads are concatenated and
    projected by w_o.

    Parameters:
    -----------
        z: Tensor
            Tokens [T, D] or [B, T, D] with T = 1 + M·N.
        params: AttentionParams
            Projections for this pass.
        frames: int
            N.
        patches_per_frame: int
            M.

    Returns:
    --------
        tuple[Tensor, AttentionMap]:
            Output with the shape of z, and the attention weights.

    Raises:
    -------
        ShapeError:
            When the token count does not match 1 + M·N.
    """
    return _divided(z, params, frames, patches_per_frame, AttentionKind.Time)


def attend_space(
    z: Tensor, params: AttentionParams, frames: int, patches_per_frame: int
) -> tuple[Tensor, AttentionMap]:
    """Divided spatial self-attention: groups are frames instead of patch locations.

    Same contract as attend_time. Encoder blocks apply it to the output of the
    temporal pass.
    """
    return _divided(z, params, frames, patches_per_frame, AttentionKind.Space)


def _full(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = T.softmax(T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), scale), axis=-1, mask=mask)
    return T.matmul(weights, v), weights


def attend_cross(z_q: Tensor, z_kv: Tensor, params: AttentionParams) -> tuple[Tensor, AttentionMap]:
    """Cross-attention with queries from z_q and keys/values from z_kv.

    Attention is unmasked over all tokens: softmax(Q·Kᵀ/√D_h)·V per head, heads
    concatenated and projected by w_o.

    Raises:
    -------
        ShapeError:
            When the two sequences differ in shape.
    """
    if z_q.shape != z_kv.shape:
        raise ShapeError(f"attend_cross: query tokens {z_q.shape} and key/value tokens {z_kv.shape} differ")
    qb, squeeze = _batched(z_q)
    kvb, _ = _batched(z_kv)
    q, _, _ = qkv(qb, params)
    _, k, v = qkv(kvb, params)
    out, weights = _full(q, k, v, None)
    t = q.shape[2]
    _record(patch=(t - 1) * t, cls=t)
    result = T.matmul(_merge_heads(out), params.w_o)
    amap = AttentionMap(kind=AttentionKind.Cross, frames=0, patches_per_frame=0, full=weights.data)
    return _unbatched(result, squeeze), amap


def attend_joint(z: Tensor, params: AttentionParams, mask: np.ndarray | None = None) -> tuple[Tensor, AttentionMap]:
    """Full self-attention over all tokens, optionally restricted by a [T, T] boolean mask.

    The joint path is the reference the divided kernels are checked against and the
    baseline for score counting; encoder blocks never use it.
    """
    zb, squeeze = _batched(z)
    q, k, v = qkv(zb, params)
    out, weights = _full(q, k, v, mask)
    t = q.shape[2]
    _record(patch=(t - 1) * t, cls=t)
    result = T.matmul(_merge_heads(out), params.w_o)
    amap = AttentionMap(kind=AttentionKind.Joint, frames=0, patches_per_frame=0, full=weights.data)
    return _unbatched(result, squeeze), amap


def divided_mask(frames: int, patches_per_frame: int, kind: AttentionKind) -> np.ndarray:
    """Boolean [T, T] mask reproducing a divided kernel's key groups under full attention."""
    m, n = patches_per_frame, frames
    size = 1 + m * n
    mask = np.zeros((size, size), dtype=bool)
    mask[0, :] = True
    mask[:, 0] = True
    for i in range(1, size):
        t_i, s_i = divmod(i - 1, m)
        for j in range(1, size):
            t_j, s_j = divmod(j - 1, m)
            same = s_i == s_j if kind is AttentionKind.Time else t_i == t_j
            mask[i, j] = same
    return mask


def divided_score_count(frames: int, patches_per_frame: int) -> tuple[int, int]:
    """Per-clip, per-head (patch, class-token) score counts of one temporal plus one spatial pass.

    The patch count is M·N·(M + N) + 2·M·N, which stays within the usual divided-attention
    bound M·N·(M + N) + 2·M·N + 1. That bound covers patch queries only; the class-token
    rows, 2·(1 + M·N) for the two passes, come on top, so the full total is
    M·N·(M + N) + 4·M·N + 2.
    """
    mn = frames * patches_per_frame
    patch = mn * (frames + 1) + mn * (patches_per_frame + 1)
    return patch, 2 * (1 + mn)


def joint_score_count(frames: int, patches_per_frame: int) -> int:
    """Per-clip, per-head score count of joint space-time attention, (1 + M·N)²."""
    return (1 + frames * patches_per_frame) ** 2

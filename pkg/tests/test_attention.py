"""Tests for darkformer.attention module."""

import itertools
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from darkformer import tensor as T
from darkformer.attention import (
    AttentionKind,
    AttentionParams,
    attend_cross,
    attend_joint,
    attend_space,
    attend_time,
    count_scores,
    divided_mask,
    divided_score_count,
    joint_score_count,
    qkv,
)
from darkformer.tensor import ShapeError, Tensor


def _params(rng: np.random.Generator, dim: int, heads: int, scale: float = 0.5) -> AttentionParams:
    w = [Tensor(rng.normal(0.0, scale, size=(dim, dim))) for _ in range(4)]
    return AttentionParams(w_q=w[0], w_k=w[1], w_v=w[2], w_o=w[3], heads=heads)


def _tokens(rng: np.random.Generator, m: int, n: int, dim: int, batch: int = 1) -> Tensor:
    return Tensor(rng.normal(size=(batch, 1 + m * n, dim)))


def test_qkv_identity_single_head() -> None:
    """Test W_Q = I with one head returns the tokens."""
    z = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
    eye = Tensor(np.eye(4))
    q, k, v = qkv(z, AttentionParams(w_q=eye, w_k=eye, w_v=eye, w_o=eye, heads=1))
    np.testing.assert_array_equal(q.data[0], z.data)


def test_qkv_zero_tokens() -> None:
    """Test zero tokens project to zeros."""
    q, k, v = qkv(Tensor(np.zeros((3, 4))), _params(np.random.default_rng(1), 4, 2))
    for x in (q, k, v):
        assert x.shape == (2, 3, 2)
        assert not x.data.any()


def test_qkv_matches_head_slices() -> None:
    """Test each head equals the matching column slice of one D×D product."""
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(2, 5, 8)))
    params = _params(rng, 8, 4)
    q, _, _ = qkv(z, params)
    full = z.data @ params.w_q.data
    for head in range(4):
        np.testing.assert_allclose(q.data[:, head], full[..., head * 2 : head * 2 + 2], atol=1e-12)


def test_qkv_rejects_indivisible_heads() -> None:
    """Test D not divisible by the head count."""
    with pytest.raises(ShapeError):
        qkv(Tensor(np.zeros((3, 6))), _params(np.random.default_rng(3), 6, 4))


@pytest.mark.parametrize(
    ("m", "n", "heads", "seed"),
    [(m, n, h, s) for m, n, h in itertools.product((1, 2, 4), (1, 2, 4), (1, 2)) for s in range(20)],
)
def test_divided_matches_masked_full_attention(m: int, n: int, heads: int, seed: int) -> None:
    """Test both divided kernels equal full attention restricted to their key groups."""
    rng = np.random.default_rng(seed)
    z = _tokens(rng, m, n, 8, batch=2)
    params = _params(rng, 8, heads)
    for kind, kernel in ((AttentionKind.Time, attend_time), (AttentionKind.Space, attend_space)):
        out, amap = kernel(z, params, n, m)
        reference, ref_map = attend_joint(z, params, divided_mask(n, m, kind))
        np.testing.assert_allclose(out.data, reference.data, atol=1e-10, rtol=0)
        np.testing.assert_allclose(amap.dense(), ref_map.dense(), atol=1e-12, rtol=0)


def test_single_frame_temporal_group() -> None:
    """Test with N=1 each patch attends only to itself and the class token."""
    rng = np.random.default_rng(4)
    _, amap = attend_time(_tokens(rng, 4, 1, 8), _params(rng, 8, 2), 1, 4)
    dense = amap.dense()[0, 0]
    for query in range(1, 5):
        assert set(np.flatnonzero(dense[query])) <= {0, query}


def test_single_patch_spatial_group() -> None:
    """Test with M=1 each patch attends only to itself and the class token."""
    rng = np.random.default_rng(5)
    _, amap = attend_space(_tokens(rng, 1, 3, 8), _params(rng, 8, 2), 3, 1)
    dense = amap.dense()[0, 1]
    for query in range(1, 4):
        assert set(np.flatnonzero(dense[query])) <= {0, query}


def test_uniform_values_pass_through() -> None:
    """Test equal value vectors make every pre-projection output equal to that vector."""
    rng = np.random.default_rng(6)
    m, n, d = 2, 3, 4
    z = Tensor(np.tile(rng.normal(size=d), (1, 1 + m * n, 1)))
    eye = Tensor(np.eye(d))
    params = AttentionParams(w_q=Tensor(rng.normal(size=(d, d))), w_k=Tensor(rng.normal(size=(d, d))), w_v=eye,
                             w_o=eye, heads=2)
    # identical tokens give identical values; the output must reproduce them
    for kernel in (attend_time, attend_space):
        out, _ = kernel(z, params, n, m)
        np.testing.assert_allclose(out.data, z.data, atol=1e-12)


def test_weights_are_distributions() -> None:
    """Test every attention row is non-negative and sums to one."""
    rng = np.random.default_rng(7)
    z = _tokens(rng, 4, 3, 8, batch=2)
    params = _params(rng, 8, 2)
    maps = [attend_time(z, params, 3, 4)[1], attend_space(z, params, 3, 4)[1], attend_cross(z, z, params)[1]]
    for amap in maps:
        dense = amap.dense()
        assert dense.min() >= 0.0
        np.testing.assert_allclose(dense.sum(axis=-1), 1.0, atol=1e-6)


def test_class_token_attends_globally() -> None:
    """Test the class-token query row covers every token in both divided passes."""
    rng = np.random.default_rng(8)
    z = _tokens(rng, 2, 2, 4)
    for kernel in (attend_time, attend_space):
        _, amap = kernel(z, _params(rng, 4, 1), 2, 2)
        assert np.all(amap.dense()[0, 0, 0] > 0.0)


def test_spatial_attention_equivariant_over_frames() -> None:
    """Test permuting frames permutes the spatial outputs the same way."""
    rng = np.random.default_rng(9)
    m, n, d = 3, 4, 8
    z = _tokens(rng, m, n, d)
    params = _params(rng, d, 2)
    perm = np.array([2, 0, 3, 1])
    token_perm = np.concatenate([[0], 1 + (perm[:, None] * m + np.arange(m)).reshape(-1)])
    permuted = Tensor(z.data[:, token_perm])
    out, _ = attend_space(z, params, n, m)
    out_perm, _ = attend_space(permuted, params, n, m)
    np.testing.assert_allclose(out_perm.data[:, 1:], out.data[:, token_perm[1:]], atol=1e-12)


def test_layout_mismatch() -> None:
    """Test a token count that is not 1 + M·N."""
    rng = np.random.default_rng(10)
    with pytest.raises(ShapeError):
        attend_time(_tokens(rng, 2, 2, 4), _params(rng, 4, 1), 3, 2)


def test_cross_identity_case() -> None:
    """Test cross attention with equal streams equals full self-attention."""
    rng = np.random.default_rng(11)
    z = _tokens(rng, 4, 3, 8, batch=2)
    params = _params(rng, 8, 2)
    out, _ = attend_cross(z, z, params)
    reference, _ = attend_joint(z, params)
    np.testing.assert_allclose(out.data, reference.data, atol=1e-12, rtol=0)


def test_cross_constant_values() -> None:
    """Test key/value rows all equal v with W_V = I give v before projection."""
    rng = np.random.default_rng(12)
    d = 4
    v = rng.normal(size=d)
    z_q = Tensor(rng.normal(size=(5, d)))
    z_kv = Tensor(np.tile(v, (5, 1)))
    eye = Tensor(np.eye(d))
    params = AttentionParams(w_q=Tensor(rng.normal(size=(d, d))), w_k=Tensor(rng.normal(size=(d, d))), w_v=eye,
                             w_o=eye, heads=2)
    out, _ = attend_cross(z_q, z_kv, params)
    np.testing.assert_allclose(out.data, np.tile(v, (5, 1)), atol=1e-12)


def test_cross_matches_naive_loops() -> None:
    """Test cross attention against an explicit per-head, per-query loop."""
    rng = np.random.default_rng(13)
    t, d, h = 5, 4, 2
    dh = d // h
    zq, zkv = rng.normal(size=(t, d)), rng.normal(size=(t, d))
    params = _params(rng, d, h)
    out, _ = attend_cross(Tensor(zq), Tensor(zkv), params)
    q, k, v = zq @ params.w_q.data, zkv @ params.w_k.data, zkv @ params.w_v.data
    heads = np.zeros((t, d))
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(t):
            scores = np.array([q[i, cols] @ k[j, cols] / np.sqrt(dh) for j in range(t)])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            heads[i, cols] = sum(weights[j] * v[j, cols] for j in range(t))
    np.testing.assert_allclose(out.data, heads @ params.w_o.data, atol=1e-10)


def test_cross_length_mismatch() -> None:
    """Test streams of different lengths are rejected."""
    rng = np.random.default_rng(14)
    with pytest.raises(ShapeError):
        attend_cross(Tensor(np.zeros((5, 4))), Tensor(np.zeros((6, 4))), _params(rng, 4, 1))


def test_score_counter_matches_formula() -> None:
    """Test the counted scores of one temporal and one spatial pass."""
    rng = np.random.default_rng(15)
    m, n = 4, 3
    z = _tokens(rng, m, n, 8, batch=3)
    params = _params(rng, 8, 2)
    with count_scores() as counter:
        attend_time(z, params, n, m)
        attend_space(z, params, n, m)
    patch, cls = divided_score_count(n, m)
    assert (counter.patch_scores, counter.cls_scores) == (patch, cls)
    assert counter.patch_scores <= m * n * (m + n) + 2 * m * n + 1


@pytest.mark.parametrize(("m", "n"), [(1, 1), (4, 3), (16, 8)])
def test_divided_score_count_split(m: int, n: int) -> None:
    """Test the patch count meets the patch-query bound and the class rows make up the rest."""
    patch, cls = divided_score_count(n, m)
    assert patch == m * n * (m + n) + 2 * m * n
    assert patch <= m * n * (m + n) + 2 * m * n + 1
    assert patch + cls == m * n * (m + n) + 4 * m * n + 2


def test_divided_cheaper_than_joint_at_desk_scale() -> None:
    """Test M=16, N=8 divided attention computes fewer scores than joint attention."""
    m, n = 16, 8
    patch, cls = divided_score_count(n, m)
    assert patch <= m * n * (m + n) + 2 * m * n + 1
    assert patch + cls < joint_score_count(n, m)
    rng = np.random.default_rng(16)
    z = _tokens(rng, m, n, 4)
    params = _params(rng, 4, 1)
    with T.no_grad(), count_scores() as divided:
        attend_time(z, params, n, m)
        attend_space(z, params, n, m)
    with T.no_grad(), count_scores() as joint:
        attend_joint(z, params)
    assert divided.total < joint.total == (1 + m * n) ** 2


def test_counter_inactive_outside_context() -> None:
    """Test kernels run without an active counter."""
    rng = np.random.default_rng(17)
    with count_scores() as counter:
        pass
    attend_time(_tokens(rng, 2, 2, 4), _params(rng, 4, 1), 2, 2)
    assert counter.total == 0


def test_counter_is_per_thread() -> None:
    """Test kernels on another thread do not add to this thread's counter."""
    rng = np.random.default_rng(18)
    m, n = 2, 3
    z = _tokens(rng, m, n, 4)
    params = _params(rng, 4, 1)

    def count_in_worker() -> int:
        with count_scores() as inner:
            attend_time(z, params, n, m)
        return inner.total

    with count_scores() as outer, ThreadPoolExecutor(max_workers=2) as pool:
        totals = list(pool.map(lambda _: count_in_worker(), range(4)))
        attend_space(z, params, n, m)
    patch, cls = divided_score_count(n, m)
    assert totals == [m * n * (n + 1) + 1 + m * n] * 4
    assert outer.total == patch + cls - totals[0]


def test_kernel_gradients_finite_difference() -> None:
    """Test the three kernels' gradients against central differences."""
    from darkformer.gradcheck import check_gradients

    rng = np.random.default_rng(18)
    m, n, d = 2, 2, 4
    z = Tensor(rng.normal(size=(1, 1 + m * n, d)), requires_grad=True)
    zt = Tensor(rng.normal(size=(1, 1 + m * n, d)), requires_grad=True)
    w = {k: Tensor(rng.normal(0.0, 0.5, size=(d, d)), requires_grad=True) for k in ("w_q", "w_k", "w_v", "w_o")}
    params = AttentionParams(heads=2, **w)
    weights = Tensor(rng.normal(size=z.shape))
    builders = {
        "time": lambda: T.sum(attend_time(z, params, n, m)[0] * weights),
        "space": lambda: T.sum(attend_space(z, params, n, m)[0] * weights),
        "cross": lambda: T.sum(attend_cross(z, zt, params)[0] * weights),
    }
    for name, fn in builders.items():
        result = check_gradients(name, fn, {"z": z, "zt": zt, **w}, rng, samples=1000)
        assert result.passed, str(result)

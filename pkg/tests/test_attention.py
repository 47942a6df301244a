import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agfusion import backend
from agfusion.attention import (
    MhaParams,
    SaeBlockParams,
    count_macs,
    cross_attend,
    mha,
    projection_macs,
    sae_block,
    sae_enhance,
)
from agfusion.errors import ContractError
from agfusion.gradsuite import check_case
from agfusion.tensor_core import BevMap, NormParams, Tensor, attention_core, reshape
from agfusion.windowing import merge, partition

import oracle


def rand_mha(c, heads, seed, biases=True):
    rng = np.random.default_rng(seed)
    p = MhaParams.init(c, heads, rng)
    if biases:
        for name in ("b_q", "b_v", "b_o"):
            getattr(p, name).data[...] = rng.normal(size=c)
    return p


def rand_block(c, heads, seed):
    rng = np.random.default_rng(seed)
    p = SaeBlockParams.init(c, heads, rng)
    p.ln1 = NormParams(1.0 + 0.1 * rng.normal(size=c), 0.1 * rng.normal(size=c))
    p.ffn_b1.data[...] = 0.1 * rng.normal(size=p.ffn_b1.shape)
    p.ffn_b2.data[...] = 0.1 * rng.normal(size=c)
    return p


def test_single_head_matches_dense_reference():
    rng = np.random.default_rng(0)
    q, kv = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    p = rand_mha(8, 1, 1)
    np.testing.assert_allclose(mha(Tensor(q), Tensor(kv), p).data, oracle.mha(q, kv, p), rtol=0, atol=1e-12)


@pytest.mark.parametrize("heads", [2, 4])
def test_multi_head_matches_per_head_loops(heads):
    rng = np.random.default_rng(heads)
    q, kv = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    p = rand_mha(8, heads, 2)
    np.testing.assert_allclose(mha(Tensor(q), Tensor(kv), p).data, oracle.mha(q, kv, p), rtol=0, atol=1e-12)


def test_single_key_returns_projected_value():
    rng = np.random.default_rng(3)
    p = rand_mha(4, 2, 3)
    kv = rng.normal(size=(1, 4))
    out = mha(Tensor(rng.normal(size=(6, 4))), Tensor(kv), p).data
    expect = (kv @ p.w_v.data + p.b_v.data) @ p.w_o.data + p.b_o.data
    np.testing.assert_allclose(out, np.broadcast_to(expect, (6, 4)), atol=1e-14)


def test_zero_inputs_zero_biases_give_zero():
    p = rand_mha(4, 2, 4, biases=False)
    assert np.array_equal(mha(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), p).data, np.zeros((3, 4)))


def test_mha_contracts():
    p = rand_mha(4, 2, 5)
    with pytest.raises(ContractError):
        mha(Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 6))), p)
    with pytest.raises(ContractError):
        MhaParams.init(6, 4, np.random.default_rng(0))
    with pytest.raises(ContractError):
        mha(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 3, 4))), p)


def test_attention_rows_are_convex_weights():
    rng = np.random.default_rng(6)
    q, k = Tensor(rng.normal(size=(3, 5, 5)) * 5), Tensor(rng.normal(size=(3, 5, 5)))
    # one-hot value rows expose the attention weights themselves
    eye = Tensor(np.broadcast_to(np.eye(5), (3, 5, 5)).copy())
    w = attention_core(q, k, eye, 0.5).data
    assert np.all(w >= 0) and np.all(np.abs(w.sum(axis=-1) - 1) < 1e-12)
    v = rng.normal(size=(3, 5, 5))
    out = attention_core(q, k, Tensor(v), 0.5).data
    assert np.all(out >= v.min(axis=1, keepdims=True) - 1e-12)
    assert np.all(out <= v.max(axis=1, keepdims=True) + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(6)))
def test_mha_kv_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    q, kv = rng.normal(size=(4, 4)), rng.normal(size=(6, 4))
    p = rand_mha(4, 2, seed)
    a = mha(Tensor(q), Tensor(kv), p).data
    b = mha(Tensor(q), Tensor(kv[list(perm)]), p).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_sae_block_matches_reference():
    x = np.random.default_rng(7).normal(size=(4, 8))
    p = rand_block(8, 2, 7)
    np.testing.assert_allclose(sae_block(Tensor(x), p).data, oracle.sae_block(x, p), atol=1e-12)


def test_sae_block_zero_input_zero_output():
    p = rand_block(4, 2, 8)
    p.ln1, p.ln2 = NormParams.identity(4), NormParams.identity(4)
    for t in (p.mha.b_q, p.mha.b_v, p.mha.b_o, p.ffn_b1, p.ffn_b2):
        t.data[...] = 0
    assert np.array_equal(sae_block(Tensor(np.zeros((4, 4))), p).data, np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.permutations(range(5)))
def test_sae_block_permutation_equivariance(seed, perm):
    x = np.random.default_rng(seed).normal(size=(5, 4))
    p = rand_block(4, 2, seed)
    out = sae_block(Tensor(x), p).data
    np.testing.assert_allclose(sae_block(Tensor(x[list(perm)]), p).data, out[list(perm)], atol=1e-12)


def test_sae_block_gradcheck():
    assert check_case("sae_block").passed
    assert check_case("mha").passed
    assert check_case("attention_core").passed


@pytest.mark.parametrize("seed", range(3))
def test_single_window_equals_global_attention(seed):
    F = np.random.default_rng(seed).normal(size=(8, 8, 8))
    p = rand_block(8, 2, seed)
    windowed = merge(sae_enhance(BevMap(F, "camera"), 8, p)).tensor.data
    whole = sae_block(Tensor(F.reshape(64, 8)), p).data.reshape(8, 8, 8)
    np.testing.assert_allclose(windowed, whole, rtol=0, atol=1e-12)


def test_enhance_matches_windowed_reference_and_changes_input():
    F = np.random.default_rng(9).normal(size=(8, 8, 4))
    p = rand_block(4, 2, 9)
    out = merge(sae_enhance(BevMap(F, "camera"), 4, p)).tensor.data
    np.testing.assert_allclose(out, oracle.enhance(F, 4, [p]), atol=1e-12)
    assert not np.allclose(out, F)


def test_identical_windows_identical_outputs():
    tile = np.random.default_rng(10).normal(size=(2, 2, 4))
    F = np.tile(tile, (2, 2, 1))
    ws = sae_enhance(BevMap(F, "lidar"), 2, rand_block(4, 2, 10))
    t = ws.tokens.data
    for i in range(1, 4):
        assert np.array_equal(t[i], t[0])


def test_enhance_rejects_bad_window():
    from agfusion.errors import WindowSizeError
    with pytest.raises(WindowSizeError):
        sae_enhance(BevMap(np.zeros((6, 6, 4)), "camera"), 4, rand_block(4, 2, 0))


def test_cross_attend_matches_double_loop():
    rng = np.random.default_rng(11)
    cam, lidar = rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))
    p1, p2 = rand_mha(4, 2, 12), rand_mha(4, 2, 13)
    a, b = cross_attend(partition(BevMap(cam, "camera"), 2), partition(BevMap(lidar, "lidar"), 2), p1, p2)
    ra, rb = oracle.cross(cam, lidar, 2, p1, p2)
    np.testing.assert_allclose(merge(a).tensor.data, ra, rtol=0, atol=1e-12)
    np.testing.assert_allclose(merge(b).tensor.data, rb, rtol=0, atol=1e-12)


def test_constant_lidar_windows_give_constant_output():
    rng = np.random.default_rng(14)
    lidar = np.kron(rng.normal(size=(2, 2, 4)), np.ones((2, 2, 1)))
    a, _ = cross_attend(partition(BevMap(rng.normal(size=(4, 4, 4)), "camera"), 2),
                        partition(BevMap(lidar, "lidar"), 2), rand_mha(4, 2, 15), rand_mha(4, 2, 16))
    t = a.tokens.data
    np.testing.assert_allclose(t, np.broadcast_to(t[:, :1], t.shape), atol=1e-14)


def test_symmetric_cross_attention_bit_identical():
    F = np.random.default_rng(17).normal(size=(4, 4, 4))
    p = rand_mha(4, 2, 17)
    ws = partition(BevMap(F, "camera"), 2)
    a, b = cross_attend(ws, partition(BevMap(F, "lidar"), 2), p, p)
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert check_case("cross_attend").passed


def test_cross_attend_geometry_mismatch():
    p = rand_mha(4, 2, 0)
    a = partition(BevMap(np.zeros((4, 4, 4)), "camera"), 2)
    b = partition(BevMap(np.zeros((4, 4, 4)), "lidar"), 4)
    with pytest.raises(ContractError):
        cross_attend(a, b, p, p)


def test_count_macs_closed_forms():
    assert count_macs(8, 8, 16, 4, 4, "windowed") == 32768
    assert count_macs(8, 8, 16, 4, 4, "global") == 131072
    assert count_macs(8, 8, 16, 8, 4, "windowed") == count_macs(8, 8, 16, 8, 4, "global")
    assert count_macs(16, 16, 16, 4, 4) == 4 * count_macs(8, 8, 16, 4, 4)
    assert count_macs(16, 16, 16, 4, 4, "global") == 16 * count_macs(8, 8, 16, 4, 4, "global")
    assert projection_macs(8, 8, 16) == 4 * 64 * 256
    with pytest.raises(ContractError):
        count_macs(8, 8, 16, 4, 4, "sparse")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_count_ratio_is_window_over_map(h, gh, gw, heads):
    H, W, C = gh * h, gw * h, 4
    win, glob = count_macs(H, W, C, h, heads), count_macs(H, W, C, h, heads, "global")
    assert win * H * W == glob * h * h


@pytest.mark.parametrize("name", backend.available())
def test_counter_matches_closed_form(name):
    F = BevMap(np.random.default_rng(18).normal(size=(8, 8, 16)), "camera")
    p = rand_mha(16, 4, 18)
    with backend.use(name):
        with backend.MacCounter() as c:
            t = partition(F, 4).tokens
            mha(t, t, p)
        assert c.attention == 32768
        assert c.projection == projection_macs(8, 8, 16)
        with backend.MacCounter() as g:
            flat = reshape(F.tensor, (1, 64, 16))
            mha(flat, flat, p)
        assert g.attention == 131072

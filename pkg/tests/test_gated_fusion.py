import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agfusion.errors import ContractError
from agfusion.gated_fusion import (
    GateMap,
    GateNetParams,
    compute_gate,
    conv_fuser_baseline,
    fixed_gate,
    fuse_gated,
)
from agfusion.gradsuite import check_case
from agfusion.tape import Tape
from agfusion.tensor_core import BevMap, Tensor, sum_all, weighted_sum

import oracle


def maps(seed, shape=(4, 4, 3)):
    rng = np.random.default_rng(seed)
    return BevMap(rng.normal(size=shape), "fused"), BevMap(rng.normal(size=shape), "fused")


def test_zero_gate_net_gives_half():
    a, b = maps(0)
    p = GateNetParams(np.zeros((6, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(1))
    assert np.array_equal(compute_gate(a, b, p).values, np.full((4, 4), 0.5))


def test_gate_matches_pixel_reference_and_concat_order():
    a, b = maps(1)
    rng = np.random.default_rng(1)
    p = GateNetParams(rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=(3, 1)), rng.normal(size=1))
    G = compute_gate(a, b, p).values
    x = np.concatenate([a.tensor.data, b.tensor.data], axis=-1)
    hidden = np.maximum(oracle.pixelwise(x, p.w1, p.b1), 0)
    np.testing.assert_allclose(G, oracle.sigmoid(oracle.pixelwise(hidden, p.w2, p.b2))[..., 0], atol=1e-15)
    assert not np.allclose(compute_gate(b, a, p).values, G)
    # mirrored first layer makes the gate blind to the order
    half = rng.normal(size=(3, 3))
    sym = GateNetParams(np.vstack([half, half]), p.b1, p.w2, p.b2)
    np.testing.assert_allclose(compute_gate(a, b, sym).values, compute_gate(b, a, sym).values, atol=1e-15)


def test_gate_open_interval_and_contracts():
    a, b = maps(2)
    rng = np.random.default_rng(2)
    p = GateNetParams(rng.normal(size=(6, 3)), rng.normal(size=3), rng.normal(size=(3, 1)), rng.normal(size=1))
    G = compute_gate(a, b, p).values
    assert np.all((G > 0) & (G < 1))
    with pytest.raises(ContractError):
        compute_gate(a, BevMap(np.zeros((4, 2, 3)), "fused"), p)
    with pytest.raises(ContractError):
        GateMap(np.full((2, 2, 1), 1.5))
    with pytest.raises(ContractError):
        GateNetParams(np.zeros((6, 0)), np.zeros(0), np.zeros((0, 1)), np.zeros(1))


def test_gate_gradcheck():
    assert check_case("compute_gate").passed
    assert check_case("fuse_gated").passed


def test_endpoint_gates_reproduce_inputs():
    a, b = maps(3)
    assert np.array_equal(fuse_gated(a, b, fixed_gate(1.0, 4, 4)).tensor.data, a.tensor.data)
    assert np.array_equal(fuse_gated(a, b, fixed_gate(0.0, 4, 4)).tensor.data, b.tensor.data)
    avg = fuse_gated(a, b, fixed_gate(0.5, 4, 4)).tensor.data
    np.testing.assert_allclose(avg, (a.tensor.data + b.tensor.data) / 2, atol=1e-15)
    assert fuse_gated(a, b, fixed_gate(0.5, 4, 4)).modality.value == "fused"


def test_convexity_over_1000_trials():
    violations = 0
    for trial in range(1000):
        rng = np.random.default_rng([trial, 11])
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        a = rng.normal(size=shape) * 10.0 ** rng.integers(-3, 4)
        b = rng.normal(size=shape) * 10.0 ** rng.integers(-3, 4)
        g = rng.uniform(size=shape[:2] + (1,))
        out = fuse_gated(BevMap(a, "fused"), BevMap(b, "fused"), GateMap(g)).tensor.data
        violations += int(np.sum((out < np.minimum(a, b)) | (out > np.maximum(a, b))))
    assert violations == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_idempotent_on_equal_inputs(seed):
    rng = np.random.default_rng(seed)
    A = BevMap(rng.normal(size=(3, 3, 2)), "fused")
    out = fuse_gated(A, A, GateMap(rng.uniform(size=(3, 3, 1)))).tensor.data
    assert np.max(np.abs(out - A.tensor.data)) <= 1e-15 * max(1.0, np.abs(A.tensor.data).max())


def test_gate_derivative_is_difference():
    a, b = maps(4)
    g = Tensor(np.random.default_rng(4).uniform(size=(4, 4, 1)))
    w = np.random.default_rng(5).normal(size=(4, 4, 3))
    with Tape() as tape:
        loss = weighted_sum(fuse_gated(a, b, GateMap(g)).tensor, w)
    expect = ((a.tensor.data - b.tensor.data) * w).sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(tape.backward(loss)[g], expect, atol=1e-14)


@pytest.mark.parametrize("g", [0.3, 0.7])
def test_fixed_gate_values(g):
    G = fixed_gate(g, 3, 5)
    assert G.tensor.shape == (3, 5, 1) and np.all(G.values == g)


def test_fixed_gate_range():
    for g in (-0.01, 1.01):
        with pytest.raises(ContractError):
            fixed_gate(g, 2, 2)


def test_conv_fuser_selector_zero_and_reference():
    cam, lidar = maps(6)
    sel = np.vstack([np.eye(3), np.zeros((3, 3))])
    assert np.array_equal(conv_fuser_baseline(cam, lidar, Tensor(sel), Tensor(np.zeros(3))).tensor.data,
                          cam.tensor.data)
    zero = conv_fuser_baseline(cam, lidar, Tensor(np.zeros((6, 3))), Tensor(np.zeros(3))).tensor.data
    assert np.array_equal(zero, np.zeros((4, 4, 3)))
    rng = np.random.default_rng(6)
    W, b = rng.normal(size=(6, 3)), rng.normal(size=3)
    ref = oracle.pixelwise(np.concatenate([cam.tensor.data, lidar.tensor.data], axis=-1), W, b)
    np.testing.assert_allclose(conv_fuser_baseline(cam, lidar, Tensor(W), Tensor(b)).tensor.data, ref,
                               rtol=0, atol=1e-12)
    with pytest.raises(ContractError):
        conv_fuser_baseline(cam, BevMap(np.zeros((4, 4, 2)), "lidar"), Tensor(W), Tensor(b))


def test_fuse_shape_mismatch():
    a, b = maps(7)
    with pytest.raises(ContractError):
        fuse_gated(a, BevMap(np.zeros((4, 4, 2)), "fused"), fixed_gate(0.5, 4, 4))
    with pytest.raises(ContractError):
        fuse_gated(a, b, fixed_gate(0.5, 2, 4))
    assert sum_all(a.tensor).data.shape == ()

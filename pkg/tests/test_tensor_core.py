import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from agfusion.errors import ContractError
from agfusion.gradsuite import check_case
from agfusion.tape import Tape
from agfusion.tensor_core import (
    BatchNormParams,
    BevMap,
    NormParams,
    Tensor,
    affine,
    batch_norm,
    concat_channels,
    conv1x1,
    hull_guard,
    layer_norm,
    relu,
    reshape,
    sigmoid,
    softmax,
    sum_all,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_tensor_copies_to_contiguous_float64():
    src = np.arange(6, dtype=np.int32).reshape(2, 3).T
    t = Tensor(src)
    assert t.data.dtype == np.float64 and t.data.flags.c_contiguous
    src[0, 0] = 99
    assert t.data[0, 0] == 0


def test_bevmap_rejects_bad_rank_and_empty_axes():
    with pytest.raises(ContractError):
        BevMap(np.zeros((4, 4)), "camera")
    with pytest.raises(ContractError):
        BevMap(np.zeros((0, 4, 2)), "camera")


def test_norm_params_need_positive_eps():
    with pytest.raises(ContractError):
        NormParams(np.ones(2), np.zeros(2), eps=0.0)


def test_layer_norm_constant_input_is_zero():
    out = layer_norm(Tensor([5.0, 5.0]), NormParams.identity(2))
    assert np.array_equal(out.data, [0.0, 0.0])


def test_layer_norm_small_eps_limit():
    out = layer_norm(Tensor([1.0, 3.0]), NormParams(np.ones(2), np.zeros(2), eps=1e-14))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_channel_mismatch():
    with pytest.raises(ContractError):
        layer_norm(Tensor(np.zeros((2, 3))), NormParams.identity(4))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 16)), elements=finite))
def test_layer_norm_zero_mean_when_beta_zero(x):
    p = NormParams(np.full(x.shape[1], 1.7), np.zeros(x.shape[1]))
    out = layer_norm(Tensor(x), p).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-10)


def test_layer_norm_gradient_single_vector():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=8))
    p = NormParams.identity(8)
    with Tape() as tape:
        loss = sum_all(layer_norm(x, p))
    # sum of a normalized vector is constant (beta-sum), so d/dx must vanish
    assert np.max(np.abs(tape.backward(loss)[x])) < 1e-12
    assert check_case("layer_norm").passed


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-16)
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_stay_finite():
    out = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(ContractError):
        softmax(Tensor(np.zeros((3, 0))))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite),
       st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = softmax(Tensor(x)).data
    assert np.all((y >= 0) & (y <= 1))
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_affine_identity_and_zero_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    assert np.array_equal(affine(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = rng.normal(size=3)
    out = affine(Tensor(np.zeros((5, 4))), Tensor(rng.normal(size=(4, 3))), Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (5, 3)))


def test_affine_dimension_mismatch():
    with pytest.raises(ContractError):
        affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))


def test_affine_gradcheck():
    assert check_case("affine").passed


def test_conv1x1_is_reshaped_affine():
    rng = np.random.default_rng(2)
    F = Tensor(rng.normal(size=(3, 5, 4)))
    W, b = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=6))
    ref = reshape(affine(reshape(F, (15, 4)), W, b), (3, 5, 6))
    assert np.array_equal(conv1x1(F, W, b).data, ref.data)


def test_conv1x1_identity_and_bias_only():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(2, 2, 3))
    assert np.array_equal(conv1x1(Tensor(F), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, F)
    out = conv1x1(Tensor(F), Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0])).data
    assert np.array_equal(out, np.broadcast_to([1.0, 2.0], (2, 2, 2)))


def test_conv1x1_channel_mismatch():
    with pytest.raises(ContractError):
        conv1x1(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_batch_norm_eval_neutral_stats_is_identity_up_to_eps():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(3, 3, 4))
    out = batch_norm(Tensor(F), BatchNormParams.identity(4), "eval").data
    np.testing.assert_allclose(out, F / math.sqrt(1.0 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out, F, rtol=1e-5)


def test_batch_norm_train_constant_channels_give_beta():
    F = np.broadcast_to([1.0, -2.0, 7.0], (4, 4, 3)).copy()
    beta = np.array([0.3, -0.1, 2.0])
    p = BatchNormParams(np.array([2.0, 3.0, 4.0]), beta)
    out = batch_norm(Tensor(F), p, "train").data
    assert np.array_equal(out, np.broadcast_to(beta, F.shape))


def test_batch_norm_train_updates_running_stats_with_biased_variance():
    rng = np.random.default_rng(5)
    F = rng.normal(size=(4, 4, 2))
    p = BatchNormParams.identity(2, momentum=0.25)
    batch_norm(Tensor(F), p, "train")
    flat = F.reshape(-1, 2)
    np.testing.assert_allclose(p.running_mean, 0.25 * flat.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(p.running_var, 0.75 + 0.25 * flat.var(axis=0), rtol=1e-14)


def test_batch_norm_eval_leaves_running_stats_alone():
    p = BatchNormParams.identity(2)
    batch_norm(Tensor(np.ones((2, 2, 2))), p, "eval")
    assert np.array_equal(p.running_mean, [0, 0]) and np.array_equal(p.running_var, [1, 1])


def test_batch_norm_contracts():
    with pytest.raises(ContractError):
        batch_norm(Tensor(np.zeros((2, 2, 3))), BatchNormParams.identity(2))
    with pytest.raises(ContractError):
        BatchNormParams(np.ones(2), np.zeros(2), running_var=np.array([1.0, -1.0]))
    with pytest.raises(ContractError):
        batch_norm(Tensor(np.zeros((2, 2, 2))), BatchNormParams.identity(2), "test")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradcheck(mode):
    assert check_case(f"batch_norm[{mode}]").passed


def test_relu_sigmoid_basics():
    assert sigmoid(Tensor(0.0)).data == 0.5
    x = np.array([0.5, 2.0, 1e-3])
    assert np.array_equal(relu(Tensor(-x)).data, np.zeros(3))
    assert check_case("relu").passed and check_case("sigmoid").passed


def test_sigmoid_extreme_logits_finite():
    y = sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_relu_subgradient_zero_at_zero():
    x = Tensor([0.0, 1.0, -1.0])
    with Tape() as tape:
        loss = sum_all(relu(x))
    assert np.array_equal(tape.backward(loss)[x], [0.0, 1.0, 0.0])


def test_concat_order_and_mismatch():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 3))
    out = concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (2, 3, 5)
    assert np.array_equal(out[..., :2], a) and np.array_equal(out[..., 2:], b)
    with pytest.raises(ContractError):
        concat_channels([Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros((3, 3, 1)))])


def test_hull_guard_only_touches_out_of_hull_values():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([1.0, 0.0, 5.0])
    x = np.array([1.0 + 2e-16, 1.0, 6.0])
    assert np.array_equal(hull_guard(Tensor(x), Tensor(a), Tensor(b)).data, [1.0, 1.0, 5.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kernels_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 4))
    W, b = rng.normal(size=(4, 4)), rng.normal(size=4)
    p = NormParams(rng.normal(size=4), rng.normal(size=4))

    def run():
        y = layer_norm(conv1x1(Tensor(x), Tensor(W), Tensor(b)), p)
        return softmax(sigmoid(y)).data

    assert np.array_equal(run(), run())

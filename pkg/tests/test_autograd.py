import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcn import autograd as ag
from atcn.autograd import Param, Tensor
from atcn.errors import ConfigError, ShapeError, StateError, WindowTooShortError
from atcn.selfcheck import GRAD_TOL, primitive_gradient_errors


def t(values):
    return Tensor(np.asarray(values, dtype=float))


# ---------------------------------------------------------------- conv1d


def test_conv_hand_dot_product():
    out = ag.conv1d_dilated(t([[1, 2, 3]]), t([[[1, 0, -1]]]), t([0.0]), dilation=1, groups=1, padding="valid")
    assert out.data.tolist() == [[-2.0]]


@pytest.mark.parametrize("d", [1, 2, 5])
def test_conv_identity_kernel(d):
    x = np.random.default_rng(0).normal(size=(1, 7))
    out = ag.conv1d_dilated(t(x), t([[[1.0]]]), t([0.0]), dilation=d, groups=1, padding="valid")
    np.testing.assert_array_equal(out.data, x)


def test_conv_dilated_taps():
    out = ag.conv1d_dilated(t([[1, 0, 0, 0, 2]]), t([[[1, 1, 1]]]), t([0.0]), dilation=2, groups=1, padding="valid")
    assert out.data.tolist() == [[3.0]]


def test_conv_frozen_values():
    rng = np.random.default_rng(42)
    x, w, b = rng.normal(size=(2, 4, 9)), rng.normal(size=(6, 2, 3)), rng.normal(size=6)
    out = ag.conv1d_dilated(t(x), t(w), t(b), dilation=2, groups=2, padding="valid").data
    assert out.shape == (2, 6, 5)
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for f in range(5):
                ref[n, o, f] = b[o] + sum(w[o, c, k] * x[n, 2 * g + c, f + 2 * k] for c in range(2) for k in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    # frozen values
    assert out.sum() == pytest.approx(-30.32007477051439, abs=1e-9)
    assert out[1, 4, 2] == pytest.approx(-0.8316031976148327, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(F=st.integers(1, 30), k=st.integers(1, 5), d=st.integers(1, 6))
def test_valid_length_formula(F, k, d):
    x = t(np.ones((1, 2, F)))
    w = t(np.ones((3, 2, k)))
    span = d * (k - 1)
    if F - span <= 0:
        with pytest.raises(WindowTooShortError):
            ag.conv1d_dilated(x, w, None, d, 1, "valid")
    else:
        assert ag.conv1d_dilated(x, w, None, d, 1, "valid").shape == (1, 3, F - span)


def test_causal_output_ignores_future_frames():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 12))
    w = t(rng.normal(size=(4, 3, 3)))
    base = ag.conv1d_dilated(t(x), w, None, 2, 1, "causal").data
    for f in range(12):
        edited = x.copy()
        edited[..., f + 1 :] += rng.normal(size=edited[..., f + 1 :].shape)
        again = ag.conv1d_dilated(t(edited), w, None, 2, 1, "causal").data
        assert np.array_equal(again[..., : f + 1], base[..., : f + 1])


def test_same_padding_keeps_length_and_needs_odd_kernel():
    x = t(np.ones((1, 2, 6)))
    assert ag.conv1d_dilated(x, t(np.ones((2, 2, 3))), None, 3, 1, "same").shape == (1, 2, 6)
    with pytest.raises(ConfigError):
        ag.conv1d_dilated(x, t(np.ones((2, 2, 2))), None, 1, 1, "same")


@settings(max_examples=25, deadline=None)
@given(groups=st.sampled_from([1, 2, 4]), seed=st.integers(0, 10_000))
def test_grouped_conv_equals_independent_slices(groups, seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = 4, 8
    x = rng.normal(size=(2, c_in, 10))
    w = rng.normal(size=(c_out, c_in // groups, 3))
    full = ag.conv1d_dilated(t(x), t(w), None, 2, groups, "valid").data
    ci, co = c_in // groups, c_out // groups
    parts = [
        ag.conv1d_dilated(t(x[:, g * ci : (g + 1) * ci]), t(w[g * co : (g + 1) * co]), None, 2, 1, "valid").data
        for g in range(groups)
    ]
    np.testing.assert_allclose(full, np.concatenate(parts, axis=1), atol=1e-12)


def test_conv_rejects_bad_groups_and_shapes():
    with pytest.raises(ConfigError):
        ag.conv1d_dilated(t(np.ones((1, 3, 5))), t(np.ones((2, 1, 1))), None, 1, 2, "valid")
    with pytest.raises(ConfigError):
        ag.conv1d_dilated(t(np.ones((1, 4, 5))), t(np.ones((2, 3, 1))), None, 1, 1, "valid")


# ---------------------------------------------------------------- dense ops


def test_linear_examples():
    np.testing.assert_array_equal(ag.linear(t([3.0, -1.0]), t(np.eye(2)), t([0.0, 0.0])).data, [3.0, -1.0])
    assert ag.linear(t([3, 4]), t([[1, 2]]), t([-1])).data.tolist() == [10.0]
    assert ag.linear(t([7, 8]), t([[0, 0]]), t([5])).data.tolist() == [5.0]
    with pytest.raises(ConfigError):
        ag.linear(t([1, 2, 3]), t([[1, 2]]), t([0]))


def test_activation_examples():
    assert ag.activation(t([0.0]), "sigmoid").data.tolist() == [0.5]
    np.testing.assert_allclose(ag.activation(t([2.5, 2.5, 2.5]), "softmax").data, [1 / 3] * 3, atol=1e-15)
    assert ag.activation(t([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    with pytest.raises(ConfigError):
        ag.activation(t([1.0]), "tanh")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_softmax_sums_to_one(logits):
    out = ag.softmax(t(logits)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_sigmoid_is_stable_at_extremes():
    out = ag.sigmoid(t([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_global_average_pool_examples():
    assert ag.global_average_pool(t([[1, 3]])).data.tolist() == [2.0]
    assert ag.global_average_pool(t(np.full((3, 4), 1.5))).data.tolist() == [1.5] * 3
    assert ag.global_average_pool(t([[1, 2, 3], [0, 0, 6]])).data.tolist() == [2.0, 2.0]


# ---------------------------------------------------------------- batch norm


def _bn_params(c):
    return Param("g", np.ones(c)), Param("b", np.zeros(c))


def test_batch_norm_standardized_input_passes_through():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3, 5))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    g, b = _bn_params(3)
    out = ag.batch_norm(t(x), g, b, ag.BatchNormState(3), train=True).data
    # the only change is the epsilon in the denominator: a relative 5e-6 shrink
    np.testing.assert_allclose(out, x / np.sqrt(1 + ag.BN_EPS), atol=1e-12)
    np.testing.assert_allclose(out, x, rtol=6e-6, atol=0)


def test_batch_norm_train_output_is_zero_mean():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(6, 4, 7))
    g, b = _bn_params(4)
    out = ag.batch_norm(t(x), g, b, ag.BatchNormState(4), train=True).data
    assert np.abs(out.mean(axis=(0, 2))).max() < 1e-9


def test_batch_norm_eval_is_deterministic_and_uses_running_stats():
    x = np.random.default_rng(2).normal(size=(4, 2, 3))
    g, b = _bn_params(2)
    state = ag.BatchNormState(2)
    first = ag.batch_norm(t(x), g, b, state, train=False).data
    second = ag.batch_norm(t(x), g, b, state, train=False).data
    assert np.array_equal(first, second)
    np.testing.assert_allclose(first, x / np.sqrt(1 + ag.BN_EPS))


def test_batch_norm_running_stats_update():
    x = np.random.default_rng(3).normal(5.0, 1.0, size=(16, 2, 4))
    g, b = _bn_params(2)
    state = ag.BatchNormState(2)
    ag.batch_norm(t(x), g, b, state, train=True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)))


def test_batch_norm_train_needs_two_values():
    g, b = _bn_params(2)
    with pytest.raises(ShapeError):
        ag.batch_norm(t(np.ones((1, 2, 1))), g, b, ag.BatchNormState(2), train=True)


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(ag.dropout(t(x), 0.0, True, np.random.default_rng(1)).data, x)
    assert np.array_equal(ag.dropout(t(x), 0.7, False, None).data, x)


def test_dropout_preserves_mean():
    out = ag.dropout(t(np.ones(100_000)), 0.5, True, np.random.default_rng(5)).data
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) == {0.0, 2.0}


def test_dropout_is_deterministic_per_seed():
    x = t(np.ones(50))
    a = ag.dropout(x, 0.3, True, np.random.default_rng(9)).data
    b = ag.dropout(x, 0.3, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_dropout_rejects_p_one():
    with pytest.raises(ConfigError):
        ag.dropout(t([1.0]), 1.0, True, np.random.default_rng(0))


# ---------------------------------------------------------------- backward


def test_backward_identity_and_square():
    x = Param("x", np.array(3.0))
    ag.backward(x * 1.0)
    assert x.grad == 1.0
    x.zero_grad()
    ag.backward(ag.square(x))
    assert x.grad == 6.0


def test_backward_accumulates_over_reuse():
    x = Param("x", np.array([2.0]))
    ag.backward(ag.tsum(x * x + x))
    assert x.grad.tolist() == [5.0]


def test_backward_requires_scalar_and_graph():
    with pytest.raises(StateError):
        ag.backward(Param("x", np.ones(2)) * 2.0)
    with pytest.raises(StateError):
        ag.backward(Tensor(np.array(1.0)))


def test_norm_has_zero_subgradient_at_origin():
    x = Param("x", np.zeros((1, 3)))
    ag.backward(ag.tsum(ag.norm(x, axis=-1)))
    assert np.array_equal(x.grad, np.zeros((1, 3)))


def test_getitem_scatters_repeated_indices():
    x = Param("x", np.arange(4.0))
    ag.backward(ag.tsum(x[np.array([1, 1, 3])]))
    assert x.grad.tolist() == [0.0, 2.0, 0.0, 1.0]


def test_crop_frames_alignment():
    x = t(np.arange(10.0).reshape(1, 1, 10))
    assert ag.crop_frames(x, 4, "center").data.ravel().tolist() == [3.0, 4.0, 5.0, 6.0]
    assert ag.crop_frames(x, 4, "right").data.ravel().tolist() == [6.0, 7.0, 8.0, 9.0]


# ---------------------------------------------------------------- finite differences


def test_every_primitive_passes_gradient_check():
    errors = primitive_gradient_errors()
    assert len(errors) >= 30
    bad = {k: v for k, v in errors.items() if not v < GRAD_TOL}
    assert not bad


def test_finite_diff_linear_and_sigmoid_chain():
    rng = np.random.default_rng(0)
    w, b = Param("w", rng.normal(size=(3, 4))), Param("b", rng.normal(size=3))
    x = rng.normal(size=(5, 4))
    assert ag.finite_diff_check(lambda: ag.tsum(ag.linear(x, w, b)), [w, b]) < 1e-6
    v = Param("v", rng.normal(size=6))
    chain = lambda: ag.tsum(ag.sigmoid(ag.mul(ag.sigmoid(ag.mul(v, 2.0)), 3.0)))
    assert ag.finite_diff_check(chain, [v]) < 1e-5


def test_finite_diff_zero_weight_model():
    w = Param("w", np.zeros((2, 3)))
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert ag.finite_diff_check(lambda: ag.tsum(ag.sigmoid(ag.linear(x, w))), [w]) < 1e-8


def test_finite_diff_rejects_nondeterministic_forward():
    w = Param("w", np.ones(3))
    rng = np.random.default_rng(0)
    with pytest.raises(StateError):
        ag.finite_diff_check(lambda: ag.tsum(ag.mul(w, rng.normal(size=3))), [w])

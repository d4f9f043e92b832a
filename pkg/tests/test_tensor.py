"""Tensor core: forward semantics, backward correctness, tape behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcvt.tensor import (Tensor, concat, conv2d, layer_norm, batch_norm,
                         no_grad, set_debug_checks)
from mcvt.gradcheck import grad_check


# ------------------------------------------------------------------- matmul

def test_matmul_identity():
    a = np.arange(4.0).reshape(2, 2)
    out = Tensor(np.eye(2)) @ Tensor(a)
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_example():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_grad_of_sum_is_column_sums(rng):
    a = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    b = rng.normal(size=(7, 3))
    (a @ Tensor(b)).sum().backward()
    expected = np.broadcast_to(b.sum(axis=1), (5, 7))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    fn = lambda t: (t @ Tensor(b)).sum()
    assert grad_check(fn, Tensor(rng.normal(size=(5, 7)), requires_grad=True)) < 1e-4


# ------------------------------------------------------------------- conv2d

def test_conv2d_zero_weights_outputs_bias(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    b = np.array([1.0, -2.0, 0.5, 3.0])
    out = conv2d(x, w, Tensor(b)).data
    for c in range(4):
        np.testing.assert_array_equal(out[:, c], np.full((2, 5, 5), b[c]))


def test_conv2d_ones_padded_sum_counts():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, w, Tensor(np.zeros(1))).data[0, 0]
    expected = np.array([[4.0, 6.0, 4.0],
                         [6.0, 9.0, 6.0],
                         [4.0, 6.0, 4.0]])
    np.testing.assert_array_equal(out, expected)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
               Tensor(np.zeros(1)))


def test_conv2d_kernel_must_be_3x3():
    with pytest.raises(ValueError, match="3x3"):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))),
               Tensor(np.zeros(1)))


@settings(max_examples=20, deadline=None)
@given(h=st.integers(4, 32), w=st.integers(4, 32))
def test_conv2d_preserves_spatial_extent(h, w):
    x = Tensor(np.zeros((1, 2, h, w)))
    k = Tensor(np.zeros((3, 2, 3, 3)))
    assert conv2d(x, k, Tensor(np.zeros(3))).shape == (1, 3, h, w)


def test_conv2d_gradients_match_finite_differences(rng):
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(3, 4, 3, 3)) * 0.5
    b = rng.normal(size=3)
    red = rng.normal(size=(2, 3, 8, 8))

    def make(which, init):
        def fn(t):
            parts = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
            parts[which] = t
            return (conv2d(parts["x"], parts["w"], parts["b"]) * Tensor(red)).sum()
        return fn, Tensor(init.copy(), requires_grad=True)

    for which, init in (("x", x), ("w", w), ("b", b)):
        fn, t = make(which, init)
        assert grad_check(fn, t) < 1e-4, which


# ------------------------------------------------------------------ softmax

def test_softmax_symmetry():
    np.testing.assert_allclose(Tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])


def test_softmax_large_inputs_no_overflow():
    out = Tensor([1000.0, 1000.0]).softmax().data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(Tensor(x + 17.3).softmax(axis=-1).data,
                               Tensor(x).softmax(axis=-1).data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = Tensor(np.array(values)).softmax(axis=-1).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.all(out >= 0.0)


# ----------------------------------------------------------------- backward

def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_2x(rng):
    data = rng.normal(size=(3, 4))
    x = Tensor(data, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_accumulates_across_calls(rng):
    data = rng.normal(size=(3,))
    x = Tensor(data, requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * data, rtol=1e-12)


def test_backward_diamond_graph_visits_nodes_once(rng):
    # y = x + x reuses x; gradient must be 2, not 1 or 4
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = x + x
    (y * 1.0).sum().backward()
    np.testing.assert_allclose(x.grad, np.full(3, 2.0))


def test_backward_free_graph_matches_default(rng):
    data = rng.normal(size=(4, 4))

    def loss_of(x):
        return ((x @ x).relu() * x).sum()

    a = Tensor(data.copy(), requires_grad=True)
    loss_of(a).backward()
    b = Tensor(data.copy(), requires_grad=True)
    loss_of(b).backward(free_graph=True)
    np.testing.assert_array_equal(a.grad, b.grad)


def test_zero_grad_resets():
    x = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    x.zero_grad()
    assert x.grad is None


# --------------------------------------------------------------- elementwise

def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    x.relu().sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_gradcheck_off_kink(rng):
    z = rng.normal(size=(6, 6))
    z = np.where(np.abs(z) < 0.05, z + 0.2, z)
    x = Tensor(z, requires_grad=True)
    assert grad_check(lambda t: t.relu().sum(), x) < 1e-6


def test_gelu_known_values():
    # gelu(0) = 0; gelu(x) -> x for large x; gelu(-x) large -> 0
    out = Tensor(np.array([0.0, 10.0, -10.0])).gelu().data
    np.testing.assert_allclose(out, [0.0, 10.0, 0.0], atol=1e-6)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5)) * 3
    np.testing.assert_allclose(Tensor(x).log_softmax(axis=-1).data,
                               np.log(Tensor(x).softmax(axis=-1).data),
                               atol=1e-9)


def test_exp_log_roundtrip_gradcheck(rng):
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    fn = lambda t: (t.exp() + (t * t + 1.0).log()).sum()
    assert grad_check(fn, x) < 1e-4


def test_division_and_pow(rng):
    x = rng.normal(size=(3,)) + 5.0
    np.testing.assert_allclose((Tensor(x) / 2.0).data, x / 2)
    np.testing.assert_allclose((1.0 / Tensor(x)).data, 1 / x)
    np.testing.assert_allclose((Tensor(x) ** 2).data, x ** 2)


# ------------------------------------------------------------------ shaping

def test_reshape_transpose_getitem_roundtrip(rng):
    data = rng.normal(size=(2, 3, 4))
    t = Tensor(data, requires_grad=True)
    out = t.transpose(1, 0, 2).reshape(3, 8)[1:, :]
    np.testing.assert_array_equal(out.data,
                                  data.transpose(1, 0, 2).reshape(3, 8)[1:, :])
    out.sum().backward()
    assert t.grad.shape == data.shape


def test_concat_backward_routes_slices(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    (concat([a, b], axis=1) * 2.0).sum().backward()
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
    np.testing.assert_array_equal(b.grad, np.full((2, 2), 2.0))


# -------------------------------------------------------- fused normalizers

def test_layer_norm_matches_composite_formula(rng):
    x = rng.normal(size=(4, 7, 6))
    w = rng.normal(size=6)
    b = rng.normal(size=6)
    eps = 1e-6
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    expected = (x - mean) / np.sqrt(var + eps) * w + b
    out = layer_norm(Tensor(x), Tensor(w), Tensor(b), eps=eps)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_batch_norm_matches_naive_statistics(rng):
    x = rng.normal(size=(3, 2, 4, 4))
    w = rng.normal(size=2)
    b = rng.normal(size=2)
    eps = 1e-5
    out, mean, var = batch_norm(Tensor(x), Tensor(w), Tensor(b), eps=eps)
    for c in range(2):
        ch = x[:, c]
        np.testing.assert_allclose(mean[c], ch.mean(), rtol=1e-12)
        np.testing.assert_allclose(var[c], ch.var(), rtol=1e-10)
        expected = (ch - ch.mean()) / np.sqrt(ch.var() + eps) * w[c] + b[c]
        np.testing.assert_allclose(out.data[:, c], expected, atol=1e-10)


# ----------------------------------------------------------------- tape misc

def test_no_grad_suppresses_tape(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert y._backward is None and not y.requires_grad


def test_determinism_same_seed_bit_identical():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.normal(size=(4, 4)))
        return ((x @ x).softmax(axis=-1).gelu()).data
    assert np.array_equal(run(), run())


def test_debug_checks_flag_catches_nonfinite():
    set_debug_checks(True)
    try:
        with np.errstate(divide="ignore"):
            with pytest.raises(FloatingPointError):
                Tensor(np.array([0.0])).log()
    finally:
        set_debug_checks(False)


def test_grad_check_linear_is_machine_precision(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    assert grad_check(lambda t: (t * 3.0).sum(), x) < 1e-9

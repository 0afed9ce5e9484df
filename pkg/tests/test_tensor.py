"""Tensor engine: forward values, backward gradients, fused-op parity."""

import numpy as np
import pytest

import versadepth.tensor as T
from versadepth.errors import NumericError, ShapeError
from versadepth.tensor import Tensor, grad_check


def t64(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = T.matmul(t64(np.eye(2)), t64(b))
    assert np.array_equal(out.data, b)


def test_matmul_annihilator():
    a = t64(np.arange(4, dtype=np.float64).reshape(2, 2))
    out = T.matmul(a, t64(np.zeros((2, 3))))
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_matmul_hand_value():
    out = T.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_backward():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[5.0], [6.0]])
    out = T.matmul(a, b)
    out.backward(np.ones((2, 1)))
    g = np.ones((2, 1))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- softmax ----------------------------------------------------------------


def test_softmax_symmetry():
    out = T.softmax_rows(t64([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_saturation_stable():
    out = T.softmax_rows(t64([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [1.0, 0.0], atol=1e-12)


def test_softmax_closed_form():
    out = T.softmax_rows(t64(np.log([1.0, 2.0, 3.0])))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_rows_sum_to_one_and_shift_invariant(np_rng):
    x = np_rng.normal(size=(4, 7))
    out = T.softmax_rows(t64(x))
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    shifted = T.softmax_rows(t64(x + 3.7))
    assert np.allclose(out.data, shifted.data, atol=1e-12)


def test_softmax_nan_input_raises():
    with pytest.raises(NumericError):
        T.softmax_rows(t64([0.0, np.nan]))


# -- layer norm --------------------------------------------------------------


def test_layer_norm_constant_token_is_zero():
    out = T.layer_norm(t64([[2.0, 2.0, 2.0]]), t64(np.ones(3)), t64(np.zeros(3)))
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_already_normalized():
    out = T.layer_norm(t64([[-1.0, 1.0]]), t64(np.ones(2)), t64(np.zeros(2)))
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_hand_value():
    # token [1,3]: mean 2, population var 1; gain 2, bias 1 -> [-1, 3] as eps -> 0
    out = T.layer_norm(t64([[1.0, 3.0]]), t64(np.full(2, 2.0)), t64(np.ones(2)))
    assert np.allclose(out.data, [[-1.0, 3.0]], atol=1e-4)


def test_layer_norm_gradient(np_rng):
    x = t64(np_rng.normal(size=(3, 5)))
    g = t64(np_rng.normal(size=5))
    b = t64(np_rng.normal(size=5))
    err = grad_check(lambda: T.tsum(T.square(T.layer_norm(x, g, b))), [x, g, b])
    assert err <= 1e-6


# -- pixel shuffle ------------------------------------------------------------


def test_pixel_shuffle_r1_identity(np_rng):
    x = t64(np_rng.normal(size=(1, 3, 4, 5)))
    assert np.array_equal(T.pixel_shuffle(x, 1).data, x.data)


def test_pixel_shuffle_shape_contract():
    x = t64(np.zeros((1, 64, 15, 20)))
    assert T.pixel_shuffle(x, 2).shape == (1, 16, 30, 40)


def test_pixel_shuffle_channel_major_order():
    x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    out = T.pixel_shuffle(x, 2)
    assert np.array_equal(out.data.reshape(2, 2), [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_inverse_bitwise(np_rng):
    x = np_rng.normal(size=(2, 8, 3, 5))
    out = T.pixel_unshuffle(T.pixel_shuffle(t64(x), 2), 2)
    assert np.array_equal(out.data, x)


def test_pixel_shuffle_indivisible_channels():
    with pytest.raises(ShapeError):
        T.pixel_shuffle(t64(np.zeros((1, 3, 2, 2))), 2)


# -- bilinear resize -----------------------------------------------------------


def test_bilinear_constant_map():
    x = t64(np.full((1, 2, 3, 3), 4.5))
    out = T.bilinear_resize(x, 7, 5)
    assert np.allclose(out.data, 4.5, atol=1e-12)


def test_bilinear_degenerate_source():
    x = t64(np.full((1, 1, 1, 1), 2.0))
    out = T.bilinear_resize(x, 4, 4)
    assert np.allclose(out.data, 2.0)


def test_bilinear_ramp():
    x = t64(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    out = T.bilinear_resize(x, 1, 3)
    assert np.allclose(out.data.ravel(), [0.0, 1.0, 2.0], atol=1e-12)


def test_bilinear_corners_exact(np_rng):
    x = np_rng.normal(size=(1, 1, 4, 6))
    out = T.bilinear_resize(t64(x), 9, 13).data[0, 0]
    assert out[0, 0] == pytest.approx(x[0, 0, 0, 0], abs=1e-12)
    assert out[-1, -1] == pytest.approx(x[0, 0, -1, -1], abs=1e-12)


def test_bilinear_zero_target_size():
    with pytest.raises(ShapeError):
        T.bilinear_resize(t64(np.zeros((1, 1, 2, 2))), 0, 3)


# -- grad_check oracle ----------------------------------------------------------


def test_grad_check_quadratic():
    x = t64([1.0, 2.0])
    err = grad_check(lambda: T.tsum(T.square(x)), [x])
    assert err <= 1e-8
    x.zero_grad()
    out = T.tsum(T.square(x))
    out.backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_grad_check_rejects_f32():
    x = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: T.tsum(x), [x])


def test_grad_check_rejects_nonscalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ShapeError):
        grad_check(lambda: T.square(x), [x])


# -- DAG / accumulation semantics -------------------------------------------------


def test_shared_subexpression_accumulates():
    x = t64([0.5, 1.5])
    y = T.exp(x)
    s = T.tsum(y) + T.tsum(T.mul(y, 2.0))
    s.backward()
    assert np.allclose(x.grad, 3.0 * np.exp(x.data))


def test_doubling_shared_branch_doubles_gradient():
    x = t64([1.0, 2.0])
    once = T.tsum(T.square(x))
    once.backward()
    g1 = x.grad.copy()
    x.zero_grad()
    y = T.square(x)
    twice = T.tsum(y) + T.tsum(y)
    twice.backward()
    assert np.allclose(x.grad, 2.0 * g1)


def test_reused_tensor_two_paths():
    x = t64([0.7, 1.3])
    s = T.tsum(T.exp(x)) + T.tsum(T.log(x))
    s.backward()
    assert np.allclose(x.grad, np.exp(x.data) + 1.0 / x.data)


def test_backward_without_grad_needs_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.square(x).backward()


def test_no_grad_suppresses_graph():
    x = t64([1.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad
    assert y._parents == ()


def test_detach_cuts_graph():
    x = t64([2.0])
    y = T.square(x).detach()
    z = T.tsum(T.mul(y, 3.0))
    z.backward()
    assert x.grad is None


# -- fused ops against finite differences ------------------------------------------


def test_blend_values_and_grad(np_rng):
    c = t64(np.float64(0.3))
    a = t64(np_rng.normal(size=(2, 4)))
    b = t64(np_rng.normal(size=(2, 4)))
    out = T.blend(c, a, b)
    assert np.allclose(out.data, 0.3 * a.data + 0.7 * b.data)
    err = grad_check(lambda: T.tsum(T.square(T.blend(c, a, b))), [c, a, b])
    assert err <= 1e-6


def test_blend_requires_scalar_coefficient():
    with pytest.raises(ShapeError):
        T.blend(t64([0.5, 0.5]), t64(np.zeros(2)), t64(np.zeros(2)))


def test_mlp_pair_matches_unfused(np_rng):
    x = t64(np_rng.normal(size=(3, 4)))
    w1 = t64(np_rng.normal(size=(8, 4)) * 0.5)
    b1 = t64(np_rng.normal(size=8))
    w2 = t64(np_rng.normal(size=(4, 8)) * 0.5)
    b2 = t64(np_rng.normal(size=4))
    fused = T.mlp_pair(x, w1, b1, w2, b2)
    ref = T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2)
    assert np.allclose(fused.data, ref.data, atol=1e-12)
    err = grad_check(lambda: T.tsum(T.square(T.mlp_pair(x, w1, b1, w2, b2))),
                     [x, w1, b1, w2, b2])
    assert err <= 1e-6


def test_attention_core_grad(np_rng):
    q = t64(np_rng.normal(size=(2, 4, 6)))
    k = t64(np_rng.normal(size=(2, 4, 6)))
    v = t64(np_rng.normal(size=(2, 4, 6)))
    bias = t64(np_rng.normal(size=(2, 4, 4)))
    err = grad_check(
        lambda: T.tsum(T.square(T.attention_core(q, k, v, 2, 0.57, bias=bias))),
        [q, k, v, bias])
    assert err <= 1e-6


def test_attention_core_nan_scores_raise():
    bad = t64(np.array([[[np.nan, 0.0]]]))
    with pytest.raises(NumericError):
        T.attention_core(bad, t64(np.ones((1, 1, 2))), t64(np.ones((1, 1, 2))), 1, 1.0)


def test_window_partition_merge_roundtrip(np_rng):
    x = np_rng.normal(size=(2, 3, 6, 6))
    for shift in (0, 2):
        tokens = T.window_partition(t64(x), 4, shift)
        back = T.window_merge(tokens, 4, shift, 2, 6, 6)
        assert np.array_equal(back.data, x)


def test_window_partition_grad(np_rng):
    x = t64(np_rng.normal(size=(1, 2, 4, 4)))
    err = grad_check(lambda: T.tsum(T.square(T.window_partition(x, 2, 1))), [x])
    assert err <= 1e-8


# -- misc ops used by the model ---------------------------------------------------


def test_concat_and_slice_grads(np_rng):
    a = t64(np_rng.normal(size=(2, 3)))
    b = t64(np_rng.normal(size=(2, 2)))
    err = grad_check(
        lambda: T.tsum(T.square(T.concat([a, b], axis=1)[:, 1:4])), [a, b])
    assert err <= 1e-8


def test_index_select_grad(np_rng):
    a = t64(np_rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2])
    err = grad_check(lambda: T.tsum(T.square(T.index_select(a, idx))), [a])
    assert err <= 1e-8


def test_adaptive_avg_pool_constant(np_rng):
    x = t64(np.full((1, 2, 6, 6), 1.25))
    out = T.adaptive_avg_pool2d(x, 3)
    assert out.shape == (1, 2, 3, 3)
    assert np.allclose(out.data, 1.25)


def test_f32_stays_f32(np_rng):
    x = Tensor(np_rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)
    w = Tensor(np_rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
    out = T.tsum(T.square(T.linear(x, w)))
    assert out.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32

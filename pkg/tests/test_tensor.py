import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jcatdepth import tensor as T
from jcatdepth.gradcheck import grad_check
from jcatdepth.tensor import NonFiniteError, ShapeError, Tensor

import oracles


def rand(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


# -- Tensor basics ------------------------------------------------------------
def test_tensor_defaults_to_float64():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float64 and t.shape == (3,) and t.grad is None


def test_default_dtype_context():
    with T.default_dtype(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_non_finite_data_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_sum_is_2x():
    x = Tensor([1.0, -2.0, 3.5], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_fan_out_sums_path_gradients():
    # y = a*x + b*x^2 + sin-free third path: x used by three consumers
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = (x * 2.0 + x * x + T.exp(x)).sum()
    y.backward()
    expected = 2.0 + 2 * x.data + np.exp(x.data)
    np.testing.assert_allclose(x.grad, expected, rtol=0, atol=1e-15)


def test_diamond_graph_visits_each_node_once():
    x = Tensor([2.0], requires_grad=True)
    h = x * x            # shared intermediate
    y = (h + h * 3.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [4 * 2 * 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


def test_broadcast_gradients_unbroadcast():
    rng = np.random.default_rng(0)
    a = rand(rng, 3, 4, grad=True)
    b = rand(rng, 4, grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


# -- matmul -------------------------------------------------------------------
def test_matmul_identity_and_hand_case():
    b = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


@pytest.mark.parametrize("seed", range(20))
def test_matmul_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul_loop(a, b),
                               rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_broadcast_grad():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 2, 3, 4, 5, grad=True), rand(rng, 5, 2, grad=True)
    assert grad_check(lambda a, b: (T.matmul(a, b) ** 2).sum(), [a, b]).passed


# -- conv2d -------------------------------------------------------------------
def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[range(3), range(3)] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_counting_example():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 2] == 6


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("stride,pad", [(1, (1, 1)), (2, (1, 0)), (1, (0, 0))])
def test_conv2d_matches_direct_oracle(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, oracles.conv2d_direct(x, w, b, stride, pad), rtol=0, atol=1e-10)


def test_conv2d_rejects_non_integral_output():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)


def test_conv2d_stride2_asymmetric_pad_halves_even_sizes():
    y = T.conv2d(Tensor(np.ones((1, 1, 8, 6))), Tensor(np.ones((2, 1, 3, 3))), stride=2, padding=(1, 0))
    assert y.shape == (1, 2, 4, 3)


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 6, 4), (1, 2, 5, 7)])
def test_conv2d_gradcheck_shapes(shape):
    rng = np.random.default_rng(sum(shape))
    x, w, b = rand(rng, *shape, grad=True), rand(rng, 2, shape[1], 3, 3, grad=True), rand(rng, 2, grad=True)
    r = rng.normal(size=(shape[0], 2) + shape[2:])
    assert grad_check(lambda x, w, b: (T.conv2d(x, w, b, padding=1) * Tensor(r)).sum(), [x, w, b]).passed


# -- conv_transpose2d ---------------------------------------------------------
def test_deconv_impulse_response_stamps_kernel():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    y = T.conv_transpose2d(Tensor(x), Tensor(w)).data[0, 0]
    # input (1,1) maps to output (2,2); padding 1 shifts the stamp by one
    np.testing.assert_array_equal(y[1:4, 1:4], w[0, 0])
    assert y.sum() == w.sum()


def test_deconv_zero_input_zero_output():
    y = T.conv_transpose2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.ones((2, 3, 3, 3))))
    assert y.shape == (1, 3, 6, 6) and not y.data.any()


@pytest.mark.parametrize("seed", range(20))
def test_deconv_matches_scatter_oracle(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)
    got = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, oracles.conv_transpose_scatter(x, w, b), rtol=0, atol=1e-10)


def test_deconv_rejects_non_doubling_config():
    with pytest.raises(ShapeError):
        T.conv_transpose2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), output_padding=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_conv_deconv_adjointness(c_in, c_out, h, w, seed):
    # <conv(x), y> == <x, deconv(y)> for the stride-2, pad (1,0) forward conv
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c_in, 2 * h, 2 * w))
    k = rng.normal(size=(c_out, c_in, 3, 3))
    y = rng.normal(size=(2, c_out, h, w))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(k), stride=2, padding=(1, 0)).data * y)
    rhs = np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(k)).data)
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# -- softmax / layer norm -----------------------------------------------------
def test_softmax_closed_forms():
    np.testing.assert_allclose(T.softmax(Tensor(np.full((1, 4), 3.0))).data, [[0.25] * 4])
    np.testing.assert_array_equal(T.softmax(Tensor([[7.0]])).data, [[1.0]])
    np.testing.assert_allclose(T.softmax(Tensor([[0.0, np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)


def test_softmax_rejects_nan():
    x = Tensor([0.0, 1.0])
    x.data[0] = np.nan
    with pytest.raises(NonFiniteError):
        T.softmax(x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=12))
def test_softmax_is_a_distribution(row):
    p = T.softmax(Tensor([row])).data
    assert np.all(p > 0) or len(row) == 1 or np.ptp(row) > 700
    assert abs(p.sum() - 1.0) < 1e-6


def test_layer_norm_closed_forms():
    np.testing.assert_array_equal(T.layer_norm(Tensor([[5.0, 5.0, 5.0]])).data, [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(T.layer_norm(Tensor([[1.0, 3.0]]), eps=1e-12).data, [[-1.0, 1.0]], atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_matches_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(3, 7)), rng.normal(size=7), rng.normal(size=7)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(got, oracles.layer_norm_two_pass(x, g, b), rtol=0, atol=1e-10)


@pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 6)])
def test_layer_norm_gradcheck(shape):
    rng = np.random.default_rng(len(shape))
    x, g, b = rand(rng, *shape, grad=True), rand(rng, shape[-1], grad=True), rand(rng, shape[-1], grad=True)
    r = Tensor(rng.normal(size=shape))
    assert grad_check(lambda x, g, b: (T.layer_norm(x, g, b) * r).sum(), [x, g, b]).passed


# -- bilinear sampling ----------------------------------------------------------
def test_bilinear_integer_coords_read_grid():
    f = np.arange(12.0).reshape(1, 1, 3, 4)
    c = np.array([[[0, 0], [2, 3], [1, 2]]], dtype=float)
    np.testing.assert_array_equal(T.bilinear_sample(Tensor(f), Tensor(c)).data[0, 0], [0.0, 11.0, 6.0])


def test_bilinear_midpoint_average():
    f = np.array([[[[0.0, 2.0], [4.0, 6.0]]]])
    assert T.bilinear_sample(Tensor(f), Tensor([[[0.5, 0.5]]])).data.item() == 3.0


def test_bilinear_out_of_bounds_is_zero_with_zero_grad():
    f = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    c = Tensor([[[-3.0, 0.5], [0.5, 9.0]]], requires_grad=True)
    y = T.bilinear_sample(f, c)
    assert not y.data.any()
    y.sum().backward()
    assert not f.grad.any() and not c.grad.any()


@pytest.mark.parametrize("seed", range(20))
def test_bilinear_matches_4term_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 3, 5, 6))
    c = rng.uniform(-1.5, 6.5, size=(2, 9, 2))
    got = T.bilinear_sample(Tensor(f), Tensor(c)).data
    np.testing.assert_allclose(got, oracles.bilinear_4term(f, c), rtol=0, atol=1e-12)


def test_bilinear_plan_reuse_matches_fresh():
    rng = np.random.default_rng(3)
    f, c = rng.normal(size=(1, 2, 4, 4)), rng.uniform(0, 3, size=(1, 5, 2))
    plan = T.BilinearPlan(c, 4, 4)
    np.testing.assert_array_equal(T.bilinear_sample(Tensor(f), Tensor(c), plan).data,
                                  T.bilinear_sample(Tensor(f), Tensor(c)).data)


# -- remaining elementwise / reduction ops ---------------------------------------
@pytest.mark.parametrize("name,fn", [
    ("exp", T.exp), ("tanh", T.tanh), ("sigmoid", T.sigmoid), ("gelu", T.gelu),
    ("log", lambda x: T.log(T.abs_(x) + 0.5)), ("sqrt", lambda x: T.sqrt(x * x + 1.0)),
    ("div", lambda x: x / (x * x + 2.0)), ("pow", lambda x: T.power(x * x + 1.0, 1.5)),
    ("mean", lambda x: x.mean(axis=1)), ("max", lambda x: x.max(axis=0)),
    ("transpose", lambda x: x.transpose(1, 0) * Tensor(np.arange(12.0).reshape(4, 3))),
    ("getitem", lambda x: x[1:, ::2]), ("fancy", lambda x: x[np.array([0, 0, 2])]),
    ("concat", lambda x: T.concat([x, x * 2.0], axis=1)),
])
def test_elementwise_gradcheck(name, fn):
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)), requires_grad=True)
    r = None

    def f(x):
        nonlocal r
        y = fn(x)
        if r is None:
            r = Tensor(np.random.default_rng(8).normal(size=y.shape))
        return (y * r).sum()
    assert grad_check(f, [x]).passed, name


def test_grad_check_trivial_case():
    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    rep = grad_check(lambda x: (x * x).sum(), [x])
    assert rep.passed and rep.max_rel_err < 1e-8


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        return T._node(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "bad")
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert not grad_check(lambda x: bad_square(x).sum(), [x]).passed


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])

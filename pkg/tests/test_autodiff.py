import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from girnet.autodiff import (
    Tensor,
    add,
    concat_channels,
    elementwise,
    finite_diff_check,
    flat_index,
    leaky_relu,
    make_node,
    mul,
    no_grad,
    relu,
    reshape,
    reverse_accumulate,
    scale,
    sigmoid,
    split_channels,
    sub,
    sum_all,
    tanh,
    unflat_index,
)
from girnet.metrics import charbonnier_loss


def test_add_values():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_sigmoid_of_zero_is_half():
    out = sigmoid(Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, 0.5)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        elementwise("cube", Tensor([1.0]))


def test_tanh_gradient_at_zero():
    err = finite_diff_check(lambda t: sum_all(tanh(t)), np.zeros(4))
    assert err < 1e-6


def test_leaky_relu_slope():
    out = leaky_relu(Tensor([-2.0, 3.0]))
    np.testing.assert_allclose(out.data, [-0.2, 3.0])


UNARY = [sigmoid, tanh, relu, leaky_relu, lambda t: scale(t, -1.7)]
BINARY = [add, sub, mul]


@pytest.mark.parametrize("op", UNARY, ids=["sigmoid", "tanh", "relu", "leaky_relu", "scale"])
@pytest.mark.parametrize("seed", range(10))
def test_unary_vjp_matches_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(3, 4))
    # keep relu kinks out of the finite-difference stencil
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    probe = Tensor(rng.normal(size=x.shape))
    assert finite_diff_check(lambda t: sum_all(mul(op(t), probe)), x) < 1e-4


@pytest.mark.parametrize("op", BINARY, ids=["add", "sub", "mul"])
@pytest.mark.parametrize("seed", range(10))
def test_binary_vjp_matches_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(2, 5))
    b = rng.uniform(-1, 1, size=(2, 5))
    probe = Tensor(rng.normal(size=a.shape))
    assert finite_diff_check(lambda t: sum_all(mul(op(t, Tensor(b)), probe)), a) < 1e-4
    assert finite_diff_check(lambda t: sum_all(mul(op(Tensor(a), t), probe)), b) < 1e-4


def test_concat_shape_and_identity():
    a = Tensor(np.ones((1, 2, 4, 4)))
    b = Tensor(np.zeros((1, 3, 4, 4)))
    assert concat_channels([a, b]).shape == (1, 5, 4, 4)
    assert concat_channels([a]) is a


def test_concat_split_round_trip():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=(2, 3, 3, 3))
    pa, pb = split_channels(concat_channels([Tensor(a), Tensor(b)]), [2, 3])
    np.testing.assert_array_equal(pa.data, a)
    np.testing.assert_array_equal(pb.data, b)


def test_concat_rejects_mismatched_spatial():
    with pytest.raises(ValueError):
        concat_channels([Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 4, 5)))])


def test_concat_backward_splits_gradient():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 1, 3, 3))
    probe = Tensor(rng.normal(size=(1, 3, 3, 3)))
    assert finite_diff_check(lambda t: sum_all(mul(concat_channels([t, Tensor(b)]), probe)), a) < 1e-8
    assert finite_diff_check(lambda t: sum_all(mul(concat_channels([Tensor(a), t]), probe)), b) < 1e-8


def test_linear_loss_gradient_is_input():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    (g,) = reverse_accumulate(sum_all(mul(w, Tensor(x))), [w])
    np.testing.assert_array_equal(g, x)


def test_unreachable_parameter_gets_zero_gradient():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones((3, 1, 2)), requires_grad=True)
    grads = reverse_accumulate(sum_all(w), {"w": w, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1, 2)))
    np.testing.assert_array_equal(grads["w"], np.ones((2, 2)))


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        reverse_accumulate(scale(w, 2.0), [w])


def test_shared_subexpression_accumulates():
    # d/dx sum(x*x + x) = 2x + 1
    x = np.array([0.5, -1.5, 2.0])
    t = Tensor(x, requires_grad=True)
    (g,) = reverse_accumulate(sum_all(add(mul(t, t), t)), [t])
    np.testing.assert_allclose(g, 2 * x + 1)


def test_three_op_chain_matches_single_expression():
    # loss = sum(sigmoid(tanh(x) * w)); hand-derived gradient
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(4, 3))
    w = rng.uniform(-1, 1, size=(4, 3))
    t = Tensor(x, requires_grad=True)
    (g,) = reverse_accumulate(sum_all(sigmoid(mul(tanh(t), Tensor(w)))), [t])
    s = 1 / (1 + np.exp(-np.tanh(x) * w))
    expected = s * (1 - s) * w * (1 - np.tanh(x) ** 2)
    np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_charbonnier_composition_gradient():
    rng = np.random.default_rng(4)
    theta = rng.uniform(-1, 1, size=(1, 3, 4, 4))
    target = [rng.uniform(0, 1, size=(1, 3, 4, 4))]
    assert finite_diff_check(lambda t: charbonnier_loss([tanh(t)], target), theta, h=1e-5) < 1e-4


def test_finite_diff_check_quadratic():
    x = np.random.default_rng(5).normal(size=7)
    assert finite_diff_check(lambda t: scale(sum_all(mul(t, t)), 0.5), x) < 1e-8


def _sin(t):
    # test-local op whose backward is the cosine oracle
    return make_node(np.sin(t.data), (t,), lambda g: (g * np.cos(t.data),), "sin")


def test_finite_diff_check_sine():
    x = np.random.default_rng(6).uniform(-1, 1, size=5)
    assert finite_diff_check(lambda t: sum_all(_sin(t)), x) < 1e-6


def test_finite_diff_check_rejects_zero_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: sum_all(t), np.ones(2), h=0.0)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = mul(w, w)
    assert not y.requires_grad and y._parents == ()


def test_reshape_round_trip_gradient():
    x = np.arange(6.0).reshape(2, 3)
    probe = Tensor(np.random.default_rng(7).normal(size=(3, 2)))
    assert finite_diff_check(lambda t: sum_all(mul(reshape(t, (3, 2)), probe)), x) < 1e-6


def test_float32_is_default_preserved():
    t = Tensor(np.ones(3, dtype=np.float32))
    assert sigmoid(t).dtype == np.float32


def test_flat_index_round_trip_exhaustive():
    shape = (2, 3, 4, 5)
    for off in range(int(np.prod(shape))):
        idx = unflat_index(off, shape)
        assert flat_index(idx, shape) == off
        assert np.ravel_multi_index(idx, shape) == off


@settings(max_examples=50, deadline=None)
@given(st.tuples(*(st.integers(0, d - 1) for d in (2, 3, 4, 5))))
def test_unflatten_flatten_identity(idx):
    shape = (2, 3, 4, 5)
    assert unflat_index(flat_index(idx, shape), shape) == idx


def test_zero_dimension_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 0)))


def test_every_reachable_node_gets_matching_gradient():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
    cat = concat_channels([tanh(a), sigmoid(b)])
    loss = sum_all(mul(cat, cat))
    grads = reverse_accumulate(loss)
    for node in (a, b, cat, loss):
        assert grads[id(node)].shape == node.shape

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cake import autodiff as ad
from cake.autodiff import Tensor, finite_diff_check, no_grad, topo_order
from cake.errors import ContractError, DimensionError

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def away_from_zero(rng, shape, margin=1e-2):
    x = uniform(rng, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + 0.1), x)


def weighted_sum(out_shape, rng):
    """A random linear read-out so every output coordinate reaches the loss."""
    w = rng.normal(size=out_shape)
    return lambda y: ad.sum_(ad.mul(y, t64(w)))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity_and_hand_values():
    m = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(ad.matmul(m, Tensor([[1], [1]])).data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_matches_finite_differences(rng):
    b = uniform(rng, (3, 4))
    err = finite_diff_check(lambda a: ad.sum_(ad.matmul(a, t64(b))), uniform(rng, (2, 3)))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# conv2d


def test_conv_unit_kernel_sums_channels(rng):
    x = uniform(rng, (2, 3, 4, 5)).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 3, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data[:, 0], x.sum(axis=1), rtol=1e-6)


def test_conv_all_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_matches_direct_loop(rng):
    x = uniform(rng, (2, 2, 6, 5))
    k = uniform(rng, (3, 2, 3, 2))
    b = uniform(rng, (3,))
    out = ad.conv2d(t64(x), t64(k), t64(b)).data
    ref = np.zeros((2, 3, 4, 4))
    for n in range(2):
        for f in range(3):
            for i in range(4):
                for j in range(4):
                    ref[n, f, i, j] = np.sum(x[n, :, i : i + 3, j : j + 2] * k[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("which", ["input", "kernel", "bias"])
def test_conv_gradients(rng, which):
    x, k, b = uniform(rng, (2, 2, 5, 5)), uniform(rng, (3, 2, 3, 3)), uniform(rng, (3,))
    read = weighted_sum((2, 3, 3, 3), rng)
    fs = {
        "input": (lambda v: read(ad.conv2d(v, t64(k), t64(b))), x),
        "kernel": (lambda v: read(ad.conv2d(t64(x), v, t64(b))), k),
        "bias": (lambda v: read(ad.conv2d(t64(x), t64(k), v)), b),
    }
    f, point = fs[which]
    assert finite_diff_check(f, point) < 1e-4


# ---------------------------------------------------------------------------
# maxpool


def test_maxpool_routes_gradient_to_max():
    x = Tensor([[[[1, 2], [3, 4]]]], requires_grad=True)
    out = ad.maxpool2d(x)
    assert out.data.item() == 4
    ad.sum_(out).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])


def test_maxpool_ties_go_to_first_in_row_major_order():
    x = Tensor(np.full((1, 1, 4, 4), 2.5), requires_grad=True)
    out = ad.maxpool2d(x)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))
    ad.sum_(out).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_partial_tie_picks_earliest():
    x = Tensor([[[[1, 7], [7, 0]]]], requires_grad=True)
    ad.sum_(ad.maxpool2d(x)).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


def test_maxpool_equals_window_scan(rng):
    x = uniform(rng, (3, 2, 4, 4))
    out = ad.maxpool2d(t64(x)).data
    for n in range(3):
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    assert out[n, c, i, j] == x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()


def test_maxpool_rejects_odd_sizes():
    with pytest.raises(DimensionError):
        ad.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_gradient(rng):
    x = uniform(rng, (2, 2, 4, 6))  # continuous draws, so no ties within h
    read = weighted_sum((2, 2, 2, 3), rng)
    assert finite_diff_check(lambda v: read(ad.maxpool2d(v)), x) < 1e-4


# ---------------------------------------------------------------------------
# relu and other elementwise ops


def test_relu_values_and_mask():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    ad.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


ELEMENTWISE = {
    "relu": (ad.relu, away_from_zero),
    "abs": (ad.abs_, away_from_zero),
    "square": (ad.square, uniform),
    "exp": (ad.exp, uniform),
    "log": (ad.log, lambda rng, s: rng.uniform(0.2, 2.0, size=s)),
    "scale": (lambda v: ad.scale(v, -1.7), uniform),
    "neg": (lambda v: -v, uniform),
    "transpose": (ad.transpose, uniform),
    "flatten": (ad.flatten, uniform),
    "log_softmax": (ad.log_softmax, uniform),
    "pairwise_sqdist": (ad.pairwise_sqdist, uniform),
    "sum_axis0": (lambda v: ad.sum_(v, axis=0), uniform),
    "mean_axis1": (lambda v: ad.mean(v, axis=1), uniform),
    "mean": (ad.mean, uniform),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_unary_gradients(rng, name):
    op, draw = ELEMENTWISE[name]
    x = draw(rng, (4, 3))
    out_shape = op(t64(x)).shape
    read = weighted_sum(out_shape, rng)
    assert finite_diff_check(lambda v: read(op(v)), x) < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul"])
def test_binary_gradients(rng, name):
    op = getattr(ad, name)
    a, b = uniform(rng, (3, 4)), uniform(rng, (3, 4))
    read = weighted_sum((3, 4), rng)
    assert finite_diff_check(lambda v: read(op(v, t64(b))), a) < 1e-4
    assert finite_diff_check(lambda v: read(op(t64(a), v)), b) < 1e-4


def test_add_bias_gradients(rng):
    x, b = uniform(rng, (5, 3)), uniform(rng, (3,))
    read = weighted_sum((5, 3), rng)
    assert finite_diff_check(lambda v: read(ad.add_bias(v, t64(b))), x) < 1e-4
    assert finite_diff_check(lambda v: read(ad.add_bias(t64(x), v)), b) < 1e-4


@pytest.mark.parametrize("axis", [1, 2, 3])
def test_diff_gradient(rng, axis):
    x = uniform(rng, (2, 2, 3, 4))
    out_shape = ad.diff(t64(x), axis).shape
    read = weighted_sum(out_shape, rng)
    assert finite_diff_check(lambda v: read(ad.diff(v, axis)), x) < 1e-4


def test_reshape_gradient(rng):
    x = uniform(rng, (2, 6))
    read = weighted_sum((3, 4), rng)
    assert finite_diff_check(lambda v: read(ad.reshape(v, (3, 4))), x) < 1e-4


def test_shape_mismatch_in_elementwise():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5)), elements=st.floats(-5, 5, width=32)))
def test_flatten_then_reshape_is_identity(x):
    t = Tensor(x)
    back = ad.reshape(ad.flatten(t), x.shape)
    np.testing.assert_array_equal(back.data, x)


# ---------------------------------------------------------------------------
# backward contract


def test_sum_gives_ones_and_zero_scale_gives_zeros():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum_(ad.scale(y, 0.0)).backward()
    np.testing.assert_array_equal(y.grad, np.zeros((2, 3)))


def test_loss_node_gradient_is_one():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.square(x))
    loss.backward()
    assert loss.grad.item() == 1.0


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.square(x).backward()


def test_second_backward_on_same_graph_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.square(x))
    loss.backward()
    first = x.grad.copy()
    with pytest.raises(ContractError):
        loss.backward()
    np.testing.assert_array_equal(x.grad, first)


def test_fresh_forward_accumulates_into_leaf():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum_(ad.square(x)).backward()
    ad.sum_(ad.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y.is_leaf


def test_shared_subexpression_gradients_add_up():
    x = Tensor([3.0], requires_grad=True, dtype=F64)
    y = ad.square(x)
    ad.sum_(ad.add(y, y)).backward()
    assert x.grad.item() == pytest.approx(12.0)


def test_topological_order_puts_operands_first(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    h = ad.relu(ad.matmul(x, w))
    loss = ad.sum_(ad.add(h, ad.square(h)))
    order = topo_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert order[-1] is loss
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_float32_default_and_float64_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    x = t64([1.0, 2.0], grad=True)
    y = ad.exp(x)
    assert y.dtype == np.float64
    ad.sum_(y).backward()
    assert x.grad.dtype == np.float64


# ---------------------------------------------------------------------------
# finite_diff_check and composite models


def test_finite_diff_on_quadratic_and_linear():
    assert finite_diff_check(lambda v: ad.sum_(ad.square(v)), np.array([3.0])) < 1e-6
    assert finite_diff_check(lambda v: ad.sum_(ad.scale(v, 2.5)), np.array([1.0, -4.0])) < 1e-9


def test_finite_diff_detects_a_wrong_gradient():
    def bad(v):
        out = ad.square(v)
        out._backward = lambda g: ad._acc(v, 3 * g * v.data)  # should be 2*g*x
        return ad.sum_(out)

    assert finite_diff_check(bad, np.array([1.0, 2.0])) > 0.1


def _param_errors(net, loss_of_net, max_coords=40, rng=None):
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i, p in enumerate(net.params):
        def f(v, i=i):
            saved = net.params[i]
            net.params[i] = v
            try:
                return loss_of_net(net)
            finally:
                net.params[i] = saved

        n = p.data.size
        idx = rng.choice(n, size=min(n, max_coords), replace=False)
        worst = max(worst, finite_diff_check(f, p.data.astype(F64), indices=idx))
    return worst


def test_mlp_2_4_2_all_parameter_gradients(rng):
    from cake.losses import cross_entropy
    from cake.models import mlp_new

    net = mlp_new(2, [4], 2, rng).copy(F64)
    x, y = t64(uniform(rng, (8, 2))), rng.integers(0, 2, 8)
    assert _param_errors(net, lambda n: cross_entropy(n(x), y), max_coords=100) < 1e-4


def test_lenet_half_input_gradient_of_cross_entropy(rng):
    from cake.losses import cross_entropy
    from cake.models import lenet5_new

    net = lenet5_new(True, rng).copy(F64)
    y = rng.integers(0, 10, 2)
    x = rng.normal(size=(2, 1, 32, 32))
    idx = rng.choice(x.size, 60, replace=False)
    assert finite_diff_check(lambda v: cross_entropy(net(v), y), x, indices=idx) < 1e-4

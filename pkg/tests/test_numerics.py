import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmt import numerics as nx
from dcmt.audit import PRIMITIVES, check_primitive
from dcmt.numerics import DimensionError, Tensor


def leaf(data):
    return Tensor(data, requires_grad=True)


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


# --- forward examples -------------------------------------------------------


def test_conv2d_identity_kernel():
    out = nx.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))


def test_conv2d_hand_cross_correlation():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    k = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
    out = nx.conv2d(x, k, Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 5.0


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        nx.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 2, 1, 1))), Tensor([0.0]))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 7, 6)
    k = rand(rng, 4, 3, 3, 2)
    b = rand(rng, 4)
    out = nx.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (7 + 2 * padding - 3) // stride + 1
    wo = (6 + 2 * padding - 2) // stride + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 2]
                    ref[n, f, i, j] = np.sum(patch * k[f]) + b[f]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_elementwise_examples():
    np.testing.assert_array_equal(nx.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert nx.elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(nx.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    np.testing.assert_array_equal(nx.elementwise("scale", Tensor([1.0, -2.0]), 3.0).data, [3, -6])


def test_binary_ops_reject_broadcasting():
    with pytest.raises(DimensionError):
        nx.add(Tensor([1.0, 2.0]), Tensor([1.0]))
    with pytest.raises(DimensionError):
        nx.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))
    with pytest.raises(DimensionError):
        nx.add_bias(Tensor(np.ones((2, 3, 4))), Tensor(np.ones(4)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_array_equal(nx.softmax(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(nx.softmax(Tensor([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


def test_non_finite_values_are_rejected():
    with pytest.raises(nx.NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(nx.NonFiniteError), np.errstate(over="ignore"):
        nx.scale(Tensor([1e308]), 10.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 5, size=(4, 3))
    p = nx.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    q = nx.softmax(Tensor(z + c)).data
    assert np.max(np.abs(p - q)) <= 1e-12


# --- backward ---------------------------------------------------------------


def test_backward_quadratic():
    w = leaf([1.0, 2.0])
    nx.backward(nx.sum_axes(nx.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_sigmoid_at_zero():
    x = leaf([0.0])
    nx.backward(nx.sum_axes(nx.sigmoid(x)))
    assert x.grad[0] == 0.25


def test_backward_accumulates_until_zeroed():
    w = leaf([1.0, 2.0])
    nx.backward(nx.sum_axes(nx.mul(w, w)))
    nx.backward(nx.sum_axes(nx.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])
    nx.zero_grads([w])
    assert w.grad is None


def test_backward_needs_scalar_root():
    w = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        nx.backward(nx.mul(w, w))


def test_graph_is_topological():
    a = leaf([1.0])
    b = nx.sigmoid(a)
    c = nx.add(b, a)
    root = nx.sum_axes(nx.mul(c, b))
    g = nx.Graph.from_root(root)
    pos = {n.output_id: i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for i in n.input_ids:
            assert pos[i] < pos[n.output_id]
    assert len(pos) == len(g.nodes)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    report = check_primitive(name, h=1e-5, tol=1e-6)
    assert report.passed, report


def test_grad_check_quadratic_passes():
    w = leaf([0.3, -1.2, 2.0])
    report = nx.finite_difference_check(lambda: nx.sum_axes(nx.square(w)), [w], h=1e-5, tol=1e-6)
    assert report.passed and report.checked == 3


def test_grad_check_catches_corrupted_rule(monkeypatch):
    def bad_square(a):
        ad = a.data
        return nx._make(ad * ad, (a,), lambda g: (3.0 * ad * g,), "square")

    w = leaf([0.3, -1.2, 2.0])
    report = nx.finite_difference_check(lambda: nx.sum_axes(bad_square(w)), [w], h=1e-5, tol=1e-6)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    w = leaf(rng.uniform(-1, 1, size=(2, 1, 4, 4)))
    k = Tensor(rng.uniform(-1, 1, size=(2, 1, 3, 3)))
    b = Tensor(np.zeros(2))

    def l1():
        return nx.sum_axes(nx.sigmoid(nx.conv2d(w, k, b, 1, 1)))

    def l2():
        return nx.sum_axes(nx.square(nx.relu(w)))

    nx.backward(l1())
    g1 = w.grad.copy()
    w.grad = None
    nx.backward(l2())
    g2 = w.grad.copy()
    w.grad = None
    a, c = 0.7, -2.3
    nx.backward(nx.add(nx.scale(l1(), a), nx.scale(l2(), c)))
    np.testing.assert_allclose(w.grad, a * g1 + c * g2, rtol=0, atol=1e-10)


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    x0 = rng.uniform(-1, 1, size=(3, 2, 6, 6))
    k0 = rng.uniform(-1, 1, size=(4, 2, 3, 3))

    def run():
        x, k = leaf(x0), leaf(k0)
        out = nx.softmax(nx.global_avg_pool(nx.relu(nx.conv2d(x, k, Tensor(np.zeros(4)), 1, 1))))
        nx.backward(nx.sum_axes(nx.square(out)))
        return out.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


def test_attention_pool_examples():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    ones = Tensor(np.ones((2, 1, 4, 4)))
    np.testing.assert_allclose(nx.attention_pool(x, ones, eps=1e-300).data, nx.global_avg_pool(x).data, atol=1e-15)
    spot = np.zeros((2, 1, 4, 4))
    spot[:, 0, 1, 2] = 0.5
    np.testing.assert_allclose(nx.attention_pool(x, Tensor(spot), eps=1e-300).data, x.data[:, :, 1, 2], atol=1e-15)
    assert np.all(nx.attention_pool(x, Tensor(np.zeros((2, 1, 4, 4)))).data == 0)
    with pytest.raises(DimensionError):
        nx.attention_pool(x, Tensor(np.ones((2, 3, 4, 4))))

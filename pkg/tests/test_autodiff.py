import numpy as np
import pytest

from gradleak import autodiff as ad
from gradleak.autodiff import Graph, GraphError, backward

from conftest import central_difference, rel_error


def test_leaf_construction():
    g = Graph()
    n = g.leaf([1.0, 2.0])
    assert n.shape == (2,)
    assert np.array_equal(n.values, [1.0, 2.0])
    s = g.leaf(3.0)
    assert s.shape == ()
    assert s.item() == 3.0


def test_leaf_shape_mismatch():
    g = Graph()
    with pytest.raises(ValueError):
        g.leaf(np.arange(5.0).reshape(5), copy=True).values.reshape(2, 3)


def test_matmul_hand_example():
    g = Graph()
    a = g.leaf([[1.0, 2.0], [3.0, 4.0]])
    b = g.leaf([[1.0], [1.0]])
    c = ad.matmul(a, b)
    assert np.array_equal(c.values, [[3.0], [7.0]])


def test_matmul_inner_dim_mismatch():
    g = Graph()
    a = g.leaf(np.ones((2, 3)))
    b = g.leaf(np.ones((2, 3)))
    with pytest.raises(GraphError):
        ad.matmul(a, b)


def test_elementwise_shape_mismatch():
    g = Graph()
    with pytest.raises(GraphError):
        ad.add(g.leaf(np.ones(3)), g.leaf(np.ones(4)))


def test_tanh_at_origin():
    g = Graph()
    assert ad.tanh(g.leaf(0.0)).item() == 0.0


def test_clamp_values():
    g = Graph()
    out = ad.clamp(g.leaf([-0.5, 0.5, 1.5]), 0.0, 1.0)
    assert np.array_equal(out.values, [0.0, 0.5, 1.0])


def test_clamp_boundary_subgradient_is_zero():
    g = Graph()
    x = g.leaf([-0.5, 0.0, 0.5, 1.0, 1.5], requires_grad=True)
    y = ad.sum_all(ad.clamp(x, 0.0, 1.0))
    grads = backward(y, [x])
    assert np.array_equal(grads[x].values, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_simple_gradient():
    g = Graph()
    x = g.leaf([1.0, 2.0, 3.0], requires_grad=True)
    y = ad.sum_all(ad.mul(x, x))
    grads = backward(y, [x])
    assert np.array_equal(grads[x].values, [2.0, 4.0, 6.0])


def test_unrelated_leaf_gets_zero_gradient():
    g = Graph()
    w = g.leaf(np.ones((2, 2)), requires_grad=True)
    x = g.leaf(np.ones((2, 1)))
    z = g.leaf(np.ones((3, 3)), requires_grad=True)
    y = ad.sum_all(ad.matmul(w, x))
    grads = backward(y, [w, z])
    assert grads[z].values.shape == (3, 3)
    assert np.all(grads[z].values == 0.0)
    assert np.array_equal(grads[w].values, np.ones((2, 2)))


def test_backward_requires_scalar_root():
    g = Graph()
    x = g.leaf([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(ad.mul(x, x), [x])


def _random_graph_value(g, x, rng):
    """A composite scalar exercising every primitive family."""
    n = x.shape[0]
    w = g.leaf(rng.standard_normal((n, n)), requires_grad=False)
    h = ad.matmul(ad.reshape(x, (1, n)), w)
    h = ad.tanh(h)
    h = ad.add(h, ad.exp(ad.mul(ad.reshape(x, (1, n)), 0.3)))
    h = ad.mul(h, ad.sqrt(ad.add(ad.square(ad.reshape(x, (1, n))), 1.0)))
    top = ad.concat([h, ad.mul(h, 0.5)], axis=0)
    sliced = top[0:1, : max(1, n // 2)]
    val = ad.sum_all(sliced) + ad.mean_all(ad.abs_(top)) * 0.25
    val = ad.add(val, ad.sum_all(ad.log(ad.add(ad.square(x), 1.5))))
    val = ad.add(val, ad.sum_all(ad.clamp(x, -0.8, 0.8)))
    val = ad.add(val, ad.sum_all(ad.div(x, 2.5)))
    return val


def test_first_order_matches_finite_differences(rng):
    for trial in range(50):
        n = int(rng.integers(2, 9))
        x0 = rng.standard_normal(n)

        def f(xv):
            g = Graph()
            x = g.leaf(xv, requires_grad=True)
            return _random_graph_value(g, x, np.random.default_rng(trial)).item()

        g = Graph()
        x = g.leaf(x0, requires_grad=True)
        val = _random_graph_value(g, x, np.random.default_rng(trial))
        grads = backward(val, [x])
        num = central_difference(f, x0)
        assert rel_error(grads[x].values, num) <= 1e-6


def test_take_put_adjoint_pair(rng):
    x0 = rng.standard_normal((3, 4))
    idx = np.array([0, 5, 5, 11, 2])

    def f(xv):
        g = Graph()
        x = g.leaf(xv, requires_grad=True)
        return ad.sum_all(ad.square(ad.take(x, idx))).item()

    g = Graph()
    x = g.leaf(x0, requires_grad=True)
    val = ad.sum_all(ad.square(ad.take(x, idx)))
    grads = backward(val, [x])
    num = central_difference(f, x0.copy())
    assert rel_error(grads[x].values, num) <= 1e-6


def test_double_backward_hand_example():
    # d/dx ||d(Wx)^2/dW||^2 at W=2, x=3 equals 1728
    def build(g, wv, xv):
        w = g.leaf(wv, requires_grad=True)
        x = g.leaf(xv, requires_grad=True)
        y = ad.square(ad.mul(w, x))
        return w, x, y

    g = Graph()
    w, x, y = build(g, 2.0, 3.0)
    (gw,) = backward(y, [w], create_graph=True).values()
    assert gw.item() == pytest.approx(36.0)
    outer = ad.square(gw)
    grads = backward(outer, [x])
    assert grads[x].item() == pytest.approx(1728.0, rel=1e-12)

    # cross-check against finite differences of the analytic first gradient
    def first_grad(xv):
        return (2.0 * 2.0 * xv * xv) ** 2  # (2 W x^2)^2 at W=2

    num = central_difference(lambda v: first_grad(v[0]), np.array([3.0]))
    assert rel_error(grads[x].item(), num[0]) <= 1e-6


def test_double_backward_matches_fd_of_first_gradient(rng):
    """Gradient-of-gradient functionals vs finite differences of the first grad."""
    for trial in range(20):
        n = int(rng.integers(2, 6))
        w0 = rng.standard_normal((n, n))
        x0 = rng.standard_normal(n)

        def grad_norm_sq(xv):
            g = Graph()
            w = g.leaf(w0, requires_grad=True)
            x = g.leaf(xv)
            h = ad.tanh(ad.matmul(ad.reshape(x, (1, n)), w))
            loss = ad.sum_all(ad.square(h))
            gw = backward(loss, [w], create_graph=False)[w]
            return float(np.sum(gw.values ** 2))

        g = Graph()
        w = g.leaf(w0, requires_grad=True)
        x = g.leaf(x0, requires_grad=True)
        h = ad.tanh(ad.matmul(ad.reshape(x, (1, n)), w))
        loss = ad.sum_all(ad.square(h))
        gw = backward(loss, [w], create_graph=True)[w]
        functional = ad.sum_all(ad.square(gw))
        gx = backward(functional, [x])[x]
        num = central_difference(grad_norm_sq, x0)
        assert rel_error(gx.values, num) <= 1e-4


def test_create_graph_false_yields_constants():
    g = Graph()
    x = g.leaf([1.0, 2.0], requires_grad=True)
    y = ad.sum_all(ad.square(x))
    gx = backward(y, [x], create_graph=False)[x]
    assert gx.parents == ()
    assert not gx.requires_grad


def test_determinism_bit_identical():
    def run():
        g = Graph()
        x = g.leaf(np.linspace(-1, 1, 17), requires_grad=True)
        w = g.leaf(np.arange(17.0 * 3).reshape(17, 3) / 7.0, requires_grad=True)
        h = ad.tanh(ad.matmul(ad.reshape(x, (1, 17)), w))
        loss = ad.sum_all(ad.square(h)) + ad.mean_all(ad.abs_(x))
        grads = backward(loss, [x, w], create_graph=True)
        outer = ad.sum_all(ad.square(grads[w]))
        gx = backward(outer, [x])[x]
        return loss.values.tobytes(), grads[x].values.tobytes(), gx.values.tobytes()

    assert run() == run()


def test_fanout_accumulation():
    g = Graph()
    x = g.leaf(2.0, requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))  # x^2 + 3x
    grads = backward(y, [x])
    assert grads[x].item() == pytest.approx(7.0)


def test_division_propagates_nonfinite():
    g = Graph()
    out = ad.div(g.leaf([1.0, 0.0]), g.leaf([0.0, 0.0]))
    assert np.isinf(out.values[0])
    assert np.isnan(out.values[1])


def test_concat_and_slice_gradients(rng):
    a0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal((2, 3))

    def f(flat):
        av, bv = flat[:6].reshape(2, 3), flat[6:].reshape(2, 3)
        g = Graph()
        a = g.leaf(av, requires_grad=True)
        b = g.leaf(bv, requires_grad=True)
        joined = ad.concat([a, b], axis=1)
        return ad.sum_all(ad.square(joined[:, 1:5])).item()

    g = Graph()
    a = g.leaf(a0, requires_grad=True)
    b = g.leaf(b0, requires_grad=True)
    joined = ad.concat([a, b], axis=1)
    val = ad.sum_all(ad.square(joined[:, 1:5]))
    grads = backward(val, [a, b])
    flat0 = np.concatenate([a0.reshape(-1), b0.reshape(-1)])
    num = central_difference(f, flat0)
    got = np.concatenate([grads[a].values.reshape(-1), grads[b].values.reshape(-1)])
    assert rel_error(got, num) <= 1e-6


def test_transpose_gradient(rng):
    x0 = rng.standard_normal((2, 3, 4))

    def f(xv):
        g = Graph()
        x = g.leaf(xv, requires_grad=True)
        t = ad.transpose(x, (2, 0, 1))
        return ad.sum_all(ad.mul(t, t)).item()

    g = Graph()
    x = g.leaf(x0, requires_grad=True)
    t = ad.transpose(x, (2, 0, 1))
    grads = backward(ad.sum_all(ad.mul(t, t)), [x])
    num = central_difference(f, x0.copy())
    assert rel_error(grads[x].values, num) <= 1e-6

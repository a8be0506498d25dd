import math
import zlib

import numpy as np
import pytest

from femlab import ndcore as nd


def fd_grad(f, x, h=1e-4):
    """Central finite differences of scalar f at array x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def gelu_ref(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# --- gelu ------------------------------------------------------------------

def test_gelu_known_values():
    assert nd.gelu(nd.Tensor(0.0)).item() == 0.0
    assert abs(nd.gelu(nd.Tensor(10.0)).item() - 10.0) < 1e-9
    assert abs(nd.gelu(nd.Tensor(1.0)).item() - gelu_ref(1.0)) < 1e-12
    assert abs(nd.gelu(nd.Tensor(1.0)).item() - 0.84134) < 1e-5


def test_gelu_matches_erf_form_on_grid():
    xs = np.linspace(-4, 4, 33)
    got = nd.gelu(nd.Tensor(xs)).data
    np.testing.assert_allclose(got, [gelu_ref(v) for v in xs], rtol=0, atol=1e-13)


def test_gelu_second_derivative_matches_fd():
    x = nd.Tensor(np.array([-1.3, 0.2, 0.9]), requires_grad=True)
    g1 = nd.grad(nd.sum(nd.gelu(x)), [x], create_graph=True)[0]
    g2 = nd.grad(nd.sum(g1), [x])[0].data
    # d2/dx2 gelu = phi(x) * (2 - x^2)
    phi = np.exp(-0.5 * x.data ** 2) / math.sqrt(2 * math.pi)
    np.testing.assert_allclose(g2, phi * (2 - x.data ** 2), atol=1e-12)


# --- first-order gradients of every op ---------------------------------------

UNARY = {
    "exp": nd.exp,
    "square": nd.square,
    "gelu": nd.gelu,
    "softplus": nd.softplus,
    "sigmoid": nd.sigmoid,
    "neg": nd.neg,
    "logsumexp": lambda t: nd.logsumexp(t, axis=1),
    "log_softmax": lambda t: nd.log_softmax(t, axis=1),
    "softmax": lambda t: nd.softmax(t, axis=1),
    "transpose": nd.transpose,
    "reshape": lambda t: nd.reshape(t, (t.size,)),
    "mean0": lambda t: nd.mean(t, axis=0),
    "sum1": lambda t: nd.sum(t, axis=1),
    "sqnorm": lambda t: nd.squared_norm(t, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradient_matches_fd(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op = UNARY[name]
    x0 = rng.uniform(-2, 2, size=(3, 4))
    w = rng.normal(size=op(nd.Tensor(x0)).shape)

    def f(a):
        with nd.no_grad():
            return float(np.sum(op(nd.Tensor(a)).data * w))

    x = nd.Tensor(x0, requires_grad=True)
    g = nd.grad(nd.sum(nd.mul(op(x), w)), [x])[0].data
    assert rel_err(g, fd_grad(f, x0)) <= 1e-5


def test_log_gradient_matches_fd():
    x0 = np.random.default_rng(1).uniform(0.5, 2, size=(2, 3))
    x = nd.Tensor(x0, requires_grad=True)
    g = nd.grad(nd.sum(nd.log(x)), [x])[0].data
    assert rel_err(g, fd_grad(lambda a: np.sum(np.log(a)), x0)) <= 1e-5


@pytest.mark.parametrize("op", [nd.add, nd.sub, nd.mul, nd.div])
def test_binary_broadcast_gradient_matches_fd(op):
    rng = np.random.default_rng(3)
    a0 = rng.uniform(-2, 2, size=(3, 4))
    b0 = rng.uniform(0.5, 2, size=(4,))
    a = nd.Tensor(a0, requires_grad=True)
    b = nd.Tensor(b0, requires_grad=True)
    ga, gb = nd.grad(nd.sum(nd.square(op(a, b))), [a, b])

    def f(x, y):
        return float(np.sum(op(nd.Tensor(x), nd.Tensor(y)).data ** 2))

    assert rel_err(ga.data, fd_grad(lambda x: f(x, b0), a0)) <= 1e-5
    assert rel_err(gb.data, fd_grad(lambda y: f(a0, y), b0)) <= 1e-5


def test_matmul_concat_take_rows_gradients():
    rng = np.random.default_rng(4)
    a0, b0, t0 = rng.normal(size=(3, 2)), rng.normal(size=(2, 5)), rng.normal(size=(4, 3))
    idx = np.array([0, 3, 3, 1])

    def build(a, b, t):
        left = nd.matmul(a, b)                       # (3, 5)
        rows = nd.take_rows(t, idx)                  # (4, 3)
        both = nd.concat([nd.matmul(rows, a), nd.take_rows(left, [0, 1, 2, 2])])  # (4, 7)
        return nd.sum(nd.gelu(both))

    a, b, t = (nd.Tensor(v, requires_grad=True) for v in (a0, b0, t0))
    ga, gb, gt = nd.grad(build(a, b, t), [a, b, t])
    f = lambda x, y, z: float(build(nd.Tensor(x), nd.Tensor(y), nd.Tensor(z)).data)
    assert rel_err(ga.data, fd_grad(lambda x: f(x, b0, t0), a0)) <= 1e-5
    assert rel_err(gb.data, fd_grad(lambda y: f(a0, y, t0), b0)) <= 1e-5
    assert rel_err(gt.data, fd_grad(lambda z: f(a0, b0, z), t0)) <= 1e-5


# --- forward_mlp / input_gradient -------------------------------------------

def test_forward_mlp_zero_weights_gives_bias():
    layers = [(nd.Tensor(np.zeros((3, 4))), nd.Tensor(np.zeros(4))),
              (nd.Tensor(np.zeros((4, 1))), nd.Tensor(np.array([0.25])))]
    assert nd.forward_mlp(layers, nd.Tensor(np.array([1.0, -2.0, 3.0]))).item() == 0.25


def test_forward_mlp_identity_chain():
    layers = [(nd.Tensor([[1.0]]), nd.Tensor([0.0])), (nd.Tensor([[1.0]]), nd.Tensor([0.0]))]
    # one hidden GELU then a linear output
    assert abs(nd.forward_mlp(layers, nd.Tensor([2.0])).item() - gelu_ref(2.0)) < 1e-14
    layers3 = [(nd.Tensor([[1.0]]), nd.Tensor([0.0]))] * 3
    assert abs(nd.forward_mlp(layers3, nd.Tensor([2.0])).item() - gelu_ref(gelu_ref(2.0))) < 1e-14


def test_forward_mlp_is_deterministic():
    rng = np.random.default_rng(0)
    layers = [(nd.Tensor(rng.normal(size=(5, 16))), nd.Tensor(rng.normal(size=16))),
              (nd.Tensor(rng.normal(size=(16, 1))), nd.Tensor(rng.normal(size=1)))]
    x = nd.Tensor(rng.normal(size=(7, 5)))
    a = nd.forward_mlp(layers, x).data
    b = nd.forward_mlp(layers, x).data
    assert np.array_equal(a, b)


def test_input_gradient_examples():
    x = nd.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    np.testing.assert_array_equal(nd.input_gradient(nd.sum(nd.square(x)), x).data, [2.0, 4.0])
    c = nd.add(nd.mul(nd.sum(x), 0.0), 3.0)
    np.testing.assert_array_equal(nd.input_gradient(c, x).data, [0.0, 0.0])


def _random_mlp(rng, sizes):
    return [(nd.Tensor(rng.normal(size=(a, b)) / math.sqrt(a), requires_grad=True),
             nd.Tensor(rng.normal(size=b) * 0.1, requires_grad=True)) for a, b in zip(sizes[:-1], sizes[1:])]


def test_input_gradient_of_mlp_matches_fd():
    rng = np.random.default_rng(5)
    layers = _random_mlp(rng, [4, 16, 16, 1])
    x0 = rng.uniform(-2, 2, size=4)
    x = nd.Tensor(x0, requires_grad=True)
    g = nd.input_gradient(nd.forward_mlp(layers, x), x, create_graph=False).data

    def f(a):
        with nd.no_grad():
            return nd.forward_mlp(layers, nd.Tensor(a)).item()

    assert rel_err(g, fd_grad(f, x0)) <= 1e-5


# --- second order -----------------------------------------------------------

def test_second_order_hand_example():
    theta = nd.Tensor(1.0, requires_grad=True)
    x = nd.Tensor(1.0, requires_grad=True)
    E = nd.mul(theta, nd.square(x))
    dEdx = nd.input_gradient(E, x)
    loss = nd.square(nd.sub(dEdx, 0.0))
    (g,) = nd.second_order_param_grad(loss, [theta])
    assert float(g) == pytest.approx(8.0, abs=1e-12)


def test_second_order_reduces_to_first_order():
    rng = np.random.default_rng(6)
    layers = _random_mlp(rng, [3, 8, 1])
    params = [p for l in layers for p in l]
    x = nd.Tensor(rng.normal(size=(5, 3)))
    loss = nd.sum(nd.square(nd.forward_mlp(layers, x)))
    a = nd.second_order_param_grad(loss, params)
    b = [g.data for g in nd.grad(loss, params)]
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_third_derivative_through_gelu_is_refused():
    x = nd.Tensor(np.array([0.3]), requires_grad=True)
    g1 = nd.grad(nd.sum(nd.gelu(x)), [x], create_graph=True)[0]
    g2 = nd.grad(nd.sum(g1), [x], create_graph=True)[0]
    with pytest.raises(nd.GraphError):
        nd.grad(nd.sum(g2), [x])


def test_non_scalar_grad_requires_grad_output():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nd.GraphError):
        nd.grad(nd.square(x), [x])


def test_no_grad_blocks_graph():
    x = nd.Tensor(np.ones(3), requires_grad=True)
    with nd.no_grad():
        y = nd.sum(nd.square(x))
    assert not y.requires_grad


def test_nonfinite_log_raises():
    with pytest.raises(nd.NonFiniteError):
        nd.log(nd.Tensor(np.array([-1.0])))

import numpy as np
import pytest
from conftest import fd_hessian, rel_err
from gradcheck import PRIMITIVES, check_primitive

from efcn import nn
from efcn import tensor as T
from efcn.tensor import NonFiniteError, Tensor


def half_sq(theta, batch=None):
    return (theta * theta).sum() * 0.5


def quad(diag):
    c = np.asarray(diag, dtype=np.float64)
    return lambda theta, batch=None: (theta * theta * c).sum() * 0.5


def two_layer_loss(theta, batch):
    """8-parameter net: sum((W2 relu(W1 x))^2), no biases."""
    x = batch
    w1 = T.segment(theta, 0, 4, (2, 2))
    w2 = T.segment(theta, 4, 4, (2, 2))
    zero = Tensor(np.zeros(2))
    h = T.relu(T.dense(Tensor(x), w1, zero))
    out = T.dense(h, w2, zero)
    return (out * out).sum()


# -- grad -------------------------------------------------------------------

def test_grad_half_squared_norm():
    g = T.grad(half_sq, np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [1.0, -2.0, 3.0])


def test_grad_of_constant_is_zero():
    g = T.grad(lambda th, b: (th * 0.0).sum() + 5.0, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_grad_unused_leaf_is_zero():
    g = T.grad(lambda th, b: Tensor(np.float64(3.0)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_grad_two_layer_net_matches_finite_differences(rng):
    x = rng.standard_normal((5, 2))
    for _ in range(5):
        theta = rng.standard_normal(8)
        assert rel_err(T.grad(two_layer_loss, theta, x), T.finite_diff_grad(two_layer_loss, theta, x)) < 1e-4


def test_grad_non_finite_loss_raises():
    with pytest.raises(NonFiniteError):
        T.grad(lambda th, b: (th * np.inf).sum(), np.array([1.0]))


def test_nonfinite_loss_reports_layer():
    spec = nn.ModelSpec((2,), (nn.Dense(2, 2), nn.ReLU(), nn.Dense(2, 2)), 2)
    theta = nn.init_params(spec, 0, dtype=np.float64)
    theta.data[0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        T.grad(nn.loss_fn(spec), theta, (np.ones((1, 2)), np.array([0])))
    assert info.value.layer == 0


def test_grad_accumulates_over_reused_nodes():
    # f = sum(x * x + x) reuses x three times
    g = T.grad(lambda th, b: (th * th + th).sum(), np.array([2.0, -1.0]))
    np.testing.assert_allclose(g, [5.0, -1.0])


# -- finite differences -----------------------------------------------------

def test_fd_quadratic_exact():
    assert T.finite_diff_grad(half_sq, np.array([2.0]), eps=1e-3)[0] == pytest.approx(2.0, abs=1e-6)


def test_fd_cubic_picks_up_eps_squared():
    # ((1+e)^3 - (1-e)^3) / 2e = 3 + e^2
    g = T.finite_diff_grad(lambda th, b: (th ** 3).sum(), np.array([1.0]), eps=1e-3)
    assert g[0] == pytest.approx(3.000001, abs=1e-9)


def test_fd_dead_coordinate():
    g = T.finite_diff_grad(lambda th, b: (T.segment(th, 0, 1, (1,)) ** 2).sum(), np.array([1.0, 7.0]))
    assert g[1] == 0.0


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.finite_diff_grad(half_sq, np.array([1.0]), eps=0)


# -- hvp --------------------------------------------------------------------

@pytest.mark.parametrize("v,expected", [((1.0, 0.0), (3.0, 0.0)), ((0.0, 1.0), (0.0, 1.0))])
def test_hvp_quadratic(v, expected):
    hv = T.hvp(quad([3.0, 1.0]), np.array([0.3, -0.7]), None, np.array(v))
    np.testing.assert_allclose(hv, expected, atol=1e-6)


def test_hvp_restores_direction_norm():
    hv = T.hvp(quad([3.0, 1.0]), np.array([0.3, -0.7]), None, np.array([5.0, 0.0]))
    np.testing.assert_allclose(hv, [15.0, 0.0], atol=1e-5)


def test_hvp_zero_direction():
    with pytest.raises(ValueError):
        T.hvp(half_sq, np.array([1.0]), None, np.array([0.0]))


def _net50(rng):
    spec = nn.ModelSpec((3,), (nn.Dense(3, 5), nn.ReLU(), nn.Dense(5, 5)), 5)
    assert spec.num_params == 50
    x = rng.standard_normal((12, 3))
    y = rng.integers(0, 5, 12)
    # keep every hidden pre-activation at least 1e-2 away from the ReLU kink
    while True:
        theta = nn.init_params(spec, int(rng.integers(1 << 30)), dtype=np.float64)
        w = theta.view("0.weight")
        pre = x @ w.T + theta.view("0.bias")
        if np.abs(pre).min() > 1e-2:
            return spec, theta, (x, y)


def test_hvp_columns_match_dense_fd_hessian(rng):
    spec, theta, batch = _net50(rng)
    fn = nn.loss_fn(spec)
    H_oracle = fd_hessian(fn, theta, batch)
    H = np.stack([T.hvp(fn, theta.data, batch, e) for e in np.eye(50)], axis=1)
    assert rel_err(H, H_oracle) < 1e-2


@pytest.mark.parametrize("alpha", [2.0, -1.0])
def test_hvp_linear_in_direction(rng, alpha):
    spec, theta, batch = _net50(rng)
    fn = nn.loss_fn(spec)
    v = rng.standard_normal(50)
    base = alpha * T.hvp(fn, theta.data, batch, v)
    scaled = T.hvp(fn, theta.data, batch, alpha * v)
    assert np.linalg.norm(scaled - base) <= 1e-3 * np.linalg.norm(base)


def test_determinism_bitwise(mini_cnn, rng):
    theta = nn.init_params(mini_cnn, 3)
    x = rng.standard_normal((7, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 10, 7)
    g1 = T.grad(nn.loss_fn(mini_cnn), theta, (x, y))
    g2 = T.grad(nn.loss_fn(mini_cnn), theta, (x, y))
    assert g1.data.tobytes() == g2.data.tobytes()


# -- primitive gradient checks (the full 100-point sweep lives in the acceptance suite) ---



@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    worst = check_primitive(name, points=10, seed=7)
    assert worst < 1e-4


def test_maxpool_ties_go_to_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = T.maxpool2d(x)
    out.backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_relu_derivative_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    T.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_tape_visits_each_node_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * 2.0
    z = (y + y).sum()
    tape = T.GradTape.collect(z)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    assert tape.nodes[0] is z and tape.nodes[-1] is x

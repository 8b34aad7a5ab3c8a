import numpy as np
import pytest

from efcn import embed, nn


def rel_err(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def fd_hessian(fn, theta, batch, h=1e-4, eps=1e-5):
    """Dense Hessian from finite differences of finite-difference gradients."""
    from efcn.tensor import finite_diff_grad

    theta = np.asarray(getattr(theta, "data", theta), dtype=np.float64)
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = h
        up = finite_diff_grad(fn, theta + step, batch, eps)
        dn = finite_diff_grad(fn, theta - step, batch, eps)
        H[:, i] = (up - dn) / (2 * h)
    return 0.5 * (H + H.T)


@pytest.fixture(scope="session")
def mini_cnn():
    """VanillaCNN-mini: 8 channels on 3x16x16 inputs, 10 classes."""
    return nn.build_vanilla_cnn(8, (3, 16, 16), 10)


@pytest.fixture(scope="session")
def mini_map(mini_cnn):
    return embed.build_map(mini_cnn)


@pytest.fixture(scope="session")
def tiny_cnn():
    return nn.build_vanilla_cnn(3, (2, 8, 8), 4)


@pytest.fixture(scope="session")
def tiny_map(tiny_cnn):
    return embed.build_map(tiny_cnn)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

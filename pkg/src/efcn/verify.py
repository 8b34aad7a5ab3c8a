"""Quick self-checks run by ``efcn verify``.

Each check compares two independent routes to the same quantity on small
random instances and reports the worst discrepancy against its limit.
"""
from __future__ import annotations

import numpy as np

from . import embed as E
from . import nn
from . import tensor as T


def mini_cnn(channels=4, side=8, in_channels=2, classes=3):
    return nn.build_vanilla_cnn(channels, (in_channels, side, side), classes)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_equivalence(seed=0, trials=3, samples=20):
    worst = 0.0
    rng = np.random.default_rng(seed)
    spec = nn.build_vanilla_cnn(8, (3, 16, 16), 10)
    emap = E.build_map(spec)
    for t in range(trials):
        theta = nn.init_params(spec, seed + t)
        x = rng.standard_normal((samples, 3, 16, 16)).astype(np.float32)
        a = nn.forward(spec, theta, x).data
        b = nn.forward(emap.fcn_spec, emap.embed(theta), x).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def check_pullback(seed=0, trials=3):
    worst = 0.0
    rng = np.random.default_rng(seed)
    spec = mini_cnn()
    emap = E.build_map(spec)
    for t in range(trials):
        theta = nn.init_params(spec, seed + t, dtype=np.float64)
        x = rng.standard_normal((6, *spec.input_shape))
        y = rng.integers(0, spec.classes, 6)
        g_cnn = T.grad(nn.loss_fn(spec), theta, (x, y))
        g_fcn = T.grad(nn.loss_fn(emap.fcn_spec), emap.embed(theta), (x, y))
        worst = max(worst, rel_err(E.pullback(emap, g_fcn).data, g_cnn.data))
    return worst


def check_gradient(seed=0):
    rng = np.random.default_rng(seed)
    spec = nn.build_vanilla_cnn(2, (1, 8, 8), 3)
    theta = nn.init_params(spec, seed, dtype=np.float64)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 3, 4)
    fn = nn.loss_fn(spec)
    return rel_err(T.grad(fn, theta, (x, y)).data, T.finite_diff_grad(fn, theta, (x, y), 1e-6).data)


def check_hvp(seed=0):
    rng = np.random.default_rng(seed)
    spec = nn.ModelSpec((6,), (nn.Dense(6, 4), nn.ReLU(), nn.Dense(4, 3)), 3)
    theta = nn.init_params(spec, seed, dtype=np.float64)
    x = rng.standard_normal((10, 6))
    y = rng.integers(0, 3, 10)
    fn = nn.loss_fn(spec)
    n = len(theta)
    h_fd = np.empty((n, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = 1e-5
        up = T.finite_diff_grad(fn, theta.data + step, (x, y), 1e-5)
        dn = T.finite_diff_grad(fn, theta.data - step, (x, y), 1e-5)
        h_fd[:, i] = (up - dn) / 2e-5
    h_fd = 0.5 * (h_fd + h_fd.T)
    h_hvp = np.stack([T.hvp(fn, theta.data, (x, y), e) for e in np.eye(n)], axis=1)
    return rel_err(h_hvp, h_fd)


def run_suite(seed=0):
    checks = [
        ("equivalence_max_abs_logit_diff", check_equivalence, 1e-5),
        ("pullback_rel_err", check_pullback, 1e-4),
        ("autodiff_vs_finite_diff_rel_err", check_gradient, 1e-4),
        ("hvp_vs_dense_hessian_rel_err", check_hvp, 1e-2),
    ]
    out = []
    for name, fn, limit in checks:
        value = fn(seed)
        out.append({"name": name, "value": value, "limit": limit, "passed": bool(value <= limit)})
    return out

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efcn import interp, nn, probes
from efcn.data import Dataset
from efcn.interp import Path, StringConfig


def _toy(rng, n=40):
    spec = nn.ModelSpec((4,), (nn.Dense(4, 6), nn.ReLU(), nn.Dense(6, 3)), 3)
    ds = Dataset(rng.standard_normal((n, 4)), rng.integers(0, 3, n), classes=3)
    return spec, ds


# -- linear path ------------------------------------------------------------

def test_linear_scalar_path():
    p = interp.linear_path(np.array([0.0]), np.array([1.0]), n=5)
    np.testing.assert_array_equal(p.points[:, 0], [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_array_equal(p.alphas, [0, 0.25, 0.5, 0.75, 1])


def test_linear_two_points_are_endpoints(rng):
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    p = interp.linear_path(a, b, n=2)
    assert p.points[0].tobytes() == a.tobytes() and p.points[1].tobytes() == b.tobytes()


def test_linear_degenerate(rng):
    a = rng.standard_normal(5).astype(np.float32)
    p = interp.linear_path(a, a, n=3)
    np.testing.assert_array_equal(p.points[1], a)


def test_linear_errors():
    with pytest.raises(ValueError):
        interp.linear_path(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        interp.linear_path(np.zeros(3), np.zeros(3), n=1)


# -- elastic ----------------------------------------------------------------

def test_elastic_k_over_eight():
    p = interp.linear_path(np.array([0.0]), np.array([1.0]), n=5)
    for k in (1.0, 2.5, 8.0):
        assert interp.elastic_loss(p, k) == pytest.approx(k / 8, abs=1e-12)


def test_elastic_two_points(rng):
    a, b = rng.standard_normal(7), rng.standard_normal(7)
    p = interp.linear_path(a, b, n=2)
    assert interp.elastic_loss(p, 3.0) == pytest.approx(1.5 * np.sum((b - a) ** 2), rel=1e-12)
    assert interp.elastic_loss(p, 0.0) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), shift=st.floats(-10, 10), scale=st.floats(0.1, 10))
def test_elastic_translation_and_scaling(seed, shift, scale):
    pts = np.random.default_rng(seed).standard_normal((5, 3))
    base = interp.elastic_loss(Path(pts, np.linspace(0, 1, 5)), 1.0)
    moved = interp.elastic_loss(Path(pts + shift, np.linspace(0, 1, 5)), 1.0)
    c = pts.mean(axis=0)
    scaled = interp.elastic_loss(Path(c + scale * (pts - c), np.linspace(0, 1, 5)), 1.0)
    assert moved == pytest.approx(base, rel=1e-9)
    assert scaled == pytest.approx(scale ** 2 * base, rel=1e-9)


def test_elastic_grad_matches_numeric(rng):
    pts = rng.standard_normal((6, 4))
    g = interp.elastic_grad(pts, 2.0)
    eps = 1e-6
    for i in range(1, 5):
        for j in range(4):
            up, dn = pts.copy(), pts.copy()
            up[i, j] += eps
            dn[i, j] -= eps
            num = (interp.elastic_loss(Path(up, np.zeros(6)), 2.0)
                   - interp.elastic_loss(Path(dn, np.zeros(6)), 2.0)) / (2 * eps)
            assert g[i - 1, j] == pytest.approx(num, abs=1e-6)


# -- string relaxation ------------------------------------------------------

def test_zero_steps_is_identity(rng):
    p = Path(rng.standard_normal((4, 3)), np.linspace(0, 1, 4))
    out = interp.string_relax(p, StringConfig(steps=0))
    assert out.points.tobytes() == p.points.tobytes()


def test_pure_elastic_reaches_equal_spacing(rng):
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    pts = np.vstack([a, rng.standard_normal((5, 5)) * 3, b])
    p = Path(pts, np.linspace(0, 1, 7))
    out = interp.string_relax(p, StringConfig(stiffness=1.0, steps=3000, lr=0.4, use_train_loss=False))
    resid = np.linalg.norm(interp.elastic_grad(out.points, 1.0), axis=1).max()
    assert resid <= 1e-6
    np.testing.assert_allclose(out.points, interp.linear_path(a, b, 7).points, atol=1e-6)


def test_endpoints_bitwise_frozen(rng):
    spec, ds = _toy(rng)
    a = nn.init_params(spec, 0, dtype=np.float64)
    b = nn.init_params(spec, 1, dtype=np.float64)
    p = interp.linear_path(a, b, n=5)
    out = interp.string_relax(p, StringConfig(stiffness=0.5, steps=10, lr=0.05, batch_size=16), spec, ds)
    assert out.points[0].tobytes() == a.data.tobytes()
    assert out.points[-1].tobytes() == b.data.tobytes()
    assert not np.array_equal(out.points[2], p.points[2])
    # the input path is left alone
    assert p.points[2].tobytes() == interp.linear_path(a, b, n=5).points[2].tobytes()


def test_high_stiffness_recovers_linear(rng):
    spec, ds = _toy(rng)
    a = nn.init_params(spec, 0, dtype=np.float64)
    b = nn.init_params(spec, 1, dtype=np.float64)
    lin = interp.linear_path(a, b, n=6)
    seg = np.mean(np.linalg.norm(np.diff(lin.points, axis=0), axis=1))
    k = 1e4 / seg ** 2
    cfg = StringConfig(stiffness=k, steps=200, lr=0.2 / k, batch_size=16)
    out = interp.string_relax(lin, cfg, spec, ds)
    rel = np.linalg.norm(out.points - lin.points) / np.linalg.norm(lin.points)
    assert rel <= 1e-2


def test_relax_deterministic(rng):
    spec, ds = _toy(rng)
    lin = interp.linear_path(nn.init_params(spec, 0, dtype=np.float64),
                             nn.init_params(spec, 1, dtype=np.float64), n=4)
    cfg = StringConfig(stiffness=1.0, steps=5, lr=0.05, batch_size=8, seed=3)
    a = interp.string_relax(lin, cfg, spec, ds)
    b = interp.string_relax(lin, cfg, spec, ds)
    assert a.points.tobytes() == b.points.tobytes()


def test_divergence_reports_step(rng):
    p = Path(rng.standard_normal((5, 3)), np.linspace(0, 1, 5))
    with pytest.raises(interp.StringDivergence) as info:
        interp.string_relax(p, StringConfig(stiffness=1e200, steps=50, lr=1.0, use_train_loss=False))
    assert info.value.step < 50


def test_string_config_validation():
    with pytest.raises(ValueError):
        StringConfig(stiffness=-1)
    with pytest.raises(ValueError):
        StringConfig(steps=-1)


def test_path_validation():
    with pytest.raises(ValueError):
        Path(np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        Path(np.zeros((3, 3)), np.zeros(2))


# -- output space -----------------------------------------------------------

def test_output_interpolation_endpoints_and_simplex(rng):
    spec, ds = _toy(rng)
    ta, tb = nn.init_params(spec, 0), nn.init_params(spec, 1)
    x = ds.images[:10]
    pa = interp.softmax(nn.forward(spec, ta, x).data)
    pb = interp.softmax(nn.forward(spec, tb, x).data)
    assert interp.output_interpolation(spec, ta, spec, tb, 0.0, x).tobytes() == pa.tobytes()
    assert interp.output_interpolation(spec, ta, spec, tb, 1.0, x).tobytes() == pb.tobytes()
    for alpha in np.linspace(0, 1, 7):
        p = interp.output_interpolation(spec, ta, spec, tb, alpha, x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_output_interpolation_errors(rng):
    spec, ds = _toy(rng)
    other = nn.ModelSpec((4,), (nn.Dense(4, 2),), 2)
    theta = nn.init_params(spec, 0)
    with pytest.raises(ValueError):
        interp.output_interpolation(spec, theta, other, nn.init_params(other, 0), 0.5, ds.images)
    with pytest.raises(ValueError):
        interp.output_interpolation(spec, theta, spec, theta, 1.5, ds.images)


def test_profile_endpoints_match_evaluate(rng):
    spec, ds = _toy(rng)
    a, b = nn.init_params(spec, 0), nn.init_params(spec, 1)
    rows = interp.path_profile(interp.linear_path(a, b, 3), spec, ds, ds, "linear")
    assert [r[0] for r in rows] == ["linear"] * 3
    loss_a, acc_a = probes.evaluate(spec, a, ds)
    assert rows[0][2] == loss_a and rows[0][3] == acc_a
    loss_b, acc_b = probes.evaluate(spec, b, ds)
    assert rows[-1][2] == loss_b and rows[-1][3] == acc_b


def test_output_profile_endpoints(rng):
    spec, ds = _toy(rng)
    a, b = nn.init_params(spec, 0), nn.init_params(spec, 1)
    rows = interp.output_profile(spec, a, spec, b, [0.0, 0.5, 1.0], ds, ds)
    assert rows[0][3] == probes.accuracy(spec, a, ds)
    assert rows[-1][3] == probes.accuracy(spec, b, ds)
    assert rows[0][2] == pytest.approx(probes.evaluate(spec, a, ds)[0], rel=1e-5)

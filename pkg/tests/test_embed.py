import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efcn import embed, nn
from efcn import tensor as T
from efcn.nn import Conv, ConvSpec, Dense, Flatten, ReLU


def dense_by_probing(w, in_shape, s, p):
    """Dense matrix of a bias-free convolution, one column per basis input.

    Built by brute force from loops so it shares no index arithmetic with
    the embedding code.
    """
    c_in, h, wd = in_shape
    c_out, _, k, _ = w.shape
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    W = np.zeros((c_out * ho * wo, c_in * h * wd))
    col = 0
    for c in range(c_in):
        for i in range(h):
            for j in range(wd):
                x = np.zeros((c_in, h + 2 * p, wd + 2 * p))
                x[c, i + p, j + p] = 1.0
                y = np.zeros((c_out, ho, wo))
                for o in range(c_out):
                    for a in range(ho):
                        for b in range(wo):
                            y[o, a, b] = np.sum(x[:, a * s:a * s + k, b * s:b * s + k] * w[o])
                W[:, col] = y.ravel()
                col += 1
    return W


def _single_conv(c_in, c_out, side, k, s, p):
    ho = (side + 2 * p - k) // s + 1
    spec = nn.ModelSpec((c_in, side, side),
                        (Conv(ConvSpec(c_in, c_out, k, s, p)), Flatten(), Dense(c_out * ho * ho, 2)), 2)
    return spec


# -- structure --------------------------------------------------------------

def test_appendix_example_matrix():
    # 1 channel, 4x4 input, 3x3 filter with weights 1..9, no padding
    spec = _single_conv(1, 1, 4, 3, 1, 0)
    theta = nn.ParamVector.zeros(spec, np.float64)
    theta.view("0.weight")[:] = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    _, th, emap = embed.embed(spec, theta)
    W = th.view("0.weight")
    assert W.shape == (4, 16)
    expected_row0 = [1, 2, 3, 0, 4, 5, 6, 0, 7, 8, 9, 0, 0, 0, 0, 0]
    np.testing.assert_array_equal(W[0], expected_row0)
    assert np.count_nonzero(W) == 36
    np.testing.assert_array_equal(emap.tie_counts()[:9], 4)


def test_padded_example_taps():
    spec = _single_conv(1, 1, 3, 3, 1, 1)
    emap = embed.build_map(spec)
    # 2 + 3 + 2 in-bounds taps per axis
    assert emap.lifts[0].flat.size == 49
    assert (emap.lifts[0].rows.max(), emap.lifts[0].cols.max()) == (8, 8)


@settings(max_examples=25, deadline=None)
@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), side=st.integers(3, 7),
       k=st.sampled_from([1, 3]), s=st.integers(1, 2), p=st.integers(0, 1),
       seed=st.integers(0, 2 ** 16))
def test_weight_matrix_matches_probed_conv(c_in, c_out, side, k, s, p, seed):
    if (side + 2 * p - k) % s:
        return
    spec = _single_conv(c_in, c_out, side, k, s, p)
    theta = nn.init_params(spec, seed, dtype=np.float64)
    _, th, _ = embed.embed(spec, theta)
    W_oracle = dense_by_probing(theta.view("0.weight"), (c_in, side, side), s, p)
    np.testing.assert_array_equal(th.view("0.weight"), W_oracle)


def test_mini_dimensions(mini_cnn, mini_map):
    assert mini_cnn.num_params == 1722
    assert mini_map.fcn_spec.num_params == 1_854_410


def test_no_collisions_in_taps(mini_map):
    for lift in mini_map.lifts:
        assert np.unique(lift.flat).size == lift.flat.size


def test_tie_counts_interior_filters(mini_cnn, mini_map):
    counts = mini_map.tie_counts()
    seg = {s.name: s for s in mini_cnn.segments()}["0.weight"]
    w = counts[seg.offset:seg.offset + seg.length].reshape(8, 3, 3, 3)
    # centre tap of a 3x3 pad-1 filter is in bounds at every 16x16 position
    assert np.all(w[:, :, 1, 1] == 256)
    assert np.all(w[:, :, 0, 0] == 225)
    bias = {s.name: s for s in mini_cnn.segments()}["0.bias"]
    assert np.all(counts[bias.offset:bias.offset + bias.length] == 256)


# -- functional equivalence -------------------------------------------------

def test_equivalence_mini(mini_cnn, mini_map, rng):
    x = rng.standard_normal((20, 3, 16, 16)).astype(np.float32)
    for seed in range(3):
        theta = nn.init_params(mini_cnn, seed)
        theta_e = mini_map.embed(theta)
        a = nn.forward(mini_cnn, theta, x).data
        b = nn.forward(mini_map.fcn_spec, theta_e, x).data
        assert np.abs(a - b).max() <= 1e-5


def test_equivalence_with_large_weights(tiny_cnn, tiny_map, rng):
    theta = nn.init_params(tiny_cnn, 0, dtype=np.float64)
    theta = theta.with_data(theta.data * 50)
    x = rng.standard_normal((4, 2, 8, 8))
    a = nn.forward(tiny_cnn, theta, x).data
    b = nn.forward(tiny_map.fcn_spec, tiny_map.embed(theta), x).data
    assert np.abs(a - b).max() <= 1e-8 * np.abs(a).max()


def test_embed_is_linear(tiny_cnn, tiny_map, rng):
    a = nn.init_params(tiny_cnn, 1, dtype=np.float64)
    b = nn.init_params(tiny_cnn, 2, dtype=np.float64)
    lhs = tiny_map.embed(a.with_data(2 * a.data - 3 * b.data)).data
    rhs = 2 * tiny_map.embed(a).data - 3 * tiny_map.embed(b).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_embed_wrong_length(tiny_cnn):
    with pytest.raises(ValueError):
        embed.embed(tiny_cnn, np.zeros(tiny_cnn.num_params + 1))


def test_memory_budget_refuses_full_size_net():
    full = nn.build_vanilla_cnn(64, (3, 32, 32), 10)
    with pytest.raises(embed.MemoryBudgetError) as info:
        embed.build_map(full, max_bytes=1 << 30)
    assert info.value.required > 1 << 30


def test_dense_only_model_embeds_as_copy():
    spec = nn.ModelSpec((4,), (Dense(4, 3), ReLU(), Dense(3, 2)), 2)
    theta = nn.init_params(spec, 0)
    _, th, emap = embed.embed(spec, theta)
    np.testing.assert_array_equal(th.data, theta.data)
    assert emap.mask.all()


# -- masks and delta --------------------------------------------------------

def test_delta_zero_at_embedding(mini_cnn, mini_map):
    for seed in range(3):
        assert embed.delta(mini_map.embed(nn.init_params(mini_cnn, seed)), mini_map.mask) == 0.0


def test_delta_one_when_only_offlocal(tiny_map, rng):
    theta = nn.ParamVector(rng.standard_normal(tiny_map.fcn_spec.num_params), tiny_map.fcn_spec.segments())
    off = embed.mask_apply(theta, tiny_map.mask, "off_local")
    assert embed.delta(off, tiny_map.mask) == pytest.approx(1.0, abs=1e-15)


def test_delta_all_zero_raises(tiny_map):
    with pytest.raises(ZeroDivisionError):
        embed.delta(nn.ParamVector.zeros(tiny_map.fcn_spec), tiny_map.mask)


def test_delta_ignores_biases(tiny_map, rng):
    theta = nn.ParamVector(rng.standard_normal(tiny_map.fcn_spec.num_params), tiny_map.fcn_spec.segments())
    base = embed.delta(theta, tiny_map.mask)
    bumped = theta.data.copy()
    bumped[~embed.weight_mask(theta)] *= 1000
    assert embed.delta(theta.with_data(bumped), tiny_map.mask) == base


def test_mask_parts_sum_to_whole_on_weights(tiny_map, rng):
    theta = nn.ParamVector(rng.standard_normal(tiny_map.fcn_spec.num_params), tiny_map.fcn_spec.segments())
    loc = embed.mask_apply(theta, tiny_map.mask, "local").data
    off = embed.mask_apply(theta, tiny_map.mask, "off_local").data
    wm = embed.weight_mask(theta)
    np.testing.assert_array_equal((loc + off)[wm], theta.data[wm])
    np.testing.assert_array_equal(loc[~wm], theta.data[~wm])
    np.testing.assert_array_equal(off[~wm], theta.data[~wm])


def test_mask_apply_validates(tiny_map):
    theta = nn.ParamVector.zeros(tiny_map.fcn_spec)
    with pytest.raises(ValueError):
        embed.mask_apply(theta, tiny_map.mask, "both")
    with pytest.raises(ValueError):
        embed.mask_apply(theta, tiny_map.mask[:-1], "local")


def test_local_counts_match_materialised_mask(mini_cnn, mini_map):
    counts = embed.local_counts(mini_cnn)
    wm = embed.weight_mask(mini_map.fcn_spec)
    assert sum(c[0] for c in counts) == int((mini_map.mask & wm).sum())
    assert sum(c[1] for c in counts) == int(wm.sum())


def test_iid_expectation_matches_sample(mini_cnn, mini_map):
    rng = np.random.default_rng(0)
    theta = nn.ParamVector(rng.standard_normal(mini_map.fcn_spec.num_params), mini_map.fcn_spec.segments())
    got = embed.delta(theta, mini_map.mask)
    assert got == pytest.approx(embed.expected_delta_iid(mini_cnn), rel=0.02)


def test_fanin_expectation_matches_dense_init(mini_cnn, mini_map):
    theta = nn.init_params(mini_map.fcn_spec, 0)
    assert embed.delta(theta, mini_map.mask) == pytest.approx(embed.expected_delta_fanin(mini_cnn), rel=0.02)


def test_full_size_expectation_analytic():
    full = nn.build_vanilla_cnn(64, (3, 32, 32), 10)
    assert embed.expected_delta_iid(full) == pytest.approx(0.97, rel=0.02)
    counts = embed.local_counts(full)
    m_w = sum(c[1] for c in counts)
    # conv layers map 3x32x32->64x32x32, 64x16x16->same, 64x8x8->same
    assert m_w == 3072 * 65536 + 16384 * 16384 + 4096 * 4096 + 1024 * 10


# -- pullback ---------------------------------------------------------------

def test_pullback_is_adjoint(tiny_cnn, tiny_map, rng):
    u = rng.standard_normal(tiny_cnn.num_params)
    g = rng.standard_normal(tiny_map.fcn_spec.num_params)
    lhs = float(np.dot(tiny_map.embed(u).data, g))
    rhs = float(np.dot(u, embed.pullback(tiny_map, g).data))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_pullback_of_ones_counts_ties(tiny_map):
    g = np.ones(tiny_map.fcn_spec.num_params)
    np.testing.assert_array_equal(embed.pullback(tiny_map, g).data, tiny_map.tie_counts())


def test_pullback_matches_cnn_gradient(tiny_cnn, tiny_map, rng):
    theta = nn.init_params(tiny_cnn, 4, dtype=np.float64)
    batch = (rng.standard_normal((6, 2, 8, 8)), rng.integers(0, 4, 6))
    g_cnn = T.grad(nn.loss_fn(tiny_cnn), theta, batch)
    g_fcn = T.grad(nn.loss_fn(tiny_map.fcn_spec), tiny_map.embed(theta), batch)
    pulled = embed.pullback(tiny_map, g_fcn)
    assert np.linalg.norm(pulled.data - g_cnn.data) <= 1e-10 * np.linalg.norm(g_cnn.data)


def test_pullback_wrong_shape(tiny_map):
    with pytest.raises(ValueError):
        embed.pullback(tiny_map, np.zeros(3))


def test_expected_delta_trivial_cases():
    spec = nn.ModelSpec((4,), (Dense(4, 2),), 2)
    assert embed.expected_delta_iid(spec) == 0.0
    conv = _single_conv(1, 1, 4, 3, 1, 0)
    # conv layer: 36 local of 64, head 8 local of 8
    assert embed.expected_delta_iid(conv) == pytest.approx(math.sqrt(28 / 72))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidformer import diffcore as dc
from fluidformer.attention import (AttentionLayer, RopeConfig, RopeConfigError, apply_rope,
                                   attention_naive, attention_tiled, mha_forward, rope_angles,
                                   rope_matrix)


def oracle_attention(q, k, v, pos, cfg):
    """Term-by-term sum with explicit rotation matrices."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        ri = rope_matrix(pos[i], cfg)
        s = np.array([(ri @ q[i]) @ (rope_matrix(pos[j], cfg) @ k[j]) / np.sqrt(d) for j in range(n)])
        w = np.exp(s - s.max())
        out[i] = (w / w.sum()) @ v
    return out


def test_rope_angles():
    assert rope_angles(0, 4) == 1.0
    assert rope_angles(1, 4) == pytest.approx(0.01)
    th = rope_angles(np.arange(8), 16)
    assert np.all(np.diff(th) < 0)
    with pytest.raises(ValueError):
        rope_angles(2, 4)


def test_config_requires_multiple_of_six():
    with pytest.raises(RopeConfigError):
        RopeConfig(8)
    with pytest.raises(RopeConfigError):
        apply_rope(np.zeros((1, 12)), np.zeros((1, 3)), RopeConfig(6))


def test_rope_identity_at_origin(rng):
    v = rng.normal(size=(4, 12))
    assert np.array_equal(apply_rope(v, np.zeros((4, 3)), RopeConfig(12)), v)


def test_rope_quarter_turn():
    cfg = RopeConfig(6)
    v = np.zeros((1, 6))
    v[0, 0] = 1.0
    out = apply_rope(v, np.array([[np.pi / 2, 0, 0]]), cfg)
    np.testing.assert_allclose(out[0, :2], [0, 1], atol=1e-15)
    # position_scale converts metres to lattice units first
    cfg2 = RopeConfig(6, position_scale=20.0)
    out2 = apply_rope(v, np.array([[np.pi / 40, 0, 0]]), cfg2)
    np.testing.assert_allclose(out2, out, atol=1e-15)


def test_rope_channel_thirds_follow_axes():
    cfg = RopeConfig(6)
    v = np.ones((1, 6))
    out = apply_rope(v, np.array([[0, 0.3, 0]]), cfg)
    assert np.array_equal(out[0, :2], [1, 1]) and np.array_equal(out[0, 4:], [1, 1])
    assert not np.allclose(out[0, 2:4], 1)


def test_rope_matrix_matches_apply(rng):
    cfg = RopeConfig(18, position_scale=20.0)
    x = rng.normal(size=3)
    v = rng.normal(size=18)
    np.testing.assert_allclose(rope_matrix(x, cfg) @ v, apply_rope(v[None], x[None], cfg)[0], atol=1e-14)


def test_rope_norm_preserving(rng):
    cfg = RopeConfig(24, position_scale=20.0)
    v = rng.normal(size=(100, 24))
    out = apply_rope(v, rng.normal(size=(100, 3)), cfg)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1), atol=1e-9)


def test_rope_relative_identity(rng):
    cfg = RopeConfig(12, position_scale=20.0)
    for _ in range(200):
        xi, xj = rng.normal(size=3), rng.normal(size=3)
        lhs = rope_matrix(xi, cfg).T @ rope_matrix(xj, cfg)
        np.testing.assert_allclose(lhs, rope_matrix(xj - xi, cfg), atol=1e-12)


def test_single_particle_returns_value(rng):
    cfg = RopeConfig(6)
    v = rng.normal(size=(1, 6))
    out = attention_naive(rng.normal(size=(1, 6)), rng.normal(size=(1, 6)), v, rng.normal(size=(1, 3)), cfg)
    np.testing.assert_allclose(out, v, atol=1e-15)


def test_equal_scores_average_values(rng):
    cfg = RopeConfig(6)
    k = np.tile(rng.normal(size=6), (5, 1))
    v = rng.normal(size=(5, 6))
    out = attention_naive(rng.normal(size=(5, 6)), k, v, np.zeros((5, 3)), cfg)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-14)


def test_naive_matches_oracle(rng):
    cfg = RopeConfig(12, position_scale=20.0)
    q, k, v = (rng.normal(size=(6, 12)) for _ in range(3))
    pos = rng.random((6, 3)) * 0.3
    np.testing.assert_allclose(attention_naive(q, k, v, pos, cfg), oracle_attention(q, k, v, pos, cfg),
                               atol=1e-12)


@pytest.mark.parametrize("n", [1, 7, 64, 257])
def test_tiled_equals_naive(n):
    r = np.random.default_rng(n)
    cfg = RopeConfig(12, position_scale=20.0)
    q, k, v = (r.normal(size=(n, 12)) * 2 for _ in range(3))
    pos = r.random((n, 3))
    ref = attention_naive(q, k, v, pos, cfg)
    for tile in (1, 7, 64, n):
        assert np.abs(attention_tiled(q, k, v, pos, cfg, tile) - ref).max() < 1e-10
    assert np.abs(attention_tiled(q, k, v, pos, cfg, n) - ref).max() < 1e-12


def test_tiled_differentiable_path_matches(rng):
    cfg = RopeConfig(6)
    q, k, v = (dc.Tensor(rng.normal(size=(9, 6))) for _ in range(3))
    pos = rng.random((9, 3))
    a = attention_tiled(q, k, v, pos, cfg, 4).data
    b = attention_naive(q, k, v, pos, cfg).data
    assert np.abs(a - b).max() < 1e-12


def test_translation_invariance(rng):
    cfg = RopeConfig(12, position_scale=20.0)
    q, k, v = (rng.normal(size=(30, 12)) for _ in range(3))
    pos = rng.random((30, 3))
    a = attention_tiled(q, k, v, pos, cfg, 8)
    b = attention_tiled(q, k, v, pos + [1.7, -0.4, 2.2], cfg, 8)
    assert np.abs(a - b).max() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.sampled_from([1, 7, 64, None]), st.integers(0, 10_000))
def test_tiled_property(n, tile, seed):
    r = np.random.default_rng(seed)
    cfg = RopeConfig(6, position_scale=20.0)
    q, k, v = (r.normal(size=(n, 6)) for _ in range(3))
    pos = r.random((n, 3))
    out = attention_tiled(q, k, v, pos, cfg, tile or n)
    assert np.abs(out - attention_naive(q, k, v, pos, cfg)).max() < 1e-10


# --------------------------------------------------------------------------- multi-head layer

def _layer(seed=0, tile=5):
    return AttentionLayer(24, heads=4, position_scale=20.0, tile=tile).initialize(seed)


def test_mha_zero_values_give_zero(rng):
    layer = _layer()
    layer.w_v.data[...] = 0
    assert np.all(mha_forward(layer, rng.normal(size=(7, 24)), rng.random((7, 3))).data == 0)


def test_mha_permutation_equivariant(rng):
    layer = _layer()
    x, pos = rng.normal(size=(11, 24)), rng.random((11, 3))
    perm = rng.permutation(11)
    a = mha_forward(layer, x, pos).data
    b = mha_forward(layer, x[perm], pos[perm]).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_mha_tiled_matches_dense(rng):
    layer = _layer()
    x, pos = rng.normal(size=(13, 24)), rng.random((13, 3))
    a = mha_forward(layer, x, pos).data
    b = mha_forward(layer, x, pos, tile=None).data
    assert np.abs(a - b).max() < 1e-12


def test_mha_shape_errors(rng):
    layer = _layer()
    with pytest.raises(dc.ShapeError):
        mha_forward(layer, rng.normal(size=(3, 12)), rng.random((3, 3)))
    with pytest.raises(dc.ShapeError):
        mha_forward(layer, rng.normal(size=(3, 24)), rng.random((4, 3)))


def test_mha_gradcheck(rng):
    layer = AttentionLayer(12, heads=2, position_scale=20.0, tile=3).initialize(1)
    x = dc.Tensor(rng.normal(size=(8, 12)), name="x")
    pos = rng.random((8, 3)) * 0.2
    w = rng.normal(size=(8, 12))
    rep = dc.grad_check(lambda: dc.sum(mha_forward(layer, x, pos) * w), {**layer.parameters(), "x": x})
    assert rep.passed, rep

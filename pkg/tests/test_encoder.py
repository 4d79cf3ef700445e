"""Encoder stub: patch counting, token resampling, text layers."""

import numpy as np
import pytest

from protoground import encoder as E
from protoground import tensor as T
from protoground.errors import ConfigError, DataError


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def make_params(rng, c0=8, vocab=10, patch=8, heads=2, depth=1, ffn=16):
    return E.init_encoder(c0, vocab, patch, heads, depth, ffn, rng)


def test_patch_count_16x16_patch8(rng):
    params = make_params(rng)
    g = E.patch_embed(rng.uniform(size=(3, 16, 16)), params)
    assert g.tokens.shape == (1, 4, 8)
    assert g.grid == (2, 2)


def test_zero_image_zero_bias_gives_zero_tokens(rng):
    # the projection itself is linear; position table zeroed to expose that
    params = make_params(rng)
    params.patch_b.data[:] = 0.0
    params.pos_embed.data[:] = 0.0
    g = E.patch_embed(np.zeros((3, 16, 16)), params)
    assert np.allclose(g.tokens.data, 0.0, atol=0)


def test_paper_scale_patch_count(rng):
    params = make_params(rng, c0=8, patch=16)
    g = E.patch_embed(np.zeros((3, 256, 256)), params)
    assert g.tokens.shape[1] == 256


def test_patch_divisibility_error(rng):
    with pytest.raises(ConfigError):
        E.patch_embed(np.zeros((3, 18, 16)), make_params(rng))


def test_interpolation_preserves_constants(rng):
    tokens = T.constant(np.tile(np.array([[1.5, -2.0]]), (7, 1))[None])
    g = E.interpolate_tokens(E.TokenGrid(tokens=tokens, grid=None), 13)
    assert np.allclose(g.tokens.data, np.tile([1.5, -2.0], (13, 1)), atol=1e-12)


def test_interpolation_midpoint(rng):
    a, b = rng.normal(size=2)
    tokens = T.constant(np.array([[[a], [b]]]))
    g = E.interpolate_tokens(E.TokenGrid(tokens=tokens, grid=None), 3)
    assert np.allclose(g.tokens.data[0, :, 0], [a, (a + b) / 2, b], atol=1e-12)


def test_interpolation_paper_counts(rng):
    tokens = T.constant(rng.normal(size=(1, 256, 4)))
    g = E.interpolate_tokens(E.TokenGrid(tokens=tokens, grid=(16, 16)), 400)
    assert g.tokens.shape[1] == 400
    assert g.grid == (20, 20)


def test_interpolation_non_square_target_has_no_grid(rng):
    tokens = T.constant(rng.normal(size=(1, 4, 4)))
    g = E.interpolate_tokens(E.TokenGrid(tokens=tokens, grid=(2, 2)), 5)
    assert g.grid is None


def test_text_encode_depth0_is_embedding_lookup(rng):
    # the embedding stage is token lookup plus the learned slot positions
    params = make_params(rng, depth=0)
    ids = np.array([[1, 2, 3, 0]])
    fv = E.TokenGrid(tokens=T.constant(rng.normal(size=(1, 4, 8))), grid=(2, 2))
    out = E.text_encode(ids, fv, params)
    assert np.allclose(out.tokens.data[0],
                       params.embed.data[ids[0]] + params.text_pos.data[:4], atol=0)
    params.text_pos.data[:] = 0.0
    out2 = E.text_encode(ids, fv, params)
    assert np.array_equal(out2.tokens.data[0], params.embed.data[ids[0]])


def test_text_encode_zero_value_path_contributes_zero(rng):
    params = make_params(rng, depth=1)
    layer = params.layers[0]
    layer.mca.w_v.data[:] = 0.0
    ids = np.array([[1, 2, 3, 0]])
    fv0 = E.TokenGrid(tokens=T.constant(np.zeros((1, 4, 8))), grid=(2, 2))
    fv1 = E.TokenGrid(tokens=T.constant(rng.normal(size=(1, 4, 8))), grid=(2, 2))
    out0 = E.text_encode(ids, fv0, params)
    out1 = E.text_encode(ids, fv1, params)
    # with a zero value projection the cross-attention term is zero either way
    assert np.allclose(out0.tokens.data, out1.tokens.data, atol=1e-12)


def test_text_encode_vocab_error(rng):
    params = make_params(rng, vocab=10)
    fv = E.TokenGrid(tokens=T.constant(np.zeros((1, 4, 8))), grid=(2, 2))
    with pytest.raises(DataError):
        E.text_encode(np.array([[1, 11]]), fv, params)


def test_text_encode_gradient(rng):
    params = make_params(rng, c0=16, depth=1, ffn=8, heads=2)
    ids = np.array([[1, 2, 3]])
    image = rng.uniform(size=(1, 3, 16, 16))
    w = rng.normal(size=(1, 3, 16))
    leaves = [params.patch_w, params.embed, params.layers[0].mca.w_v, params.layers[0].ffn_w1]

    def f():
        fv = E.patch_embed(T.constant(image), params)
        out = E.text_encode(ids, fv, params)
        return T.sum_(T.hadamard(out.tokens, T.constant(w)))

    assert T.finite_diff_check(f, leaves, max_coords=40) <= 1e-4


def test_deterministic_init(rng):
    p1 = E.init_encoder(8, 10, 8, 2, 2, 16, np.random.default_rng(42))
    p2 = E.init_encoder(8, 10, 8, 2, 2, 16, np.random.default_rng(42))
    for (k1, t1), (k2, t2) in zip(sorted(p1.tensors().items()), sorted(p2.tensors().items())):
        assert k1 == k2
        assert np.array_equal(t1.data, t2.data)


def test_pipeline_shape_contract_paper_scale(rng):
    # f_v [400 x 768] and f_l [40 x 768] at the published scale; heavy, so depth 0.
    params = E.init_encoder(768, 30, 16, 8, 0, 16, rng)
    g = E.patch_embed(np.zeros((3, 256, 256)), params)
    g = E.interpolate_tokens(g, 400)
    assert g.tokens.shape == (1, 400, 768)
    out = E.text_encode(np.zeros((1, 40), dtype=int), g, params)
    assert out.tokens.shape == (1, 40, 768)

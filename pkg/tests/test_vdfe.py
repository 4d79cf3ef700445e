"""Discriminative feature encoder: scalar transforms, modulation, gating."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoground import attention as A
from protoground import tensor as T
from protoground import vdfe as V


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.fixture
def params(rng):
    return V.init_vdfe(c0=12, c=8, heads=2, max_extent=4, rng=rng)


def test_language_info_single_text_token(rng, params):
    f_v = T.constant(rng.normal(size=(1, 4, 8)))
    f_l = T.constant(rng.normal(size=(1, 1, 8)))
    out = V.language_info(f_v, f_l, params.mca1)
    # one key: every row is that token's value projection regardless of query
    assert np.allclose(out.data, out.data[:, :1, :], atol=1e-12)


def test_language_info_zero_value_projection(rng, params):
    params.mca1.w_v.data[:] = 0.0
    out = V.language_info(T.constant(rng.normal(size=(1, 4, 8))),
                          T.constant(rng.normal(size=(1, 3, 8))), params.mca1)
    assert np.allclose(out.data, 0.0, atol=0)


def test_language_info_gradient(rng):
    p = V.init_vdfe(c0=8, c=8, heads=2, max_extent=2, rng=rng)
    f_v = T.param(rng.normal(size=(1, 4, 8)))
    f_l = T.constant(rng.normal(size=(1, 3, 8)))
    w = rng.normal(size=(1, 4, 8))

    def f():
        return T.sum_(T.hadamard(V.language_info(f_v, f_l, p.mca1), T.constant(w)))

    assert T.finite_diff_check(f, [f_v, p.mca1.w_q, p.mca1.w_v]) <= 1e-4


def test_similarity_self_orthogonal_negated(rng):
    a = rng.normal(size=(1, 3, 8))
    b = a.copy()
    b[0, 1] = np.array([1, 0, 0, 0, 0, 0, 0, 0.0])
    a[0, 1] = np.array([0, 1, 0, 0, 0, 0, 0, 0.0])
    b[0, 2] = -a[0, 2]
    sim = V.similarity_score(T.constant(a), T.constant(b))
    assert sim.data[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert sim.data[0, 1, 0] == pytest.approx(0.0, abs=1e-12)
    assert sim.data[0, 2, 0] == pytest.approx(-1.0, abs=1e-12)


def test_gaussian_transform_values():
    sigma = T.constant([0.5])
    phi = T.constant(np.array([[[1.0], [0.0], [-1.0]]]))
    out = V.gaussian_transform(phi, sigma)
    assert out.data[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert out.data[0, 1, 0] == pytest.approx(np.exp(-2.0), abs=1e-4)
    assert out.data[0, 2, 0] == pytest.approx(1.0, abs=1e-12)  # symmetric in sign


def test_laplacian_transform_values():
    b = T.constant([1.0])
    phi = T.constant(np.array([[[1.0], [0.5], [-1.0]]]))
    out = V.laplacian_transform(phi, b)
    assert out.data[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert out.data[0, 1, 0] == pytest.approx(np.exp(-0.5), abs=1e-4)
    assert out.data[0, 2, 0] == pytest.approx(np.exp(-2.0), abs=1e-4)


def test_blend_endpoints_and_midpoint():
    phi_g = T.constant(np.full((1, 2, 1), 0.1353))
    phi_l = T.constant(np.full((1, 2, 1), 0.6065))
    assert np.allclose(V.blend(phi_g, phi_l, T.constant([1.0])).data, phi_g.data, atol=0)
    assert np.allclose(V.blend(phi_g, phi_l, T.constant([0.0])).data, phi_l.data, atol=0)
    mid = V.blend(phi_g, phi_l, T.constant([0.5]))
    assert np.allclose(mid.data, 0.3709, atol=1e-4)


def test_blend_is_affine_in_lambda(rng):
    phi_g = T.constant(rng.uniform(0.01, 1.0, size=(1, 5, 1)))
    phi_l = T.constant(rng.uniform(0.01, 1.0, size=(1, 5, 1)))
    lam = T.param([0.37])
    with T.Tape() as tape:
        out = V.blend(phi_g, phi_l, lam)
        tape.backward(T.sum_(out))
    assert lam.grad[0] == pytest.approx(np.sum(phi_g.data - phi_l.data), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=6),
       st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.floats(0, 1))
def test_transform_ranges(phis, sigma, b, lam):
    phi = T.constant(np.array(phis).reshape(1, -1, 1))
    g = V.gaussian_transform(phi, T.constant([sigma]))
    l = V.laplacian_transform(phi, T.constant([b]))
    v = V.blend(g, l, T.constant([lam]))
    for out in (g, l, v):
        assert np.all(out.data > 0) and np.all(out.data <= 1.0 + 1e-12)


def test_modulate_additive_only(rng):
    c = 8
    f_lc = T.constant(rng.normal(size=(1, 3, c)))
    f_v = T.constant(rng.normal(size=(1, 3, c)))
    out = V.modulate(f_lc, f_v, T.constant(np.zeros((c, c))), T.constant(np.eye(c)))
    assert np.allclose(out.data, f_lc.data, atol=1e-12)


def test_modulate_multiplicative_with_unit_carrier(rng):
    c = 8
    f_lc = T.constant(rng.normal(size=(1, 3, c)))
    ones = T.constant(np.ones((1, 3, c)))
    out = V.modulate(f_lc, ones, T.constant(np.eye(c)), T.constant(np.zeros((c, c))))
    assert np.allclose(out.data, f_lc.data, atol=1e-12)


def test_modulate_gradient_wrt_alpha_beta(rng):
    c = 8
    alpha = T.param(rng.normal(size=(c, c)))
    beta = T.param(rng.normal(size=(c, c)))
    f_lc = T.constant(rng.normal(size=(1, 3, c)))
    f_v = T.constant(rng.normal(size=(1, 3, c)))
    w = rng.normal(size=(1, 3, c))

    def f():
        return T.sum_(T.hadamard(V.modulate(f_lc, f_v, alpha, beta), T.constant(w)))

    assert T.finite_diff_check(f, [alpha, beta]) <= 1e-4


def test_contextualize_zero_rpe_reduces_to_mca(rng, params):
    params.rpe.p_y.data[:] = 0.0
    params.rpe.p_x.data[:] = 0.0
    f_mv = T.constant(rng.normal(size=(1, 16, 8)))
    f_v = T.constant(rng.normal(size=(1, 16, 8)))
    mask = np.ones((1, 4, 4))
    out = V.contextualize(f_mv, f_v, mask, params.mharpe, params.rpe)
    ref = A.mca(f_mv, f_mv, f_v, params.mharpe)
    assert np.allclose(out.data, ref.data, atol=1e-12)


def test_contextualize_single_token(rng):
    p = V.init_vdfe(c0=8, c=8, heads=2, max_extent=1, rng=rng)
    p.rpe.p_y.data[:] = 0.0
    p.rpe.p_x.data[:] = 0.0
    f_mv = T.constant(rng.normal(size=(1, 1, 8)))
    f_v = T.constant(rng.normal(size=(1, 1, 8)))
    out = V.contextualize(f_mv, f_v, np.ones((1, 1, 1)), p.mharpe, p.rpe)
    ref = T.linear(T.linear(f_v, p.mharpe.w_v), p.mharpe.w_o)
    assert np.allclose(out.data, ref.data, atol=1e-12)


def test_gate_behaviour(rng, params):
    f_v = T.constant(rng.normal(size=(1, 4, 8)))
    f_lcv = T.constant(rng.normal(size=(1, 4, 8)))
    normed = (T.layer_norm(f_v, params.ln_v_g, params.ln_v_b).data
              + T.layer_norm(f_lcv, params.ln_c_g, params.ln_c_b).data)
    closed = V.discriminative_features(f_v, f_lcv, T.constant(np.zeros((1, 4, 1))), params)
    assert np.allclose(closed.data, 0.0, atol=0)
    open_ = V.discriminative_features(f_v, f_lcv, T.constant(np.ones((1, 4, 1))), params)
    assert np.allclose(open_.data, normed, atol=1e-12)
    phi = np.ones((1, 4, 1))
    phi[0, 2, 0] = 0.5
    half = V.discriminative_features(f_v, f_lcv, T.constant(phi), params)
    assert np.allclose(half.data[0, 2], 0.5 * normed[0, 2], atol=1e-12)
    assert np.allclose(half.data[0, 0], normed[0, 0], atol=1e-12)


def test_ablation_mode_equivalences(rng, params):
    f_v = T.constant(rng.normal(size=(1, 16, 12)))
    f_l = T.constant(rng.normal(size=(1, 3, 12)))
    mask = np.ones((1, 4, 4))
    out_g = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="gaussian")
    params.lambda_raw.data[:] = 60.0  # sigmoid -> 1 within double precision
    out_pinned = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="blend-learnable")
    assert np.allclose(out_g.f_disv.data, out_pinned.f_disv.data, atol=1e-9)

    out_l = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="laplacian")
    params.lambda_raw.data[:] = -60.0
    out_pinned0 = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="blend-learnable")
    assert np.allclose(out_l.f_disv.data, out_pinned0.f_disv.data, atol=1e-9)

    params.lambda_raw.data[:] = 0.0  # sigmoid -> exactly 0.5
    out_fixed = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="blend-fixed")
    out_learn = V.vdfe_forward(f_v, f_l, mask, params, transform_mode="blend-learnable")
    assert np.allclose(out_fixed.f_disv.data, out_learn.f_disv.data, atol=1e-12)


def test_gaussian_mode_keeps_b_and_lambda_out_of_graph(rng, params):
    f_v = T.constant(rng.normal(size=(1, 16, 12)))
    f_l = T.constant(rng.normal(size=(1, 3, 12)))
    with T.Tape() as tape:
        out = V.vdfe_forward(f_v, f_l, np.ones((1, 4, 4)), params, transform_mode="gaussian")
        tape.backward(T.sum_(out.f_disv))
    assert params.b_raw.grad is None
    assert params.lambda_raw.grad is None
    assert params.sigma_raw.grad is not None


def test_disabled_module_passes_projection_through(rng, params):
    f_v = T.constant(rng.normal(size=(1, 16, 12)))
    f_l = T.constant(rng.normal(size=(1, 3, 12)))
    out = V.vdfe_forward(f_v, f_l, np.ones((1, 4, 4)), params, enabled=False)
    proj = T.linear(f_v, params.proj_v_w, params.proj_v_b)
    assert np.allclose(out.f_disv.data, proj.data, atol=0)


def test_full_vdfe_gradient_check(rng):
    p = V.init_vdfe(c0=10, c=8, heads=2, max_extent=4, rng=rng)
    f_v = T.param(rng.normal(size=(1, 16, 10)))
    f_l = T.constant(rng.normal(size=(1, 4, 10)))
    mask = np.ones((1, 4, 4))
    w = rng.normal(size=(1, 16, 8))
    leaves = [f_v, p.sigma_raw, p.b_raw, p.lambda_raw, p.alpha, p.mca1.w_v,
              p.mharpe.w_k, p.rpe.p_y, p.ln_c_g]

    def f():
        out = V.vdfe_forward(f_v, f_l, mask, p)
        return T.sum_(T.hadamard(out.f_disv, T.constant(w)))

    assert T.finite_diff_check(f, leaves, max_coords=25) <= 1e-4


def test_combined_output_concatenates_projection_and_disv(rng, params):
    f_v = T.constant(rng.normal(size=(1, 16, 12)))
    f_l = T.constant(rng.normal(size=(1, 3, 12)))
    out = V.vdfe_forward(f_v, f_l, np.ones((1, 4, 4)), params)
    assert out.combined.shape == (1, 16, 16)
    assert np.array_equal(out.combined.data[..., :8], out.f_v_proj.data)
    assert np.array_equal(out.combined.data[..., 8:], out.f_disv.data)

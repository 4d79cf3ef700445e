"""Prototype bank: distance/top-k/weight oracles, EMA dynamics, gating."""

import numpy as np
import pytest

from protoground import bank as B
from protoground import tensor as T
from protoground.errors import ConfigError, NumericError


@pytest.fixture
def rng():
    return np.random.default_rng(23)


def dense_weights_oracle(d, k, tau):
    """Naive per-row softmax over an explicit top-k set."""
    m, n_p = d.shape
    w = np.zeros((m, n_p))
    for i in range(m):
        order = sorted(range(n_p), key=lambda j: (d[i, j], j))[:k]
        logits = np.array([-d[i, j] / tau for j in order])
        logits -= logits.max()
        e = np.exp(logits)
        e /= e.sum()
        for j, val in zip(order, e):
            w[i, j] = val
    return w


def lloyd_kmeans(x, k, iters=100, seed=0):
    """Independent Lloyd's algorithm oracle with k-means++-style seeding."""
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(len(x), size=k, replace=False)].copy()
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        labels = d.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            pts = x[labels == j]
            if len(pts):
                new_centers[j] = pts.mean(axis=0)
        if np.allclose(new_centers, centers, atol=1e-12):
            break
        centers = new_centers
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return centers, d.min(axis=1).mean()


def gaussian_mixture(rng, n_clusters=8, dim=16, per=64, rho=4.5):
    """Well-separated centered mixture: orthonormal directions scaled to rho,
    unit within-cluster noise (pairwise center distance rho * sqrt(2))."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_clusters)))
    centers = q.T * rho
    centers -= centers.mean(axis=0)
    pts = np.concatenate([c + rng.normal(size=(per, dim)) for c in centers])
    return pts[rng.permutation(len(pts))], centers


def test_pairwise_sq_dist_exact_cases():
    assert B.pairwise_sq_dist(np.array([[0.0]]), np.array([[3.0]]))[0, 0] == 9.0
    x = np.array([[1.0, 2.0]])
    assert B.pairwise_sq_dist(x, x)[0, 0] == 0.0


def test_pairwise_sq_dist_vs_double_loop(rng):
    x = rng.normal(size=(8, 5))
    e = rng.normal(size=(16, 5))
    d = B.pairwise_sq_dist(x, e)
    for i in range(8):
        for j in range(16):
            assert d[i, j] == pytest.approx(((x[i] - e[j]) ** 2).sum(), abs=1e-10)


def test_topk_ordering_and_exhaustive(rng):
    d = np.array([[5.0, 1.0, 3.0]])
    assert set(B.topk_neighbors(d, 2)[0]) == {1, 2}
    full = B.topk_neighbors(d, 3)[0]
    assert list(full) == [1, 2, 0]


def test_topk_tie_break_lowest_index():
    d = np.array([[2.0, 2.0, 1.0, 2.0]])
    assert list(B.topk_neighbors(d, 3)[0]) == [2, 0, 1]


def test_topk_vs_sort_oracle(rng):
    d = rng.uniform(size=(20, 12))
    nb = B.topk_neighbors(d, 4)
    for i in range(20):
        expected = sorted(range(12), key=lambda j: (d[i, j], j))[:4]
        assert list(nb[i]) == expected


def test_topk_k_too_large():
    with pytest.raises(ConfigError):
        B.topk_neighbors(np.zeros((2, 3)), 4)


def test_neighbor_weights_single_neighbor(rng):
    d = rng.uniform(size=(3, 6))
    nb = B.topk_neighbors(d, 1)
    w = B.neighbor_weights(d, nb, 1.0).data
    assert np.allclose(w.sum(axis=1), 1.0, atol=0)
    for i in range(3):
        assert w[i, nb[i, 0]] == 1.0


def test_neighbor_weights_equal_distances():
    d = np.array([[2.0, 2.0, 9.0]])
    w = B.neighbor_weights(d, np.array([[0, 1]]), 1.0).data
    assert w[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert w[0, 1] == pytest.approx(0.5, abs=1e-12)


def test_neighbor_weights_scalar_softmax():
    d = np.array([[0.0, 1.0, 50.0]])
    w = B.neighbor_weights(d, np.array([[0, 1]]), 1.0).data
    assert w[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert w[0, 1] == pytest.approx(0.2689, abs=1e-4)


def test_neighbor_weights_vs_dense_oracle(rng):
    for _ in range(25):
        d = rng.uniform(0, 4, size=(6, 9))
        tau = float(rng.uniform(0.3, 2.0))
        k = int(rng.integers(1, 9))
        w = B.neighbor_weights(d, B.topk_neighbors(d, k), tau).data
        assert np.allclose(w, dense_weights_oracle(d, k, tau), atol=1e-10)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((w > 0).sum(axis=1) <= k)


def test_ema_update_arithmetic():
    bank = B.PrototypeBank.create(2, 1, k=1)
    bank.sizes = np.array([1.0, 1.0])
    bank.sums = np.array([[1.0], [1.0]])
    w = np.array([[1.0, 0.0], [1.0, 0.0]])  # s_0 = 2
    B.ema_update(bank, np.array([[2.0], [2.0]]), w)
    # S_0 = 0.6 * 1 + 0.4 * 2 = 1.4, then Laplace smoothing barely moves it
    assert bank.sizes[0] == pytest.approx(1.4, rel=1e-4)


def test_ema_fixed_point_convergence(rng):
    # Warm-start so C_0 / S_0 != x, then feed a constant batch: the residual
    # E_0 - x contracts by the retention factor 0.6 once S saturates.
    bank = B.PrototypeBank.create(4, 3, k=1)
    bank.sizes = np.array([10.0, 1e-3, 1e-3, 1e-3])
    bank.sums = rng.normal(size=(4, 3))
    bank.sums[0] *= 10.0
    bank.embed = bank.sums / bank.sizes[:, None]
    x = np.tile(rng.normal(size=(1, 3)), (10, 1))
    errs = []
    for _ in range(14):
        w = np.zeros((10, 4))
        w[:, 0] = 1.0  # all mass on prototype 0 by construction
        B.ema_update(bank, x, w)
        errs.append(np.abs(bank.embed[0] - x[0]).max())
    for a, b in zip(errs[3:], errs[4:]):
        if a > 1e-9:
            assert 0.5 * a <= b <= 0.7 * a
    assert errs[-1] <= errs[0] * 0.6 ** 10


def test_laplace_smoothing_preserves_total(rng):
    bank = B.PrototypeBank.create(16, 4, k=3)
    x = rng.normal(size=(40, 4))
    for _ in range(3):
        d = B.pairwise_sq_dist(x, bank.embed)
        w = B.neighbor_weights(d, B.topk_neighbors(d, 3), 1.0).data
        a = bank.alpha_decay
        expected_total = ((1 - a) * bank.sizes + a * w.sum(axis=0)).sum()
        B.ema_update(bank, x, w)
        assert bank.sizes.sum() == pytest.approx(expected_total, rel=1e-9)
        assert np.all(bank.sizes > 0)


def test_ema_rejects_non_finite():
    bank = B.PrototypeBank.create(2, 1, k=1)
    with pytest.raises(NumericError):
        B.ema_update(bank, np.array([[np.nan]]), np.array([[1.0, 0.0]]))


def test_inherit_exact_match_k1(rng):
    embed = rng.normal(size=(6, 4))
    x = T.constant(embed[2:3].copy())
    d = B.pairwise_sq_dist(x.data, embed)
    nb = B.topk_neighbors(d, 1)
    assert nb[0, 0] == 2
    w = B.neighbor_weights(d, nb, 1.0)
    q = B.inherit(x, embed, w)
    assert np.array_equal(q.data, embed[2:3])


def test_inherit_forward_matches_dense_product(rng):
    embed = rng.normal(size=(8, 4))
    x = T.constant(rng.normal(size=(5, 4)))
    d = B.pairwise_sq_dist(x.data, embed)
    w = B.neighbor_weights(d, B.topk_neighbors(d, 3), 0.7)
    q = B.inherit(x, embed, w)
    assert np.allclose(q.data, w.data @ embed, atol=1e-12)


def test_inherit_straight_through_gradients(rng):
    embed_t = T.param(rng.normal(size=(8, 4)))
    x = T.param(rng.normal(size=(5, 4)))
    tau = T.param([1.0])
    g_up = rng.normal(size=(5, 4))
    with T.Tape() as tape:
        d = B.pairwise_sq_dist(x.data, embed_t.data)
        w = B.neighbor_weights(d, B.topk_neighbors(d, 3), tau)
        q_pre = T.matmul(w, T.constant(embed_t.data))
        q = T.add(q_pre, T.sub(x, T.stop_gradient(x)))
        tape.backward(T.sum_(T.hadamard(q, T.constant(g_up))))
    # the input receives exactly the upstream gradient and the codebook none
    assert np.array_equal(x.grad, g_up)
    assert embed_t.grad is None
    assert tau.grad is not None and tau.grad[0] != 0.0


def test_gate_fuse_symmetric_logits(rng):
    params = B.init_gate_fusion(c=4, c1=6, rng=rng)
    params.gate_w.data[:] = 0.0
    params.gate_b.data[:] = 0.0
    f_in = T.constant(rng.normal(size=(1, 3, 6)))
    f_qt = T.constant(rng.normal(size=(1, 3, 6)))
    diag = {}
    out = B.gate_fuse(f_in, f_qt, params, diag=diag)
    assert np.allclose(diag["gate_e"], 0.5, atol=0)
    ref = T.linear(T.scale(T.add(f_in, f_qt), 0.5), params.out_w, params.out_b)
    assert np.allclose(out.data, ref.data, atol=1e-12)


def test_gate_fuse_saturation(rng):
    params = B.init_gate_fusion(c=4, c1=6, rng=rng)
    params.gate_w.data[:] = 0.0
    params.gate_b.data[:] = np.array([50.0, -50.0])  # E_s -> 1
    f_qt = T.constant(rng.normal(size=(1, 3, 6)))
    out1 = B.gate_fuse(T.constant(rng.normal(size=(1, 3, 6))), f_qt, params)
    out2 = B.gate_fuse(T.constant(rng.normal(size=(1, 3, 6))), f_qt, params)
    assert np.allclose(out1.data, out2.data, atol=1e-10)


def test_gate_channels_sum_to_one(rng):
    params = B.init_gate_fusion(c=4, c1=6, rng=rng)
    diag = {}
    B.gate_fuse(T.constant(rng.normal(size=(2, 5, 6))), T.constant(rng.normal(size=(2, 5, 6))),
                params, diag=diag)
    assert np.allclose(diag["gate_e"] + diag["gate_i"], 1.0, atol=1e-9)


def test_quantizer_mse_vs_lloyd_oracle():
    pts, _ = gaussian_mixture(np.random.default_rng(100))
    bank = B.PrototypeBank.create(8, 16, k=1)
    for _ in range(200):
        d = B.pairwise_sq_dist(pts, bank.embed)
        nb = B.topk_neighbors(d, 1)
        w = B.neighbor_weights(d, nb, 1.0).data
        B.ema_update(bank, pts, w)
    d = B.pairwise_sq_dist(pts, bank.embed)
    mse = d.min(axis=1).mean()
    _, oracle_mse = lloyd_kmeans(pts, 8, seed=1)
    assert mse <= 1.2 * oracle_mse


def test_k5_weight_rows(rng):
    pts, _ = gaussian_mixture(rng, per=16)
    bank = B.PrototypeBank.create(32, 16, k=5)
    for _ in range(20):
        d = B.pairwise_sq_dist(pts, bank.embed)
        w = B.neighbor_weights(d, B.topk_neighbors(d, 5), 1.0).data
        B.ema_update(bank, pts, w)
    d = B.pairwise_sq_dist(pts, bank.embed)
    w = B.neighbor_weights(d, B.topk_neighbors(d, 5), 1.0).data
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((w > 0).sum(axis=1) <= 5)


def test_zero_init_first_step_is_deterministic(rng):
    bank = B.PrototypeBank.create(8, 4, k=3)
    x = rng.normal(size=(6, 4))
    d = B.pairwise_sq_dist(x, bank.embed)
    nb = B.topk_neighbors(d, 3)
    # all prototypes tie at ||x||^2, so the lowest indices win deterministically
    assert np.array_equal(nb, np.tile([0, 1, 2], (6, 1)))


def test_bank_forward_shapes_and_train_guard(rng):
    bank = B.PrototypeBank.create(16, 12, k=3)
    params = B.init_gate_fusion(c=8, c1=12, rng=rng)
    f_disv = T.constant(rng.normal(size=(2, 9, 8)))
    before = (bank.embed.copy(), bank.sizes.copy(), bank.sums.copy())
    out = B.bank_forward(bank, f_disv, params, train=False)
    assert out.shape == (2, 9, 8)
    assert np.array_equal(bank.embed, before[0])
    assert np.array_equal(bank.sizes, before[1])
    assert np.array_equal(bank.sums, before[2])
    B.bank_forward(bank, f_disv, params, train=True)
    assert bank.step == 1
    assert not np.array_equal(bank.sizes, before[1])

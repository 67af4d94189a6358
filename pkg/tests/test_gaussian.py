import numpy as np
import pytest
from scipy.integrate import quad

from fewtag import autodiff as ad
from fewtag import gaussian as gs
from fewtag.autodiff import Tensor
from fewtag.gaussian import GaussianEmbedding


def emb(mu, s2):
    return GaussianEmbedding(Tensor(np.atleast_1d(np.asarray(mu, dtype=float))),
                             Tensor(np.atleast_1d(np.asarray(s2, dtype=float))))


def kl_quad_oracle(mu_p, s2_p, mu_q, s2_q):
    """Numerical integration of the 1-D KL integrand, independent of the closed form."""
    def integrand(x):
        logp = -0.5 * np.log(2 * np.pi * s2_p) - (x - mu_p) ** 2 / (2 * s2_p)
        logq = -0.5 * np.log(2 * np.pi * s2_q) - (x - mu_q) ** 2 / (2 * s2_q)
        return np.exp(logp) * (logp - logq)
    lo = mu_p - 12 * np.sqrt(s2_p)
    hi = mu_p + 12 * np.sqrt(s2_p)
    val, _ = quad(integrand, lo, hi, limit=200)
    return val


def test_kl_identical_is_zero():
    p = emb([0.3, -1.2], [0.5, 2.0])
    q = emb([0.3, -1.2], [0.5, 2.0])
    assert gs.kl(p, q).item() <= 1e-12


def test_kl_unit_variance_mean_shift():
    # oracle-computed: KL(N(0,1) || N(1,1)) = 0.5
    val = gs.kl(emb(0.0, 1.0), emb(1.0, 1.0)).item()
    assert val == pytest.approx(0.5, abs=1e-12)
    assert val == pytest.approx(kl_quad_oracle(0.0, 1.0, 1.0, 1.0), abs=1e-9)


def test_kl_variance_ratio():
    # oracle-computed: KL(N(0,1) || N(0,4)) = 0.5*(log 4 - 3/4) ~ 0.318147
    val = gs.kl(emb(0.0, 1.0), emb(0.0, 4.0)).item()
    assert val == pytest.approx(0.5 * (np.log(4.0) - 0.75), abs=1e-12)
    assert val == pytest.approx(kl_quad_oracle(0.0, 1.0, 0.0, 4.0), abs=1e-9)


def test_kl_closed_form_matches_integration_grid():
    mus = np.linspace(-2.0, 2.0, 10)
    s2s = np.linspace(0.25, 4.0, 10)
    for mu_q in mus:
        for s2_q in s2s:
            closed = gs.kl(emb(0.4, 1.3), emb(mu_q, s2_q)).item()
            numeric = kl_quad_oracle(0.4, 1.3, mu_q, s2_q)
            assert closed == pytest.approx(numeric, abs=1e-3)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = emb(rng.normal(size=3), rng.uniform(0.1, 5.0, size=3))
        q = emb(rng.normal(size=3), rng.uniform(0.1, 5.0, size=3))
        assert gs.kl(p, q).item() >= 0.0


def test_kl_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        gs.kl(emb(0.0, -1.0), emb(0.0, 1.0))


def test_js_symmetric_exactly():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = emb(rng.normal(size=4), rng.uniform(0.2, 3.0, size=4))
        q = emb(rng.normal(size=4), rng.uniform(0.2, 3.0, size=4))
        assert gs.js(p, q).item() == gs.js(q, p).item()


def test_js_unit_shift_and_identity():
    assert gs.js(emb(0.0, 1.0), emb(1.0, 1.0)).item() == pytest.approx(0.5, abs=1e-12)
    p = emb([1.0, 2.0], [0.5, 0.7])
    assert gs.js(p, p).item() == 0.0


def test_kl_js_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    for fn in (gs.kl, gs.js):
        for _ in range(10):
            other = emb(rng.normal(size=3), rng.uniform(0.3, 2.0, size=3))
            point = np.concatenate([rng.normal(size=3), rng.uniform(0.3, 2.0, size=3)])

            def loss(x):
                p = GaussianEmbedding(ad.row_gather(ad.reshape(x, (2, 3)), [0]),
                                      ad.square(ad.row_gather(ad.reshape(x, (2, 3)), [1])))
                p = GaussianEmbedding(ad.reshape(p.mu, (3,)), ad.reshape(p.sigma2, (3,)))
                return fn(p, other)

            assert ad.finite_diff_check(loss, point, step=1e-5) <= 1e-4


def test_sq_euclidean_basics():
    assert gs.sq_euclidean([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gs.sq_euclidean([0.0, 0.0], [3.0, 4.0]) == 25.0
    with pytest.raises(ad.ShapeError):
        gs.sq_euclidean([1.0], [1.0, 2.0])


def test_sq_euclidean_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        acc = 0.0
        for x, y in zip(a, b):
            acc += (x - y) ** 2
        assert gs.sq_euclidean(a, b) == pytest.approx(acc, rel=1e-12)


def test_pairwise_symkl_matches_per_pair():
    rng = np.random.default_rng(5)
    a = GaussianEmbedding(Tensor(rng.normal(size=(4, 3))),
                          Tensor(rng.uniform(0.2, 3.0, size=(4, 3))))
    b = GaussianEmbedding(Tensor(rng.normal(size=(5, 3))),
                          Tensor(rng.uniform(0.2, 3.0, size=(5, 3))))
    d = gs.pairwise_symkl(a, b).data
    for i in range(4):
        for j in range(5):
            pi = emb(a.mu.data[i], a.sigma2.data[i])
            qj = emb(b.mu.data[j], b.sigma2.data[j])
            assert d[i, j] == pytest.approx(gs.js(pi, qj).item(), rel=1e-9, abs=1e-9)


def test_pairwise_sq_euclidean_matches_per_pair():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(5, 3))
    d = gs.pairwise_sq_euclidean(Tensor(a), Tensor(b)).data
    for i in range(4):
        for j in range(5):
            assert d[i, j] == pytest.approx(gs.sq_euclidean(a[i], b[j]), abs=1e-9)


def test_project_variance_positive_and_zero_params():
    params = gs.init_projection_params(d=6, l=4, seed=0)
    rng = np.random.default_rng(7)
    out = gs.project(params, Tensor(rng.normal(size=(3, 6))))
    assert np.all(out.sigma2.data > 0)
    assert out.mu.shape == (3, 4)

    for name, t in params.items():
        t.data[...] = 0.0
    out = gs.project(params, Tensor(rng.normal(size=6)))
    np.testing.assert_allclose(out.mu.data, 0.0)
    np.testing.assert_allclose(out.sigma2.data, np.log(2.0) + gs.SIGMA_FLOOR, atol=1e-12)


def test_project_default_dim_is_128():
    params = gs.init_projection_params(d=16, seed=0)
    out = gs.project(params, Tensor(np.zeros(16)))
    assert out.mu.shape[-1] == 128


def test_project_gradients_match_finite_differences():
    params = gs.init_projection_params(d=4, l=3, hidden=5, seed=1)
    rng = np.random.default_rng(8)
    point = rng.normal(size=(2, 4))

    def loss(x):
        g = gs.project(params, x)
        return ad.tsum(ad.square(g.mu)) + ad.tsum(ad.log(g.sigma2))

    assert ad.finite_diff_check(loss, point, step=1e-5) <= 1e-4

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from cbartgp.cbart import (
    CbartConfig,
    _Sampler,
    conjugate_solve,
    default_tau,
    draw_leaf_means,
    log_marginal,
    log_marginal_likelihood_ratio,
    marginal_likelihood_ratio,
    predict_f,
    run_cbart,
)
from cbartgp.covariance import (
    CovarianceModel,
    PrecisionView,
    build_ar_precision,
    build_iid_precision,
    build_spatial_covariance,
)
from cbartgp.tree import DummyDesign, ProposalError, Tree, apply_proposal, build_dummy, propose


def random_precision(rng, n):
    if rng.random() < 0.5:
        return build_ar_precision(rng.uniform(0, 0.95), rng.uniform(0.3, 2.0), n)
    locs = rng.uniform(size=(n, 2))
    model = CovarianceModel("exp", {"sigma2": rng.uniform(0.5, 3), "phi": rng.uniform(0.1, 1),
                                    "tau2": rng.uniform(0.05, 1)})
    return build_spatial_covariance(model, locs)[1]


def grown(rng, X, steps):
    tree = Tree()
    design = build_dummy(tree, X)
    for _ in range(steps):
        try:
            prop = propose(tree, design, X, rng)
        except ProposalError:
            continue
        design = apply_proposal(tree, prop)
    return tree, design


def oracle_logpdf(R, design, precision, tau):
    sigma = np.linalg.inv(precision.toarray())
    d = design.matrix()
    return multivariate_normal(np.zeros(len(R)), sigma + tau**2 * d @ d.T).logpdf(R)


def iid_bart_log_ratio(R, left, right, sigma, tau):
    """Classical single-tree birth ratio from leaf counts and sums."""
    s2, t2 = sigma**2, tau**2
    nl, nr = len(left), len(right)
    n = nl + nr
    sl, sr = R[left].sum(), R[right].sum()
    log_det = 0.5 * (math.log(s2) + math.log(s2 + t2 * n) - math.log(s2 + t2 * nl) - math.log(s2 + t2 * nr))
    quad = t2 / (2 * s2) * (sl**2 / (s2 + t2 * nl) + sr**2 / (s2 + t2 * nr) - (sl + sr) ** 2 / (s2 + t2 * n))
    return log_det + quad


class TestLogMarginal:
    def test_scalar_case(self):
        design = DummyDesign(np.array([0]), 1)
        view = build_iid_precision(1.0, 1)
        assert log_marginal(np.zeros(1), design, view, 1.0) == pytest.approx(-0.5 * math.log(4 * math.pi),
                                                                            abs=1e-12)
        assert -0.5 * math.log(4 * math.pi) == pytest.approx(-1.26551, abs=1e-5)

    def test_tau_to_zero(self):
        rng = np.random.default_rng(0)
        n = 8
        view = build_ar_precision(0.6, 0.5, n)
        R = rng.normal(size=n)
        design = DummyDesign(rng.integers(0, 3, n), 3)
        expected = multivariate_normal(np.zeros(n), np.linalg.inv(view.toarray())).logpdf(R)
        assert log_marginal(R, design, view, 1e-7) == pytest.approx(expected, abs=1e-8)

    def test_random_n12_b3(self):
        rng = np.random.default_rng(1)
        n = 12
        view = random_precision(rng, n)
        design = DummyDesign(np.r_[0, 1, 2, rng.integers(0, 3, n - 3)], 3)
        R = rng.normal(size=n)
        assert log_marginal(R, design, view, 0.7) == pytest.approx(oracle_logpdf(R, design, view, 0.7),
                                                                   abs=1e-8)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            log_marginal(np.zeros(3), DummyDesign(np.zeros(4, dtype=int), 1), build_iid_precision(1.0, 4), 1.0)


class TestRatio:
    @pytest.mark.parametrize("seed", range(10))
    def test_ar1_n40_birth_and_death(self, seed):
        rng = np.random.default_rng(seed)
        n = 40
        X = rng.uniform(size=(n, 2))
        view = build_ar_precision(0.8, 0.4, n)
        R = rng.normal(size=n)
        tree, design = grown(rng, X, 8)
        seen = set()
        for _ in range(50):
            prop = propose(tree, design, X, rng)
            seen.add(prop.kind)
            got = marginal_likelihood_ratio(R, view, design, prop, 0.3)
            expected = math.exp(log_marginal(R, prop.resulting, view, 0.3) - log_marginal(R, design, view, 0.3))
            assert got == pytest.approx(expected, rel=1e-8)
        assert seen == {"birth", "death"} or tree.b == 1

    def test_birth_then_death_cancel(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(size=(25, 2))
        view = build_ar_precision(0.5, 1.0, 25)
        R = rng.normal(size=25)
        tree, design = grown(rng, X, 4)
        while True:
            birth = propose(tree, design, X, rng)
            if birth.kind == "birth":
                break
        fwd = log_marginal_likelihood_ratio(R, view, design, birth, 0.5)
        new = apply_proposal(tree, birth)
        for _ in range(1000):
            death = propose(tree, new, X, rng)
            if death.kind == "death" and death.node is birth.node:
                break
        back = log_marginal_likelihood_ratio(R, view, new, death, 0.5)
        assert fwd + back == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_iid_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        n, sigma, tau = 30, rng.uniform(0.2, 2), rng.uniform(0.1, 1.5)
        X = rng.uniform(size=(n, 2))
        view = build_iid_precision(sigma, n)
        R = rng.normal(size=n)
        tree, design = grown(rng, X, 5)
        for _ in range(20):
            prop = propose(tree, design, X, rng)
            expected = iid_bart_log_ratio(R, prop.left_idx, prop.right_idx, sigma, tau)
            if prop.kind == "death":
                expected = -expected
            got = log_marginal_likelihood_ratio(R, view, design, prop, tau)
            assert got == pytest.approx(expected, abs=1e-10)

    def test_reordering_invariance(self):
        rng = np.random.default_rng(7)
        n = 20
        X = rng.uniform(size=(n, 2))
        view = random_precision(rng, n)
        q = view.toarray()
        R = rng.normal(size=n)
        tree, design = grown(rng, X, 5)
        perm = rng.permutation(n)
        view_p = PrecisionView(q[perm][:, perm], view.logdet_sigma)
        tree_p = tree.copy()
        design_p = build_dummy(tree_p, X[perm])
        for k in range(20):
            prop = propose(tree, design, X, np.random.default_rng(k))
            prop_p = propose(tree_p, design_p, X[perm], np.random.default_rng(k))
            assert (prop.kind, prop.var, prop.cut) == (prop_p.kind, prop_p.var, prop_p.cut)
            a = log_marginal_likelihood_ratio(R, view, design, prop, 0.4)
            b = log_marginal_likelihood_ratio(R[perm], view_p, design_p, prop_p, 0.4)
            assert math.exp(a) == pytest.approx(math.exp(b), rel=1e-10)

    def test_gram_reuse(self):
        rng = np.random.default_rng(11)
        n = 30
        X = rng.uniform(size=(n, 2))
        view = build_ar_precision(0.7, 0.3, n)
        R = rng.normal(size=n)
        tree, design = grown(rng, X, 6)
        gram = view.leaf_gram(design.assignment, design.b)
        prop = propose(tree, design, X, rng)
        a = log_marginal_likelihood_ratio(R, view, design, prop, 0.5)
        b = log_marginal_likelihood_ratio(R, view, design, prop, 0.5, omega=view.matvec(R), gram=gram)
        assert a == pytest.approx(b, abs=1e-13)


class TestLeafDraws:
    def test_scalar_conjugate(self):
        draws = draw_leaf_means(np.array([1.4]), DummyDesign(np.array([0]), 1), build_iid_precision(1.0, 1),
                                1.0, np.random.default_rng(0), size=200_000)
        assert draws.shape == (200_000, 1)
        se = math.sqrt(0.5 / 200_000)
        assert abs(draws.mean() - 0.7) < 4 * se
        assert draws.var() == pytest.approx(0.5, rel=0.01)

    def test_flat_prior_limit(self):
        rng = np.random.default_rng(1)
        assignment = np.array([0, 0, 1, 1, 1, 2])
        R = rng.normal(size=6)
        sol = conjugate_solve(R, DummyDesign(assignment, 3), build_iid_precision(1.0, 6), 1e8)
        expected = [R[assignment == j].mean() for j in range(3)]
        np.testing.assert_allclose(sol.v, expected, atol=1e-10)

    def test_moments_ar1_n20_b4(self):
        rng = np.random.default_rng(2)
        n, b, size = 20, 4, 100_000
        view = build_ar_precision(0.7, 0.5, n)
        design = DummyDesign(np.r_[0, 1, 2, 3, rng.integers(0, b, n - 4)], b)
        R = rng.normal(size=n)
        d, q, tau = design.matrix(), view.toarray(), 0.6
        cov = np.linalg.inv(np.eye(b) / tau**2 + d.T @ q @ d)
        mean = cov @ d.T @ q @ R
        draws = draw_leaf_means(R, design, view, tau, rng, size=size)
        se_mean = np.sqrt(np.diag(cov) / size)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se_mean)
        emp = np.cov(draws.T)
        # var of a sample covariance entry: (s_ii s_jj + s_ij^2) / size
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / size)
        assert np.all(np.abs(emp - cov) < 3 * se_cov)


class TestRunCbart:
    def test_default_tau(self):
        assert default_tau(50, 2.0) == pytest.approx(0.5 / (2 * math.sqrt(50)))

    def test_ar1_rho0_matches_iid_bitwise(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(size=(60, 2))
        y = X[:, 0] ** 2 + rng.normal(0, 0.2, 60)
        cfg = CbartConfig(m=10, n_iter=40, burn_in=10, rng_seed=5)
        a = run_cbart(y, X, build_ar_precision(0.0, 0.2, 60), cfg)
        b = run_cbart(y, X, build_iid_precision(0.2, 60), cfg)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_seed_reproducible(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(40, 1))
        y = rng.normal(size=40)
        cfg = CbartConfig(m=5, n_iter=20, burn_in=5, rng_seed=9)
        view = build_ar_precision(0.5, 1.0, 40)
        np.testing.assert_array_equal(run_cbart(y, X, view, cfg).draws, run_cbart(y, X, view, cfg).draws)

    def test_single_leaf_gls_intercept(self):
        rng = np.random.default_rng(2)
        n = 80
        X = rng.uniform(size=(n, 1))
        view = build_ar_precision(0.8, 0.3, n)
        y = 2.0 + np.linalg.cholesky(np.linalg.inv(view.toarray())) @ rng.normal(size=n)
        cfg = CbartConfig(m=1, n_iter=4000, burn_in=10, alpha=0.0, tau=1e4, rng_seed=3)
        fit = run_cbart(y, X, view, cfg)
        q = view.toarray()
        ones = np.ones(n)
        gls = ones @ q @ y / (ones @ q @ ones)
        se = math.sqrt(1.0 / (ones @ q @ ones) / cfg.n_iter)
        assert np.ptp(fit.posterior_mean_f) < 1e-12
        assert abs(fit.posterior_mean_f[0] - gls) < 4 * se

    def test_estimate_sigma_requires_iid(self):
        with pytest.raises(ValueError):
            run_cbart(np.zeros(5), np.zeros((5, 1)), build_ar_precision(0.5, 1.0, 5),
                      CbartConfig(estimate_sigma=True, n_iter=1))

    def test_posterior_mean_is_average(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(size=(30, 1))
        fit = run_cbart(rng.normal(size=30), X, build_iid_precision(1.0, 30),
                        CbartConfig(m=5, n_iter=15, burn_in=3, rng_seed=0))
        np.testing.assert_allclose(fit.posterior_mean_f, fit.draws.mean(axis=0), rtol=0, atol=0)
        assert set(fit.acceptance_rates) == {"birth", "death", "overall"}

    def test_sigma_draws_iid_mode(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(150, 1))
        y = np.sin(4 * X[:, 0]) + rng.normal(0, 0.3, 150)
        fit = run_cbart(y, X, None, CbartConfig(m=20, n_iter=300, burn_in=200, estimate_sigma=True, rng_seed=1))
        assert 0.2 < np.mean(fit.sigma_draws) < 0.4

    def test_backfitting_residual_identity(self):
        rng = np.random.default_rng(5)
        n, m = 50, 8
        X = rng.uniform(size=(n, 2))
        y = rng.normal(size=n)
        cfg = CbartConfig(m=m, n_iter=1, burn_in=0)
        sampler = _Sampler(y, X, build_ar_precision(0.6, 0.5, n), cfg, 0.2, np.random.default_rng(0))
        for _ in range(30):
            for j in range(m):
                g_before = sampler.g.copy()
                R = sampler.step_tree(j)
                np.testing.assert_allclose(y - g_before.sum(axis=0) - R + g_before[j], 0.0, atol=1e-12)
                np.testing.assert_array_equal(sampler.g[j], sampler.trees[j].predict(X))
            np.testing.assert_allclose(sampler.fsum, sampler.g.sum(axis=0), atol=1e-12)


@pytest.fixture(scope="module")
def fit():
    rng = np.random.default_rng(6)
    X = rng.uniform(size=(60, 2))
    y = X[:, 0] - X[:, 1] ** 2 + rng.normal(0, 0.1, 60)
    return X, run_cbart(y, X, build_ar_precision(0.3, 0.1, 60),
                        CbartConfig(m=10, n_iter=30, burn_in=10, rng_seed=2))


class TestPredict:
    def test_training_points(self, fit):
        X, f = fit
        np.testing.assert_allclose(predict_f(f, X), f.posterior_mean_f, atol=1e-10)

    def test_direct_reevaluation(self, fit):
        X, f = fit
        X_new = np.random.default_rng(0).uniform(size=(10, 2))
        total = np.zeros(10)
        for var, cut, left, right, mu, roots in f.forests:
            for r in roots:
                for i, x in enumerate(X_new):
                    k = r
                    while var[k] >= 0:
                        k = left[k] if x[var[k]] <= cut[k] else right[k]
                    total[i] += mu[k]
        expected = total / len(f.forests) * f.y_scale + f.y_offset
        np.testing.assert_allclose(predict_f(f, X_new), expected, atol=1e-10)

    def test_constant_ensemble(self):
        X = np.random.default_rng(0).uniform(size=(20, 1))
        y = np.full(20, 3.25)
        f = run_cbart(y, X, build_iid_precision(1.0, 20),
                      CbartConfig(m=1, n_iter=5, burn_in=0, alpha=0.0, rng_seed=0))
        out = predict_f(f, np.random.default_rng(1).uniform(size=(7, 1)))
        assert np.ptp(out) == 0.0
        assert out[0] == pytest.approx(f.posterior_mean_f[0])

    def test_no_trees(self):
        X = np.zeros((5, 1))
        f = run_cbart(np.arange(5.0), X, build_iid_precision(1.0, 5),
                      CbartConfig(m=1, n_iter=2, burn_in=0, keep_trees=False))
        with pytest.raises(ValueError):
            predict_f(f, X)

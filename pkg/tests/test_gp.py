import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm
from scipy.spatial.distance import cdist

from cbartgp.covariance import CovarianceModel
from cbartgp.gp import fit_gp_mle, gp_loglik, krige, structured_component
from cbartgp.simgen import streams


def ar1_series(rho, sigma, n, seed):
    eps = np.random.default_rng(seed).normal(0, sigma, n)
    eta = np.empty(n)
    eta[0] = eps[0]
    for i in range(1, n):
        eta[i] = rho * eta[i - 1] + eps[i]
    return eta


def exp_sigma(locs, s2, phi, t2):
    return s2 * np.exp(-cdist(locs, locs) / phi) + t2 * np.eye(len(locs))


class TestLoglik:
    def test_zero_residuals(self):
        model = CovarianceModel("ar1", {"rho": 0.0, "sigma": 1.0})
        assert gp_loglik(np.zeros(7), model) == pytest.approx(-3.5 * math.log(2 * math.pi), abs=1e-12)

    def test_iid_standard_normal(self):
        e = np.random.default_rng(0).normal(size=11)
        model = CovarianceModel("ar1", {"rho": 0.0, "sigma": 1.0})
        assert gp_loglik(e, model) == pytest.approx(norm.logpdf(e).sum(), abs=1e-12)

    def test_ar1_dense(self):
        e = np.array([0.3, -1.2, 0.5, 0.9, -0.1])
        a = np.eye(5) - 0.5 * np.eye(5, k=-1)
        sigma = np.linalg.inv(a.T @ a)
        model = CovarianceModel("ar1", {"rho": 0.5, "sigma": 1.0})
        expected = multivariate_normal(np.zeros(5), sigma).logpdf(e)
        assert gp_loglik(e, model) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("kind,extra", [("exp", {}), ("matern", {"nu": 2.5})])
    def test_spatial_dense(self, kind, extra):
        rng = np.random.default_rng(1)
        locs = rng.uniform(size=(25, 2))
        e = rng.normal(size=25)
        model = CovarianceModel(kind, {"sigma2": 2.0, "phi": 0.3, "tau2": 0.4, **extra}, locs)
        sigma = model.covariance()
        expected = multivariate_normal(np.zeros(25), sigma).logpdf(e)
        assert gp_loglik(e, model) == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("point", range(5))
    def test_gradient_matches_central_difference(self, point):
        # analytic score 0.5 tr((a a' - Sigma^{-1}) dSigma) against central differences
        rng = np.random.default_rng(100 + point)
        locs = rng.uniform(size=(15, 2))
        e = rng.normal(size=15)
        theta = np.array([rng.uniform(0.5, 3), rng.uniform(0.1, 1), rng.uniform(0.1, 1)])
        s2, phi, t2 = theta
        dist = cdist(locs, locs)
        k = np.exp(-dist / phi)
        sigma = s2 * k + t2 * np.eye(15)
        inv = np.linalg.inv(sigma)
        alpha = inv @ e
        derivs = [k, s2 * k * dist / phi**2, np.eye(15)]
        analytic = np.array([0.5 * np.trace((np.outer(alpha, alpha) - inv) @ d) for d in derivs])

        def ll(t):
            return gp_loglik(e, CovarianceModel("exp", {"sigma2": t[0], "phi": t[1], "tau2": t[2]}, locs))

        h = 1e-5
        numeric = np.array([(ll(theta + h * np.eye(3)[i]) - ll(theta - h * np.eye(3)[i])) / (2 * h)
                            for i in range(3)])
        np.testing.assert_allclose(numeric, analytic, rtol=1e-4)


class TestFit:
    def test_ar1_consistency(self):
        fit = fit_gp_mle(ar1_series(0.8, 0.1, 2000, 0), "ar1")
        assert abs(fit.theta["rho"] - 0.8) <= 0.05
        assert abs(fit.theta["sigma"] - 0.1) <= 0.01
        assert fit.converged

    def test_ar1_null(self):
        fit = fit_gp_mle(np.random.default_rng(1).normal(size=2000), "ar1")
        assert abs(fit.theta["rho"]) < 0.1

    def test_loglik_exact_and_above_starts(self):
        e = ar1_series(0.6, 0.5, 300, 2)
        fit = fit_gp_mle(e, "ar1")
        assert fit.loglik == pytest.approx(gp_loglik(e, fit.model), abs=1e-10)
        assert len(fit.start_logliks) == 5
        assert all(fit.loglik >= s for s in fit.start_logliks)

    def test_parameter_box(self):
        fit = fit_gp_mle(ar1_series(0.999, 1.0, 200, 3), "ar1")
        assert 0.0 <= fit.theta["rho"] <= 0.999

    def test_spatial_fit(self):
        rngs = streams(4)
        locs = rngs["location"].uniform(size=(150, 2))
        sigma = exp_sigma(locs, 1.0, 0.2, 0.3)
        e = np.linalg.cholesky(sigma) @ rngs["error"].standard_normal(150)
        fit = fit_gp_mle(e, "exp", locs)
        th = fit.theta
        assert all(1e-6 <= th[k] <= 1e6 for k in ("sigma2", "phi", "tau2"))
        truth = CovarianceModel("exp", {"sigma2": 1.0, "phi": 0.2, "tau2": 0.3}, locs)
        assert fit.loglik >= gp_loglik(e, truth) - 1e-6
        assert all(fit.loglik >= s for s in fit.start_logliks)

    def test_matern_fit_runs(self):
        rng = np.random.default_rng(5)
        locs = rng.uniform(size=(40, 2))
        fit = fit_gp_mle(rng.normal(size=40), "matern", locs, nu=1.5)
        assert fit.model.params["nu"] == 1.5

    def test_nonconvergence_flag(self):
        fit = fit_gp_mle(ar1_series(0.5, 1.0, 100, 6), "ar1", max_evals=3)
        assert not fit.converged
        assert np.isfinite(fit.loglik)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fit_gp_mle(np.zeros(9), "ar1")

    def test_spatial_needs_locations(self):
        with pytest.raises(ValueError):
            fit_gp_mle(np.zeros(20), "exp")


class TestStructured:
    def test_ar1_one_step(self):
        e = np.array([1.0, 2.0, -1.0, 0.5])
        model = CovarianceModel("ar1", {"rho": 0.5, "sigma": 1.0})
        np.testing.assert_allclose(structured_component(e, model), [0.0, 0.5, 1.0, -0.5])

    def test_spatial_smoother(self):
        rng = np.random.default_rng(7)
        locs = rng.uniform(size=(12, 2))
        e = rng.normal(size=12)
        model = CovarianceModel("exp", {"sigma2": 2.0, "phi": 0.5, "tau2": 0.5}, locs)
        k = 2.0 * np.exp(-cdist(locs, locs) / 0.5)
        expected = k @ np.linalg.solve(k + 0.5 * np.eye(12), e)
        np.testing.assert_allclose(structured_component(e, model), expected, atol=1e-10)


class TestKrige:
    def test_interpolates_without_nugget(self):
        rng = np.random.default_rng(8)
        locs = rng.uniform(size=(10, 2))
        e = rng.normal(size=10)
        model = CovarianceModel("exp", {"sigma2": 1.0, "phi": 0.5, "tau2": 0.0})
        np.testing.assert_allclose(krige(model, e, locs, locs), e, atol=1e-8)
        np.testing.assert_allclose(krige(model, e, locs, locs[[3]]), e[[3]], atol=1e-8)

    def test_far_away(self):
        rng = np.random.default_rng(9)
        locs = rng.uniform(size=(10, 2))
        model = CovarianceModel("exp", {"sigma2": 1.0, "phi": 0.1, "tau2": 0.2})
        out = krige(model, rng.normal(size=10), locs, np.array([[1e4, 1e4]]))
        assert abs(out[0]) < 1e-300 or out[0] == 0.0

    def test_joint_gaussian_conditioning(self):
        rng = np.random.default_rng(10)
        n, m = 20, 6
        locs = rng.uniform(size=(n, 2))
        new = rng.uniform(size=(m, 2))
        e = rng.normal(size=n)
        s2, phi, t2 = 1.3, 0.4, 0.25
        # joint covariance of (z_train, z_new, eps) mapped to (e, z_new)
        all_locs = np.vstack([locs, new])
        cz = s2 * np.exp(-cdist(all_locs, all_locs) / phi)
        joint = np.zeros((2 * n + m, 2 * n + m))
        joint[: n + m, : n + m] = cz
        joint[n + m:, n + m:] = t2 * np.eye(n)
        lin = np.zeros((n + m, 2 * n + m))
        lin[:n, :n] = np.eye(n)
        lin[:n, n + m:] = np.eye(n)
        lin[n:, n: n + m] = np.eye(m)
        cov = lin @ joint @ lin.T
        expected = cov[n:, :n] @ np.linalg.solve(cov[:n, :n], e)
        model = CovarianceModel("exp", {"sigma2": s2, "phi": phi, "tau2": t2})
        np.testing.assert_allclose(krige(model, e, locs, new), expected, atol=1e-10)

    def test_dimension_mismatch(self):
        model = CovarianceModel("exp", {"sigma2": 1.0, "phi": 1.0, "tau2": 0.1})
        with pytest.raises(ValueError):
            krige(model, np.zeros(3), np.zeros((4, 2)), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            krige(model, np.zeros(4), np.zeros((4, 2)), np.zeros((1, 3)))

    def test_ar1_indices(self):
        e = np.array([1.0, -2.0, 4.0])
        model = CovarianceModel("ar1", {"rho": 0.5, "sigma": 1.0})
        np.testing.assert_allclose(krige(model, e, np.arange(1, 4), [1, 2, 3, 4, 5]),
                                   [0.0, 0.5, -1.0, 2.0, 1.0])
        with pytest.raises(ValueError):
            krige(model, e, np.arange(1, 4), [1.5])

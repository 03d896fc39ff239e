# Maximum likelihood for the error process, then kriging.
import numpy as np

from cbartgp import CovarianceModel, fit_gp_mle, gen_spatial, gp_loglik, krige

# AR(1): a long series pins rho down
rng = np.random.default_rng(1)
eps = rng.normal(0, 0.1, 2000)
eta = np.zeros(2000)
eta[0] = eps[0]
for i in range(1, 2000):
    eta[i] = 0.8 * eta[i - 1] + eps[i]
fit = fit_gp_mle(eta, "ar1")
print("AR(1) fit:", {k: round(v, 4) for k, v in fit.theta.items()}, "converged:", fit.converged)

# exponential field plus nugget on the unit square
d = gen_spatial(3, n_train=300, n_test=0, seed=2)
fit = fit_gp_mle(d.eta, "exp", d.locations)
truth = CovarianceModel("exp", {"sigma2": 3.0, "phi": 6.0, "tau2": 1.0}, d.locations)
print("spatial fit:", {k: round(v, 3) for k, v in fit.theta.items()})
print(f"loglik at fit {fit.loglik:.2f}, at truth {gp_loglik(d.eta, truth):.2f}")
# sigma2 and phi trade off when the range exceeds the domain; tau2 is well identified

# kriging: near a training site the prediction follows it, far away it decays to 0
new = np.vstack([d.locations[:3] + 1e-3, [[50.0, 50.0]]])
print("residuals at 3 sites:", np.round(d.eta[:3], 3))
print("kriged next to them :", np.round(krige(fit.model, d.eta, d.locations, new[:3]), 3))
print("kriged far away     :", krige(fit.model, d.eta, d.locations, new[3:]))

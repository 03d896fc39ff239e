# The collapsed likelihood of a tree under correlated errors.
#
# Integrating out the leaf means gives R ~ N(0, Sigma + tau^2 D D').  The
# library computes it through b x b quantities only; here we check it
# against the dense density and look at a birth move's ratio.
import math

import numpy as np
from scipy.stats import multivariate_normal

from cbartgp import Tree, build_ar_precision, build_dummy, log_marginal, propose
from cbartgp.cbart import log_marginal_likelihood_ratio

rng = np.random.default_rng(0)
n, tau = 15, 0.5
X = rng.uniform(size=(n, 1))
R = np.where(X[:, 0] < 0.5, -1.0, 1.0) + rng.normal(0, 0.3, n)
view = build_ar_precision(0.6, 0.3, n)

tree = Tree()
design = build_dummy(tree, X)
dense = multivariate_normal(np.zeros(n), np.linalg.inv(view.toarray()) + tau**2).logpdf(R)
print(f"root only: library {log_marginal(R, design, view, tau):.10f}  dense {dense:.10f}")

# A single root split is always a birth.
prop = propose(tree, design, X, rng)
print(f"proposed split x <= {prop.cut:.3f}")
ratio = log_marginal_likelihood_ratio(R, view, design, prop, tau)
diff = log_marginal(R, prop.resulting, view, tau) - log_marginal(R, design, view, tau)
print(f"log ratio {ratio:.10f}  difference of log marginals {diff:.10f}")
print(f"the data favour the split by a factor of {math.exp(ratio):.3g}")

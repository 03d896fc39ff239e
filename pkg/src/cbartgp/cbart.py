"""Correlated BART: backfitting MCMC for a sum of trees under ``eps ~ N(0, Sigma)``.

A single tree is the linear model ``R = D mu + eps`` with prior
``mu ~ N(0, tau^2 I)``.  Everything the sampler needs reduces to

* ``s = D^T Q R``      per-leaf sums of ``omega = Q R``,
* ``A = tau^{-2} I + D^T Q D``   a small b x b matrix,

where ``Q = Sigma^{-1}``.  The birth/death acceptance ratio is assembled
from these two quantities for the current and proposed partitions without
touching any n x n object, so the per-proposal cost is linear in the number
of stored precision entries.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy import stats

from ._linalg import gaussian_draw, inv_logdet, merge_gram, split_merge_terms
from .covariance import CovarianceKind, PrecisionView, build_iid_precision
from .tree import (
    DummyDesign,
    Proposal,
    ProposalError,
    Tree,
    apply_proposal,
    cutpoint_grid,
    propose,
)

__all__ = [
    "CbartConfig",
    "CbartFit",
    "ConjugateSolve",
    "conjugate_solve",
    "log_marginal",
    "log_marginal_likelihood_ratio",
    "marginal_likelihood_ratio",
    "draw_leaf_means",
    "run_cbart",
    "predict_f",
    "default_tau",
]

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CbartConfig:
    """Sampler settings.

    ``tau`` is the leaf-prior standard deviation in the units of ``Y``;
    when ``None`` it is calibrated as ``0.5 / (k sqrt(m))`` on ``Y``
    rescaled to ``[-0.5, 0.5]``.  ``estimate_sigma`` adds a Gibbs step for
    ``sigma^2`` and is only valid with an i.i.d. precision.
    """

    m: int = 50
    n_iter: int = 1000
    burn_in: int = 500
    tau: float | None = None
    k: float = 2.0
    alpha: float = 0.95
    beta: float = 2.0
    estimate_sigma: bool = False
    sigma_nu: float = 3.0
    sigma_q: float = 0.90
    rng_seed: int | None = None
    keep_trees: bool = True

    def __post_init__(self):
        if self.m < 1 or self.n_iter < 1 or self.burn_in < 0:
            raise ValueError("need m >= 1, n_iter >= 1, burn_in >= 0")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.k <= 0:
            raise ValueError("k must be positive")


@dataclass
class ConjugateSolve:
    """``A = Q_prior + D^T Sigma^{-1} D`` with ``v = A^{-1} D^T Sigma^{-1} R``."""

    A: np.ndarray
    v: np.ndarray
    logdet_A: float
    chol: np.ndarray = field(repr=False)


@dataclass
class CbartFit:
    """Posterior output of :func:`run_cbart`.

    ``draws`` holds ``f(X)`` for every kept iteration (in the units of
    ``Y``); ``forests`` holds the matching tree ensembles in flattened form
    when ``keep_trees`` was set.
    """

    draws: np.ndarray
    posterior_mean_f: np.ndarray
    acceptance_rates: dict
    config: CbartConfig
    y_offset: float
    y_scale: float
    tau_std: float
    forests: list | None = field(default=None, repr=False)
    sigma_draws: np.ndarray | None = None
    elapsed: float = 0.0

    @property
    def tree_snapshots(self):
        return self.forests


def default_tau(m: int, k: float = 2.0) -> float:
    """Leaf-prior sd on the ``[-0.5, 0.5]`` scale."""
    return 0.5 / (k * math.sqrt(m))


def _chol(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:  # tau > 0 makes A positive definite
        raise np.linalg.LinAlgError(f"internal fault: A not positive definite ({exc})") from exc


def _inv_logdet(a: np.ndarray):
    inv, logdet, ok = inv_logdet(a)
    if not ok:
        raise np.linalg.LinAlgError("internal fault: A not positive definite")
    return inv, logdet


def conjugate_solve(R: np.ndarray, design: DummyDesign, precision: PrecisionView, tau: float,
                    omega: np.ndarray | None = None, gram: np.ndarray | None = None) -> ConjugateSolve:
    if omega is None:
        omega = precision.matvec(R)
    if gram is None:
        gram = precision.leaf_gram(design.assignment, design.b)
    a = gram + np.eye(design.b) / tau**2
    s = np.bincount(design.assignment, weights=omega, minlength=design.b)
    chol = _chol(a)
    v = scipy.linalg.cho_solve((chol, True), s, check_finite=False)
    return ConjugateSolve(a, v, 2.0 * float(np.sum(np.log(np.diag(chol)))), chol)


def log_marginal(R: np.ndarray, design: DummyDesign, precision: PrecisionView, tau: float) -> float:
    """``log p(R | D)`` after integrating out ``mu ~ N(0, tau^2 I)``."""
    R = np.asarray(R, dtype=float)
    if len(R) != design.n or precision.n != design.n:
        raise ValueError("R, design and precision disagree on n")
    omega = precision.matvec(R)
    sol = conjugate_solve(R, design, precision, tau, omega=omega)
    s = np.bincount(design.assignment, weights=omega, minlength=design.b)
    n, b = design.n, design.b
    return (-0.5 * n * _LOG_2PI - 0.5 * precision.logdet_sigma - b * math.log(tau)
            - 0.5 * sol.logdet_A + 0.5 * (float(s @ sol.v) - float(R @ omega)))


def _ratio_terms(R, precision, proposal: Proposal, tau, omega, gram):
    """Log marginal-likelihood ratio plus the gram matrix of the new partition."""
    fine, coarse = proposal.fine, proposal.coarse
    mm = proposal.merge_map
    bf = fine.b
    if proposal.kind == "birth":
        g_c = precision.leaf_gram(coarse.assignment, coarse.b) if gram is None else gram
        g_f = g_c[mm][:, mm]
        k, r = proposal.split_pos, proposal.new_pos
        row_l = precision.row_group_sums(proposal.left_idx, fine.assignment, bf)
        row_r = precision.row_group_sums(proposal.right_idx, fine.assignment, bf)
        g_f[k, :] = row_l
        g_f[:, k] = row_l
        g_f[r, :] = row_r
        g_f[:, r] = row_r
        g_new = g_f
    else:
        g_f = precision.leaf_gram(fine.assignment, bf) if gram is None else gram
        g_c = merge_gram(g_f, mm, coarse.b)
        g_new = g_c

    if omega is None:
        omega = precision.matvec(R)
    s_f = np.bincount(fine.assignment, weights=omega, minlength=bf)
    ld_f, ld_c, u, ok = split_merge_terms(g_f, g_c, mm, s_f, 1.0 / tau**2)
    if not ok:
        raise np.linalg.LinAlgError("internal fault: A not positive definite")
    if proposal.kind == "birth":
        log_ratio = -math.log(tau) + 0.5 * (ld_c - ld_f) + 0.5 * u
    else:
        log_ratio = math.log(tau) + 0.5 * (ld_f - ld_c) - 0.5 * u
    return log_ratio, g_new


def log_marginal_likelihood_ratio(R: np.ndarray, precision: PrecisionView, current: DummyDesign,
                                  proposal: Proposal, tau: float, omega: np.ndarray | None = None,
                                  gram: np.ndarray | None = None) -> float:
    """``log p(R | D_new) - log p(R | D_current)`` for a birth or death.

    Only the rows of the two affected leaves are read from the precision
    matrix; the rest of the new ``D^T Q D`` is copied from ``gram`` (the
    current partition's, computed here if not given).  The quadratic term
    uses the difference between the new inverse and the current inverse
    expanded so the split leaf's row/column is duplicated for both children,
    applied to per-leaf sums of ``omega = Q R``.
    """
    if proposal.current is not current and (
            current.b != proposal.current.b or current.n != proposal.current.n):
        raise ValueError("proposal was not generated from this design")
    if len(R) != current.n or precision.n != current.n:
        raise ValueError("R, design and precision disagree on n")
    return _ratio_terms(R, precision, proposal, tau, omega, gram)[0]


def marginal_likelihood_ratio(R, precision, current, proposal, tau, omega=None, gram=None) -> float:
    """``p(R | D_new) / p(R | D_current)``; see :func:`log_marginal_likelihood_ratio`."""
    return math.exp(log_marginal_likelihood_ratio(R, precision, current, proposal, tau, omega, gram))


def draw_leaf_means(R: np.ndarray, design: DummyDesign, precision: PrecisionView, tau: float,
                    rng: np.random.Generator, size: int | None = None, omega=None, gram=None) -> np.ndarray:
    """Draw ``mu | R ~ N(A^{-1} D^T Q R, A^{-1})``.

    Returns shape ``(b,)``, or ``(size, b)`` when ``size`` is given.
    """
    sol = conjugate_solve(R, design, precision, tau, omega=omega, gram=gram)
    b = design.b
    z = rng.standard_normal(b if size is None else (b, size))
    noise = scipy.linalg.solve_triangular(sol.chol, z, lower=True, trans="T", check_finite=False)
    if size is None:
        return sol.v + noise
    return (sol.v[:, None] + noise).T


class _Sampler:
    """Mutable state of one CBART chain on the standardized scale."""

    def __init__(self, y_std, X, precision, config: CbartConfig, tau_std, rng):
        self.y = y_std
        self.X = X
        self.cfg = config
        self.tau = tau_std
        self.rng = rng
        self.grid = cutpoint_grid(X)
        n, m = len(y_std), config.m
        self._precision = precision
        self.grams = [None] * m
        start = float(np.mean(y_std)) / m
        self.trees = []
        self.designs = []
        for _ in range(m):
            tree = Tree()
            tree.root.mu = start
            self.trees.append(tree)
            self.designs.append(DummyDesign(np.zeros(n, dtype=np.int64), 1, [np.arange(n)]))
        self.g = np.full((m, n), start)
        self.fsum = self.g.sum(axis=0)
        self.proposed = {"birth": 0, "death": 0}
        self.accepted = {"birth": 0, "death": 0}

    @property
    def precision(self) -> PrecisionView:
        return self._precision

    @precision.setter
    def precision(self, value: PrecisionView):
        self._precision = value
        self.grams = [None] * self.cfg.m

    def step_tree(self, j: int) -> np.ndarray:
        """Update tree ``j``; returns the partial residual it was fit to."""
        tree, design, prec = self.trees[j], self.designs[j], self.precision
        g_old = self.g[j]
        R = self.y - self.fsum + g_old
        omega = prec.matvec(R)
        gram = self.grams[j]
        if gram is None:
            gram = prec.leaf_gram(design.assignment, design.b)
        try:
            prop = propose(tree, design, self.X, self.rng, self.grid, self.cfg.alpha, self.cfg.beta)
        except ProposalError:
            prop = None
            self.proposed["birth"] += 1
        if prop is not None:
            self.proposed[prop.kind] += 1
            log_alpha = prop.log_kernel_ratio + prop.log_prior_ratio
            if log_alpha > -math.inf:
                log_lik, gram_new = _ratio_terms(R, prec, prop, self.tau, omega, gram)
                log_alpha += log_lik
                if math.log(self.rng.random()) < log_alpha:
                    design = apply_proposal(tree, prop)
                    self.designs[j] = design
                    gram = gram_new
                    self.accepted[prop.kind] += 1
            else:
                self.rng.random()
        b = design.b
        a = gram.copy()
        a.flat[:: b + 1] += 1.0 / self.tau**2
        s = np.bincount(design.assignment, weights=omega, minlength=b)
        _, mu, ok = gaussian_draw(a, s, self.rng.standard_normal(b))
        if not ok:
            raise np.linalg.LinAlgError("internal fault: A not positive definite")
        for leaf, v in zip(tree.leaves, mu):
            leaf.mu = float(v)
        self.grams[j] = gram
        g_new = mu[design.assignment]
        self.fsum += g_new - g_old
        self.g[j] = g_new
        return R

    def sweep(self):
        for j in range(self.cfg.m):
            self.step_tree(j)
        self.fsum = self.g.sum(axis=0)

    def snapshot(self):
        return _flatten_forest(self.trees)


def _flatten_forest(trees):
    """Concatenate flattened trees into one node table with a root per tree."""
    parts = [t.flatten() for t in trees]
    sizes = np.array([len(p[0]) for p in parts])
    roots = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int32)
    var = np.concatenate([p[0] for p in parts])
    cut = np.concatenate([p[1] for p in parts])
    left = np.concatenate([np.where(p[2] >= 0, p[2] + r, -1) for p, r in zip(parts, roots)]).astype(np.int32)
    right = np.concatenate([np.where(p[3] >= 0, p[3] + r, -1) for p, r in zip(parts, roots)]).astype(np.int32)
    mu = np.concatenate([p[4] for p in parts])
    return var, cut, left, right, mu, roots


def _eval_forest(forest, X: np.ndarray) -> np.ndarray:
    """Sum over trees of the leaf values reached by each row of ``X``."""
    var, cut, left, right, mu, roots = forest
    n = len(X)
    cur = np.repeat(roots[:, None], n, axis=1)
    rows = np.broadcast_to(np.arange(n), cur.shape)
    while True:
        v = var[cur]
        active = v >= 0
        if not active.any():
            break
        xv = X[rows[active], v[active]]
        c = cur[active]
        cur[active] = np.where(xv <= cut[c], left[c], right[c])
    return mu[cur].sum(axis=0)


def _sigma_prior(y_std, X, nu, q):
    """``lambda`` for ``sigma^2 ~ nu lambda / chi2_nu`` with ``P(sigma < sigma_hat) = q``."""
    n = len(y_std)
    design = np.column_stack([np.ones(n), X])
    if n > design.shape[1] + 1:
        coef, *_ = np.linalg.lstsq(design, y_std, rcond=None)
        resid = y_std - design @ coef
        sigma_hat = math.sqrt(resid @ resid / (n - design.shape[1]))
    else:
        sigma_hat = float(np.std(y_std))
    sigma_hat = max(sigma_hat, 1e-8)
    lam = sigma_hat**2 * stats.chi2.ppf(1.0 - q, nu) / nu
    return sigma_hat, lam


def run_cbart(Y: np.ndarray, X: np.ndarray, precision: PrecisionView | None, config: CbartConfig,
              callback=None) -> CbartFit:
    """Fit the sum-of-trees mean of ``Y`` given ``X`` with error precision ``precision``.

    ``Y`` is rescaled to ``[-0.5, 0.5]`` internally (and the precision by
    the squared range); all returned quantities are on the original scale.
    With ``config.estimate_sigma`` the precision must be i.i.d. (or
    ``None``) and ``sigma^2`` gets a scaled inverse chi-square Gibbs update
    each sweep.  ``callback(iteration, sampler)`` is invoked after every
    sweep when given.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(Y)
    if X.shape[0] != n:
        raise ValueError("X and Y disagree on n")
    if n == 0 or X.shape[1] == 0:
        raise ValueError("empty data")
    if config.estimate_sigma:
        if precision is not None and precision.kind is not CovarianceKind.IID:
            raise ValueError("estimate_sigma requires an i.i.d. precision")
    elif precision is None:
        raise ValueError("a precision is required unless estimate_sigma is set")
    if precision is not None and precision.n != n:
        raise ValueError("precision size does not match Y")

    t0 = time.perf_counter()
    y_min, y_max = float(Y.min()), float(Y.max())
    y_range = y_max - y_min if y_max > y_min else 1.0
    y_std = (Y - y_min) / y_range - 0.5
    tau_std = default_tau(config.m, config.k) if config.tau is None else config.tau / y_range
    rng = np.random.default_rng(config.rng_seed)

    if config.estimate_sigma:
        sigma_hat, lam = _sigma_prior(y_std, X, config.sigma_nu, config.sigma_q)
        sigma2 = sigma_hat**2
        unit = build_iid_precision(1.0, n)
        work_prec = unit.scaled(1.0 / sigma2)
    else:
        work_prec = precision.scaled(y_range**2)

    sampler = _Sampler(y_std, X, work_prec, config, tau_std, rng)
    draws = np.empty((config.n_iter, n))
    sigma_draws = np.empty(config.n_iter) if config.estimate_sigma else None
    forests = [] if config.keep_trees else None
    total = config.burn_in + config.n_iter
    for it in range(total):
        sampler.sweep()
        if config.estimate_sigma:
            resid = y_std - sampler.fsum
            sigma2 = (config.sigma_nu * lam + resid @ resid) / rng.chisquare(config.sigma_nu + n)
            sampler.precision = unit.scaled(1.0 / sigma2)
        if it >= config.burn_in:
            k = it - config.burn_in
            draws[k] = (sampler.fsum + 0.5) * y_range + y_min
            if sigma_draws is not None:
                sigma_draws[k] = math.sqrt(sigma2) * y_range
            if forests is not None:
                forests.append(sampler.snapshot())
        if callback is not None:
            callback(it, sampler)

    rates = {kind: sampler.accepted[kind] / max(sampler.proposed[kind], 1) for kind in ("birth", "death")}
    rates["overall"] = sum(sampler.accepted.values()) / max(sum(sampler.proposed.values()), 1)
    elapsed = time.perf_counter() - t0
    log.debug("run_cbart n=%d m=%d iters=%d in %.1fs", n, config.m, total, elapsed)
    return CbartFit(draws, draws.mean(axis=0), rates, replace(config), y_min + 0.5 * y_range, y_range,
                    tau_std, forests, sigma_draws, elapsed)


def predict_f(fit: CbartFit, X_new: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Posterior mean of ``f`` at ``X_new``, averaging over the kept ensembles."""
    if not fit.forests:
        raise ValueError("fit has no stored trees; rerun with keep_trees=True")
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[:, None]
    total = np.zeros(len(X_new))
    for start in range(0, len(fit.forests), chunk):
        block = fit.forests[start:start + chunk]
        merged = _merge_forests(block)
        total += _eval_forest(merged, X_new)
    return total / len(fit.forests) * fit.y_scale + fit.y_offset


def _merge_forests(forests):
    offsets = np.concatenate(([0], np.cumsum([len(f[0]) for f in forests])[:-1]))
    var = np.concatenate([f[0] for f in forests])
    cut = np.concatenate([f[1] for f in forests])
    left = np.concatenate([np.where(f[2] >= 0, f[2] + o, -1) for f, o in zip(forests, offsets)])
    right = np.concatenate([np.where(f[3] >= 0, f[3] + o, -1) for f, o in zip(forests, offsets)])
    mu = np.concatenate([f[4] for f in forests])
    roots = np.concatenate([f[5] + o for f, o in zip(forests, offsets)])
    return var, cut, left, right, mu, roots

"""Maximum-likelihood Gaussian process fits to residual vectors, and kriging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.spatial.distance import pdist

from .covariance import (
    CovarianceKind,
    CovarianceModel,
    FactorizationError,
    cholesky_with_jitter,
    spatial_kernel_matrix,
)

__all__ = ["GpFit", "gp_loglik", "fit_gp_mle", "structured_component", "krige"]

log = logging.getLogger(__name__)

RHO_MAX = 0.999
POS_MIN, POS_MAX = 1e-6, 1e6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpFit:
    """Result of :func:`fit_gp_mle`.

    ``fitted_struct`` is the structured part of the residuals explained by
    the fitted process: one-step predictions ``rho * e_{i-1}`` for AR(1),
    the smoothed field ``K (K + tau2 I)^{-1} e`` for spatial kinds.
    ``start_logliks`` records the log-likelihood at every multi-start
    initial point.
    """

    model: CovarianceModel
    loglik: float
    fitted_struct: np.ndarray
    converged: bool
    evaluations: int
    start_logliks: tuple = field(default=(), repr=False)

    @property
    def theta(self) -> dict:
        return dict(self.model.params)


def gp_loglik(e: np.ndarray, model: CovarianceModel) -> float:
    """Zero-mean Gaussian log-likelihood ``-(n log 2pi + log|Sigma| + e' Sigma^{-1} e) / 2``."""
    e = np.asarray(e, dtype=float)
    n = len(e)
    if model.kind.is_spatial:
        sigma = spatial_kernel_matrix(model, model.locations)
        if sigma.shape[0] != n:
            raise ValueError("residuals and locations disagree on n")
        sigma[np.diag_indices(n)] += float(model.params["tau2"])
        chol, _ = cholesky_with_jitter(sigma)
        white = scipy.linalg.solve_triangular(chol, e, lower=True, check_finite=False)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return float(-0.5 * (n * _LOG_2PI + logdet + white @ white))
    view = model.precision(n)
    return float(-0.5 * (n * _LOG_2PI + view.logdet_sigma + view.quad(e)))


def _clip_pos(v):
    return np.clip(v, POS_MIN, POS_MAX)


class _Param:
    """Maps unconstrained optimizer coordinates to a model in the admissible box."""

    def __init__(self, kind: CovarianceKind, locations, nu):
        self.kind = kind
        self.locations = locations
        self.nu = nu

    def model(self, t) -> CovarianceModel:
        if self.kind is CovarianceKind.AR1:
            rho = float(RHO_MAX * expit(t[0]))
            sigma = float(math.sqrt(_clip_pos(math.exp(2.0 * t[1]))))
            return CovarianceModel(self.kind, {"rho": rho, "sigma": sigma}, self.locations)
        s2, phi, tau2 = (float(v) for v in _clip_pos(np.exp(np.clip(t, -50.0, 50.0))))
        params = {"sigma2": s2, "phi": phi, "tau2": tau2}
        if self.kind is CovarianceKind.SPATIAL_MATERN:
            params["nu"] = self.nu
        return CovarianceModel(self.kind, params, self.locations)

    def initial(self, e) -> np.ndarray:
        if self.kind is CovarianceKind.AR1:
            lag = e[:-1] @ e[:-1]
            rho0 = float(np.clip(e[1:] @ e[:-1] / lag if lag > 0 else 0.0, 0.01, 0.98))
            innov = np.concatenate(([e[0]], e[1:] - rho0 * e[:-1]))
            sigma0 = max(float(np.sqrt(np.mean(innov**2))), 1e-3)
            return np.array([logit(rho0 / RHO_MAX), math.log(sigma0)])
        v = max(float(np.var(e)), 1e-6)
        dmax = float(pdist(self.locations).max()) if len(self.locations) > 1 else 1.0
        return np.log([0.5 * v, max(dmax / 3.0, 1e-3), 0.5 * v])


def fit_gp_mle(e: np.ndarray, kind, locations: np.ndarray | None = None, nu: float = 0.5,
               n_starts: int = 5, seed: int = 0, tol: float = 1e-6, max_evals: int = 4000) -> GpFit:
    """Maximize :func:`gp_loglik` over the parameters of ``kind``.

    Nelder-Mead on logit(rho / 0.999) and log scale parameters, from a
    method-of-moments start plus ``n_starts - 1`` jittered copies; the best
    optimum is returned.  Supported kinds: ``ar1``, ``exp``, ``matern``.
    """
    e = np.asarray(e, dtype=float)
    kind = CovarianceKind(kind)
    if kind not in (CovarianceKind.AR1, CovarianceKind.SPATIAL_EXP, CovarianceKind.SPATIAL_MATERN):
        raise ValueError(f"MLE not available for kind {kind.value!r}")
    n = len(e)
    if n < 10:
        raise ValueError("need at least 10 residuals")
    if kind.is_spatial:
        if locations is None:
            raise ValueError("spatial fit requires locations")
        locations = np.asarray(locations, dtype=float)
        if len(locations) != n:
            raise ValueError("residuals and locations disagree on n")
    elif locations is None:
        locations = np.arange(1.0, n + 1.0)

    par = _Param(kind, locations, nu)

    def objective(t):
        try:
            return -gp_loglik(e, par.model(t))
        except (FactorizationError, np.linalg.LinAlgError, ValueError):
            return 1e300

    rng = np.random.default_rng(seed)
    t0 = par.initial(e)
    starts = [t0] + [t0 + rng.normal(0.0, 0.5, size=t0.shape) for _ in range(n_starts - 1)]
    best, evaluations, converged, start_ll = None, 0, False, []
    for start in starts:
        start_ll.append(-objective(start))
        res = minimize(objective, start, method="Nelder-Mead",
                       options={"xatol": tol, "fatol": 1e-9, "maxfev": max_evals, "maxiter": max_evals})
        evaluations += res.nfev + 1
        converged |= bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    model = par.model(best.x)
    if not converged:
        log.warning("GP MLE (%s) did not converge from any start", kind.value)
    return GpFit(model, -float(best.fun), structured_component(e, model), converged, evaluations,
                 tuple(start_ll))


def structured_component(e: np.ndarray, model: CovarianceModel) -> np.ndarray:
    """Part of ``e`` attributed to the dependence structure under ``model``."""
    e = np.asarray(e, dtype=float)
    if model.kind is CovarianceKind.AR1:
        out = np.zeros_like(e)
        out[1:] = float(model.params["rho"]) * e[:-1]
        return out
    if model.kind.is_spatial:
        k = spatial_kernel_matrix(model, model.locations)
        sigma = k.copy()
        sigma[np.diag_indices(len(e))] += float(model.params["tau2"])
        chol, _ = cholesky_with_jitter(sigma)
        return k @ scipy.linalg.cho_solve((chol, True), e, check_finite=False)
    raise ValueError(f"no structured component for kind {model.kind.value!r}")


def krige(fit: GpFit | CovarianceModel, residuals: np.ndarray, train_locations: np.ndarray,
          new_locations: np.ndarray) -> np.ndarray:
    """Predict the structured component at ``new_locations``.

    Spatial kinds use simple kriging ``k*' (K + tau2 I)^{-1} e``.  For AR(1)
    the labels are integer time indices into the training series (1-based):
    an index ``t <= n`` gets the one-step value ``rho * e_{t-1}`` and an index
    ``t > n`` the forecast ``rho^(t-n) * e_n``.
    """
    model = fit.model if isinstance(fit, GpFit) else fit
    residuals = np.asarray(residuals, dtype=float)
    if model.kind.is_spatial:
        train = np.atleast_2d(np.asarray(train_locations, dtype=float))
        new = np.atleast_2d(np.asarray(new_locations, dtype=float))
        if len(train) != len(residuals):
            raise ValueError("residuals and training locations disagree on n")
        if new.shape[1] != train.shape[1]:
            raise ValueError("location dimension mismatch")
        sigma = spatial_kernel_matrix(model, train)
        sigma[np.diag_indices(len(train))] += float(model.params["tau2"])
        chol, _ = cholesky_with_jitter(sigma)
        weights = scipy.linalg.cho_solve((chol, True), residuals, check_finite=False)
        return spatial_kernel_matrix(model, new, train) @ weights
    if model.kind is CovarianceKind.AR1:
        rho = float(model.params["rho"])
        n = len(residuals)
        idx = np.asarray(new_locations, dtype=float).ravel()
        if np.any(idx != np.round(idx)) or np.any(idx < 1):
            raise ValueError("AR(1) prediction needs positive integer time indices")
        idx = idx.astype(np.int64)
        out = np.zeros(len(idx))
        inside = idx <= n
        prev = idx[inside] - 2
        out[inside] = np.where(prev >= 0, rho * residuals[np.maximum(prev, 0)], 0.0)
        ahead = idx[~inside] - n
        out[~inside] = rho**ahead * residuals[-1]
        return out
    raise ValueError(f"prediction not supported for kind {model.kind.value!r}")

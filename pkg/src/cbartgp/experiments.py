"""Seeded replication drivers for the 1-D and spatial simulation studies.

Each driver runs one independent pipeline per seed and returns a list of
per-seed records (plain dicts of floats, ready for JSON) together with an
aggregate summary.  Seeds fan out over a thread pool whose size is capped by
the ``CBARTGP_THREADS`` environment variable (default 1).
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .cbart import CbartConfig, predict_f, run_cbart
from .covariance import build_ar_precision
from .simgen import gen_ar1_cubic, gen_spatial
from .twostage import DEFAULT_WEIGHTS, fit_iid, predict_y, run_two_stage

__all__ = [
    "EXPERIMENTS",
    "worker_count",
    "run_replicates",
    "fig2_replicate",
    "sec32_replicate",
    "sim1d_replicate",
    "spatial_replicate",
    "summarize",
]

log = logging.getLogger(__name__)


def worker_count() -> int:
    raw = os.environ.get("CBARTGP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _mse(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.mean(d * d))


def _centered_mse(a, b) -> float:
    # f and the field's mean are not separately identified; drop the shared offset
    d = a - b
    return float(np.mean((d - d.mean()) ** 2))


def _config(config: CbartConfig | None, seed: int) -> CbartConfig:
    return replace(config or CbartConfig(), rng_seed=seed)


def fig2_replicate(seed: int, config: CbartConfig | None = None, n: int = 200, rho: float = 0.8,
                   sigma: float = 0.1) -> dict:
    """CBART under the true AR(1) covariance against i.i.d. BART, MSE of f-hat at the training x."""
    data = gen_ar1_cubic(n=n, rho=rho, sigma=sigma, seed=seed)
    cfg = _config(config, seed)
    cbart = run_cbart(data.y, data.X, build_ar_precision(rho, sigma, n), cfg)
    bart = fit_iid(data.y, data.X, cfg)
    return {
        "seed": seed,
        "mse_cbart": _mse(cbart.posterior_mean_f, data.f_true),
        "mse_bart": _mse(bart.posterior_mean_f, data.f_true),
        "bart_sigma": float(np.mean(bart.sigma_draws)),
    }


def sec32_replicate(seed: int, config: CbartConfig | None = None, weights=DEFAULT_WEIGHTS, n: int = 200,
                    rho: float = 0.8, sigma: float = 0.1) -> dict:
    """Two-stage estimation on one AR(1) dataset: SS table, selected weight and parameters."""
    data = gen_ar1_cubic(n=n, rho=rho, sigma=sigma, seed=seed)
    res = run_two_stage(data.y, data.X, gp_kind="ar1", weights=weights, cbart_config=_config(config, seed))
    sel = res.selected
    return {
        "seed": seed,
        "weights": [r.w for r in res.records],
        "ss_eta_w": [r.ss_eta_w for r in res.records],
        "ss_eta_cbart": [r.ss_eta_cbart for r in res.records],
        "ss_delta": [r.ss_delta for r in res.records],
        "rho_hat": [r.theta_hat["rho"] for r in res.records],
        "sigma_hat": [r.theta_hat["sigma"] for r in res.records],
        "converged": [r.converged for r in res.records],
        "selected_k": res.selected_k,
        "selected_w": sel.w,
        "selected_rho": sel.theta_hat["rho"],
        "selected_sigma": sel.theta_hat["sigma"],
        "interior_minimum": 0 < res.selected_k < len(res.records) - 1,
        "mse_cbart": _mse(sel.cbart_fit.posterior_mean_f, data.f_true),
        "mse_bart": _mse(res.iid_fit.posterior_mean_f, data.f_true),
    }


def sim1d_replicate(seed: int, config: CbartConfig | None = None, weights=DEFAULT_WEIGHTS) -> dict:
    """Same design as :func:`sec32_replicate`, reported as MSE of f-hat for CBART-GP and BART."""
    rec = sec32_replicate(seed, config, weights)
    keys = ("seed", "mse_cbart", "mse_bart", "selected_w", "selected_rho", "selected_sigma")
    return {k: rec[k] for k in keys}


def spatial_replicate(seed: int, config: CbartConfig | None = None, scenario: int = 3, weights=DEFAULT_WEIGHTS,
                      n_train: int = 200, n_test: int = 100, theta=(3.0, 6.0, 1.0), gp_kind: str = "exp") -> dict:
    """CBART-GP against BART on one spatial dataset, both MSEs measured on the test split.

    Estimation compares ``f-hat(x*)`` with the true ``f(x*)``; BART sees only
    ``x`` here.  Prediction compares ``y-hat*`` with the held-out ``y*``;
    BART predicts from ``(x, s1, s2)`` while CBART-GP adds the kriged field
    to ``f-hat_CBART(x*)``.
    """
    data = gen_spatial(scenario=scenario, n_train=n_train, n_test=n_test, theta=theta, seed=seed)
    train, test = data.train(), data.test()
    cfg = _config(config, seed)
    res = run_two_stage(train.y, train.X, train.locations, gp_kind=gp_kind, weights=weights, cbart_config=cfg)
    yhat, fhat, _ = predict_y(res, test.X, test.locations)
    f_bart = predict_f(res.iid_fit, test.X)
    xs_train = np.column_stack([train.X, train.locations])
    xs_test = np.column_stack([test.X, test.locations])
    bart_xs = fit_iid(train.y, xs_train, replace(cfg, rng_seed=cfg.rng_seed + 1000))
    y_bart = predict_f(bart_xs, xs_test)
    est_cbart, est_bart = _mse(fhat, test.f_true), _mse(f_bart, test.f_true)
    pred_cbart, pred_bart = _mse(yhat, test.y), _mse(y_bart, test.y)
    sel = res.selected
    return {
        "seed": seed,
        "scenario": scenario,
        "est_mse_cbart": est_cbart,
        "est_mse_bart": est_bart,
        "pred_mse_cbart_gp": pred_cbart,
        "pred_mse_bart": pred_bart,
        "est_reduction": (est_bart - est_cbart) / est_bart,
        "est_mse_cbart_centered": _centered_mse(fhat, test.f_true),
        "est_mse_bart_centered": _centered_mse(f_bart, test.f_true),
        "pred_reduction": (pred_bart - pred_cbart) / pred_bart,
        "selected_w": sel.w,
        "theta_hat": sel.theta_hat,
        "ss_delta": [r.ss_delta for r in res.records],
    }


EXPERIMENTS = {
    "fig2": fig2_replicate,
    "sec32": sec32_replicate,
    "sim1d": sim1d_replicate,
    "spatial": spatial_replicate,
}


def run_replicates(name: str, seeds, config: CbartConfig | None = None, workers: int | None = None,
                   **kwargs) -> list:
    """Run experiment ``name`` for every seed; records come back in seed order."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    fn = EXPERIMENTS[name]
    seeds = [int(s) for s in seeds]
    workers = workers or worker_count()

    def one(seed):
        log.info("%s seed %d", name, seed)
        return fn(seed, config, **kwargs)

    if workers == 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, seeds))


def summarize(name: str, records: list) -> dict:
    """Aggregate per-seed records into the headline numbers of each study."""
    out = {"experiment": name, "n_seeds": len(records)}
    if name in ("fig2", "sim1d", "sec32"):
        c = np.array([r["mse_cbart"] for r in records])
        b = np.array([r["mse_bart"] for r in records])
        out.update(mean_mse_cbart=float(c.mean()), mean_mse_bart=float(b.mean()),
                   mean_mse_ratio=float(c.mean() / b.mean()), median_mse_cbart=float(np.median(c)),
                   median_mse_bart=float(np.median(b)))
    if name == "sec32":
        rho = np.array([r["selected_rho"] for r in records])
        sig = np.array([r["selected_sigma"] for r in records])
        out.update(mean_rho_hat=float(rho.mean()), mean_sigma_hat=float(sig.mean()),
                   selected_w=[r["selected_w"] for r in records],
                   interior_minimum_rate=float(np.mean([r["interior_minimum"] for r in records])))
    if name == "spatial":
        est = np.array([r["est_reduction"] for r in records])
        pred = np.array([r["pred_reduction"] for r in records])
        out.update(
            median_est_reduction=float(np.median(est)),
            median_pred_reduction=float(np.median(pred)),
            mean_est_mse_cbart=float(np.mean([r["est_mse_cbart"] for r in records])),
            mean_est_mse_bart=float(np.mean([r["est_mse_bart"] for r in records])),
            mean_pred_mse_cbart_gp=float(np.mean([r["pred_mse_cbart_gp"] for r in records])),
            mean_pred_mse_bart=float(np.mean([r["pred_mse_bart"] for r in records])),
        )
    return out

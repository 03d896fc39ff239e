"""Synthetic datasets for the 1-D autoregressive and 2-D spatial experiments.

Randomness comes from numpy's PCG64 bit generator.  Each dataset seed is
expanded with ``SeedSequence(seed).spawn(4)`` into independent substreams,
always in this order: covariates, structured error, locations, i.i.d.
noise.  Adding draws to one stream never shifts the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceModel, cholesky_with_jitter, spatial_kernel_matrix
from .tree import Tree

__all__ = ["SimDataset", "Figure1Example", "streams", "gen_ar1_cubic", "gen_spatial", "gen_figure1_example"]

_STREAMS = ("covariate", "error", "location", "noise")


def streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(child)) for name, child in zip(_STREAMS, children)}


@dataclass
class SimDataset:
    """``y = f_true + eta`` with labels ``locations`` and a train/test split.

    For 1-D data ``locations`` is the time index 1..n; for spatial data it
    is an n x 2 array of coordinates.
    """

    y: np.ndarray
    X: np.ndarray
    locations: np.ndarray
    f_true: np.ndarray
    eta: np.ndarray
    truth: dict
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    z: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def is_spatial(self) -> bool:
        return self.locations.ndim == 2

    def subset(self, idx) -> "SimDataset":
        idx = np.asarray(idx)
        z = None if self.z is None else self.z[idx]
        return SimDataset(self.y[idx], self.X[idx], self.locations[idx], self.f_true[idx], self.eta[idx],
                          dict(self.truth), np.arange(len(idx)), np.arange(0), self.seed, z)

    def train(self) -> "SimDataset":
        return self.subset(self.train_idx)

    def test(self) -> "SimDataset":
        return self.subset(self.test_idx)


def cubic(x):
    return x**3


def gen_ar1_cubic(n: int = 200, rho: float = 0.8, sigma: float = 0.1, seed: int = 0,
                  sort_x: bool = True) -> SimDataset:
    """``y_i = x_i^3 + eta_i`` with ``eta_1 = eps_1``, ``eta_i = rho eta_{i-1} + eps_i``.

    ``x_i ~ U(-1, 1)``, sorted by default so that the time order of the
    errors coincides with the order of the covariate.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    rngs = streams(seed)
    x = rngs["covariate"].uniform(-1.0, 1.0, n)
    if sort_x:
        x = np.sort(x)
    eps = rngs["error"].normal(0.0, sigma, n)
    eta = np.empty(n)
    eta[0] = eps[0]
    for i in range(1, n):
        eta[i] = rho * eta[i - 1] + eps[i]
    f = cubic(x)
    truth = {"kind": "ar1", "rho": rho, "sigma": sigma, "n": n, "sort_x": sort_x}
    return SimDataset(f + eta, x[:, None], np.arange(1.0, n + 1.0), f, eta, truth,
                      np.arange(n), np.arange(0), seed)


def gen_spatial(scenario: int = 3, n_train: int = 200, n_test: int = 100, theta=(3.0, 6.0, 1.0),
                seed: int = 0, locations: np.ndarray | None = None) -> SimDataset:
    """Spatial design on the unit square.

    ``y = x^3 + z(s) + eps`` with ``z ~ GP(0, sigma2 exp(-d / phi))`` and
    ``eps ~ N(0, tau2)``, ``theta = (sigma2, phi, tau2)``.  Covariate by
    scenario: (1) ``x = s1 + s2``; (2) ``x = 2 U(0, 1)``; (3)
    ``x = 0.5 (s1 + s2) + U(0, 1)``.  The first ``n_train`` points form the
    training split.  ``locations`` (``n_train + n_test`` x 2) replaces the
    uniform draw of the coordinates when given.
    """
    if scenario not in (1, 2, 3):
        raise ValueError("scenario must be 1, 2 or 3")
    sigma2, phi, tau2 = (float(v) for v in theta)
    n = n_train + n_test
    rngs = streams(seed)
    s = rngs["location"].uniform(0.0, 1.0, (n, 2))
    if locations is not None:
        s = np.asarray(locations, dtype=float)
        if s.shape != (n, 2):
            raise ValueError(f"locations must have shape ({n}, 2)")
    if scenario == 1:
        x = s[:, 0] + s[:, 1]
    elif scenario == 2:
        x = 2.0 * rngs["covariate"].uniform(0.0, 1.0, n)
    else:
        x = 0.5 * (s[:, 0] + s[:, 1]) + rngs["covariate"].uniform(0.0, 1.0, n)
    white = rngs["error"].standard_normal(n)
    if sigma2 > 0:
        model = CovarianceModel("exp", {"sigma2": sigma2, "phi": phi, "tau2": 0.0})
        chol, _ = cholesky_with_jitter(spatial_kernel_matrix(model, s))
        z = chol @ white
    else:
        z = np.zeros(n)
    eps = rngs["noise"].normal(0.0, np.sqrt(tau2), n) if tau2 > 0 else np.zeros(n)
    f = cubic(x)
    eta = z + eps
    truth = {"kind": "exp", "sigma2": sigma2, "phi": phi, "tau2": tau2, "scenario": scenario,
             "n_train": n_train, "n_test": n_test}
    return SimDataset(f + eta, x[:, None], s, f, eta, truth, np.arange(n_train),
                      np.arange(n_train, n), seed, z)


@dataclass
class Figure1Example:
    """Five observations on two covariates and a three-leaf tree.

    Leaves in order: ``x1 <= 0.5 & x2 <= 0.5``, ``x1 <= 0.5 & x2 > 0.5``,
    ``x1 > 0.5``; rows map to leaves (3, 1, 2, 2, 3) in 1-based numbering.
    """

    X: np.ndarray
    y: np.ndarray
    tree: Tree


def gen_figure1_example(leaf_means=(1.0, 2.0, 3.0)) -> Figure1Example:
    X = np.array([[0.8, 0.3],
                  [0.2, 0.2],
                  [0.3, 0.7],
                  [0.4, 0.9],
                  [0.9, 0.6]])
    mu1, mu2, mu3 = leaf_means
    tree = Tree.from_spec((0, 0.5, (1, 0.5, mu1, mu2), mu3))
    y = np.array([3.1, 0.9, 2.2, 1.8, 2.9])
    return Figure1Example(X, y, tree)

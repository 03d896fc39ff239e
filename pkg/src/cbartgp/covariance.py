"""Error covariance models and their precision matrices.

Every covariance parameterization used by the samplers is exposed through a
:class:`PrecisionView`, which stores the precision matrix ``Q = Sigma^{-1}``
(sparse for the autoregressive kinds, dense for the spatial kinds) together
with ``log|Sigma|``.  The tree samplers never need ``Sigma`` itself, only
sums of entries of ``Q`` grouped by leaf membership.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from ._linalg import csr_leaf_gram, csr_matvec, csr_row_group_sums

__all__ = [
    "CovarianceKind",
    "CovarianceModel",
    "PrecisionView",
    "FactorizationError",
    "build_ar_precision",
    "build_arp_precision",
    "build_iid_precision",
    "build_spatial_covariance",
    "blockwise_precision_sum",
    "matern_kernel",
    "cholesky_with_jitter",
]

JITTER_START = 1e-10
JITTER_STOP = 1e-4
DENSE_CUTOFF = 10_000


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even after escalating diagonal jitter."""

    def __init__(self, jitters):
        self.jitters = list(jitters)
        seq = ", ".join(f"{j:.1e}" for j in self.jitters)
        super().__init__(f"matrix not positive definite; tried relative jitter {seq}")


class CovarianceKind(str, enum.Enum):
    IID = "iid"
    AR1 = "ar1"
    ARP = "arp"
    SPATIAL_EXP = "exp"
    SPATIAL_MATERN = "matern"

    @property
    def is_spatial(self) -> bool:
        return self in (CovarianceKind.SPATIAL_EXP, CovarianceKind.SPATIAL_MATERN)


_REQUIRED = {
    CovarianceKind.IID: ("sigma2",),
    CovarianceKind.AR1: ("rho", "sigma"),
    CovarianceKind.ARP: ("coefs", "tau2"),
    CovarianceKind.SPATIAL_EXP: ("sigma2", "phi", "tau2"),
    CovarianceKind.SPATIAL_MATERN: ("sigma2", "phi", "tau2", "nu"),
}


@dataclass(frozen=True)
class CovarianceModel:
    """A parameterized error covariance.

    Parameters by kind: ``iid`` {sigma2}; ``ar1`` {rho, sigma}; ``arp``
    {coefs, tau2}; ``exp`` {sigma2, phi, tau2}; ``matern`` {sigma2, phi,
    tau2, nu} with nu in {0.5, 1.5, 2.5}.  ``locations`` holds the labels
    s_i: a time index for the autoregressive kinds, n x 2 coordinates for
    the spatial ones.
    """

    kind: CovarianceKind
    params: Mapping[str, object]
    locations: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        kind = CovarianceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        missing = [k for k in _REQUIRED[kind] if k not in self.params]
        if missing:
            raise ValueError(f"{kind.value} model missing parameters {missing}")
        p = self.params
        if kind is CovarianceKind.IID and not p["sigma2"] > 0:
            raise ValueError("sigma2 must be positive")
        if kind is CovarianceKind.AR1:
            _check_ar1(p["rho"], p["sigma"])
        if kind is CovarianceKind.ARP and not p["tau2"] > 0:
            raise ValueError("tau2 must be positive")
        if kind.is_spatial:
            if not (p["sigma2"] >= 0 and p["phi"] > 0 and p["tau2"] >= 0):
                raise ValueError("spatial parameters need sigma2 >= 0, phi > 0, tau2 >= 0")
            if kind is CovarianceKind.SPATIAL_MATERN and float(p["nu"]) not in (0.5, 1.5, 2.5):
                raise ValueError("nu must be one of 0.5, 1.5, 2.5")

    @property
    def nu(self) -> float:
        if self.kind is CovarianceKind.SPATIAL_EXP:
            return 0.5
        return float(self.params["nu"])

    def with_params(self, **updates) -> "CovarianceModel":
        return CovarianceModel(self.kind, {**self.params, **updates}, self.locations)

    def precision(self, n: int | None = None) -> "PrecisionView":
        """Precision view for ``n`` observations (spatial kinds use ``locations``)."""
        p = self.params
        if self.kind.is_spatial:
            if self.locations is None:
                raise ValueError("spatial model requires locations")
            return build_spatial_covariance(self, self.locations)[1]
        if n is None:
            if self.locations is None:
                raise ValueError("need n or locations")
            n = len(self.locations)
        if self.kind is CovarianceKind.IID:
            return build_iid_precision(float(np.sqrt(p["sigma2"])), n)
        if self.kind is CovarianceKind.AR1:
            return build_ar_precision(p["rho"], p["sigma"], n)
        return build_arp_precision(p["coefs"], p["tau2"], n)

    def covariance(self, n: int | None = None) -> np.ndarray:
        """Dense Sigma.  Intended for checks and simulation, not for large n."""
        if self.kind.is_spatial:
            return build_spatial_covariance(self, self.locations)[0]
        view = self.precision(n)
        return np.linalg.inv(view.toarray())


class PrecisionView:
    """Read-only precision matrix ``Q = Sigma^{-1}`` plus ``log|Sigma|``.

    Sparse storage keeps raw CSR arrays so that the per-proposal kernels
    (grouped row sums) run as a handful of vectorized numpy calls.
    """

    __slots__ = ("n", "logdet_sigma", "kind", "_dense", "_indptr", "_indices", "_data")

    def __init__(self, matrix, logdet_sigma: float, kind: CovarianceKind | str | None = None):
        if sp.issparse(matrix):
            csr = sp.csr_matrix(matrix, dtype=float)
            csr.sum_duplicates()
            csr.eliminate_zeros()
            csr.sort_indices()
            if csr.shape[0] != csr.shape[1]:
                raise ValueError("precision must be square")
            self.n = csr.shape[0]
            self._dense = None
            self._indptr = csr.indptr.astype(np.int64)
            self._indices = csr.indices.astype(np.int64)
            self._data = csr.data
        else:
            dense = np.asarray(matrix, dtype=float)
            if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
                raise ValueError("precision must be square")
            self.n = dense.shape[0]
            self._dense = dense
            self._indptr = self._indices = self._data = None
        self.logdet_sigma = float(logdet_sigma)
        self.kind = None if kind is None else CovarianceKind(kind)

    @property
    def is_sparse(self) -> bool:
        return self._dense is None

    @property
    def nnz(self) -> int:
        return self.n * self.n if self._dense is not None else len(self._data)

    def __repr__(self):
        store = "sparse" if self.is_sparse else "dense"
        return f"PrecisionView(n={self.n}, {store}, nnz={self.nnz}, logdet_sigma={self.logdet_sigma:.6g})"

    def toarray(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        return self.tocsr().toarray()

    def tocsr(self) -> sp.csr_matrix:
        if self._dense is not None:
            return sp.csr_matrix(self._dense)
        return sp.csr_matrix((self._data, self._indices, self._indptr), shape=(self.n, self.n))

    def scaled(self, c: float) -> "PrecisionView":
        """Precision of ``Sigma / c``, i.e. ``c * Q``."""
        c = float(c)
        if c <= 0:
            raise ValueError("scale must be positive")
        out = object.__new__(PrecisionView)
        out.n = self.n
        out.kind = self.kind
        out.logdet_sigma = self.logdet_sigma - self.n * np.log(c)
        if self._dense is not None:
            out._dense = self._dense * c
            out._indptr = out._indices = out._data = None
        else:
            out._dense = None
            out._indptr, out._indices = self._indptr, self._indices
            out._data = self._data * c
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense @ x
        return csr_matvec(self._indptr, self._indices, self._data, x)

    def quad(self, x: np.ndarray) -> float:
        return float(x @ self.matvec(x))

    def leaf_gram(self, assignment: np.ndarray, b: int) -> np.ndarray:
        """``D^T Q D`` for the dummy matrix encoded by ``assignment`` (b x b)."""
        if self._dense is not None:
            onehot = np.zeros((self.n, b))
            onehot[np.arange(self.n), assignment] = 1.0
            return onehot.T @ self._dense @ onehot
        return csr_leaf_gram(self._indptr, self._indices, self._data, assignment, b)

    def row_group_sums(self, rows: np.ndarray, assignment: np.ndarray, b: int) -> np.ndarray:
        """``out[j] = sum_{h in rows} sum_{l : assignment[l] == j} q_hl``.

        Touches only the stored entries of the selected rows.
        """
        if self._dense is not None:
            return np.bincount(assignment, weights=self._dense[rows].sum(axis=0), minlength=b)
        return csr_row_group_sums(self._indptr, self._indices, self._data, rows, assignment, b)


def _check_ar1(rho, sigma):
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def build_iid_precision(sigma: float, n: int) -> PrecisionView:
    """Precision ``sigma^{-2} I`` stored sparsely."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if n < 1:
        raise ValueError("n must be at least 1")
    inv_var = 1.0 / sigma**2
    q = sp.diags(np.ones(n) * inv_var, format="csr")
    return PrecisionView(q, 2 * n * np.log(sigma), CovarianceKind.IID)


def build_ar_precision(rho: float, sigma: float, n: int) -> PrecisionView:
    """Precision of ``eta_1 = eps_1, eta_i = rho*eta_{i-1} + eps_i``.

    With ``A`` unit lower-bidiagonal with ``-rho`` below the diagonal,
    ``A eta = eps`` so ``Q = sigma^{-2} A^T A``, a tridiagonal matrix, and
    ``log|Sigma| = 2 n log(sigma)`` since ``|A| = 1``.
    """
    _check_ar1(rho, sigma)
    if n < 1:
        raise ValueError("n must be at least 1")
    return build_arp_precision([rho], sigma**2, n, kind=CovarianceKind.AR1)


def build_arp_precision(coefs, tau2: float, n: int, kind=CovarianceKind.ARP) -> PrecisionView:
    """Precision of the AR(p) recursion started from zero pre-sample values.

    ``eta_i = sum_{k <= min(p, i-1)} a_k eta_{i-k} + eps_i`` with
    ``eps_i ~ N(0, tau2)``; ``A`` has unit diagonal and ``-a_k`` on the k-th
    subdiagonal, giving a banded ``Q = tau2^{-1} A^T A``.
    """
    coefs = np.atleast_1d(np.asarray(coefs, dtype=float))
    if not tau2 > 0:
        raise ValueError("tau2 must be positive")
    if n < 1:
        raise ValueError("n must be at least 1")
    diags = [np.ones(n)] + [np.full(n - k, -a) for k, a in enumerate(coefs, start=1) if k < n]
    offsets = [0] + [-k for k in range(1, len(diags))]
    a_mat = sp.diags(diags, offsets, shape=(n, n), format="csr")
    q = (a_mat.T @ a_mat) * (1.0 / tau2)
    return PrecisionView(q, n * np.log(tau2), kind)


def matern_kernel(d: np.ndarray, sigma2: float, phi: float, nu: float) -> np.ndarray:
    """Matern covariance at distance ``d`` with scaled distance ``sqrt(2 nu) d / phi``.

    For ``nu = 1/2`` this is exactly ``sigma2 * exp(-d / phi)``.
    """
    r = np.asarray(d, dtype=float) / phi
    if nu == 0.5:
        return sigma2 * np.exp(-r)
    if nu == 1.5:
        t = np.sqrt(3.0) * r
        return sigma2 * (1.0 + t) * np.exp(-t)
    if nu == 2.5:
        t = np.sqrt(5.0) * r
        return sigma2 * (1.0 + t + t * t / 3.0) * np.exp(-t)
    raise ValueError("nu must be one of 0.5, 1.5, 2.5")


def cholesky_with_jitter(mat: np.ndarray):
    """Lower Cholesky factor, adding escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute amount added.
    """
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(mat)))
    tried = []
    rel = JITTER_START
    while rel <= JITTER_STOP * (1 + 1e-9):
        tried.append(rel)
        jitter = rel * scale
        try:
            return np.linalg.cholesky(mat + jitter * np.eye(len(mat))), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise FactorizationError(tried)


def spatial_kernel_matrix(model: CovarianceModel, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Kernel part K (no nugget) between location sets ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    p = model.params
    return matern_kernel(cdist(a, b), float(p["sigma2"]), float(p["phi"]), model.nu)


def build_spatial_covariance(model: CovarianceModel, locations: np.ndarray):
    """Dense ``Sigma = K + tau2 I`` and its :class:`PrecisionView`.

    Raises :class:`FactorizationError` if no jitter level up to the cap
    makes ``Sigma`` numerically positive definite.
    """
    if not model.kind.is_spatial:
        raise ValueError("build_spatial_covariance needs a spatial model")
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if not np.all(np.isfinite(locations)):
        raise ValueError("locations must be finite")
    n = len(locations)
    if n > DENSE_CUTOFF:
        raise ValueError(f"dense spatial covariance limited to n <= {DENSE_CUTOFF}")
    sigma = spatial_kernel_matrix(model, locations)
    sigma[np.diag_indices(n)] += float(model.params["tau2"])
    chol, jitter = cholesky_with_jitter(sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    inv_chol = scipy.linalg.solve_triangular(chol, np.eye(n), lower=True)
    q = inv_chol.T @ inv_chol
    q = 0.5 * (q + q.T)
    if jitter:
        sigma = sigma + jitter * np.eye(n)
    return sigma, PrecisionView(q, logdet, model.kind)


def blockwise_precision_sum(view: PrecisionView, omega_i, omega_j) -> float:
    """``sum_{h in omega_i} sum_{l in omega_j} q_hl`` (0-based index sets)."""
    omega_i = np.asarray(omega_i, dtype=np.int64).ravel()
    omega_j = np.asarray(omega_j, dtype=np.int64).ravel()
    for idx in (omega_i, omega_j):
        if idx.size and (idx.min() < 0 or idx.max() >= view.n):
            raise IndexError(f"index set out of range for n={view.n}")
    member = np.zeros(view.n, dtype=np.int64)
    member[omega_j] = 1
    # group 1 collects columns in omega_j, group 0 the rest
    return float(view.row_group_sums(omega_i, member, 2)[1])

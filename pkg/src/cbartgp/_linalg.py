"""Small kernels for the b x b leaf systems (b is rarely above 20) and CSR precisions.

numpy's LAPACK wrappers cost ~15 us per call at this size, which dominates
the sampler; these loops run in well under a microsecond.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def chol_lower(a):
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
    return L, True


@njit(cache=True)
def inv_logdet(a):
    """Inverse and log-determinant of a symmetric positive definite matrix."""
    L, ok = chol_lower(a)
    n = a.shape[0]
    inv = np.zeros_like(a)
    if not ok:
        return inv, np.nan, False
    logdet = 0.0
    for i in range(n):
        logdet += 2.0 * np.log(L[i, i])
    # W = L^{-1}, then inv = W^T W
    W = np.zeros_like(a)
    for j in range(n):
        W[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            t = 0.0
            for k in range(j, i):
                t -= L[i, k] * W[k, j]
            W[i, j] = t / L[i, i]
    for i in range(n):
        for j in range(i + 1):
            t = 0.0
            for k in range(i, n):
                t += W[k, i] * W[k, j]
            inv[i, j] = t
            inv[j, i] = t
    return inv, logdet, True


@njit(cache=True)
def gaussian_draw(a, s, z):
    """Mean ``a^{-1} s`` and one draw ``mean + L^{-T} z`` where ``a = L L^T``."""
    L, ok = chol_lower(a)
    n = a.shape[0]
    mean = np.zeros(n)
    out = np.zeros(n)
    if not ok:
        return mean, out, False
    y = np.zeros(n)
    for i in range(n):
        t = s[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
    for i in range(n - 1, -1, -1):
        t = y[i]
        u = z[i]
        for k in range(i + 1, n):
            t -= L[k, i] * mean[k]
            u -= L[k, i] * out[k]
        mean[i] = t / L[i, i]
        out[i] = u / L[i, i]
    for i in range(n):
        out[i] += mean[i]
    return mean, out, True


@njit(cache=True)
def _quad_logdet(g, prior_prec, s):
    a = g.copy()
    for i in range(a.shape[0]):
        a[i, i] += prior_prec
    L, ok = chol_lower(a)
    if not ok:
        return 0.0, 0.0, False
    n = a.shape[0]
    logdet = 0.0
    quad = 0.0
    y = np.zeros(n)
    for i in range(n):
        t = s[i]
        for k in range(i):
            t -= L[i, k] * y[k]
        y[i] = t / L[i, i]
        quad += y[i] * y[i]
        logdet += 2.0 * np.log(L[i, i])
    return logdet, quad, True


@njit(cache=True)
def split_merge_terms(g_fine, g_coarse, merge_map, s_fine, prior_prec):
    """Log-determinants of both leaf systems and ``s_f' A_f^{-1} s_f - s_f' M' A_c^{-1} M s_f``.

    ``M`` sums fine leaves into coarse ones along ``merge_map``, so the second
    quadratic form is the coarse inverse expanded to the fine partition.
    """
    s_coarse = np.zeros(g_coarse.shape[0])
    for i in range(len(merge_map)):
        s_coarse[merge_map[i]] += s_fine[i]
    ld_f, q_f, ok_f = _quad_logdet(g_fine, prior_prec, s_fine)
    ld_c, q_c, ok_c = _quad_logdet(g_coarse, prior_prec, s_coarse)
    return ld_f, ld_c, q_f - q_c, ok_f and ok_c


# sparse precision kernels, CSR arrays passed straight through

@njit(cache=True)
def csr_matvec(indptr, indices, data, x):
    n = indptr.size - 1
    out = np.zeros(n)
    for i in range(n):
        t = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            t += data[p] * x[indices[p]]
        out[i] = t
    return out


@njit(cache=True)
def csr_leaf_gram(indptr, indices, data, assignment, b):
    out = np.zeros((b, b))
    for i in range(indptr.size - 1):
        a = assignment[i]
        for p in range(indptr[i], indptr[i + 1]):
            out[a, assignment[indices[p]]] += data[p]
    return out


@njit(cache=True)
def csr_row_group_sums(indptr, indices, data, rows, assignment, b):
    out = np.zeros(b)
    for i in rows:
        for p in range(indptr[i], indptr[i + 1]):
            out[assignment[indices[p]]] += data[p]
    return out


@njit(cache=True)
def merge_gram(g_fine, merge_map, b_coarse):
    """Sum rows and columns of ``g_fine`` that merge into the same coarse leaf."""
    out = np.zeros((b_coarse, b_coarse))
    bf = g_fine.shape[0]
    for i in range(bf):
        mi = merge_map[i]
        for j in range(bf):
            out[mi, merge_map[j]] += g_fine[i, j]
    return out

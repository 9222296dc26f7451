"""Hot numerical kernels: bus injections, Jacobian entries, branch currents.

Two interchangeable backends: JIT-compiled loops (default when numba is
available) and pure-numpy vectorized complex arithmetic. Set the environment
variable CCOPF_PURE_NUMPY=1 to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

_FORCE_NUMPY = os.environ.get("CCOPF_PURE_NUMPY", "") == "1"

if not _FORCE_NUMPY:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:
        USING_NUMBA = False
else:
    USING_NUMBA = False


def _injections_loop(indptr, indices, gdata, bdata, theta, v):
    n = len(theta)
    p = np.zeros(n)
    q = np.zeros(n)
    for j in range(n):
        vj = v[j]
        tj = theta[j]
        accp = 0.0
        accq = 0.0
        for ptr in range(indptr[j], indptr[j + 1]):
            k = indices[ptr]
            djk = tj - theta[k]
            c = np.cos(djk)
            s = np.sin(djk)
            accp += v[k] * (gdata[ptr] * c + bdata[ptr] * s)
            accq += v[k] * (gdata[ptr] * s - bdata[ptr] * c)
        p[j] = vj * accp
        q[j] = vj * accq
    return p, q


def _jacobian_values_loop(indptr, indices, gdata, bdata, theta, v, p, q):
    nnz = len(indices)
    dp_dth = np.empty(nnz)
    dp_dv = np.empty(nnz)
    dq_dth = np.empty(nnz)
    dq_dv = np.empty(nnz)
    n = len(theta)
    for j in range(n):
        vj = v[j]
        tj = theta[j]
        for ptr in range(indptr[j], indptr[j + 1]):
            k = indices[ptr]
            g = gdata[ptr]
            b = bdata[ptr]
            if k == j:
                dp_dth[ptr] = -q[j] - b * vj * vj
                dp_dv[ptr] = p[j] / vj + g * vj
                dq_dth[ptr] = p[j] - g * vj * vj
                dq_dv[ptr] = q[j] / vj - b * vj
            else:
                djk = tj - theta[k]
                c = np.cos(djk)
                s = np.sin(djk)
                dp_dth[ptr] = vj * v[k] * (g * s - b * c)
                dp_dv[ptr] = vj * (g * c + b * s)
                dq_dth[ptr] = -vj * v[k] * (g * c + b * s)
                dq_dv[ptr] = vj * (g * s - b * c)
    return dp_dth, dp_dv, dq_dth, dq_dv


def _branch_currents_loop(yff_re, yff_im, yft_re, yft_im, ytf_re, ytf_im, ytt_re, ytt_im,
                          f, t, theta, v):
    nb = len(f)
    i_f = np.empty(nb)
    i_t = np.empty(nb)
    for i in range(nb):
        vf_re = v[f[i]] * np.cos(theta[f[i]])
        vf_im = v[f[i]] * np.sin(theta[f[i]])
        vt_re = v[t[i]] * np.cos(theta[t[i]])
        vt_im = v[t[i]] * np.sin(theta[t[i]])
        re = yff_re[i] * vf_re - yff_im[i] * vf_im + yft_re[i] * vt_re - yft_im[i] * vt_im
        im = yff_re[i] * vf_im + yff_im[i] * vf_re + yft_re[i] * vt_im + yft_im[i] * vt_re
        i_f[i] = np.hypot(re, im)
        re = ytf_re[i] * vf_re - ytf_im[i] * vf_im + ytt_re[i] * vt_re - ytt_im[i] * vt_im
        im = ytf_re[i] * vf_im + ytf_im[i] * vf_re + ytt_re[i] * vt_im + ytt_im[i] * vt_re
        i_t[i] = np.hypot(re, im)
    return i_f, i_t


if USING_NUMBA:
    _injections_jit = njit(cache=True, nogil=True)(_injections_loop)
    _jacobian_values_jit = njit(cache=True, nogil=True)(_jacobian_values_loop)
    _branch_currents_jit = njit(cache=True, nogil=True)(_branch_currents_loop)


def injections_numpy(adm, theta, v):
    """Net complex power injections via vectorized complex arithmetic."""
    V = v * np.exp(1j * theta)
    s = V * np.conj(adm.ybus @ V)
    return np.ascontiguousarray(s.real), np.ascontiguousarray(s.imag)


def injections(adm, theta, v):
    """Net active and reactive bus injections P(theta, v), Q(theta, v)."""
    if USING_NUMBA:
        return _injections_jit(adm.indptr, adm.indices, adm.g_data, adm.b_data, theta, v)
    return injections_numpy(adm, theta, v)


def jacobian_full_numpy(adm, theta, v):
    """Full power-flow Jacobian [[dP/dth, dP/dv], [dQ/dth, dQ/dv]] as CSR."""
    V = v * np.exp(1j * theta)
    ibus = adm.ybus @ V
    diag_v = sp.diags(V)
    diag_i = sp.diags(ibus)
    diag_e = sp.diags(V / np.abs(V))
    ds_dth = 1j * diag_v @ np.conj(diag_i - adm.ybus @ diag_v)
    ds_dv = diag_v @ np.conj(adm.ybus @ diag_e) + np.conj(diag_i) @ diag_e
    return sp.bmat(
        [[ds_dth.real, ds_dv.real], [ds_dth.imag, ds_dv.imag]], format="csr"
    )


def jacobian_full(adm, theta, v, p=None, q=None):
    """Full 2n x 2n power-flow Jacobian; rows (P, Q), columns (theta, v)."""
    if not USING_NUMBA:
        return jacobian_full_numpy(adm, theta, v)
    if p is None or q is None:
        p, q = injections(adm, theta, v)
    dp_dth, dp_dv, dq_dth, dq_dv = _jacobian_values_jit(
        adm.indptr, adm.indices, adm.g_data, adm.b_data, theta, v, p, q
    )
    n = len(theta)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(adm.indptr))
    cols = adm.indices
    coo_rows = np.concatenate([rows, rows, rows + n, rows + n])
    coo_cols = np.concatenate([cols, cols + n, cols, cols + n])
    vals = np.concatenate([dp_dth, dp_dv, dq_dth, dq_dv])
    return sp.coo_matrix((vals, (coo_rows, coo_cols)), shape=(2 * n, 2 * n)).tocsr()


def currents_numpy(adm, theta, v):
    V = v * np.exp(1j * theta)
    i_f = np.abs(adm.yff * V[adm.f] + adm.yft * V[adm.t])
    i_t = np.abs(adm.ytf * V[adm.f] + adm.ytt * V[adm.t])
    return i_f, i_t


def currents(adm, theta, v):
    """Branch current magnitudes at both ends, p.u."""
    if USING_NUMBA:
        return _branch_currents_jit(
            adm.yff.real, adm.yff.imag, adm.yft.real, adm.yft.imag,
            adm.ytf.real, adm.ytf.imag, adm.ytt.real, adm.ytt.imag,
            adm.f, adm.t, theta, v,
        )
    return currents_numpy(adm, theta, v)


def warmup(adm) -> None:
    """Trigger JIT compilation on a tiny input so timed runs are steady-state."""
    n = adm.ybus.shape[0]
    theta = np.zeros(n)
    v = np.ones(n)
    p, q = injections(adm, theta, v)
    jacobian_full(adm, theta, v, p, q)
    currents(adm, theta, v)

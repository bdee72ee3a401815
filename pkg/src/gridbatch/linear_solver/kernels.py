"""Batched numeric kernels on the mini-batch layout ``(n_mb, n_slots, width)``.

Every lane is processed with the same operation sequence, so results never
depend on the mini-batch width or on which lanes share a mini-batch.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, error_model="numpy")


@njit(**_JIT)
def _normalize_column(lu, mb, j, cp, dp, singular_tol, flags):
    w = lu.shape[2]
    d = dp[j]
    for k in range(w):
        cmax = 0.0
        for s in range(cp[j], cp[j + 1]):
            a = abs(lu[mb, s, k])
            if a > cmax:
                cmax = a
        piv = lu[mb, d, k]
        if not abs(piv) > singular_tol * cmax:
            flags[mb, k] = 1
        for s in range(d + 1, cp[j + 1]):
            lu[mb, s, k] = lu[mb, s, k] / piv


@njit(**_JIT)
def refactorize_inplace(lu, cp, dp, u_ptr, u_slots, vmad_ptr, vmad_src, vmad_dst, singular_tol, flags):
    """Pattern-frozen left-looking refactorization directly on the LU tape.

    ``lu`` holds the scattered A values (fill slots zero) on entry and the
    factors on exit. ``flags[mb, lane]`` is set for lanes with a tiny pivot.
    """
    n_mb, _, w = lu.shape
    n = cp.shape[0] - 1
    for mb in range(n_mb):
        for j in range(n):
            for d in range(u_ptr[j], u_ptr[j + 1]):
                us = u_slots[d]
                for p in range(vmad_ptr[d], vmad_ptr[d + 1]):
                    t = vmad_dst[p]
                    s = vmad_src[p]
                    for k in range(w):
                        lu[mb, t, k] -= lu[mb, us, k] * lu[mb, s, k]
            _normalize_column(lu, mb, j, cp, dp, singular_tol, flags)


@njit(**_JIT)
def refactorize_workspace(a_vals, a_cp, a_lu_row, lu, cp, dp, ri, u_ptr, u_rows, vmad_ptr, vmad_src, vmad_dst,
                          singular_tol, flags):
    """Column working-space variant: A stays untouched, factors go to ``lu``.

    ``a_lu_row[s]`` is the LU row of A slot ``s`` (row permutation applied).
    """
    n_mb, _, w = lu.shape
    n = cp.shape[0] - 1
    x = np.zeros((n, w))
    for mb in range(n_mb):
        for j in range(n):
            for s in range(cp[j], cp[j + 1]):
                for k in range(w):
                    x[ri[s], k] = 0.0
            for s in range(a_cp[j], a_cp[j + 1]):
                for k in range(w):
                    x[a_lu_row[s], k] = a_vals[mb, s, k]
            for d in range(u_ptr[j], u_ptr[j + 1]):
                r = u_rows[d]
                for p in range(vmad_ptr[d], vmad_ptr[d + 1]):
                    t = ri[vmad_dst[p]]
                    s = vmad_src[p]
                    for k in range(w):
                        x[t, k] -= x[r, k] * lu[mb, s, k]
            for s in range(cp[j], cp[j + 1]):
                for k in range(w):
                    lu[mb, s, k] = x[ri[s], k]
            _normalize_column(lu, mb, j, cp, dp, singular_tol, flags)


@njit(**_JIT)
def run_ops(lu, ops, cp, dp, u_slots, vmad_src, vmad_dst, singular_tol, flags):
    """Execute a list of plan operations on every lane of ``lu``.

    ``ops[i] = (0, dep, p0, p1)`` applies VMAD pairs ``p0:p1`` of one
    dependency; ``ops[i] = (1, col, 0, 0)`` normalises a column.
    """
    n_mb, _, w = lu.shape
    for i in range(ops.shape[0]):
        kind = ops[i, 0]
        if kind == 0:
            us = u_slots[ops[i, 1]]
            for mb in range(n_mb):
                for p in range(ops[i, 2], ops[i, 3]):
                    t = vmad_dst[p]
                    s = vmad_src[p]
                    for k in range(w):
                        lu[mb, t, k] -= lu[mb, us, k] * lu[mb, s, k]
        else:
            for mb in range(n_mb):
                _normalize_column(lu, mb, ops[i, 1], cp, dp, singular_tol, flags)


@njit(**_JIT)
def fs_bs(lu, b, row_inv, col_inv, cp, dp, ri, fs_order, bs_order, x):
    """Solve ``J x = b`` per lane with the factors of ``A = P_r J P_c``."""
    n_mb, n, w = b.shape
    y = np.empty((n, w))
    for mb in range(n_mb):
        for i in range(n):
            for k in range(w):
                y[i, k] = b[mb, row_inv[i], k]
        for jj in range(n):
            j = fs_order[jj]
            for s in range(dp[j] + 1, cp[j + 1]):
                r = ri[s]
                for k in range(w):
                    y[r, k] -= lu[mb, s, k] * y[j, k]
        for jj in range(n):
            j = bs_order[jj]
            d = dp[j]
            for k in range(w):
                y[j, k] = y[j, k] / lu[mb, d, k]
            for s in range(cp[j], d):
                r = ri[s]
                for k in range(w):
                    y[r, k] -= lu[mb, s, k] * y[j, k]
        for i in range(n):
            for k in range(w):
                x[mb, col_inv[i], k] = y[i, k]

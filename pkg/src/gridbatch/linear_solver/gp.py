"""Left-looking Gilbert-Peierls LU with threshold partial pivoting.

Single-task kernels: the one-time factorization that fixes the row order and
the L/U pattern, and the fresh factorization used as a per-task fallback.
"""
from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
STRUCTURALLY_SINGULAR = 1
NUMERICALLY_SINGULAR = 2


@njit(cache=True, nogil=True)
def _grow_i(a, size):
    out = np.empty(size, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def gp_factor(n, ap, ai, ax, pivot_tol):
    """Factor ``P A = L U`` for a CCS matrix.

    Returns ``(status, bad_col, pinv, lp, li, lx, up, ui, ux)``. ``pinv[i]`` is
    the pivot position of original row ``i``. L is unit lower with the
    diagonal stored first in each column; U row indices are pivot positions
    with the diagonal stored last. Entries that are numerically zero are kept,
    so the patterns are the structural ones.
    """
    cap_l = 4 * ap[n] + n + 1
    cap_u = 4 * ap[n] + n + 1
    lp = np.zeros(n + 1, dtype=np.int64)
    up = np.zeros(n + 1, dtype=np.int64)
    li = np.empty(cap_l, dtype=np.int64)
    lx = np.empty(cap_l, dtype=np.float64)
    ui = np.empty(cap_u, dtype=np.int64)
    ux = np.empty(cap_u, dtype=np.float64)
    pinv = np.full(n, -1, dtype=np.int64)
    x = np.zeros(n, dtype=np.float64)
    xi = np.empty(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    pstack = np.empty(n, dtype=np.int64)
    mark = np.zeros(n, dtype=np.int64)
    cols = np.empty(n, dtype=np.int64)
    lnz = 0
    unz = 0
    for k in range(n):
        lp[k] = lnz
        up[k] = unz
        if lnz + n > cap_l:
            cap_l = 2 * cap_l + n
            li = _grow_i(li, cap_l)
            lx = _grow_i(lx, cap_l)
        if unz + n > cap_u:
            cap_u = 2 * cap_u + n
            ui = _grow_i(ui, cap_u)
            ux = _grow_i(ux, cap_u)
        stamp = k + 1
        # symbolic reach of A(:,k) in the graph of L, topological order in xi[top:]
        top = n
        for p in range(ap[k], ap[k + 1]):
            j0 = ai[p]
            if mark[j0] == stamp:
                continue
            head = 0
            stack[0] = j0
            while head >= 0:
                j = stack[head]
                jnew = pinv[j]
                if mark[j] != stamp:
                    mark[j] = stamp
                    pstack[head] = 0 if jnew < 0 else lp[jnew] + 1
                done = True
                if jnew >= 0:
                    pend = lp[jnew + 1]
                    q = pstack[head]
                    while q < pend:
                        i = li[q]
                        q += 1
                        if mark[i] != stamp:
                            pstack[head] = q
                            head += 1
                            stack[head] = i
                            done = False
                            break
                if done:
                    head -= 1
                    top -= 1
                    xi[top] = j
        # numeric sparse triangular solve x = L \ A(:,k)
        for p in range(top, n):
            x[xi[p]] = 0.0
        for p in range(ap[k], ap[k + 1]):
            x[ai[p]] = ax[p]
        # eliminate in pivot order so every entry sees its updates in ascending
        # column order, the same sequence the frozen refactorization uses
        npiv = 0
        for px in range(top, n):
            jn = pinv[xi[px]]
            if jn >= 0:
                cols[npiv] = jn
                npiv += 1
        order = np.sort(cols[:npiv])
        for q in range(npiv):
            jn = order[q]
            xj = x[li[lp[jn]]]
            for p in range(lp[jn] + 1, lp[jn + 1]):
                x[li[p]] -= lx[p] * xj
        # pivot choice, preferring the diagonal
        ipiv = -1
        amax = -1.0
        for p in range(top, n):
            i = xi[p]
            if pinv[i] < 0:
                t = abs(x[i])
                if t > amax:
                    amax = t
                    ipiv = i
            else:
                ui[unz] = pinv[i]
                ux[unz] = x[i]
                unz += 1
        if ipiv == -1:
            return STRUCTURALLY_SINGULAR, k, pinv, lp, li, lx, up, ui, ux
        if not amax > 0.0:
            return NUMERICALLY_SINGULAR, k, pinv, lp, li, lx, up, ui, ux
        if pinv[k] < 0 and mark[k] == stamp and abs(x[k]) >= amax * pivot_tol:
            ipiv = k
        pivot = x[ipiv]
        ui[unz] = k
        ux[unz] = pivot
        unz += 1
        pinv[ipiv] = k
        li[lnz] = ipiv
        lx[lnz] = 1.0
        lnz += 1
        for p in range(top, n):
            i = xi[p]
            if pinv[i] < 0:
                li[lnz] = i
                lx[lnz] = x[i] / pivot
                lnz += 1
            x[i] = 0.0
    lp[n] = lnz
    up[n] = unz
    for p in range(lnz):
        li[p] = pinv[li[p]]
    return OK, -1, pinv, lp, li[:lnz], lx[:lnz], up, ui[:unz], ux[:unz]


@njit(cache=True, nogil=True)
def gp_solve(n, pinv, lp, li, lx, up, ui, ux, b):
    """Solve with the factors of :func:`gp_factor`: returns ``x`` with ``A x = b``."""
    y = np.empty(n, dtype=np.float64)
    for i in range(n):
        y[pinv[i]] = b[i]
    for j in range(n):
        yj = y[j]
        for p in range(lp[j] + 1, lp[j + 1]):
            y[li[p]] -= lx[p] * yj
    for j in range(n - 1, -1, -1):
        y[j] /= ux[up[j + 1] - 1]
        yj = y[j]
        for p in range(up[j], up[j + 1] - 1):
            y[ui[p]] -= ux[p] * yj
    return y

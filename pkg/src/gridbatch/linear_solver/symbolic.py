"""Frozen symbolic state: permutations, LU pattern, update maps, level schedule."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from ..sparse_core import (
    INDEX_DTYPE,
    Permutation,
    ScatterLookup,
    SparseCcs,
    StructuralError,
    ccs_to_crs_pattern,
)
from .gp import NUMERICALLY_SINGULAR, OK, STRUCTURALLY_SINGULAR, gp_factor

BULK, NARROW, SCALAR = "bulk", "narrow", "scalar"


class StructurallySingularError(StructuralError):
    """A pivot column has no candidate rows at all."""


class SingularMatrixError(ArithmeticError):
    """Every pivot candidate of some column is numerically zero."""


@dataclass(frozen=True, eq=False)
class LevelSchedule:
    levels: Tuple[np.ndarray, ...]
    tags: Tuple[str, ...]
    level_of: np.ndarray
    narrow_threshold: int = 32
    scalar_threshold: int = 2
    vmad_width: int = 4

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def histogram(self) -> np.ndarray:
        return np.array([len(lv) for lv in self.levels], dtype=np.int64)

    def stage_counts(self) -> dict:
        return {tag: sum(1 for t in self.tags if t == tag) for tag in (BULK, NARROW, SCALAR)}


@dataclass(frozen=True, eq=False)
class SymbolicLu:
    """Everything the batched refactorization reuses across tasks.

    ``A = perm_row * J * perm_col`` in the sense ``A[perm_row.forward[r],
    perm_col.forward[c]] = J[r, c]``. ``lu_pattern`` holds L+U-I with sorted
    rows per column; U entries precede the diagonal, L entries follow it.
    """

    n: int
    perm_row: Permutation
    perm_col: Permutation
    lu_pattern: SparseCcs
    a_nnz: int
    u_ptr: np.ndarray  # per column, range into u_rows / u_slots
    u_rows: np.ndarray  # U-row index per dependency, ascending within a column
    u_slots: np.ndarray  # LU slot of U(row, col) per dependency
    vmad_ptr: np.ndarray  # per dependency, range into vmad_src / vmad_dst
    vmad_src: np.ndarray  # L slot in the dependency column
    vmad_dst: np.ndarray  # slot updated in the current column
    fs_order: np.ndarray
    bs_order: np.ndarray
    schedule: LevelSchedule
    scatter: Optional[ScatterLookup] = None

    @property
    def fill_in(self) -> int:
        return self.lu_pattern.nnz - self.a_nnz

    @property
    def n_flops(self) -> int:
        """Multiply-add count of one refactorization (VMAD pairs)."""
        return int(self.vmad_ptr[-1])

    def with_scatter(self, scatter: ScatterLookup) -> "SymbolicLu":
        return replace(self, scatter=scatter)

    def dense_factors(self, lu_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Dense unit-lower L and upper U from one task's LU values."""
        m = self.lu_pattern.to_dense(np.asarray(lu_values, dtype=float))
        lower = np.tril(m, -1) + np.eye(self.n)
        upper = np.triu(m)
        return lower, upper


def _check(status, col):
    if status == STRUCTURALLY_SINGULAR:
        raise StructurallySingularError(f"column {col} has no pivot candidates")
    if status == NUMERICALLY_SINGULAR:
        raise SingularMatrixError(f"column {col} has only zero pivot candidates")


def factorize_initial(
    a: SparseCcs,
    pivot_tol: float = 1e-3,
    base_row: Optional[Permutation] = None,
    base_col: Optional[Permutation] = None,
    narrow_threshold: int = 32,
    scalar_threshold: int = 2,
    vmad_width: int = 4,
) -> Tuple[SymbolicLu, np.ndarray]:
    """One-time pivoting factorization of ``a`` that freezes the pattern.

    ``a`` is the pre-ordered matrix, i.e. ``a = base_row * J * base_col``
    (identity when omitted). Returns the symbolic state relative to ``J`` and
    the LU values of ``a`` in ``lu_pattern`` layout.
    """
    n = a.n_cols
    if a.n_rows != n:
        raise StructuralError("factorize_initial needs a square matrix")
    values = np.zeros(a.nnz) if a.values is None else np.asarray(a.values, dtype=float)
    status, bad, pinv, lp, li, lx, up, ui, ux = gp_factor(
        n, a.col_ptr.astype(np.int64), a.row_ix.astype(np.int64), values, float(pivot_tol))
    _check(status, bad)
    base_row = Permutation.identity(n) if base_row is None else base_row
    base_col = Permutation.identity(n) if base_col is None else base_col
    perm_row = base_row.then(Permutation(pinv))
    lu_pattern, lu_values = _merge_factors(n, lp, li, lx, up, ui, ux)
    sym = symbolic_from_pattern(lu_pattern, perm_row, base_col, a.nnz,
                                narrow_threshold, scalar_threshold, vmad_width)
    return sym, lu_values


def _merge_factors(n, lp, li, lx, up, ui, ux):
    """Combine L (strictly lower part) and U into one sorted CCS pattern."""
    rows_all, vals_all, ptr = [], [], [0]
    for j in range(n):
        r_u = ui[up[j]:up[j + 1]]
        v_u = ux[up[j]:up[j + 1]]
        r_l = li[lp[j] + 1:lp[j + 1]]
        v_l = lx[lp[j] + 1:lp[j + 1]]
        r = np.concatenate([r_u, r_l])
        v = np.concatenate([v_u, v_l])
        o = np.argsort(r, kind="stable")
        rows_all.append(r[o])
        vals_all.append(v[o])
        ptr.append(ptr[-1] + len(r))
    row_ix = np.concatenate(rows_all).astype(INDEX_DTYPE) if n else np.empty(0, INDEX_DTYPE)
    vals = np.concatenate(vals_all) if n else np.empty(0)
    col_ptr = np.asarray(ptr, dtype=INDEX_DTYPE)
    diag = np.empty(n, dtype=INDEX_DTYPE)
    for j in range(n):
        seg = row_ix[col_ptr[j]:col_ptr[j + 1]]
        k = np.searchsorted(seg, j)
        if k >= len(seg) or seg[k] != j:
            raise StructuralError(f"LU pattern lacks diagonal in column {j}")
        diag[j] = col_ptr[j] + k
    return SparseCcs(n, n, col_ptr, row_ix, diag), vals


def symbolic_from_pattern(
    lu: SparseCcs,
    perm_row: Permutation,
    perm_col: Permutation,
    a_nnz: int,
    narrow_threshold: int = 32,
    scalar_threshold: int = 2,
    vmad_width: int = 4,
) -> SymbolicLu:
    """Derive dependency lists, VMAD maps, solve orders and the schedule."""
    n = lu.n_cols
    cp, ri, dp = lu.col_ptr, lu.row_ix, lu.diag_ptr
    u_ptr = np.zeros(n + 1, dtype=np.int64)
    u_rows, u_slots = [], []
    vmad_ptr = [0]
    vmad_src, vmad_dst = [], []
    for j in range(n):
        col_rows = ri[cp[j]:cp[j + 1]]
        for s in range(cp[j], dp[j]):
            r = int(ri[s])
            u_rows.append(r)
            u_slots.append(s)
            src = np.arange(dp[r] + 1, cp[r + 1])
            if len(src):
                k = np.searchsorted(col_rows, ri[src])
                if np.any(k >= len(col_rows)) or np.any(col_rows[np.minimum(k, len(col_rows) - 1)] != ri[src]):
                    raise StructuralError(f"LU pattern not closed under elimination at column {j}")
                vmad_src.append(src)
                vmad_dst.append(cp[j] + k)
            vmad_ptr.append(vmad_ptr[-1] + len(src))
        u_ptr[j + 1] = len(u_rows)
    cat = (lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.empty(0, np.int64))
    u_rows_a = np.asarray(u_rows, dtype=np.int64)
    sched = build_level_schedule(n, u_ptr, u_rows_a, narrow_threshold, scalar_threshold, vmad_width)
    fs_order, bs_order = _solve_orders(lu)
    return SymbolicLu(
        n=n, perm_row=perm_row, perm_col=perm_col, lu_pattern=lu, a_nnz=int(a_nnz),
        u_ptr=u_ptr, u_rows=u_rows_a, u_slots=np.asarray(u_slots, dtype=np.int64),
        vmad_ptr=np.asarray(vmad_ptr, dtype=np.int64), vmad_src=cat(vmad_src), vmad_dst=cat(vmad_dst),
        fs_order=fs_order, bs_order=bs_order, schedule=sched,
    )


def build_level_schedule(
    n: int,
    u_ptr: np.ndarray,
    u_rows: np.ndarray,
    narrow_threshold: int = 32,
    scalar_threshold: int = 2,
    vmad_width: int = 4,
) -> LevelSchedule:
    """Group columns by dependency depth and tag each level's stage.

    A level is ``bulk`` with at least ``narrow_threshold`` columns, ``scalar``
    with fewer than ``scalar_threshold`` and ``narrow`` otherwise.
    """
    level = np.zeros(n, dtype=np.int64)
    for j in range(n):
        deps = u_rows[u_ptr[j]:u_ptr[j + 1]]
        if len(deps):
            if np.any(deps >= j):
                raise AssertionError(f"column {j} depends on a later column")
            level[j] = level[deps].max() + 1
    n_levels = int(level.max()) + 1 if n else 0
    order = np.argsort(level, kind="stable")
    bounds = np.searchsorted(level[order], np.arange(n_levels + 1))
    levels = tuple(order[bounds[k]:bounds[k + 1]] for k in range(n_levels))
    tags = []
    for lv in levels:
        if len(lv) < scalar_threshold:
            tags.append(SCALAR)
        elif len(lv) < narrow_threshold:
            tags.append(NARROW)
        else:
            tags.append(BULK)
    return LevelSchedule(levels, tuple(tags), level, narrow_threshold, scalar_threshold, vmad_width)


def _solve_orders(lu: SparseCcs) -> Tuple[np.ndarray, np.ndarray]:
    """Level-ordered column sequences for forward and backward substitution."""
    n = lu.n_cols
    crs, _ = ccs_to_crs_pattern(lu)
    fs_level = np.zeros(n, dtype=np.int64)
    for i in range(n):
        # y[i] is final once every L column k < i with L(i, k) != 0 has run
        cols = crs.col_ix[crs.row_ptr[i]:crs.diag_ptr[i]]
        if len(cols):
            fs_level[i] = fs_level[cols].max() + 1
    bs_level = np.zeros(n, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        cols = crs.col_ix[crs.diag_ptr[i] + 1:crs.row_ptr[i + 1]]
        if len(cols):
            bs_level[i] = bs_level[cols].max() + 1
    idx = np.arange(n)
    return np.lexsort((idx, fs_level)), np.lexsort((-idx, bs_level))


def refactor_into_symbolic_layout(sym: SymbolicLu, a_values_in_lu_layout: np.ndarray) -> np.ndarray:
    """Reference (scalar Python) refactorization of one task, for testing."""
    lu = np.array(a_values_in_lu_layout, dtype=float)
    cp, dp = sym.lu_pattern.col_ptr, sym.lu_pattern.diag_ptr
    for j in range(sym.n):
        for d in range(sym.u_ptr[j], sym.u_ptr[j + 1]):
            xr = lu[sym.u_slots[d]]
            for p in range(sym.vmad_ptr[d], sym.vmad_ptr[d + 1]):
                lu[sym.vmad_dst[p]] -= xr * lu[sym.vmad_src[p]]
        for s in range(dp[j] + 1, cp[j + 1]):
            lu[s] = lu[s] / lu[dp[j]]
    return lu


def level_sets(sched: LevelSchedule) -> List[List[int]]:
    return [lv.tolist() for lv in sched.levels]


def second_chance_refactorize(
    a: SparseCcs,
    base_row: Permutation,
    base_col: Permutation,
    pivot_tol: float = 1e-3,
) -> Tuple[SymbolicLu, np.ndarray]:
    """Fresh pivoting factorization of one task whose frozen pivots failed.

    ``a`` carries that task's values in the pre-ordered layout. The returned
    symbolic state has its own row permutation and pattern. Raises
    :class:`StructurallySingularError` or :class:`SingularMatrixError` when no
    usable pivot exists.
    """
    return factorize_initial(a, pivot_tol, base_row=base_row, base_col=base_col)

"""Batched Newton-Raphson power flow in polar form.

Arrays handed to the kernels use the mini-batch layout ``(n_mb, n, width)``:
element ``i`` of all tasks in one mini-batch is contiguous. Admittance tapes
are polar (magnitude, angle) and may be shared by all tasks, in which case
they have shape ``(1, nnz, 1)`` and are indexed with stride 0.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from numba import njit

from .grid_model import GridCase, Ybus
from .linear_solver import (
    SingularMatrixError,
    StructurallySingularError,
    SymbolicLu,
    amd_order,
    factorize_initial,
    fs_bs,
    natural_order,
    refactorize_inplace,
    second_chance_refactorize,
)
from .linear_solver.tape import from_minibatches, to_minibatches
from .sparse_core import (
    DROPPED,
    Permutation,
    ScatterLookup,
    SparseCcs,
    SparseCrs,
    build_scatter_lookup,
    ccs_from_coordinates,
    symmetrize,
)

_JIT = dict(cache=True, nogil=True, error_model="numpy")

CONVERGED = "converged"
DIVERGED = "diverged"
ISLANDED = "islanded"
SINGULAR = "singular"
FALLBACK_CONVERGED = "fallback_converged"
STATUSES = (CONVERGED, DIVERGED, ISLANDED, SINGULAR, FALLBACK_CONVERGED)
_CODE = {s: i for i, s in enumerate(STATUSES)}

PHASES = ("init", "scatter", "npm", "jacobian", "refactorize", "fsbs", "flows")


@dataclass(frozen=True)
class NrConfig:
    tol: float = 1e-8
    max_iter: int = 10
    minibatch_width: int = 4

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.minibatch_width < 1:
            raise ValueError("minibatch_width must be >= 1")


# ---------------------------------------------------------------------------
# kernels

@njit(**_JIT)
def compute_npm(row_ptr, col_ix, ymag, yang, ys, vm, va, p0, q0, dp, dq):
    """Nodal power mismatch, calculated minus specified, for every bus."""
    n_mb, n_bus, w = vm.shape
    for mb in range(n_mb):
        ym = mb * ys
        for r in range(n_bus):
            for k in range(w):
                dp[mb, r, k] = -p0[mb, r, k]
                dq[mb, r, k] = -q0[mb, r, k]
            for e in range(row_ptr[r], row_ptr[r + 1]):
                c = col_ix[e]
                for k in range(w):
                    m = ymag[ym, e, k * ys]
                    a = va[mb, r, k] - yang[ym, e, k * ys] - va[mb, c, k]
                    s = vm[mb, r, k] * m * vm[mb, c, k]
                    dp[mb, r, k] += s * np.cos(a)
                    dq[mb, r, k] += s * np.sin(a)


@njit(**_JIT)
def gather_mismatch(dp, dq, pvpq, pq, f, norm):
    """Reduced mismatch vector ``[dP(pv,pq), dQ(pq)]`` and its infinity norm per lane."""
    n_mb, _, w = dp.shape
    npp = pvpq.shape[0]
    for mb in range(n_mb):
        for k in range(w):
            norm[mb, k] = 0.0
        for i in range(npp):
            for k in range(w):
                v = dp[mb, pvpq[i], k]
                f[mb, i, k] = v
                a = abs(v)
                if a > norm[mb, k] or a != a:
                    norm[mb, k] = a
        for i in range(pq.shape[0]):
            for k in range(w):
                v = dq[mb, pq[i], k]
                f[mb, npp + i, k] = v
                a = abs(v)
                if a > norm[mb, k] or a != a:
                    norm[mb, k] = a


@njit(**_JIT)
def update_jacobian(row_ptr, col_ix, diag_ptr, ymag, yang, ys, vm, va, dst_pt, dst_pv, dst_qt, dst_qv, out):
    """Write dS/dV entries straight into permuted target slots.

    ``dst_xx[e]`` is the target slot of the block entry generated by Ybus slot
    ``e`` (or -1 when that row or column is not part of the reduced system).
    Untouched target slots (fill-in) are zeroed. Diagonals are seeded from the
    Ybus diagonal and completed while sweeping the off-diagonal entries.
    """
    n_mb, n_bus, w = vm.shape
    out[:] = 0.0
    acc = np.empty((4, w))
    for mb in range(n_mb):
        ym = mb * ys
        for r in range(n_bus):
            d = diag_ptr[r]
            for k in range(w):
                m = ymag[ym, d, k * ys]
                phi = yang[ym, d, k * ys]
                acc[0, k] = 0.0
                acc[1, k] = 2.0 * vm[mb, r, k] * m * np.cos(-phi)
                acc[2, k] = 0.0
                acc[3, k] = 2.0 * vm[mb, r, k] * m * np.sin(-phi)
            for e in range(row_ptr[r], row_ptr[r + 1]):
                if e == d:
                    continue
                c = col_ix[e]
                for k in range(w):
                    m = ymag[ym, e, k * ys]
                    a = va[mb, r, k] - va[mb, c, k] - yang[ym, e, k * ys]
                    ca = np.cos(a)
                    sa = np.sin(a)
                    vrm = vm[mb, r, k] * m
                    vcm = vm[mb, c, k] * m
                    pt = vrm * vm[mb, c, k] * sa
                    qt = -(vrm * vm[mb, c, k] * ca)
                    if dst_pt[e] >= 0:
                        out[mb, dst_pt[e], k] = pt
                    if dst_pv[e] >= 0:
                        out[mb, dst_pv[e], k] = vrm * ca
                    if dst_qt[e] >= 0:
                        out[mb, dst_qt[e], k] = qt
                    if dst_qv[e] >= 0:
                        out[mb, dst_qv[e], k] = vrm * sa
                    acc[0, k] -= pt
                    acc[1, k] += vcm * ca
                    acc[2, k] -= qt
                    acc[3, k] += vcm * sa
            for k in range(w):
                if dst_pt[d] >= 0:
                    out[mb, dst_pt[d], k] = acc[0, k]
                if dst_pv[d] >= 0:
                    out[mb, dst_pv[d], k] = acc[1, k]
                if dst_qt[d] >= 0:
                    out[mb, dst_qt[d], k] = acc[2, k]
                if dst_qv[d] >= 0:
                    out[mb, dst_qv[d], k] = acc[3, k]


@njit(**_JIT)
def update_voltage(va, vm, x, pvpq, pq, active):
    """``va[pv,pq] -= dtheta`` and ``vm[pq] -= d|V|`` on active lanes."""
    n_mb, _, w = va.shape
    npp = pvpq.shape[0]
    for mb in range(n_mb):
        for k in range(w):
            if not active[mb, k]:
                continue
            for i in range(npp):
                va[mb, pvpq[i], k] -= x[mb, i, k]
            for i in range(pq.shape[0]):
                vm[mb, pq[i], k] -= x[mb, npp + i, k]


def calc_branch_flows(ybus: Ybus, f: np.ndarray, t: np.ndarray, vm: np.ndarray, va: np.ndarray,
                      in_service: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Complex branch flows in p.u. at both ends, shape ``(n_tasks, n_branch)``.

    ``in_service`` is ``(n_branch, 1 or n_tasks)``; outaged branches carry zero flow.
    """
    v = vm * np.exp(1j * va)
    vf, vt = v[:, f], v[:, t]
    mask = np.asarray(in_service, dtype=float).T
    i_f = (ybus.yff * vf + ybus.yft * vt) * mask
    i_t = (ybus.ytf * vf + ybus.ytt * vt) * mask
    return vf * np.conj(i_f), vt * np.conj(i_t)


# ---------------------------------------------------------------------------
# patterns

@dataclass(frozen=True, eq=False)
class JacobianPattern:
    """Full 2n x 2n dS/dV block pattern plus the reduced-system filter.

    Rows ``0..n-1`` are P equations and ``n..2n-1`` Q equations; columns are
    angles then magnitudes. ``reduce[i]`` maps a full row/column to its index
    in the reduced system ``[theta(pv,pq), |V|(pq)]`` or ``DROPPED``.
    """

    n_bus: int
    pvpq: np.ndarray
    pq: np.ndarray
    full: SparseCrs
    slot_pt: np.ndarray
    slot_pv: np.ndarray
    slot_qt: np.ndarray
    slot_qv: np.ndarray
    reduce: np.ndarray
    reduced: SparseCcs

    @property
    def dim(self) -> int:
        return self.reduced.n_cols

    def dst_maps(self, lookup: ScatterLookup) -> Tuple[np.ndarray, ...]:
        """Per Ybus slot, the target slot of each of the four block entries."""
        pos = lookup.target_positions.astype(np.int64)
        return tuple(pos[s] for s in (self.slot_pt, self.slot_pv, self.slot_qt, self.slot_qv))


def build_jacobian_pattern(ybus_pattern: SparseCrs, pvpq: np.ndarray, pq: np.ndarray) -> JacobianPattern:
    n = ybus_pattern.n_rows
    nnz = ybus_pattern.nnz
    rp = ybus_pattern.row_ptr.astype(np.int64)
    counts = np.diff(rp)
    e = np.arange(nnz)
    row_of = np.repeat(np.arange(n), counts)
    slot_pt = rp[row_of] + e
    slot_pv = slot_pt + counts[row_of]
    slot_qt = 2 * nnz + slot_pt
    slot_qv = 2 * nnz + slot_pv
    col = ybus_pattern.col_ix.astype(np.int64)
    full_cols = np.empty(4 * nnz, dtype=np.int64)
    full_cols[slot_pt] = col
    full_cols[slot_pv] = n + col
    full_cols[slot_qt] = col
    full_cols[slot_qv] = n + col
    row_ptr = np.concatenate([2 * rp, 2 * nnz + 2 * rp[1:]])
    d = ybus_pattern.diag_ptr.astype(np.int64)
    diag = np.concatenate([slot_pt[d], slot_qv[d]])
    full = SparseCrs(2 * n, 2 * n, row_ptr.astype(np.int32), full_cols.astype(np.int32), diag.astype(np.int32))
    full.validate()

    pvpq = np.asarray(pvpq, dtype=np.int64)
    pq = np.asarray(pq, dtype=np.int64)
    reduce = np.full(2 * n, DROPPED, dtype=np.int64)
    reduce[pvpq] = np.arange(len(pvpq))
    reduce[n + pq] = len(pvpq) + np.arange(len(pq))
    m = len(pvpq) + len(pq)
    rows, cols = full.coordinates()
    rr, cc = reduce[rows], reduce[cols]
    keep = (rr != DROPPED) & (cc != DROPPED)
    reduced = ccs_from_coordinates(m, m, np.stack([rr[keep], cc[keep]], 1))
    return JacobianPattern(n, pvpq, pq, full, slot_pt, slot_pv, slot_qt, slot_qv, reduce, reduced)


def dense_reduced_jacobian(ybus_pattern: SparseCrs, jp: JacobianPattern, ymag, yang, vm, va) -> np.ndarray:
    """Reduced Jacobian of one task as a dense matrix in unpermuted order."""
    ident = Permutation.identity(jp.dim)
    lookup = build_scatter_lookup(jp.full, ident, ident, jp.reduced, jp.reduce, jp.reduce)
    out = np.zeros((1, jp.reduced.nnz, 1))
    update_jacobian(ybus_pattern.row_ptr.astype(np.int64), ybus_pattern.col_ix.astype(np.int64),
                    ybus_pattern.diag_ptr.astype(np.int64), _lane(ymag), _lane(yang), 0, _lane(vm), _lane(va),
                    *jp.dst_maps(lookup), out)
    return jp.reduced.to_dense(out[0, :, 0])


# ---------------------------------------------------------------------------
# frozen system

@dataclass(frozen=True, eq=False)
class LuBinding:
    """A symbolic factorization together with the Jacobian-to-LU slot maps."""

    sym: SymbolicLu
    dst: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    cp: np.ndarray
    dp: np.ndarray
    ri: np.ndarray
    row_inv: np.ndarray
    col_inv: np.ndarray
    a_lu_row: np.ndarray  # LU row of each slot of the pre-ordered A pattern

    @property
    def n_slots(self) -> int:
        return self.sym.lu_pattern.nnz


@dataclass(frozen=True, eq=False)
class NewtonSystem:
    """Everything shared read-only by all tasks of a run."""

    n_bus: int
    y_row_ptr: np.ndarray
    y_col_ix: np.ndarray
    y_diag: np.ndarray
    jac: JacobianPattern
    base: Permutation  # fill-reducing symmetric pre-ordering of the reduced system
    a_pattern: SparseCcs  # pattern of base * J * base
    a_dst: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    lu: LuBinding
    pivot_tol: float = 1e-3
    singular_tol: float = 1e-14
    ordering: str = "amd"

    @property
    def pvpq(self) -> np.ndarray:
        return self.jac.pvpq

    @property
    def pq(self) -> np.ndarray:
        return self.jac.pq

    @property
    def dim(self) -> int:
        return self.jac.dim

    def a_values(self, ymag, yang, vm, va) -> np.ndarray:
        """One task's pre-ordered A values at the given operating point."""
        out = np.zeros((1, self.a_pattern.nnz, 1))
        update_jacobian(self.y_row_ptr, self.y_col_ix, self.y_diag, _lane(ymag), _lane(yang), 0,
                        _lane(vm), _lane(va), *self.a_dst, out)
        return out[0, :, 0]

    def factorize_at(self, ymag, yang, vm, va, narrow_threshold=32, scalar_threshold=2, vmad_width=4):
        """Fresh pivoting factorization at one operating point, bound to this system."""
        a = self.a_pattern.__class__(self.a_pattern.n_rows, self.a_pattern.n_cols, self.a_pattern.col_ptr,
                                     self.a_pattern.row_ix, self.a_pattern.diag_ptr,
                                     self.a_values(ymag, yang, vm, va))
        sym, lu_values = factorize_initial(a, self.pivot_tol, base_row=self.base, base_col=self.base,
                                           narrow_threshold=narrow_threshold,
                                           scalar_threshold=scalar_threshold, vmad_width=vmad_width)
        return bind_symbolic(self.jac, self.base, sym), lu_values

    def with_lu(self, lu: LuBinding) -> "NewtonSystem":
        return NewtonSystem(self.n_bus, self.y_row_ptr, self.y_col_ix, self.y_diag, self.jac, self.base,
                            self.a_pattern, self.a_dst, lu, self.pivot_tol, self.singular_tol, self.ordering)


def _lane(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=float).reshape(1, -1, 1))


def bind_symbolic(jac: JacobianPattern, base: Permutation, sym: SymbolicLu) -> LuBinding:
    lookup = build_scatter_lookup(jac.full, sym.perm_row, sym.perm_col, sym.lu_pattern, jac.reduce, jac.reduce)
    sym = sym.with_scatter(lookup)
    pat = sym.lu_pattern
    # A rows live in the pre-ordered space; map them on to LU rows
    lu_row_of_a_row = sym.perm_row.forward[base.inverse].astype(np.int64)
    return LuBinding(
        sym=sym,
        dst=jac.dst_maps(lookup),
        cp=pat.col_ptr.astype(np.int64),
        dp=pat.diag_ptr.astype(np.int64),
        ri=pat.row_ix.astype(np.int64),
        row_inv=sym.perm_row.inverse.astype(np.int64),
        col_inv=sym.perm_col.inverse.astype(np.int64),
        a_lu_row=lu_row_of_a_row,
    )


def prepare_system(
    ybus_pattern: SparseCrs,
    pvpq: np.ndarray,
    pq: np.ndarray,
    y0: np.ndarray,
    vm0: np.ndarray,
    va0: np.ndarray,
    ordering: str = "amd",
    pivot_tol: float = 1e-3,
    singular_tol: float = 1e-14,
    narrow_threshold: int = 32,
    scalar_threshold: int = 2,
    vmad_width: int = 4,
) -> NewtonSystem:
    """Build patterns, ordering and the frozen factorization at one operating point."""
    jac = build_jacobian_pattern(ybus_pattern, pvpq, pq)
    if ordering == "amd":
        base = amd_order(symmetrize(jac.reduced))
    elif ordering == "natural":
        base = natural_order(jac.reduced)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    m = jac.dim
    rows, cols = jac.reduced.coordinates()
    a_pattern = ccs_from_coordinates(m, m, np.stack([base.forward[rows], base.forward[cols]], 1))
    a_lookup = build_scatter_lookup(jac.full, base, base, a_pattern, jac.reduce, jac.reduce)
    y_rp = ybus_pattern.row_ptr.astype(np.int64)
    y_ci = ybus_pattern.col_ix.astype(np.int64)
    y_d = ybus_pattern.diag_ptr.astype(np.int64)
    shell = NewtonSystem(ybus_pattern.n_rows, y_rp, y_ci, y_d, jac, base, a_pattern,
                         jac.dst_maps(a_lookup), None, pivot_tol, singular_tol, ordering)
    y0 = np.asarray(y0)
    lu, _ = shell.factorize_at(np.abs(y0), np.angle(y0), vm0, va0,
                               narrow_threshold, scalar_threshold, vmad_width)
    return shell.with_lu(lu)


# ---------------------------------------------------------------------------
# driver

@dataclass
class ChunkResult:
    vm: np.ndarray  # (n_tasks, n_bus)
    va: np.ndarray
    status: np.ndarray  # codes into STATUSES
    iterations: np.ndarray
    mismatch: np.ndarray
    flagged_first: np.ndarray  # frozen pivots failed at the first iteration
    timings: Dict[str, float] = field(default_factory=dict)


class _Timer:
    def __init__(self, timings: Dict[str, float]):
        self.t = timings

    def __call__(self, phase: str, t0: float) -> float:
        now = time.perf_counter()
        self.t[phase] = self.t.get(phase, 0.0) + now - t0
        return now


RefactorFn = Callable[[LuBinding, np.ndarray, np.ndarray], None]


def default_refactor(lu: LuBinding, tape: np.ndarray, flags: np.ndarray, singular_tol: float = 1e-14) -> None:
    s = lu.sym
    refactorize_inplace(tape, lu.cp, lu.dp, s.u_ptr, s.u_slots, s.vmad_ptr, s.vmad_src, s.vmad_dst,
                        singular_tol, flags)


def polar_tapes(y_values: np.ndarray, width: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Polar admittance tapes: shared ``(1, nnz, 1)`` or per task in mini-batch layout."""
    if y_values.shape[1] == 1:
        y = y_values[:, 0]
        return _lane(np.abs(y)), _lane(np.angle(y)), 0
    return to_minibatches(np.abs(y_values.T), width), to_minibatches(np.angle(y_values.T), width), 1


def nr_solve_batch(
    system: NewtonSystem,
    p0: np.ndarray,
    q0: np.ndarray,
    vm0: np.ndarray,
    va0: np.ndarray,
    y_values: np.ndarray,
    cfg: NrConfig = NrConfig(),
    refactor: Optional[RefactorFn] = None,
) -> ChunkResult:
    """Run Newton-Raphson on a batch of tasks sharing ``system``.

    ``p0``..``va0`` are task-major ``(n_tasks, n_bus)``; ``y_values`` is
    ``(nnz, 1)`` for a shared admittance matrix or ``(nnz, n_tasks)``.
    Tasks whose frozen pivots fail leave the batch and finish on their own
    with a fresh pivoting factorization.
    """
    timings: Dict[str, float] = {}
    tick = _Timer(timings)
    t0 = time.perf_counter()
    n_tasks = p0.shape[0]
    w = cfg.minibatch_width
    lu = system.lu
    refactor = refactor or (lambda b, tape, fl: default_refactor(b, tape, fl, system.singular_tol))

    vm = to_minibatches(vm0, w)
    va = to_minibatches(va0, w)
    p = to_minibatches(p0, w)
    q = to_minibatches(q0, w)
    ymag, yang, ys = polar_tapes(y_values, w)
    n_mb = vm.shape[0]
    m = system.dim
    dp = np.empty_like(vm)
    dq = np.empty_like(vm)
    f = np.empty((n_mb, m, w))
    x = np.empty((n_mb, m, w))
    norm = np.empty((n_mb, w))
    tape = np.empty((n_mb, lu.n_slots, w))
    flags = np.zeros((n_mb, w), dtype=np.uint8)
    lane_task = np.arange(n_mb * w).reshape(n_mb, w)
    active = lane_task < n_tasks
    status = np.full(n_tasks, _CODE[DIVERGED], dtype=np.int64)
    iters = np.zeros(n_tasks, dtype=np.int64)
    mism = np.full(n_tasks, np.inf)
    flagged_first = np.zeros(n_tasks, dtype=bool)
    fallback: List[Tuple[int, int]] = []
    pvpq, pq = system.pvpq, system.pq
    t0 = tick("scatter", t0)

    for it in range(cfg.max_iter + 1):
        compute_npm(system.y_row_ptr, system.y_col_ix, ymag, yang, ys, vm, va, p, q, dp, dq)
        gather_mismatch(dp, dq, pvpq, pq, f, norm)
        t0 = tick("npm", t0)
        done = active & ((norm < cfg.tol) | ~np.isfinite(norm) | (it == cfg.max_iter))
        if done.any():
            for mb, k in zip(*np.nonzero(done)):
                t = lane_task[mb, k]
                mism[t] = norm[mb, k]
                iters[t] = it
                status[t] = _CODE[CONVERGED] if norm[mb, k] < cfg.tol else _CODE[DIVERGED]
            active &= ~done
        if not active.any():
            break
        update_jacobian(system.y_row_ptr, system.y_col_ix, system.y_diag, ymag, yang, ys, vm, va, *lu.dst, tape)
        t0 = tick("jacobian", t0)
        flags[:] = 0
        refactor(lu, tape, flags)
        t0 = tick("refactorize", t0)
        bad = active & (flags != 0)
        if bad.any():
            for mb, k in zip(*np.nonzero(bad)):
                t = int(lane_task[mb, k])
                fallback.append((t, it))
                if it == 0:
                    flagged_first[t] = True
            active &= ~bad
        fs_bs(tape, f, lu.row_inv, lu.col_inv, lu.cp, lu.dp, lu.ri, lu.sym.fs_order, lu.sym.bs_order, x)
        update_voltage(va, vm, x, pvpq, pq, active)
        t0 = tick("fsbs", t0)

    vm_out = from_minibatches(vm, n_tasks)
    va_out = from_minibatches(va, n_tasks)
    t0 = tick("scatter", t0)
    for t, it in fallback:
        y_t = y_values[:, 0] if y_values.shape[1] == 1 else y_values[:, t]
        st, n_it, mm = solve_fallback(system, vm_out[t], va_out[t], p0[t], q0[t], y_t, it, cfg, timings)
        status[t], iters[t], mism[t] = _CODE[st], n_it, mm
    return ChunkResult(vm_out, va_out, status, iters, mism, flagged_first, timings)


def solve_fallback(
    system: NewtonSystem,
    vm: np.ndarray,
    va: np.ndarray,
    p0: np.ndarray,
    q0: np.ndarray,
    y: np.ndarray,
    start_iter: int,
    cfg: NrConfig,
    timings: Optional[Dict[str, float]] = None,
) -> Tuple[str, int, float]:
    """Continue one task alone with its own pivoting factorization.

    ``vm``/``va`` are updated in place. The private factorization is kept for
    the rest of the task's iterations and redone whenever its pivots fail.
    Returns ``(status, iterations, final mismatch norm)``.
    """
    tick = _Timer(timings if timings is not None else {})
    t0 = time.perf_counter()
    ymag, yang = _lane(np.abs(y)), _lane(np.angle(y))
    vm_l, va_l = _lane(vm), _lane(va)
    p, q = _lane(p0), _lane(q0)
    dp, dq = np.empty_like(vm_l), np.empty_like(vm_l)
    m = system.dim
    f = np.empty((1, m, 1))
    x = np.empty((1, m, 1))
    norm = np.empty((1, 1))
    binding: Optional[LuBinding] = None
    active = np.ones((1, 1), dtype=bool)
    result = (DIVERGED, cfg.max_iter, np.inf)
    for it in range(start_iter, cfg.max_iter + 1):
        compute_npm(system.y_row_ptr, system.y_col_ix, ymag, yang, 0, vm_l, va_l, p, q, dp, dq)
        gather_mismatch(dp, dq, system.pvpq, system.pq, f, norm)
        t0 = tick("npm", t0)
        nv = float(norm[0, 0])
        if nv < cfg.tol:
            result = (FALLBACK_CONVERGED, it, nv)
            break
        if not np.isfinite(nv) or it == cfg.max_iter:
            result = (DIVERGED, it, nv)
            break
        tape = None
        if binding is not None:
            tape = np.empty((1, binding.n_slots, 1))
            update_jacobian(system.y_row_ptr, system.y_col_ix, system.y_diag, ymag, yang, 0, vm_l, va_l,
                            *binding.dst, tape)
            flags = np.zeros((1, 1), dtype=np.uint8)
            default_refactor(binding, tape, flags, system.singular_tol)
            if flags[0, 0]:
                tape = None
        if tape is None:
            try:
                binding, lu_values = system.factorize_at(ymag, yang, vm_l, va_l)
            except (SingularMatrixError, StructurallySingularError):
                result = (SINGULAR, it, nv)
                break
            tape = lu_values.reshape(1, -1, 1)
        t0 = tick("refactorize", t0)
        fs_bs(tape, f, binding.row_inv, binding.col_inv, binding.cp, binding.dp, binding.ri,
              binding.sym.fs_order, binding.sym.bs_order, x)
        update_voltage(va_l, vm_l, x, system.pvpq, system.pq, active)
        t0 = tick("fsbs", t0)
    vm[:] = vm_l[0, :, 0]
    va[:] = va_l[0, :, 0]
    return result

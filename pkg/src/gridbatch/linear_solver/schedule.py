"""Column-level execution plan for small batches.

Levels of the column DAG are turned into phases separated by barriers. Wide
levels hand whole columns to workers. Once levels become narrow, unfinished
later columns run their already-satisfiable updates early and remember how
far they got. Single-column levels split each update into strips. Every
column still applies its updates in ascending dependency order, so the
result is bitwise identical to the sequential refactorization.
"""
from __future__ import annotations

from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .kernels import run_ops
from .symbolic import BULK, SCALAR, SymbolicLu

VMAD, NORMALIZE = 0, 1


@dataclass(frozen=True, eq=False)
class ExecutionPlan:
    """``phases[i]`` is a list of units; a unit is an ``(k, 4)`` op array run by one worker."""

    phases: List[List[np.ndarray]]
    eager: bool

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    def critical_ops(self, sym: SymbolicLu) -> int:
        """Sum over phases of the largest unit cost (VMAD pairs + normalised entries)."""
        total = 0
        for units in self.phases:
            total += max((_unit_cost(u, sym) for u in units), default=0)
        return total

    def tail_ops(self, sym: SymbolicLu, start_phase: int) -> int:
        """All work executed from ``start_phase`` on."""
        return sum(_unit_cost(u, sym) for units in self.phases[start_phase:] for u in units)


def _unit_cost(unit: np.ndarray, sym: SymbolicLu) -> int:
    cost = 0
    cp, dp = sym.lu_pattern.col_ptr, sym.lu_pattern.diag_ptr
    for kind, a, p0, p1 in unit.tolist():
        cost += (p1 - p0) if kind == VMAD else int(cp[a + 1] - dp[a] - 1) + 1
    return cost


def _dep_ops(sym: SymbolicLu, d0: int, d1: int) -> List[tuple]:
    return [(VMAD, d, int(sym.vmad_ptr[d]), int(sym.vmad_ptr[d + 1]))
            for d in range(d0, d1) if sym.vmad_ptr[d + 1] > sym.vmad_ptr[d]]


def build_plan(sym: SymbolicLu, eager: bool = True) -> ExecutionPlan:
    """Turn the level schedule into phases of independent units."""
    sched = sym.schedule
    n = sym.n
    progress = sym.u_ptr[:-1].copy()  # next dependency to apply, per column
    done = np.zeros(n, dtype=bool)
    tail = False
    phases: List[List[np.ndarray]] = []
    for lvl, tag in zip(sched.levels, sched.tags):
        tail = tail or tag != BULK
        units: List[np.ndarray] = []
        sub_phases: List[List[np.ndarray]] = []
        for j in lvl.tolist():
            d0, d1 = int(progress[j]), int(sym.u_ptr[j + 1])
            if tag == SCALAR and eager:
                # one sub-phase per dependency, its update split into strips
                for d in range(d0, d1):
                    p0, p1 = int(sym.vmad_ptr[d]), int(sym.vmad_ptr[d + 1])
                    if p1 == p0:
                        continue
                    edges = np.linspace(p0, p1, min(sched.vmad_width, p1 - p0) + 1).astype(np.int64)
                    sub_phases.append([np.array([(VMAD, d, a, b)], dtype=np.int64)
                                       for a, b in zip(edges[:-1], edges[1:]) if b > a])
                sub_phases.append([np.array([(NORMALIZE, j, 0, 0)], dtype=np.int64)])
            else:
                units.append(np.array(_dep_ops(sym, d0, d1) + [(NORMALIZE, j, 0, 0)], dtype=np.int64))
            progress[j] = d1
        if tail and eager:
            # later columns consume every dependency that is already final
            level_set = set(lvl.tolist())
            for c in np.flatnonzero(~done).tolist():
                if c in level_set:
                    continue
                d0 = d = int(progress[c])
                while d < sym.u_ptr[c + 1] and done[sym.u_rows[d]]:
                    d += 1
                if d > d0:
                    ops = _dep_ops(sym, d0, d)
                    if ops:
                        units.append(np.array(ops, dtype=np.int64))
                    progress[c] = d
        if sub_phases:
            sub_phases[0] = units + sub_phases[0]
            phases.extend(sub_phases)
        else:
            phases.append(units)
        done[lvl] = True
    return ExecutionPlan(phases, eager)


def execute_schedule(
    sym: SymbolicLu,
    lu: np.ndarray,
    flags: np.ndarray,
    workers: int = 1,
    singular_tol: float = 1e-14,
    plan: Optional[ExecutionPlan] = None,
    executor: Optional[Executor] = None,
) -> ExecutionPlan:
    """Refactorize ``lu`` (mini-batch layout) in place following the plan.

    Units of a phase are dealt round-robin to ``workers`` threads; each worker
    runs its units back to back in a nogil kernel, and phases are separated by
    a barrier.
    """
    plan = plan or build_plan(sym)
    cp, dp = sym.lu_pattern.col_ptr.astype(np.int64), sym.lu_pattern.diag_ptr.astype(np.int64)
    args = (cp, dp, sym.u_slots, sym.vmad_src, sym.vmad_dst, float(singular_tol), flags)
    if workers <= 1:
        for units in plan.phases:
            for u in units:
                run_ops(lu, u, *args)
        return plan
    own = executor is None
    pool = executor or ThreadPoolExecutor(max_workers=workers)
    try:
        for units in plan.phases:
            if len(units) <= 1:
                for u in units:
                    run_ops(lu, u, *args)
                continue
            buckets = [units[i::workers] for i in range(min(workers, len(units)))]
            batches = [np.concatenate(b) for b in buckets]
            futures = [pool.submit(run_ops, lu, ops, *args) for ops in batches]
            for f in futures:
                f.result()
    finally:
        if own:
            pool.shutdown()
    return plan

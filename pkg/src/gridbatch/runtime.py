"""Pipeline orchestration: one-time initialization, scenario expansion, batched solves."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from .grid_model import (
    CaseError,
    GridCase,
    Profiles,
    ScenarioTable,
    Ybus,
    assemble_profiles,
    build_ybus,
    connected_mask,
)
from .linear_solver import execute_schedule
from .linear_solver.schedule import build_plan
from .newton import (
    _CODE,
    CONVERGED,
    DIVERGED,
    FALLBACK_CONVERGED,
    ISLANDED,
    PHASES,
    SINGULAR,
    STATUSES,
    NewtonSystem,
    NrConfig,
    calc_branch_flows,
    compute_npm,
    gather_mismatch,
    nr_solve_batch,
    polar_tapes,
    prepare_system,
)
from .linear_solver.tape import to_minibatches

MODES = ("single", "timeseries", "contingency", "montecarlo")
RESTART_FRACTION = 0.05


def default_workers() -> int:
    """Physical core count, falling back to the logical count."""
    n = psutil.cpu_count(logical=False) or os.cpu_count() or 1
    return max(1, int(n))


@dataclass(frozen=True)
class SolverOptions:
    ordering: str = "amd"
    pivot_tol: float = 1e-3
    singular_tol: float = 1e-14
    narrow_threshold: int = 32
    scalar_threshold: int = 2
    vmad_width: int = 4

    def __post_init__(self):
        if self.ordering not in ("amd", "natural"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if not 0 < self.pivot_tol <= 1:
            raise ValueError("pivot_tol must be in (0, 1]")
        if not self.singular_tol >= 0:
            raise ValueError("singular_tol must be >= 0")
        if self.scalar_threshold < 1 or self.narrow_threshold < self.scalar_threshold:
            raise ValueError("need 1 <= scalar_threshold <= narrow_threshold")
        if self.vmad_width < 1:
            raise ValueError("vmad_width must be >= 1")


@dataclass
class JobSpec:
    case: GridCase
    mode: str = "single"
    scenario: Optional[ScenarioTable] = None
    outages: Optional[List[List[int]]] = None
    sampling: Optional[dict] = None
    n_samples: int = 0
    seed: int = 0
    batch_size: int = 256
    workers: Optional[int] = None
    nr: NrConfig = field(default_factory=NrConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    start: str = "flat"
    compute_flows: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode == "contingency" and not self.outages:
            raise ValueError("contingency mode requires an outage list")
        if self.mode == "montecarlo" and (self.sampling is None or self.n_samples < 1):
            raise ValueError("montecarlo mode requires a sampling spec and n_samples >= 1")


@dataclass
class TaskResult:
    task: int
    status: str
    iterations: int
    vm: np.ndarray
    va: np.ndarray
    max_mismatch: float
    s_from: Optional[np.ndarray] = None  # MVA, complex
    s_to: Optional[np.ndarray] = None
    loading: Optional[np.ndarray] = None  # percent of rate_a, NaN when unrated


@dataclass
class RunReport:
    phase_times: Dict[str, float]
    total_time: float
    n_tasks: int
    status_counts: Dict[str, int]
    workers: int
    minibatch_width: int
    batch_size: int
    restarted: bool
    column_level: bool
    j_dim: int
    lu_nnz: int
    fill_in: int
    n_levels: int
    checksum: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class PipelineState:
    case: GridCase
    ybus: Ybus
    system: NewtonSystem
    solver: SolverOptions
    init_time: float


def initialize(case: GridCase, solver: SolverOptions = SolverOptions(), start: str = "flat") -> PipelineState:
    """Admittance matrix, Jacobian pattern, ordering and frozen factorization.

    The representative operating point is the case's own profile at the
    requested start (flat by default).
    """
    t0 = time.perf_counter()
    ybus = build_ybus(case)
    prof = assemble_profiles(case, ybus=ybus, start=start)
    system = prepare_system(
        ybus.pattern, case.pvpq, case.pq_buses, ybus.values, prof.vm0[0], prof.va0[0],
        ordering=solver.ordering, pivot_tol=solver.pivot_tol, singular_tol=solver.singular_tol,
        narrow_threshold=solver.narrow_threshold, scalar_threshold=solver.scalar_threshold,
        vmad_width=solver.vmad_width)
    return PipelineState(case, ybus, system, solver, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# sampling

def _validate_dist(bus: str, d: dict) -> dict:
    kind = d.get("dist")
    if kind == "normal":
        mu, sigma = float(d.get("mean", 1.0)), float(d.get("std", 0.0))
        if not sigma >= 0 or not np.isfinite(mu):
            raise ValueError(f"{bus}: normal needs finite mean and std >= 0")
        return {"dist": kind, "mean": mu, "std": sigma}
    if kind == "uniform":
        lo, hi = float(d.get("low", 1.0)), float(d.get("high", 1.0))
        if not lo <= hi:
            raise ValueError(f"{bus}: uniform needs low <= high")
        return {"dist": kind, "low": lo, "high": hi}
    if kind == "fixed":
        return {"dist": kind, "value": float(d.get("value", 1.0))}
    raise ValueError(f"{bus}: unknown distribution {kind!r}")


def sample_montecarlo(spec: dict, case: GridCase, n_tasks: int, seed: int = 0) -> ScenarioTable:
    """Scale each bus load by a sampled factor; one row per task.

    ``spec = {"default": {...}, "buses": {"<id>": {...}}}`` where each entry
    is ``{"dist": "normal", "mean", "std"}``, ``{"dist": "uniform", "low",
    "high"}`` or ``{"dist": "fixed", "value"}``. A bus factor multiplies both
    its active and reactive load. Output columns are net injections in MW/MVAr
    for every non-slack bus.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    default = _validate_dist("default", spec.get("default", {"dist": "fixed", "value": 1.0}))
    per_bus = {}
    for key, d in spec.get("buses", {}).items():
        bid = int(key)
        if bid not in case.bus_index:
            raise CaseError("unknown_bus", f"sampling spec references unknown bus {bid}")
        per_bus[bid] = _validate_dist(f"bus {bid}", d)
    rng = np.random.default_rng(seed)
    p_inj, q_inj = case.injections_pu()
    p_inj, q_inj = p_inj * case.base_mva, q_inj * case.base_mva
    columns, data = [], []
    for i, bus in enumerate(case.buses):
        if i == case.slack_bus:
            continue
        d = per_bus.get(bus.id, default)
        if d["dist"] == "normal":
            factor = rng.normal(d["mean"], d["std"], n_tasks)
        elif d["dist"] == "uniform":
            factor = rng.uniform(d["low"], d["high"], n_tasks)
        else:
            factor = np.full(n_tasks, d["value"])
        # net = generation - factor * load
        columns += [f"bus:{bus.id}:p", f"bus:{bus.id}:q"]
        data += [p_inj[i] + bus.p_load - factor * bus.p_load, q_inj[i] + bus.q_load - factor * bus.q_load]
    values = np.stack(data, 1) if data else np.zeros((n_tasks, 0))
    return ScenarioTable(columns, values)


# ---------------------------------------------------------------------------
# execution

@dataclass
class BatchOutcome:
    vm: np.ndarray
    va: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    mismatch: np.ndarray
    s_from: Optional[np.ndarray]
    s_to: Optional[np.ndarray]
    flagged_first: np.ndarray


def _initial_mismatch(system: NewtonSystem, prof: Profiles, width: int) -> np.ndarray:
    vm = to_minibatches(prof.vm0, width)
    va = to_minibatches(prof.va0, width)
    p = to_minibatches(prof.p_spec, width)
    q = to_minibatches(prof.q_spec, width)
    ymag, yang, ys = polar_tapes(prof.y_values, width)
    dp, dq = np.empty_like(vm), np.empty_like(vm)
    f = np.empty((vm.shape[0], system.dim, width))
    norm = np.empty((vm.shape[0], width))
    compute_npm(system.y_row_ptr, system.y_col_ix, ymag, yang, ys, vm, va, p, q, dp, dq)
    gather_mismatch(dp, dq, system.pvpq, system.pq, f, norm)
    return norm.reshape(-1)[: prof.n_tasks]


def _solve_all(state: PipelineState, system: NewtonSystem, prof: Profiles, tasks: np.ndarray, nr: NrConfig,
               batch_size: int, workers: int, pool: Optional[ThreadPoolExecutor], compute_flows: bool,
               timings: List[Dict[str, float]]) -> Tuple[BatchOutcome, bool]:
    n = prof.n_tasks
    nbr = state.case.n_branch
    out = BatchOutcome(
        vm=prof.vm0.copy(), va=prof.va0.copy(),
        status=np.full(n, _CODE[ISLANDED], dtype=np.int64), iterations=np.zeros(n, dtype=np.int64),
        mismatch=np.full(n, np.nan),
        s_from=np.full((n, nbr), np.nan + 0j) if compute_flows else None,
        s_to=np.full((n, nbr), np.nan + 0j) if compute_flows else None,
        flagged_first=np.zeros(n, dtype=bool))
    f_bus, t_bus = state.case.branch_ends()
    column_level = workers > 1 and len(tasks) < 2 * workers
    refactor = None
    if column_level:
        plan = build_plan(system.lu.sym)

        def refactor(lu, tape, flags):
            execute_schedule(lu.sym, tape, flags, workers=workers, singular_tol=system.singular_tol,
                             plan=plan if lu is system.lu else None, executor=pool)

    def work(idx: np.ndarray) -> Dict[str, float]:
        sub = prof.take(idx)
        res = nr_solve_batch(system, sub.p_spec, sub.q_spec, sub.vm0, sub.va0, sub.y_values, nr, refactor)
        out.vm[idx], out.va[idx] = res.vm, res.va
        out.status[idx], out.iterations[idx] = res.status, res.iterations
        out.mismatch[idx], out.flagged_first[idx] = res.mismatch, res.flagged_first
        if compute_flows:
            t0 = time.perf_counter()
            sf, st = calc_branch_flows(state.ybus, f_bus, t_bus, res.vm, res.va, sub.in_service)
            out.s_from[idx] = sf * state.case.base_mva
            out.s_to[idx] = st * state.case.base_mva
            res.timings["flows"] = res.timings.get("flows", 0.0) + time.perf_counter() - t0
        return res.timings

    chunks = [tasks[i:i + batch_size] for i in range(0, len(tasks), batch_size)]
    if column_level or pool is None or workers == 1:
        timings.extend(work(c) for c in chunks)
    else:
        timings.extend(f.result() for f in [pool.submit(work, c) for c in chunks])
    return out, column_level


def run_profiles(
    state: PipelineState,
    prof: Profiles,
    nr: NrConfig = NrConfig(),
    batch_size: int = 256,
    workers: Optional[int] = None,
    compute_flows: bool = True,
) -> Tuple[List[TaskResult], RunReport]:
    """Solve every task of ``prof`` with the frozen symbolic state of ``state``."""
    t_start = time.perf_counter()
    workers = workers or default_workers()
    n = prof.n_tasks
    t0 = time.perf_counter()
    f_bus, t_bus = state.case.branch_ends()
    connected = connected_mask(state.case.n_bus, f_bus, t_bus, prof.in_service)
    if len(connected) == 1:
        connected = np.repeat(connected, n)
    tasks = np.flatnonzero(connected)
    scatter_time = time.perf_counter() - t0

    timings: List[Dict[str, float]] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    system = state.system
    restarted = False
    try:
        out, column_level = _solve_all(state, system, prof, tasks, nr, batch_size, workers, pool,
                                       compute_flows, timings)
        n_flagged = int(out.flagged_first[tasks].sum())
        if len(tasks) and n_flagged > RESTART_FRACTION * len(tasks):
            # frozen pivots do not suit this batch: refactor at the worst starting point and redo once
            worst = tasks[int(np.argmax(_initial_mismatch(system, prof.take(tasks), nr.minibatch_width)))]
            y = prof.y_values[:, 0] if prof.shared_ybus else prof.y_values[:, worst]
            lu, _ = system.factorize_at(np.abs(y), np.angle(y), prof.vm0[worst], prof.va0[worst],
                                        state.solver.narrow_threshold, state.solver.scalar_threshold,
                                        state.solver.vmad_width)
            system = system.with_lu(lu)
            timings.clear()
            out, column_level = _solve_all(state, system, prof, tasks, nr, batch_size, workers, pool,
                                           compute_flows, timings)
            restarted = True
    finally:
        if pool is not None:
            pool.shutdown()

    n_units = max(1, min(workers, -(-max(len(tasks), 1) // batch_size))) if not column_level else 1
    phase = {p: 0.0 for p in PHASES}
    for t in timings:
        for k, v in t.items():
            phase[k] += v
    phase = {k: v / n_units for k, v in phase.items()}
    phase["init"] = state.init_time
    phase["scatter"] += scatter_time
    total = time.perf_counter() - t_start + state.init_time

    status_names = np.array(STATUSES)[out.status]
    results = []
    rate = np.array([b.rate_a for b in state.case.branches], dtype=float)
    for t in range(n):
        loading = None
        if compute_flows:
            smax = np.maximum(np.abs(out.s_from[t]), np.abs(out.s_to[t]))
            with np.errstate(divide="ignore", invalid="ignore"):
                loading = np.where(rate > 0, 100.0 * smax / np.where(rate > 0, rate, 1.0), np.nan)
        results.append(TaskResult(
            task=t, status=str(status_names[t]), iterations=int(out.iterations[t]),
            vm=out.vm[t], va=out.va[t], max_mismatch=float(out.mismatch[t]),
            s_from=None if out.s_from is None else out.s_from[t],
            s_to=None if out.s_to is None else out.s_to[t], loading=loading))
    counts = {s: int(np.sum(out.status == _CODE[s])) for s in STATUSES}
    sym = system.lu.sym
    report = RunReport(
        phase_times=phase, total_time=total, n_tasks=n, status_counts=counts, workers=workers,
        minibatch_width=nr.minibatch_width, batch_size=batch_size, restarted=restarted,
        column_level=column_level, j_dim=sym.n, lu_nnz=sym.lu_pattern.nnz, fill_in=sym.fill_in,
        n_levels=sym.schedule.n_levels, checksum=results_checksum(results))
    return results, report


def build_profiles(job: JobSpec, ybus: Optional[Ybus] = None) -> Profiles:
    scenario = job.scenario
    if job.mode == "montecarlo":
        scenario = sample_montecarlo(job.sampling, job.case, job.n_samples, job.seed)
    outages = job.outages if job.mode == "contingency" else None
    return assemble_profiles(job.case, scenario=scenario, ybus=ybus, outages=outages, start=job.start)


def run(job: JobSpec, state: Optional[PipelineState] = None) -> Tuple[List[TaskResult], RunReport]:
    """Initialize (unless ``state`` is given), expand scenarios and solve every task."""
    state = state or initialize(job.case, job.solver, start=job.start)
    prof = build_profiles(job, state.ybus)
    return run_profiles(state, prof, job.nr, job.batch_size, job.workers, job.compute_flows)


# ---------------------------------------------------------------------------
# output

def results_checksum(results: Sequence[TaskResult]) -> str:
    h = hashlib.sha256()
    for r in results:
        h.update(r.status.encode())
        h.update(np.int64(r.iterations).tobytes())
        h.update(np.ascontiguousarray(r.vm, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(r.va, dtype=np.float64).tobytes())
    return h.hexdigest()


def results_csv(results: Sequence[TaskResult], case: GridCase, voltages: bool = False) -> str:
    """One row per task: status, iterations, final mismatch, optionally |V| and angle (deg) per bus."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["task", "status", "iterations", "max_mismatch"]
    if voltages:
        header += [f"vm:{b.id}" for b in case.buses] + [f"va:{b.id}" for b in case.buses]
    w.writerow(header)
    for r in results:
        row = [r.task, r.status, r.iterations, repr(r.max_mismatch)]
        if voltages:
            row += [repr(float(v)) for v in r.vm] + [repr(float(v)) for v in np.rad2deg(r.va)]
        w.writerow(row)
    return buf.getvalue()


def exit_code(results: Sequence[TaskResult]) -> int:
    """0 when every task converged (possibly via fallback) or was islanded, else 2."""
    bad = {DIVERGED, SINGULAR}
    return 2 if any(r.status in bad for r in results) else 0


__all__ = [
    "CONVERGED", "DIVERGED", "FALLBACK_CONVERGED", "ISLANDED", "SINGULAR", "JobSpec", "PipelineState",
    "RunReport", "SolverOptions", "TaskResult", "default_workers", "exit_code", "initialize", "results_csv",
    "results_checksum", "run", "run_profiles", "sample_montecarlo",
]

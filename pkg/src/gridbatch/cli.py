"""Command-line entry point: ``gridbatch {run,contingency,montecarlo,bench,inspect}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .grid_model import CaseError, load_case, read_outage_list, read_scenario_csv
from .newton import PHASES, NrConfig
from .runtime import (
    JobSpec,
    SolverOptions,
    default_workers,
    exit_code,
    initialize,
    results_csv,
    run,
)
from .sparse_core import StructuralError

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2

DEFAULT_SAMPLING = {"default": {"dist": "uniform", "low": 0.8, "high": 1.2}}


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _int_list(s: str) -> List[int]:
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected comma-separated integers >= 1")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("case", type=Path, help="MATPOWER .m or JSON case file")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--workers", type=_positive_int, default=None,
                        help="worker threads (default: $GRIDBATCH_WORKERS or physical cores)")
    common.add_argument("--batch-size", type=_positive_int, default=256, help="tasks per work unit")
    common.add_argument("--minibatch", type=_positive_int, default=4, help="mini-batch width")
    common.add_argument("--tol", type=_positive_float, default=1e-8, help="mismatch tolerance, p.u.")
    common.add_argument("--max-iter", type=_positive_int, default=10)
    common.add_argument("--pivot-tol", type=_positive_float, default=1e-3)
    common.add_argument("--ordering", choices=("amd", "natural"), default="amd")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--emit", choices=("csv", "json", "both"), default="both")
    common.add_argument("--voltages", action="store_true", help="add |V| and angle per bus to results.csv")
    common.add_argument("--start", choices=("flat", "case"), default="flat", help="initial voltages")

    p = argparse.ArgumentParser(prog="gridbatch", description="Batched Newton-Raphson power flow.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="solve the case, or one task per scenario row")
    r.add_argument("--scenario", type=Path, help="CSV with bus:<id>:p|q|vm|va columns, one row per task")
    c = sub.add_parser("contingency", parents=[common], help="N-1 screening over branch outages")
    c.add_argument("--outages", type=Path, help="outage list; default: every in-service branch")
    m = sub.add_parser("montecarlo", parents=[common], help="sampled load scenarios")
    m.add_argument("--spec", type=Path, help="sampling spec JSON (default: uniform +-20%% on every load)")
    m.add_argument("--samples", type=_positive_int, default=1000)
    b = sub.add_parser("bench", parents=[common], help="per-phase timings over worker counts and widths")
    b.add_argument("--spec", type=Path)
    b.add_argument("--samples", type=_positive_int, default=1000)
    b.add_argument("--workers-sweep", type=_int_list, default=None, help="e.g. 1,2,4")
    b.add_argument("--minibatch-sweep", type=_int_list, default=None, help="e.g. 1,4,8")
    b.add_argument("--warmup", type=int, default=1, help="untimed runs before each measurement")
    b.add_argument("--repeat", type=_positive_int, default=1)
    sub.add_parser("inspect", parents=[common], help="structural report: fill-in, levels, stages")
    return p


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("GRIDBATCH_WORKERS")
    if env:
        try:
            v = int(env)
        except ValueError:
            raise ValueError(f"GRIDBATCH_WORKERS={env!r} is not an integer") from None
        if v < 1:
            raise ValueError("GRIDBATCH_WORKERS must be >= 1")
        return v
    return default_workers()


def _job(args, case, **kw) -> JobSpec:
    return JobSpec(
        case=case, batch_size=args.batch_size, workers=_workers(args), seed=args.seed,
        nr=NrConfig(args.tol, args.max_iter, args.minibatch),
        solver=SolverOptions(ordering=args.ordering, pivot_tol=args.pivot_tol),
        start=args.start, **kw)


def _emit(args, case, results, report) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.emit in ("csv", "both"):
        (args.out / "results.csv").write_text(results_csv(results, case, voltages=args.voltages))
    if args.emit in ("json", "both"):
        (args.out / "report.json").write_text(report.to_json() + "\n")
    counts = ", ".join(f"{k}={v}" for k, v in report.status_counts.items() if v)
    print(f"{report.n_tasks} tasks: {counts}")


def _sampling(path: Optional[Path]) -> dict:
    if path is None:
        return DEFAULT_SAMPLING
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError("malformed", f"sampling spec: {exc.msg}", exc.lineno, exc.colno) from None


def cmd_run(args) -> int:
    case = load_case(args.case)
    scenario = read_scenario_csv(args.scenario.read_text()) if args.scenario else None
    mode = "timeseries" if scenario is not None else "single"
    results, report = run(_job(args, case, mode=mode, scenario=scenario))
    _emit(args, case, results, report)
    return exit_code(results)


def cmd_contingency(args) -> int:
    case = load_case(args.case)
    if args.outages:
        outages = read_outage_list(args.outages.read_text(), case)
    else:
        outages = [[k] for k, br in enumerate(case.branches) if br.in_service]
    results, report = run(_job(args, case, mode="contingency", outages=outages))
    _emit(args, case, results, report)
    return exit_code(results)


def cmd_montecarlo(args) -> int:
    case = load_case(args.case)
    job = _job(args, case, mode="montecarlo", sampling=_sampling(args.spec), n_samples=args.samples)
    results, report = run(job)
    _emit(args, case, results, report)
    return exit_code(results)


def cmd_bench(args) -> int:
    case = load_case(args.case)
    sampling = _sampling(args.spec)
    workers = args.workers_sweep or [_workers(args)]
    widths = args.minibatch_sweep or [args.minibatch]
    solver = SolverOptions(ordering=args.ordering, pivot_tol=args.pivot_tol)
    state = initialize(case, solver, start=args.start)
    rows = []
    worst = EXIT_OK
    for nw in workers:
        for width in widths:
            job = _job(args, case, mode="montecarlo", sampling=sampling, n_samples=args.samples)
            job.workers = nw
            job.nr = NrConfig(args.tol, args.max_iter, width)
            for _ in range(max(0, args.warmup)):
                run(job, state)
            for rep_i in range(args.repeat):
                results, report = run(job, state)
                worst = max(worst, exit_code(results))
                rows.append({"workers": nw, "minibatch": width, "repeat": rep_i, "n_tasks": report.n_tasks,
                             "phase_times": report.phase_times, "total_time": report.total_time,
                             "status_counts": report.status_counts, "checksum": report.checksum})
    print(f"{'workers':>7} {'width':>5} " + " ".join(f"{p:>11}" for p in PHASES) + f" {'total':>9}")
    for r in rows:
        print(f"{r['workers']:>7} {r['minibatch']:>5} "
              + " ".join(f"{r['phase_times'][p]:>11.5f}" for p in PHASES) + f" {r['total_time']:>9.4f}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "bench.json").write_text(json.dumps({"case": case.name, "samples": args.samples,
                                                     "warmup": args.warmup, "runs": rows}, indent=2) + "\n")
    return worst


def cmd_inspect(args) -> int:
    case = load_case(args.case)
    state = initialize(case, SolverOptions(ordering=args.ordering, pivot_tol=args.pivot_tol), start=args.start)
    sym = state.system.lu.sym
    sched = sym.schedule
    hist = sched.histogram()
    info = {
        "case": case.name, "buses": case.n_bus, "branches": case.n_branch,
        "pv": int(len(case.pv_buses)), "pq": int(len(case.pq_buses)),
        "ybus_nnz": state.ybus.pattern.nnz, "j_dim": sym.n, "j_nnz": sym.a_nnz,
        "lu_nnz": sym.lu_pattern.nnz, "fill_in": sym.fill_in, "refactor_flops": sym.n_flops,
        "levels": sched.n_levels, "stages": sched.stage_counts(),
    }
    for k, v in info.items():
        print(f"{k:>15}: {v}")
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "levels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "columns", "stage"])
        for lvl, (count, tag) in enumerate(zip(hist.tolist(), sched.tags)):
            w.writerow([lvl, count, tag])
    if args.emit in ("json", "both"):
        (args.out / "inspect.json").write_text(json.dumps(info, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "contingency": cmd_contingency, "montecarlo": cmd_montecarlo,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (CaseError, StructuralError, ValueError, OSError, ArithmeticError) as exc:
        print(f"gridbatch: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

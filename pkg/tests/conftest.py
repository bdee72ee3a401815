"""Shared fixtures and independent dense oracles."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gridbatch.grid_model import GridCase, load_case

FIXTURES = Path(__file__).parent / "fixtures"
CASES = ("case2", "case14", "case30", "case118", "case300")

_ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    """Collects one summary line per acceptance criterion."""
    def log(number: int, passed, detail: str):
        word = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {number}: {word} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def fixture_case(name: str) -> GridCase:
    return load_case(FIXTURES / f"{name}.m")


@pytest.fixture(scope="session")
def case30() -> GridCase:
    return fixture_case("case30")


@pytest.fixture(scope="session")
def case300() -> GridCase:
    return fixture_case("case300")


@pytest.fixture(scope="session")
def case2() -> GridCase:
    return fixture_case("case2")


# ---------------------------------------------------------------------------
# dense oracles

def dense_ybus(case: GridCase) -> np.ndarray:
    """Admittance matrix built entry by entry from the pi-model of every branch."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = case.bus_index[br.from_bus], case.bus_index[br.to_bus]
        y_series = 1.0 / complex(br.r, br.x)
        ratio = br.tap * np.exp(1j * np.pi * br.shift / 180.0)
        half_b = 0.5j * br.b_charge
        Y[f, f] += (y_series + half_b) / (br.tap ** 2)
        Y[t, t] += y_series + half_b
        Y[f, t] -= y_series / np.conj(ratio)
        Y[t, f] -= y_series / ratio
    for i, bus in enumerate(case.buses):
        Y[i, i] += complex(bus.gs, bus.bs) / case.base_mva
    return Y


def dense_power(Y: np.ndarray, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    V = vm * np.exp(1j * va)
    return V * np.conj(Y @ V)


def dense_newton(Y, p, q, vm, va, pv, pq, tol=1e-8, max_iter=30):
    """Complex-arithmetic Newton solver with the textbook dS/dV formulas.

    Returns ``(vm, va, converged, iterations)``.
    """
    vm, va = np.array(vm, float), np.array(va, float)
    pvpq = np.concatenate([pv, pq])
    S_spec = p + 1j * q
    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        mis = V * np.conj(Y @ V) - S_spec
        F = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        if np.max(np.abs(F)) < tol:
            return vm, va, True, it
        Ibus = Y @ V
        dV = np.diag(V)
        dS_dVm = dV @ np.conj(Y @ np.diag(V / np.abs(V))) + np.conj(np.diag(Ibus)) @ np.diag(V / np.abs(V))
        dS_dVa = 1j * dV @ np.conj(np.diag(Ibus) - Y @ dV)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -F)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
    return vm, va, False, max_iter


def symbolic_fill(mask: np.ndarray) -> np.ndarray:
    """Boolean Gaussian elimination without pivoting; returns the L+U pattern."""
    m = np.array(mask, dtype=bool)
    n = m.shape[0]
    for k in range(n):
        rows = np.flatnonzero(m[k + 1:, k]) + k + 1
        cols = np.flatnonzero(m[k, k + 1:]) + k + 1
        if len(rows) and len(cols):
            m[np.ix_(rows, cols)] = True
    return m


def random_pattern(rng, n, density, diag=True):
    mask = rng.random((n, n)) < density
    if diag:
        mask |= np.eye(n, dtype=bool)
    return mask


def random_dominant(rng, n, density):
    """Random sparse matrix with a dominant diagonal, so no pivoting is needed."""
    mask = random_pattern(rng, n, density)
    A = np.where(mask, rng.normal(size=(n, n)), 0.0)
    A[np.diag_indices(n)] = np.abs(A).sum(1) + 1.0
    return A


# 11x11 pattern: a few independent leaves feeding a narrowing chain of dependent columns.
CHAIN_ENTRIES = [
    (0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7), (8, 8), (9, 9), (10, 10),
    (0, 5), (5, 0), (1, 5), (5, 1), (2, 6), (6, 2), (3, 6), (6, 3), (4, 7), (7, 4),
    (5, 8), (8, 5), (6, 8), (8, 6), (7, 9), (9, 7), (8, 9), (9, 8), (9, 10), (10, 9),
    (0, 10), (10, 0), (2, 7), (4, 9),
]


def chain_matrix(rng=None) -> np.ndarray:
    rng = rng or np.random.default_rng(6)
    A = np.zeros((11, 11))
    for r, c in CHAIN_ENTRIES:
        A[r, c] = rng.uniform(0.5, 1.5) * (1 if r == c else -0.3)
    A[np.diag_indices(11)] += 4.0
    return A


def dense_to_crs(A: np.ndarray):
    """Pattern (with structural diagonal) and values of a dense matrix, CRS order."""
    from gridbatch.sparse_core import crs_from_coordinates

    r, c = np.nonzero(A)
    pat = crs_from_coordinates(A.shape[0], A.shape[1], list(zip(r.tolist(), c.tolist())))
    rr, cc = pat.coordinates()
    return pat, A[rr, cc]


def factor_dense(A: np.ndarray, pivot_tol: float = 1e-3):
    """Initial factorization of a dense matrix; returns (sym, crs pattern, lookup into LU slots)."""
    from gridbatch.linear_solver import factorize_initial
    from gridbatch.sparse_core import build_scatter_lookup, crs_to_ccs_pattern

    pat, vals = dense_to_crs(A)
    ccs, m = crs_to_ccs_pattern(pat)
    cvals = np.empty(len(vals))
    cvals[m] = vals
    a = ccs.__class__(ccs.n_rows, ccs.n_cols, ccs.col_ptr, ccs.row_ix, ccs.diag_ptr, cvals)
    sym, lu0 = factorize_initial(a, pivot_tol)
    lookup = build_scatter_lookup(pat, sym.perm_row, sym.perm_col, sym.lu_pattern)
    return sym, pat, lookup, lu0


def scatter_batch(lookup, values_task_major: np.ndarray, width: int) -> np.ndarray:
    """Scatter per-task CRS values into a mini-batch LU tape."""
    from gridbatch.linear_solver import to_minibatches

    lu = np.stack([lookup.scatter(v) for v in values_task_major])
    return to_minibatches(lu, width)


def refactor_batch(sym, tape: np.ndarray, singular_tol: float = 1e-14) -> np.ndarray:
    from gridbatch.linear_solver import refactorize_inplace

    flags = np.zeros(tape.shape[::2], dtype=np.uint8)
    p = sym.lu_pattern
    refactorize_inplace(tape, p.col_ptr.astype(np.int64), p.diag_ptr.astype(np.int64), sym.u_ptr, sym.u_slots,
                        sym.vmad_ptr, sym.vmad_src, sym.vmad_dst, singular_tol, flags)
    return flags


def compensated_ring(x23: float = 0.1):
    """Three-bus ring; a negative ``x23`` models a series-compensated 2-3 line."""
    from gridbatch.grid_model import Branch, Bus, Generator

    return GridCase(100.0, [Bus(1, "slack"), Bus(2, "pq", 30.0, 10.0), Bus(3, "pq", 40.0, 15.0)],
                    [Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, x23), Branch(1, 3, 0.0, 0.1)],
                    [Generator(1, 0.0, 1.0)])


def fallback_batch(n_tasks: int = 32, bad_task: int = 5):
    """Frozen state of the plain ring plus a batch whose ``bad_task`` uses the compensated values.

    The compensated value set zeroes the first frozen pivot at flat start.
    """
    from gridbatch.grid_model import Profiles, assemble_profiles, build_ybus
    from gridbatch.runtime import initialize

    base = compensated_ring()
    state = initialize(base)
    prof = assemble_profiles(base, ybus=state.ybus, start="flat")
    y = np.repeat(state.ybus.values[:, None], n_tasks, 1)
    y[:, bad_task] = build_ybus(compensated_ring(-0.1)).values
    rep = lambda a: np.repeat(a, n_tasks, 0)
    prof = Profiles(rep(prof.p_spec), rep(prof.q_spec), rep(prof.vm0), rep(prof.va0), y,
                    np.ones((base.n_branch, n_tasks), dtype=bool))
    return state, prof

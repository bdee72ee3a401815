import itertools

import numpy as np
import pytest
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from conftest import (
    factor_dense,
    chain_matrix,
    random_dominant,
    refactor_batch,
    scatter_batch,
    symbolic_fill,
)
from gridbatch.linear_solver import (
    BULK,
    SCALAR,
    BatchTape,
    SingularMatrixError,
    StructurallySingularError,
    amd_order,
    build_level_schedule,
    build_plan,
    execute_schedule,
    factorize_initial,
    from_minibatches,
    fs_bs,
    gp_factor,
    gp_solve,
    natural_order,
    refactorize_workspace,
    second_chance_refactorize,
    to_minibatches,
)
from gridbatch.linear_solver.symbolic import refactor_into_symbolic_layout
from gridbatch.sparse_core import ccs_from_coordinates, symmetrize


def _ccs(A):
    r, c = np.nonzero(A)
    m = ccs_from_coordinates(A.shape[0], A.shape[1], np.stack([r, c], 1))
    rr, cc = m.coordinates()
    return m.__class__(m.n_rows, m.n_cols, m.col_ptr, m.row_ix, m.diag_ptr, A[rr, cc])


def _permuted(sym, A):
    return sym.perm_row.matrix() @ A @ sym.perm_col.matrix().T


def _solve(sym, lu_tape, b_task_major, width):
    p = sym.lu_pattern
    b = to_minibatches(b_task_major, width)
    x = np.empty_like(b)
    fs_bs(lu_tape, b, sym.perm_row.inverse.astype(np.int64), sym.perm_col.inverse.astype(np.int64),
          p.col_ptr.astype(np.int64), p.diag_ptr.astype(np.int64), p.row_ix.astype(np.int64),
          sym.fs_order, sym.bs_order, x)
    return from_minibatches(x, b_task_major.shape[0])


def test_identity_factors_trivially():
    sym, _, _, lu0 = factor_dense(np.eye(5))
    assert sym.fill_in == 0
    assert np.array_equal(lu0, np.ones(5))
    assert np.array_equal(sym.perm_row.forward, np.arange(5))


def test_partial_pivoting_2x2():
    A = np.array([[4.0, 3.0], [6.0, 3.0]])
    sym, _, _, lu0 = factor_dense(A, pivot_tol=1.0)
    assert sym.perm_row.forward.tolist() == [1, 0]
    L, U = sym.dense_factors(lu0)
    assert np.allclose(L, [[1.0, 0.0], [4.0 / 6.0, 1.0]])
    assert np.allclose(U, [[6.0, 3.0], [0.0, 1.0]])


def test_threshold_keeps_diagonal_when_acceptable():
    A = np.array([[4.0, 3.0], [6.0, 3.0]])
    sym, _, _, _ = factor_dense(A, pivot_tol=0.5)
    assert sym.perm_row.forward.tolist() == [0, 1]


def test_gp_solve_matches_dense():
    rng = np.random.default_rng(0)
    A = random_dominant(rng, 30, 0.15)
    a = _ccs(A)
    st, _, pinv, lp, li, lx, up, ui, ux = gp_factor(30, a.col_ptr.astype(np.int64), a.row_ix.astype(np.int64),
                                                    a.values, 0.1)
    assert st == 0
    b = rng.normal(size=30)
    x = gp_solve(30, pinv, lp, li, lx, up, ui, ux, b)
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("pivot_tol", [1e-3, 1.0])
def test_chain_example_pattern_matches_symbolic_fill(pivot_tol):
    A = chain_matrix()
    sym, _, _, lu0 = factor_dense(A, pivot_tol)
    expect = symbolic_fill(_permuted(sym, A) != 0)
    got = sym.lu_pattern.to_dense(np.ones(sym.lu_pattern.nnz)) != 0
    assert np.array_equal(got, expect)
    L, U = sym.dense_factors(lu0)
    assert np.allclose(L @ U, _permuted(sym, A), atol=1e-13)


def test_chain_example_has_multiple_levels_and_fill():
    sym, _, _, _ = factor_dense(chain_matrix())
    assert sym.fill_in > 0
    assert sym.schedule.n_levels > 2
    assert sym.schedule.histogram().sum() == 11


def test_amd_diagonal_is_identity():
    m = ccs_from_coordinates(6, 6, np.empty((0, 2), int))
    assert amd_order(m).forward.tolist() == list(range(6))
    assert natural_order(m).forward.tolist() == list(range(6))


def _arrow(n):
    A = np.eye(n)
    A[0, :] = 1
    A[:, 0] = 1
    return A


def _fill(mask, order):
    P = mask[np.ix_(order, order)]
    return int(symbolic_fill(P).sum() - P.sum())


def test_amd_arrow_optimal_by_brute_force():
    n = 6
    mask = _arrow(n) != 0
    best = min(_fill(mask, list(p)) for p in itertools.permutations(range(n)))
    perm = amd_order(symmetrize(_ccs(_arrow(n))))
    order = np.argsort(perm.forward)  # position -> original index
    assert order[-1] == 0
    assert _fill(mask, order) == best == 0
    assert _fill(mask, list(range(n))) > 0


def test_level_schedule_diagonal_one_bulk_level():
    sched = build_level_schedule(8, np.zeros(9, np.int64), np.empty(0, np.int64), narrow_threshold=4)
    assert sched.n_levels == 1 and sched.tags == (BULK,)


def test_level_schedule_chain_all_scalar():
    n = 5
    A = np.eye(n) * 4
    for i in range(1, n):
        A[i - 1, i] = 1.0
    sym, _, _, _ = factor_dense(A)
    assert sym.schedule.histogram().tolist() == [1] * n
    assert set(sym.schedule.tags) == {SCALAR}


def test_level_dependencies_respected():
    rng = np.random.default_rng(4)
    sym, _, _, _ = factor_dense(random_dominant(rng, 60, 0.08))
    lv = sym.schedule.level_of
    for j in range(sym.n):
        deps = sym.u_rows[sym.u_ptr[j]:sym.u_ptr[j + 1]]
        assert np.all(lv[deps] < lv[j])


def test_forward_substitution_hand_example():
    L = np.array([[1.0, 0, 0], [2.0, 1, 0], [0, 3.0, 1]])
    sym, _, _, lu0 = factor_dense(L)
    assert sym.perm_row.forward.tolist() == [0, 1, 2]
    x = _solve(sym, lu0.reshape(1, -1, 1), np.array([[1.0, 4.0, 11.0]]), 1)
    assert np.allclose(x[0], [1.0, 2.0, 5.0])


def _batch(rng, A, n_tasks, spread=0.1):
    mask = A != 0
    out = []
    for _ in range(n_tasks):
        B = np.where(mask, A * (1 + spread * rng.uniform(-1, 1, A.shape)), 0.0)
        out.append(B)
    return out


def test_frozen_refactor_equals_fresh_factorization():
    rng = np.random.default_rng(5)
    A = random_dominant(rng, 40, 0.1)
    sym, pat, lookup, lu0 = factor_dense(A)
    rr, cc = pat.coordinates()
    tape = scatter_batch(lookup, A[rr, cc][None], 1)
    flags = refactor_batch(sym, tape)
    assert not flags.any()
    assert np.array_equal(tape[0, :, 0], lu0)


def test_batched_solve_residuals():
    rng = np.random.default_rng(6)
    A = random_dominant(rng, 50, 0.1)
    sym, pat, lookup, _ = factor_dense(A)
    rr, cc = pat.coordinates()
    mats = _batch(rng, A, 16)
    tape = scatter_batch(lookup, np.stack([M[rr, cc] for M in mats]), 4)
    assert not refactor_batch(sym, tape).any()
    b = rng.normal(size=(16, 50))
    x = _solve(sym, tape, b, 4)
    for k, M in enumerate(mats):
        ref = splu(csc_matrix(M)).solve(b[k])
        assert np.linalg.norm(M @ x[k] - b[k]) / np.linalg.norm(b[k]) < 1e-9
        assert np.allclose(x[k], ref, rtol=1e-9, atol=1e-12)


def test_singular_task_flagged_others_untouched():
    rng = np.random.default_rng(7)
    A = random_dominant(rng, 20, 0.2)
    sym, pat, lookup, _ = factor_dense(A)
    rr, cc = pat.coordinates()
    mats = _batch(rng, A, 8)
    bad = mats[5].copy()
    first = sym.perm_col.inverse[0]  # J column that becomes LU column 0
    bad[:, first] = 0.0
    mats[5] = bad
    vals = np.stack([M[rr, cc] for M in mats])
    tape = scatter_batch(lookup, vals, 4)
    flags = refactor_batch(sym, tape)
    assert flags.reshape(-1).tolist() == [0, 0, 0, 0, 0, 1, 0, 0]
    good = [0, 1, 2, 3, 4, 6, 7]
    ref = scatter_batch(lookup, vals[good], 4)
    refactor_batch(sym, ref)
    assert np.array_equal(from_minibatches(tape, 8)[good], from_minibatches(ref, 7))


def test_workspace_variant_bitwise_equal():
    rng = np.random.default_rng(8)
    A = random_dominant(rng, 40, 0.12)
    a = _ccs(A)
    sym, _ = factorize_initial(a, 1e-3)
    p = sym.lu_pattern
    mats = _batch(rng, A, 6)
    a_tape = to_minibatches(np.stack([M[a.coordinates()] for M in mats]), 4)
    sym2, pat, lookup, _ = factor_dense(A)
    rr, cc = pat.coordinates()
    direct = scatter_batch(lookup, np.stack([M[rr, cc] for M in mats]), 4)
    refactor_batch(sym2, direct)
    ws = np.zeros_like(direct)
    flags = np.zeros(ws.shape[::2], np.uint8)
    a_lu_row = sym.perm_row.forward[a.row_ix].astype(np.int64)
    refactorize_workspace(a_tape, a.col_ptr.astype(np.int64), a_lu_row, ws, p.col_ptr.astype(np.int64),
                          p.diag_ptr.astype(np.int64), p.row_ix.astype(np.int64), sym.u_ptr, sym.u_rows,
                          sym.vmad_ptr, sym.vmad_src, sym.vmad_dst, 1e-14, flags)
    assert not flags.any()
    assert np.array_equal(ws, direct)


def test_python_reference_refactor_bitwise():
    rng = np.random.default_rng(9)
    A = random_dominant(rng, 30, 0.15)
    sym, pat, lookup, _ = factor_dense(A)
    rr, cc = pat.coordinates()
    v = lookup.scatter(A[rr, cc])
    tape = v.reshape(1, -1, 1).copy()
    refactor_batch(sym, tape)
    assert np.array_equal(refactor_into_symbolic_layout(sym, v), tape[0, :, 0])


@pytest.mark.parametrize("workers", [1, 2, 4, 8])
@pytest.mark.parametrize("eager", [True, False])
def test_execute_schedule_bitwise(workers, eager):
    rng = np.random.default_rng(10)
    A = random_dominant(rng, 60, 0.08)
    sym, pat, lookup, _ = factor_dense(A)
    rr, cc = pat.coordinates()
    vals = np.stack([M[rr, cc] for M in _batch(rng, A, 8)])
    ref = scatter_batch(lookup, vals, 4)
    refactor_batch(sym, ref)
    tape = scatter_batch(lookup, vals, 4)
    flags = np.zeros(tape.shape[::2], np.uint8)
    execute_schedule(sym, tape, flags, workers=workers, plan=build_plan(sym, eager=eager))
    assert np.array_equal(tape, ref)


def test_eager_plan_shortens_critical_path():
    rng = np.random.default_rng(11)
    sym, _, _, _ = factor_dense(random_dominant(rng, 60, 0.08))
    eager, static = build_plan(sym, True), build_plan(sym, False)
    assert eager.critical_ops(sym) <= static.critical_ops(sym)
    assert eager.tail_ops(sym, 0) == static.tail_ops(sym, 0)


def test_structurally_singular_raises():
    # column 1 has no entries at all
    from gridbatch.sparse_core import SparseCcs
    a = SparseCcs(2, 2, np.array([0, 2, 2], np.int32), np.array([0, 1], np.int32),
                  np.array([0, -1], np.int32), np.array([1.0, 1.0]))
    with pytest.raises(StructurallySingularError):
        factorize_initial(a)


def test_numerically_singular_raises():
    a = ccs_from_coordinates(2, 2, np.array([[0, 1], [1, 0]]))
    vals = np.zeros(a.nnz)
    a = a.__class__(2, 2, a.col_ptr, a.row_ix, a.diag_ptr, vals)
    with pytest.raises(SingularMatrixError):
        factorize_initial(a)


def test_second_chance_repivots():
    A = np.array([[1e-20, 1.0], [1.0, 1.0]])
    a = _ccs(A)
    ident = natural_order(a)
    sym, lu = second_chance_refactorize(a, ident, ident, pivot_tol=0.1)
    assert sym.perm_row.forward.tolist() == [1, 0]
    L, U = sym.dense_factors(lu)
    assert np.allclose(L @ U, _permuted(sym, A))


def test_tape_round_trip_and_accessors():
    data = np.arange(12.0).reshape(3, 4)
    t = BatchTape(data)
    assert (t.n_slots, t.n_tasks) == (3, 4)
    assert t.value(1, 2) == data[1, 2]
    assert np.array_equal(t.task(3), data[:, 3])
    back = BatchTape.from_minibatches(t.minibatches(3), 4)
    assert np.array_equal(back.flat, t.flat)
    with pytest.raises(ValueError):
        to_minibatches(data, 0)


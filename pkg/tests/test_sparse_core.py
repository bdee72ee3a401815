import numpy as np
import pytest

from gridbatch.sparse_core import (
    DROPPED,
    PatternMismatchError,
    Permutation,
    StructuralError,
    build_scatter_lookup,
    ccs_to_crs_pattern,
    crs_from_coordinates,
    crs_to_ccs_pattern,
    symmetrize,
)


def test_crs_small_upper():
    m = crs_from_coordinates(2, 2, [(0, 0), (0, 1), (1, 1)])
    assert m.row_ptr.tolist() == [0, 2, 3]
    assert m.col_ix.tolist() == [0, 1, 1]
    assert m.diag_ptr.tolist() == [0, 2]


def test_crs_inserts_missing_diagonal():
    m = crs_from_coordinates(1, 1, [])
    assert m.row_ptr.tolist() == [0, 1]
    assert m.col_ix.tolist() == [0]


def test_crs_arrow_diag_positions():
    # full first row and column plus the diagonal, enumerated by hand
    entries = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (1, 1), (2, 2)]
    m = crs_from_coordinates(3, 3, entries)
    assert m.row_ptr.tolist() == [0, 3, 5, 7]
    assert m.col_ix.tolist() == [0, 1, 2, 0, 1, 0, 2]
    assert m.diag_ptr.tolist() == [0, 4, 6]


def test_crs_duplicates_merged():
    m = crs_from_coordinates(2, 2, [(0, 1), (0, 1), (1, 0)])
    assert m.nnz == 4


def test_crs_out_of_range():
    with pytest.raises(StructuralError):
        crs_from_coordinates(2, 2, [(0, 2)])
    with pytest.raises(StructuralError):
        crs_from_coordinates(2, 2, [(-1, 0)])


def test_ccs_of_diagonal_is_identity_map():
    m = crs_from_coordinates(3, 3, [])
    c, idx = crs_to_ccs_pattern(m)
    assert idx.tolist() == [0, 1, 2]
    assert c.col_ptr.tolist() == [0, 1, 2, 3]


def test_ccs_upper_triangular():
    m = crs_from_coordinates(2, 2, [(0, 0), (0, 1), (1, 1)])
    c, _ = crs_to_ccs_pattern(m)
    assert c.col_ptr.tolist() == [0, 1, 3]
    assert c.row_ix.tolist() == [0, 0, 1]
    assert c.diag_ptr.tolist() == [0, 2]


def test_ccs_round_trip_random():
    rng = np.random.default_rng(3)
    mask = rng.random((20, 20)) < 0.2
    r, c = np.nonzero(mask)
    m = crs_from_coordinates(20, 20, list(zip(r, c)))
    vals = rng.normal(size=m.nnz)
    ccs, fwd = crs_to_ccs_pattern(m.with_values(vals))
    back, bwd = ccs_to_crs_pattern(ccs)
    assert np.array_equal(back.row_ptr, m.row_ptr)
    assert np.array_equal(back.col_ix, m.col_ix)
    assert np.array_equal(back.values, vals)
    assert np.array_equal(bwd[fwd], np.arange(m.nnz))
    assert np.array_equal(ccs.to_dense(), m.to_dense(vals))


def test_diag_ptr_reads_diagonal():
    rng = np.random.default_rng(1)
    mask = rng.random((15, 15)) < 0.3
    r, c = np.nonzero(mask)
    m = crs_from_coordinates(15, 15, list(zip(r, c)))
    vals = rng.normal(size=m.nnz)
    assert np.array_equal(vals[m.diag_ptr], np.diag(m.to_dense(vals)))


def test_permutation_inverse_and_compose():
    p = Permutation.from_order([2, 0, 1])
    assert p.inverse.tolist() == [2, 0, 1]
    assert p.forward[p.inverse].tolist() == [0, 1, 2]
    q = Permutation([1, 2, 0])
    pq = p.then(q)
    v = np.array([10.0, 20.0, 30.0])
    assert np.array_equal(pq.matrix() @ v, q.matrix() @ (p.matrix() @ v))


def test_permutation_rejects_non_bijection():
    with pytest.raises(StructuralError):
        Permutation([0, 0, 1])


def test_scatter_identity_equals_ccs_map():
    m = crs_from_coordinates(3, 3, [(0, 1), (2, 0)])
    c, idx = crs_to_ccs_pattern(m)
    lk = build_scatter_lookup(m, Permutation.identity(3), Permutation.identity(3), c)
    assert np.array_equal(lk.target_positions, idx)


def test_scatter_swap_2x2():
    m = crs_from_coordinates(2, 2, [(0, 1), (1, 0)])
    swap = Permutation([1, 0])
    target, _ = crs_to_ccs_pattern(m)
    lk = build_scatter_lookup(m, swap, swap, target)
    assert lk.target_positions[0] == target.slot(1, 1)


def _dense_permuted(dense, pr, pc):
    return pr.matrix() @ dense @ pc.matrix().T


def test_scatter_random_with_fill():
    rng = np.random.default_rng(7)
    n = 10
    mask = rng.random((n, n)) < 0.25
    r, c = np.nonzero(mask)
    src = crs_from_coordinates(n, n, list(zip(r, c)))
    vals = rng.normal(size=src.nnz)
    pr = Permutation(rng.permutation(n))
    pc = Permutation(rng.permutation(n))
    rows, cols = src.coordinates()
    tgt_entries = list(zip(pr.forward[rows], pc.forward[cols]))
    free = [(i, j) for i in range(n) for j in range(n) if (i, j) not in set(map(tuple, tgt_entries))]
    extra = [free[k] for k in rng.choice(len(free), 5, replace=False)]
    tgt, _ = crs_to_ccs_pattern(crs_from_coordinates(n, n, tgt_entries + extra))
    lk = build_scatter_lookup(src, pr, pc, tgt)
    got = tgt.to_dense(lk.scatter(vals))
    assert np.array_equal(got, _dense_permuted(src.to_dense(vals), pr, pc))


def test_scatter_with_drops():
    src = crs_from_coordinates(3, 3, [(0, 1), (1, 2), (2, 0)])
    keep = np.array([0, DROPPED, 1])
    tgt, _ = crs_to_ccs_pattern(crs_from_coordinates(2, 2, [(1, 0)]))
    lk = build_scatter_lookup(src, Permutation.identity(2), Permutation.identity(2), tgt, keep, keep)
    rows, cols = src.coordinates()
    dropped = (keep[rows] == DROPPED) | (keep[cols] == DROPPED)
    assert np.all(lk.target_positions[dropped] == DROPPED)
    assert np.all(lk.target_positions[~dropped] >= 0)


def test_scatter_missing_target_raises():
    src = crs_from_coordinates(2, 2, [(0, 1)])
    tgt, _ = crs_to_ccs_pattern(crs_from_coordinates(2, 2, []))
    with pytest.raises(PatternMismatchError):
        build_scatter_lookup(src, Permutation.identity(2), Permutation.identity(2), tgt)


def test_scatter_batch_axes():
    m = crs_from_coordinates(2, 2, [(0, 1)])
    c, _ = crs_to_ccs_pattern(m)
    lk = build_scatter_lookup(m, Permutation.identity(2), Permutation.identity(2), c)
    vals = np.arange(6.0).reshape(3, 2)
    out = lk.scatter(vals)
    assert out.shape == (3, 2)
    assert np.array_equal(out[lk.target_positions], vals)


def test_symmetrize():
    m, _ = crs_to_ccs_pattern(crs_from_coordinates(3, 3, [(0, 2)]))
    s = symmetrize(m)
    d = s.to_dense(np.ones(s.nnz))
    assert np.array_equal(d, d.T)
    assert d[2, 0] == 1

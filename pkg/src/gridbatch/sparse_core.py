"""Compressed sparse containers, permutations and static scatter lookups.

Patterns are immutable once built and carry no values; numerical data for a
whole batch of tasks lives in :class:`gridbatch.linear_solver.tape.BatchTape`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

INDEX_DTYPE = np.int32
MAX_INDEX = np.iinfo(INDEX_DTYPE).max

#: Marker stored in a :class:`ScatterLookup` for source entries that are
#: filtered out of the target (slack rows, PV magnitude columns, ...).
DROPPED = -1


class StructuralError(ValueError):
    """Invalid sparsity structure (out-of-range index, missing diagonal, ...)."""


class PatternMismatchError(StructuralError):
    """A source entry has no slot in the target pattern."""


def _as_index(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.int64)
    if arr.size and (arr.max() > MAX_INDEX or arr.min() < DROPPED):
        raise StructuralError("index exceeds 32-bit range")
    return arr.astype(INDEX_DTYPE)


@dataclass(frozen=True, eq=False)
class SparseCrs:
    """Compressed row pattern with a per-row pointer to the diagonal slot."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_ix: np.ndarray
    diag_ptr: np.ndarray
    values: Optional[np.ndarray] = None

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    def row(self, r: int) -> np.ndarray:
        return self.col_ix[self.row_ptr[r]:self.row_ptr[r + 1]]

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.n_rows, dtype=INDEX_DTYPE), np.diff(self.row_ptr))
        return rows, self.col_ix.copy()

    def to_dense(self, values=None) -> np.ndarray:
        vals = self.values if values is None else np.asarray(values)
        if vals is None:
            vals = np.ones(self.nnz, dtype=bool)
        out = np.zeros((self.n_rows, self.n_cols), dtype=vals.dtype)
        rows, cols = self.coordinates()
        out[rows, cols] = vals
        return out

    def with_values(self, values) -> "SparseCrs":
        values = np.asarray(values)
        if values.shape[0] != self.nnz:
            raise StructuralError(f"expected {self.nnz} values, got {values.shape[0]}")
        return SparseCrs(self.n_rows, self.n_cols, self.row_ptr, self.col_ix, self.diag_ptr, values)

    def validate(self) -> None:
        _check_compressed(self.n_rows, self.n_cols, self.row_ptr, self.col_ix, "row")
        if self.diag_ptr is not None and len(self.diag_ptr):
            if len(self.diag_ptr) != min(self.n_rows, self.n_cols):
                raise StructuralError("diag_ptr has wrong length")
            if np.any(self.col_ix[self.diag_ptr] != np.arange(len(self.diag_ptr))):
                raise StructuralError("diag_ptr does not point at the diagonal")


@dataclass(frozen=True, eq=False)
class SparseCcs:
    """Compressed column pattern; mirror image of :class:`SparseCrs`."""

    n_rows: int
    n_cols: int
    col_ptr: np.ndarray
    row_ix: np.ndarray
    diag_ptr: np.ndarray
    values: Optional[np.ndarray] = None

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])

    def col(self, c: int) -> np.ndarray:
        return self.row_ix[self.col_ptr[c]:self.col_ptr[c + 1]]

    def coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        cols = np.repeat(np.arange(self.n_cols, dtype=INDEX_DTYPE), np.diff(self.col_ptr))
        return self.row_ix.copy(), cols

    def to_dense(self, values=None) -> np.ndarray:
        vals = self.values if values is None else np.asarray(values)
        if vals is None:
            vals = np.ones(self.nnz, dtype=bool)
        out = np.zeros((self.n_rows, self.n_cols), dtype=vals.dtype)
        rows, cols = self.coordinates()
        out[rows, cols] = vals
        return out

    def slot(self, row: int, col: int) -> int:
        """Position of (row, col) in the value array, or ``DROPPED``."""
        lo, hi = self.col_ptr[col], self.col_ptr[col + 1]
        k = lo + np.searchsorted(self.row_ix[lo:hi], row)
        if k < hi and self.row_ix[k] == row:
            return int(k)
        return DROPPED

    def validate(self) -> None:
        _check_compressed(self.n_cols, self.n_rows, self.col_ptr, self.row_ix, "column")
        if self.diag_ptr is not None and len(self.diag_ptr):
            if np.any(self.row_ix[self.diag_ptr] != np.arange(len(self.diag_ptr))):
                raise StructuralError("diag_ptr does not point at the diagonal")


def _check_compressed(n_major, n_minor, ptr, ix, what):
    if len(ptr) != n_major + 1 or ptr[0] != 0 or ptr[-1] != len(ix):
        raise StructuralError(f"bad {what} pointer array")
    if np.any(np.diff(ptr) < 0):
        raise StructuralError(f"{what} pointer is decreasing")
    if len(ix) and (ix.min() < 0 or ix.max() >= n_minor):
        raise StructuralError("index out of range")
    for k in range(n_major):
        seg = ix[ptr[k]:ptr[k + 1]]
        if np.any(np.diff(seg) <= 0):
            raise StructuralError(f"indices not strictly increasing in {what} {k}")


@dataclass(frozen=True, eq=False)
class Permutation:
    """Bijection on ``0..n-1``; ``forward[old] = new``, ``inverse[new] = old``."""

    forward: np.ndarray
    inverse: np.ndarray = field(default=None)

    def __post_init__(self):
        fwd = _as_index(self.forward)
        n = len(fwd)
        if n and (fwd.min() < 0 or fwd.max() >= n):
            raise StructuralError("permutation entry out of range")
        inv = np.full(n, -1, dtype=INDEX_DTYPE)
        inv[fwd] = np.arange(n, dtype=INDEX_DTYPE)
        if np.any(inv < 0):
            raise StructuralError("permutation is not a bijection")
        if self.inverse is not None and not np.array_equal(np.asarray(self.inverse), inv):
            raise StructuralError("forward and inverse disagree")
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def from_order(cls, order: Sequence[int]) -> "Permutation":
        """Build from an ordering, i.e. ``order[new] = old``."""
        order = _as_index(order)
        fwd = np.empty_like(order)
        fwd[order] = np.arange(len(order), dtype=INDEX_DTYPE)
        return cls(fwd)

    def __len__(self) -> int:
        return len(self.forward)

    def then(self, other: "Permutation") -> "Permutation":
        """Apply ``self`` first, then ``other``."""
        return Permutation(other.forward[self.forward])

    def matrix(self) -> np.ndarray:
        """Dense matrix P with ``(P @ v)[forward[i]] = v[i]``."""
        n = len(self)
        p = np.zeros((n, n))
        p[self.forward, np.arange(n)] = 1.0
        return p


@dataclass(frozen=True, eq=False)
class ScatterLookup:
    """Maps each source CRS slot to its slot in a (permuted) CCS target."""

    source_len: int
    target_len: int
    target_positions: np.ndarray

    def scatter(self, source_values: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        """Scatter source values into a zero-filled target value array.

        Works on trailing batch axes: ``source_values`` may be ``(nnz, ...)``.
        """
        source_values = np.asarray(source_values)
        shape = (self.target_len,) + source_values.shape[1:]
        if out is None:
            out = np.zeros(shape, dtype=source_values.dtype)
        else:
            out[...] = 0
        keep = self.target_positions != DROPPED
        out[self.target_positions[keep]] = source_values[keep]
        return out


def crs_from_coordinates(n_rows: int, n_cols: int, entries: Iterable[Tuple[int, int]]) -> SparseCrs:
    """Canonical pattern-only CRS from (row, col) pairs.

    Duplicates are merged and the structural diagonal is always inserted.
    """
    pairs = np.asarray(list(entries), dtype=np.int64).reshape(-1, 2)
    if max(n_rows, n_cols) > MAX_INDEX:
        raise StructuralError("dimension exceeds 32-bit index range")
    if len(pairs) and (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_rows
                       or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_cols):
        bad = pairs[(pairs[:, 0] < 0) | (pairs[:, 0] >= n_rows) | (pairs[:, 1] < 0) | (pairs[:, 1] >= n_cols)][0]
        raise StructuralError(f"entry ({bad[0]}, {bad[1]}) outside {n_rows}x{n_cols}")
    nd = min(n_rows, n_cols)
    diag = np.repeat(np.arange(nd, dtype=np.int64), 2).reshape(-1, 2)
    pairs = np.vstack([pairs, diag]) if len(pairs) else diag
    keys = np.unique(pairs[:, 0] * n_cols + pairs[:, 1])
    rows, cols = keys // n_cols, keys % n_cols
    row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    diag_pos = np.flatnonzero(rows == cols)
    m = SparseCrs(n_rows, n_cols, _as_index(row_ptr), _as_index(cols), _as_index(diag_pos))
    return m


def crs_to_ccs_pattern(m: SparseCrs) -> Tuple[SparseCcs, np.ndarray]:
    """Convert a CRS pattern to CCS; ``index_map[crs_slot] = ccs_slot``."""
    rows, cols = m.coordinates()
    order = np.lexsort((rows, cols))
    index_map = np.empty(m.nnz, dtype=INDEX_DTYPE)
    index_map[order] = np.arange(m.nnz, dtype=INDEX_DTYPE)
    col_ptr = np.zeros(m.n_cols + 1, dtype=np.int64)
    np.add.at(col_ptr, cols.astype(np.int64) + 1, 1)
    col_ptr = np.cumsum(col_ptr)
    row_ix = rows[order]
    nd = min(m.n_rows, m.n_cols)
    diag = index_map[m.diag_ptr] if len(m.diag_ptr) == nd else np.empty(0, dtype=INDEX_DTYPE)
    values = None if m.values is None else m.values[order]
    return SparseCcs(m.n_rows, m.n_cols, _as_index(col_ptr), _as_index(row_ix), diag, values), index_map


def ccs_to_crs_pattern(m: SparseCcs) -> Tuple[SparseCrs, np.ndarray]:
    """Inverse of :func:`crs_to_ccs_pattern`; ``index_map[ccs_slot] = crs_slot``."""
    rows, cols = m.coordinates()
    order = np.lexsort((cols, rows))
    index_map = np.empty(m.nnz, dtype=INDEX_DTYPE)
    index_map[order] = np.arange(m.nnz, dtype=INDEX_DTYPE)
    row_ptr = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.add.at(row_ptr, rows.astype(np.int64) + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    nd = min(m.n_rows, m.n_cols)
    diag = index_map[m.diag_ptr] if len(m.diag_ptr) == nd else np.empty(0, dtype=INDEX_DTYPE)
    values = None if m.values is None else m.values[order]
    return SparseCrs(m.n_rows, m.n_cols, _as_index(row_ptr), _as_index(cols[order]), diag, values), index_map


def ccs_from_coordinates(n_rows: int, n_cols: int, entries) -> SparseCcs:
    return crs_to_ccs_pattern(crs_from_coordinates(n_rows, n_cols, entries))[0]


def symmetrize(m: SparseCcs) -> SparseCcs:
    """Pattern of ``A + A^T`` (square input)."""
    if m.n_rows != m.n_cols:
        raise StructuralError("symmetrize needs a square pattern")
    rows, cols = m.coordinates()
    pairs = np.concatenate([np.stack([rows, cols], 1), np.stack([cols, rows], 1)])
    return ccs_from_coordinates(m.n_rows, m.n_cols, pairs)


def build_scatter_lookup(
    source: SparseCrs,
    perm_row: Permutation,
    perm_col: Permutation,
    target: SparseCcs,
    row_drop: Optional[np.ndarray] = None,
    col_drop: Optional[np.ndarray] = None,
) -> ScatterLookup:
    """Static lookup from ``source`` slots into the permuted, filtered ``target``.

    ``row_drop`` / ``col_drop`` map each source row/column to its index in the
    reduced space, or ``DROPPED``.  The reduced indices are then moved by
    ``perm_row.forward`` / ``perm_col.forward`` to target coordinates.
    """
    row_map = np.arange(source.n_rows) if row_drop is None else np.asarray(row_drop)
    col_map = np.arange(source.n_cols) if col_drop is None else np.asarray(col_drop)
    if len(row_map) != source.n_rows or len(col_map) != source.n_cols:
        raise StructuralError("filter length does not match source shape")
    rows, cols = source.coordinates()
    rr, cc = row_map[rows], col_map[cols]
    keep = (rr != DROPPED) & (cc != DROPPED)
    positions = np.full(source.nnz, DROPPED, dtype=INDEX_DTYPE)
    trow = perm_row.forward[rr[keep]].astype(np.int64)
    tcol = perm_col.forward[cc[keep]].astype(np.int64)
    # each target column is sorted, so a searchsorted over (col, row) keys finds the slot
    t_rows, t_cols = target.coordinates()
    t_keys = t_cols.astype(np.int64) * target.n_rows + t_rows
    keys = tcol * target.n_rows + trow
    pos = np.searchsorted(t_keys, keys)
    pos_c = np.minimum(pos, max(target.nnz - 1, 0))
    found = (pos < target.nnz) & (t_keys[pos_c] == keys) if target.nnz else np.zeros(len(keys), bool)
    if not np.all(found):
        k = int(np.flatnonzero(~found)[0])
        raise PatternMismatchError(
            f"source entry maps to target ({trow[k]}, {tcol[k]}) which is not in the target pattern")
    positions[np.flatnonzero(keep)] = pos
    hit = positions[keep]
    if len(np.unique(hit)) != len(hit):
        raise PatternMismatchError("two source entries map to the same target slot")
    return ScatterLookup(source.nnz, target.nnz, positions)

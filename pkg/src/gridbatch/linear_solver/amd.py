"""Approximate minimum degree ordering on a quotient graph.

A compact version of the Amestoy-Davis-Duff scheme: element absorption,
aggressive absorption, approximate external degrees and supervariables. Pivot
ties go to the lowest original index, which keeps the result deterministic.
"""
from __future__ import annotations

import heapq
from typing import Dict, List, Set

import numpy as np

from ..sparse_core import Permutation, SparseCcs, StructuralError


def amd_order(pattern: SparseCcs) -> Permutation:
    """Fill-reducing ordering for the pattern of ``A + A^T``.

    Returns a permutation with ``inverse[new] = old``. Members of a
    supervariable are emitted together, principal variable last.
    """
    n = pattern.n_cols
    if pattern.n_rows != n:
        raise StructuralError("amd_order needs a square pattern")
    adj: List[Set[int]] = [set() for _ in range(n)]
    rows, cols = pattern.coordinates()
    for i, j in zip(rows.tolist(), cols.tolist()):
        if i != j:
            adj[i].add(j)
            adj[j].add(i)
    elems: List[Set[int]] = [set() for _ in range(n)]  # elements adjacent to each variable
    lset: Dict[int, Set[int]] = {}  # element -> principal variables
    nv = [1] * n
    members: List[List[int]] = [[i] for i in range(n)]
    alive = [True] * n
    deg = [len(a) for a in adj]
    heap = [(deg[i], i) for i in range(n)]
    heapq.heapify(heap)
    remaining = n
    order: List[int] = []

    def drop_element(e: int) -> None:
        for v in lset.pop(e):
            elems[v].discard(e)

    while remaining:
        d, p = heapq.heappop(heap)
        if not alive[p] or d != deg[p]:
            continue
        # new element: union of p's variables and of its adjacent elements
        lp = set(adj[p])
        for e in elems[p]:
            lp |= lset[e]
        lp.discard(p)
        for e in list(elems[p]):
            drop_element(e)
        alive[p] = False
        remaining -= nv[p]
        order.extend(members[p][1:])
        order.append(members[p][0])
        for i in lp:
            adj[i].discard(p)
            adj[i] -= lp
        lset[p] = set(lp)
        for i in lp:
            elems[i].add(p)
        if len(lp) <= 1:
            drop_element(p)

        # supervariables: equal closed adjacency and equal element lists
        cands = set(lp)
        for i in lp:
            cands |= adj[i]
        groups: Dict[tuple, List[int]] = {}
        for i in sorted(cands):
            # singleton elements carry no adjacency
            key = (frozenset(adj[i] | {i}), frozenset(e for e in elems[i] if len(lset[e]) > 1))
            groups.setdefault(key, []).append(i)
        touched = set(lp)
        for grp in groups.values():
            if len(grp) < 2:
                continue
            head = grp[0]
            for j in grp[1:]:
                nv[head] += nv[j]
                members[head].extend(members[j])
                alive[j] = False
                for k in adj[j]:
                    adj[k].discard(j)
                for e in list(elems[j]):
                    lset[e].discard(j)
                adj[j].clear()
                elems[j].clear()
                lp.discard(j)
                touched.discard(j)
            touched.add(head)
        for e in [e for e in lset if len(lset[e]) <= 1]:
            drop_element(e)

        # external degree of every element seen from the new element
        lp_weight = sum(nv[i] for i in lp)
        w: Dict[int, int] = {}
        for i in lp:
            for e in elems[i]:
                if e != p and e not in w:
                    w[e] = sum(nv[v] for v in lset[e] if v not in lp)
        for e, we in w.items():
            if we == 0 and e in lset:
                drop_element(e)  # aggressive absorption into p
        for i in touched:
            if not alive[i]:
                continue
            di = sum(nv[v] for v in adj[i])
            for e in elems[i]:
                if e == p:
                    di += lp_weight - nv[i]
                elif e in w:
                    di += w[e]
                else:
                    di += sum(nv[v] for v in lset[e] if v != i)
            di = min(di, remaining - nv[i])
            deg[i] = di
            heapq.heappush(heap, (di, i))
    if len(order) != n:
        raise AssertionError("amd ordering lost variables")
    return Permutation.from_order(np.array(order, dtype=np.int64))


def natural_order(pattern: SparseCcs) -> Permutation:
    return Permutation.identity(pattern.n_cols)

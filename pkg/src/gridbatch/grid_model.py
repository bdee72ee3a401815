"""Grid case data, case-file parsing, admittance matrix and task profiles."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .sparse_core import SparseCrs, StructuralError, crs_from_coordinates

SLACK, PV, PQ = "slack", "pv", "pq"
BUS_KINDS = (SLACK, PV, PQ)


class CaseError(ValueError):
    """Case or scenario input rejected.

    ``code`` identifies the kind of problem (``malformed``, ``missing_slack``,
    ``duplicate_slack``, ``duplicate_bus``, ``unknown_bus``, ``disconnected``,
    ``invalid_branch``, ``width_mismatch``, ``missing_table``).
    """

    def __init__(self, code: str, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.code = code
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{code}: {message}{where}")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    base_kv: float = 0.0
    vm_init: float = 1.0
    va_init: float = 0.0  # degrees


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # degrees
    in_service: bool = True
    rate_a: float = 0.0  # MVA, 0 = unrated


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    vm_set: float = 1.0
    in_service: bool = True
    q_set: float = 0.0


@dataclass(frozen=True, eq=False)
class GridCase:
    """Validated, immutable single-island grid.

    Internal bus numbering follows the order of ``buses``.
    """

    base_mva: float
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...] = ()
    name: str = "case"
    bus_index: Dict[int, int] = field(init=False, repr=False)
    slack_bus: int = field(init=False)
    pv_buses: np.ndarray = field(init=False, repr=False)
    pq_buses: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        index: Dict[int, int] = {}
        for i, b in enumerate(self.buses):
            if b.id in index:
                raise CaseError("duplicate_bus", f"bus id {b.id} appears twice")
            if b.kind not in BUS_KINDS:
                raise CaseError("malformed", f"bus {b.id} has unknown kind {b.kind!r}")
            index[b.id] = i
        object.__setattr__(self, "bus_index", index)
        if not self.base_mva > 0:
            raise CaseError("malformed", "base_mva must be positive")
        slacks = [i for i, b in enumerate(self.buses) if b.kind == SLACK]
        if not slacks:
            raise CaseError("missing_slack", "case has no slack bus")
        if len(slacks) > 1:
            ids = ", ".join(str(self.buses[i].id) for i in slacks)
            raise CaseError("duplicate_slack", f"duplicate slack buses: {ids}")
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise CaseError("unknown_bus", f"branch {k} references unknown bus {end}")
            if br.r == 0 and br.x == 0:
                raise CaseError("invalid_branch", f"branch {k} has zero impedance")
            if not br.tap > 0:
                raise CaseError("invalid_branch", f"branch {k} has non-positive tap {br.tap}")
        for g in self.generators:
            if g.bus not in index:
                raise CaseError("unknown_bus", f"generator references unknown bus {g.bus}")
        object.__setattr__(self, "slack_bus", slacks[0])
        kinds = np.array([b.kind for b in self.buses])
        object.__setattr__(self, "pv_buses", np.flatnonzero(kinds == PV).astype(np.int32))
        object.__setattr__(self, "pq_buses", np.flatnonzero(kinds == PQ).astype(np.int32))
        if not self.is_connected():
            raise CaseError("disconnected", "in-service branches do not connect all buses into one island")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def pvpq(self) -> np.ndarray:
        return np.concatenate([self.pv_buses, self.pq_buses])

    def branch_ends(self) -> Tuple[np.ndarray, np.ndarray]:
        f = np.array([self.bus_index[b.from_bus] for b in self.branches], dtype=np.int32)
        t = np.array([self.bus_index[b.to_bus] for b in self.branches], dtype=np.int32)
        return f, t

    def branch_status(self) -> np.ndarray:
        return np.array([b.in_service for b in self.branches], dtype=bool)

    def is_connected(self, in_service: Optional[np.ndarray] = None) -> bool:
        f, t = self.branch_ends()
        mask = self.branch_status() if in_service is None else np.asarray(in_service, bool)
        return bool(connected_mask(self.n_bus, f, t, mask[:, None])[0])

    def injections_pu(self) -> Tuple[np.ndarray, np.ndarray]:
        """Specified net injections (generation minus load), per unit."""
        p = -np.array([b.p_load for b in self.buses], dtype=float)
        q = -np.array([b.q_load for b in self.buses], dtype=float)
        for g in self.generators:
            if g.in_service:
                i = self.bus_index[g.bus]
                p[i] += g.p_set
                q[i] += g.q_set
        return p / self.base_mva, q / self.base_mva

    def voltage_setpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """Initial magnitudes (generator set-points on PV/slack) and angles in radians."""
        vm = np.array([b.vm_init for b in self.buses], dtype=float)
        va = np.deg2rad(np.array([b.va_init for b in self.buses], dtype=float))
        seen = set()
        for g in self.generators:
            i = self.bus_index[g.bus]
            if g.in_service and self.buses[i].kind != PQ and i not in seen:
                vm[i] = g.vm_set
                seen.add(i)
        return vm, va


def connected_mask(n_bus: int, f: np.ndarray, t: np.ndarray, in_service: np.ndarray) -> np.ndarray:
    """Per task (column of ``in_service``), whether the graph is one island.

    Breadth-first search from bus 0 over in-service branches.
    """
    in_service = np.asarray(in_service, bool)
    if in_service.ndim == 1:
        in_service = in_service[:, None]
    out = np.zeros(in_service.shape[1], dtype=bool)
    adj: List[List[Tuple[int, int]]] = [[] for _ in range(n_bus)]
    for k, (a, b) in enumerate(zip(f.tolist(), t.tolist())):
        adj[a].append((b, k))
        adj[b].append((a, k))
    for task in range(in_service.shape[1]):
        live = in_service[:, task]
        seen = np.zeros(n_bus, dtype=bool)
        seen[0] = True
        stack = [0]
        count = 1
        while stack:
            u = stack.pop()
            for v, k in adj[u]:
                if live[k] and not seen[v]:
                    seen[v] = True
                    count += 1
                    stack.append(v)
        out[task] = count == n_bus
    return out


# ---------------------------------------------------------------------------
# parsing

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*(\[)?")
_MIN_COLS = {"bus": 10, "gen": 8, "branch": 11}


def parse_case(text: str, name: str = "case") -> GridCase:
    """Parse a MATPOWER case subset or the native JSON case format."""
    if text.lstrip().startswith("{"):
        return case_from_json(text, name=name)
    return _parse_matpower(text, name)


def load_case(path) -> GridCase:
    path = Path(path)
    return parse_case(path.read_text(encoding="utf-8"), name=path.stem)


def _strip_comment(line: str) -> str:
    out, quote = [], False
    for ch in line:
        if ch == "'":
            quote = not quote
        if ch == "%" and not quote:
            break
        out.append(ch)
    return "".join(out)


def _number(tok: str, line: int, col: int) -> float:
    try:
        return float(tok)
    except ValueError:
        if tok.lower() in ("inf", "-inf"):
            return float(tok)
        raise CaseError("malformed", f"bad numeric field {tok!r}", line, col) from None


def _parse_matpower(text: str, name: str) -> GridCase:
    tables: Dict[str, List[Tuple[int, List[float]]]] = {}
    base_mva = None
    current = None
    row: List[float] = []
    row_line = 0
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = _strip_comment(raw)
        pos = 0
        if current is None:
            m = _TABLE_RE.search(line)
            if not m:
                continue
            key = m.group(1)
            if m.group(2) is None:
                if key == "baseMVA":
                    rhs = line[m.end():].strip().rstrip(";").strip()
                    base_mva = _number(rhs, lineno, m.end() + 1)
                continue
            current = key
            tables[current] = []
            row, row_line = [], lineno
            pos = m.end()
        # scan the remainder of the line for numbers, row separators and the closing bracket
        for tok in re.finditer(r"[^\s,;\]]+|;|\]", line[pos:]):
            s = tok.group(0)
            col = pos + tok.start() + 1
            if s == ";" or s == "]":
                if row:
                    tables[current].append((row_line, row))
                row = []
                if s == "]":
                    current = None
                    break
                continue
            if not row:
                row_line = lineno
            row.append(_number(s, lineno, col))
        else:
            if current is not None and row:
                tables[current].append((row_line, row))
                row = []
    if current is not None:
        raise CaseError("malformed", f"table mpc.{current} is not closed", len(lines))
    if base_mva is None:
        raise CaseError("missing_table", "mpc.baseMVA not found")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseError("missing_table", f"mpc.{key} not found")
        for ln, r in tables[key]:
            if len(r) < _MIN_COLS[key]:
                raise CaseError("malformed", f"mpc.{key} row has {len(r)} columns, need {_MIN_COLS[key]}", ln)

    gens = []
    for _, r in tables["gen"]:
        gens.append(Generator(bus=int(r[0]), p_set=r[1], q_set=r[2], vm_set=r[5], in_service=r[7] > 0))
    gen_buses = {g.bus for g in gens if g.in_service}
    buses = []
    for ln, r in tables["bus"]:
        code = int(r[1])
        if code == 3:
            kind = SLACK
        elif code == 2:
            kind = PV if int(r[0]) in gen_buses else PQ
        elif code == 1:
            kind = PQ
        elif code == 4:
            raise CaseError("disconnected", f"bus {int(r[0])} is isolated (type 4)", ln)
        else:
            raise CaseError("malformed", f"bus {int(r[0])} has unknown type {code}", ln)
        buses.append(Bus(id=int(r[0]), kind=kind, p_load=r[2], q_load=r[3], gs=r[4], bs=r[5],
                         vm_init=r[7], va_init=r[8], base_kv=r[9]))
    branches = []
    for _, r in tables["branch"]:
        branches.append(Branch(from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3], b_charge=r[4],
                               rate_a=r[5], tap=r[8] if r[8] != 0 else 1.0, shift=r[9],
                               in_service=r[10] > 0))
    return GridCase(base_mva=base_mva, buses=buses, branches=branches, generators=gens, name=name)


def case_from_json(text: str, name: str = "case") -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError("malformed", exc.msg, exc.lineno, exc.colno) from None
    try:
        buses = [Bus(**b) for b in doc["buses"]]
        branches = [Branch(**b) for b in doc["branches"]]
        gens = [Generator(**g) for g in doc.get("generators", [])]
        base = float(doc["base_mva"])
    except KeyError as exc:
        raise CaseError("missing_table", f"missing field {exc}") from None
    except TypeError as exc:
        raise CaseError("malformed", str(exc)) from None
    return GridCase(base_mva=base, buses=buses, branches=branches, generators=gens,
                    name=doc.get("name", name))


def case_to_json(case: GridCase) -> str:
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
    }
    return json.dumps(doc, indent=1)


def with_outages(case: GridCase, outaged: Sequence[int]) -> GridCase:
    """Copy of ``case`` with the given branch positions out of service."""
    out = set(outaged)
    branches = [Branch(**{**asdict(b), "in_service": False}) if k in out else b
                for k, b in enumerate(case.branches)]
    return GridCase(case.base_mva, case.buses, branches, case.generators, name=case.name)


# ---------------------------------------------------------------------------
# admittance matrix

@dataclass(frozen=True, eq=False)
class Ybus:
    """Admittance pattern plus complex values and branch slot maps.

    ``values`` has shape ``(nnz,)``; ``slot_ff`` .. ``slot_tt`` give, per
    branch, the value positions of its four primitive entries.
    """

    pattern: SparseCrs
    values: np.ndarray
    slot_ff: np.ndarray
    slot_ft: np.ndarray
    slot_tf: np.ndarray
    slot_tt: np.ndarray
    shunt: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray

    def values_for(self, in_service: np.ndarray) -> np.ndarray:
        """Value sets for per-task branch status; ``in_service`` is ``(n_branch, K)``."""
        mask = np.asarray(in_service, dtype=float)
        if mask.ndim == 1:
            mask = mask[:, None]
        out = np.zeros((self.pattern.nnz, mask.shape[1]), dtype=complex)
        out[self.pattern.diag_ptr] += self.shunt[:, None]
        for slots, prim in ((self.slot_ff, self.yff), (self.slot_ft, self.yft),
                            (self.slot_tf, self.ytf), (self.slot_tt, self.ytt)):
            np.add.at(out, slots, prim[:, None] * mask)
        return out


def branch_primitives(case: GridCase):
    r = np.array([b.r for b in case.branches], dtype=float)
    x = np.array([b.x for b in case.branches], dtype=float)
    bc = np.array([b.b_charge for b in case.branches], dtype=float)
    tap = np.array([b.tap for b in case.branches], dtype=float)
    shift = np.deg2rad(np.array([b.shift for b in case.branches], dtype=float))
    ys = 1.0 / (r + 1j * x)
    t = tap * np.exp(1j * shift)
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * tap)
    yft = -ys / np.conj(t)
    ytf = -ys / t
    return yff, yft, ytf, ytt


def build_ybus(case: GridCase) -> Ybus:
    """Admittance matrix; out-of-service branches keep zero-valued slots."""
    f, t = case.branch_ends()
    entries = np.concatenate([np.stack([f, t], 1), np.stack([t, f], 1)]) if case.n_branch else []
    pattern = crs_from_coordinates(case.n_bus, case.n_bus, entries)

    def slot(rows, cols):
        out = np.empty(len(rows), dtype=np.int32)
        for k, (a, b) in enumerate(zip(rows, cols)):
            lo, hi = pattern.row_ptr[a], pattern.row_ptr[a + 1]
            out[k] = lo + np.searchsorted(pattern.col_ix[lo:hi], b)
        return out

    shunt = np.array([complex(b.gs, b.bs) for b in case.buses]) / case.base_mva
    yff, yft, ytf, ytt = branch_primitives(case)
    ybus = Ybus(pattern, np.empty(0), slot(f, f), slot(f, t), slot(t, f), slot(t, t),
                shunt, yff, yft, ytf, ytt)
    values = ybus.values_for(case.branch_status())[:, 0]
    object.__setattr__(ybus, "values", values)
    return ybus


# ---------------------------------------------------------------------------
# scenarios and profiles

_COL_RE = re.compile(r"^bus:(-?\d+):(p|q|vm|va)$")


@dataclass
class ScenarioTable:
    """Per-task overrides, one row per task.

    Columns are ``bus:<id>:p`` / ``bus:<id>:q`` (net injection, MW / MVAr),
    ``bus:<id>:vm`` (p.u.) and ``bus:<id>:va`` (initial angle, degrees).
    """

    columns: List[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise CaseError("width_mismatch",
                            f"scenario has {len(self.columns)} columns but values of shape {self.values.shape}")
        for c in self.columns:
            if not _COL_RE.match(c):
                raise CaseError("malformed", f"bad scenario column {c!r}")

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def read_scenario_csv(text: str) -> ScenarioTable:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise CaseError("malformed", "empty scenario file")
    header = [c.strip() for c in rows[0]]
    data = []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise CaseError("width_mismatch", f"row has {len(r)} fields, header has {len(header)}", lineno)
        data.append([_number(v.strip(), lineno, k + 1) for k, v in enumerate(r)])
    return ScenarioTable(header, np.array(data, dtype=float).reshape(len(data), len(header)))


def read_outage_list(text: str, case: GridCase) -> List[List[int]]:
    """Contingency list: one outage per line, ``<from_bus> <to_bus> [circuit]``.

    ``circuit`` is the 1-based occurrence among parallel branches. Several
    branches may share one contingency when separated by ``+``.
    """
    lookup: Dict[Tuple[int, int], List[int]] = {}
    for k, br in enumerate(case.branches):
        lookup.setdefault((br.from_bus, br.to_bus), []).append(k)
        lookup.setdefault((br.to_bus, br.from_bus), []).append(k)
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        group = []
        for part in line.split("+"):
            toks = part.replace(",", " ").split()
            if len(toks) not in (2, 3):
                raise CaseError("malformed", f"expected '<from> <to> [circuit]', got {part.strip()!r}", lineno)
            a, b = int(_number(toks[0], lineno, 1)), int(_number(toks[1], lineno, 2))
            ckt = int(_number(toks[2], lineno, 3)) if len(toks) == 3 else 1
            cands = lookup.get((a, b), [])
            if ckt < 1 or ckt > len(cands):
                raise CaseError("unknown_bus", f"no branch {a}-{b} circuit {ckt}", lineno)
            group.append(cands[ckt - 1])
        out.append(group)
    return out


@dataclass(frozen=True, eq=False)
class Profiles:
    """Task-major input arrays for a batch, aligned with internal bus order.

    ``y_values`` has one column per task, or a single column shared by all.
    ``in_service`` likewise holds per-task branch status.
    """

    p_spec: np.ndarray  # (n_tasks, n_bus) p.u.
    q_spec: np.ndarray
    vm0: np.ndarray
    va0: np.ndarray  # radians
    y_values: np.ndarray  # (nnz, 1 or n_tasks) complex
    in_service: np.ndarray  # (n_branch, 1 or n_tasks) bool

    @property
    def n_tasks(self) -> int:
        return self.p_spec.shape[0]

    @property
    def shared_ybus(self) -> bool:
        return self.y_values.shape[1] == 1

    def take(self, tasks) -> "Profiles":
        tasks = np.asarray(tasks)
        ysel = slice(None) if self.shared_ybus else tasks
        ssel = slice(None) if self.in_service.shape[1] == 1 else tasks
        return Profiles(self.p_spec[tasks], self.q_spec[tasks], self.vm0[tasks], self.va0[tasks],
                        self.y_values[:, ysel], self.in_service[:, ssel])


def assemble_profiles(
    case: GridCase,
    scenario: Optional[ScenarioTable] = None,
    ybus: Optional[Ybus] = None,
    outages: Optional[Sequence[Sequence[int]]] = None,
    start: str = "case",
) -> Profiles:
    """Batch profiles from a case plus optional scenario rows or outage sets.

    Scenario rows override the case's injections and set-points; outage sets
    give one admittance value-set per contingency. One side may broadcast.
    ``start="flat"`` initialises PQ magnitudes to 1 and all non-slack angles
    to the slack angle; set-points of PV and slack buses are kept.
    """
    ybus = ybus or build_ybus(case)
    p, q = case.injections_pu()
    vm, va = case.voltage_setpoints()
    if start == "flat":
        va = np.full(case.n_bus, va[case.slack_bus])
        vm = np.where(np.isin(np.arange(case.n_bus), case.pq_buses), 1.0, vm)
    elif start != "case":
        raise ValueError(f"unknown start mode {start!r}")

    n_scen = 1 if scenario is None else scenario.n_tasks
    status = case.branch_status()
    if outages is None:
        in_service = status[:, None]
    else:
        in_service = np.repeat(status[:, None], len(outages), axis=1)
        for k, group in enumerate(outages):
            for b in group:
                if not 0 <= b < case.n_branch:
                    raise CaseError("unknown_bus", f"outage references branch {b}")
                in_service[b, k] = False
    n_y = in_service.shape[1]
    if n_scen > 1 and n_y > 1 and n_scen != n_y:
        raise CaseError("width_mismatch", f"{n_scen} scenario rows but {n_y} admittance sets")
    n_tasks = max(n_scen, n_y)

    P = np.repeat(p[None, :], n_tasks, 0)
    Q = np.repeat(q[None, :], n_tasks, 0)
    VM = np.repeat(vm[None, :], n_tasks, 0)
    VA = np.repeat(va[None, :], n_tasks, 0)
    if scenario is not None:
        targets = {"p": P, "q": Q, "vm": VM, "va": VA}
        for c, col in enumerate(scenario.columns):
            _, bus_id, fld = col.split(":")
            bus_id = int(bus_id)
            if bus_id not in case.bus_index:
                raise CaseError("unknown_bus", f"scenario column {col!r} references unknown bus {bus_id}")
            vals = scenario.values[:, c]
            if fld in ("p", "q"):
                vals = vals / case.base_mva
            elif fld == "va":
                vals = np.deg2rad(vals)
            targets[fld][:, case.bus_index[bus_id]] = vals
    y_values = ybus.values_for(in_service) if outages is not None else ybus.values[:, None]
    return Profiles(P, Q, VM, VA, y_values, in_service)

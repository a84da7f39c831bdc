"""Static grid description, 2-busbar topologies, unitary actions and their expansion
into an electrical graph.

Element order at a substation is fixed: line ends sorted by line id, then
generators by id, then loads by id. A bus-assignment vector lists the bus (0 or 1)
of every element in that order and is normalized so its first entry is 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

GENERATOR_KINDS = ("nuclear", "thermal", "wind", "solar")


class CaseFormatError(ValueError):
    """The case file cannot be parsed."""


class CaseValidationError(ValueError):
    """The case parses but violates a grid invariant."""


class UnknownAssetError(KeyError):
    pass


@dataclass(frozen=True)
class Substation:
    id: int
    base_kv: float


@dataclass(frozen=True)
class Line:
    id: int
    from_substation: int
    to_substation: int
    reactance: float
    imax: float


@dataclass(frozen=True)
class Generator:
    id: int
    substation: int
    kind: str
    pmax: float


@dataclass(frozen=True)
class Load:
    id: int
    substation: int
    key_factor: float


@dataclass(frozen=True)
class GridCase:
    substations: tuple[Substation, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    slack: int
    base_mva: float = 100.0

    def __post_init__(self):
        validate_case(self)

    # -- indexing -------------------------------------------------------
    @cached_property
    def sub_index(self) -> dict[int, int]:
        return {s.id: i for i, s in enumerate(self.substations)}

    @cached_property
    def line_index(self) -> dict[int, int]:
        return {l.id: i for i, l in enumerate(self.lines)}

    @property
    def n_subs(self) -> int:
        return len(self.substations)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_injections(self) -> int:
        return len(self.generators) + len(self.loads)

    @cached_property
    def injection_labels(self) -> tuple[str, ...]:
        return tuple(f"gen_{g.id}" for g in self.generators) + tuple(
            f"load_{d.id}" for d in self.loads
        )

    @cached_property
    def injection_signs(self) -> np.ndarray:
        """+1 for generators, -1 for loads (injection vectors hold positive MW)."""
        signs = np.concatenate([np.ones(len(self.generators)), -np.ones(len(self.loads))])
        signs.setflags(write=False)
        return signs

    @cached_property
    def elements(self) -> tuple[tuple[tuple[str, int], ...], ...]:
        """Per substation, the canonical element list as (kind, index) pairs.

        kind is one of "or", "ex" (line origin / extremity end), "gen", "load".
        """
        per_sub: list[list[tuple]] = [[] for _ in self.substations]
        for li, line in enumerate(self.lines):
            per_sub[self.sub_index[line.from_substation]].append((line.id, 0, ("or", li)))
            per_sub[self.sub_index[line.to_substation]].append((line.id, 1, ("ex", li)))
        out = []
        for si, entries in enumerate(per_sub):
            entries.sort()
            elems = [e[2] for e in entries]
            elems += [("gen", gi) for gi, g in enumerate(self.generators)
                      if self.sub_index[g.substation] == si]
            elems += [("load", di) for di, d in enumerate(self.loads)
                      if self.sub_index[d.substation] == si]
            out.append(tuple(elems))
        return tuple(out)

    @cached_property
    def element_position(self) -> dict[tuple[str, int], tuple[int, int]]:
        """(kind, index) -> (substation index, position in its vector)."""
        pos = {}
        for si, elems in enumerate(self.elements):
            for k, e in enumerate(elems):
                pos[e] = (si, k)
        return pos

    @cached_property
    def line_kv(self) -> np.ndarray:
        """Base voltage used for the current of each line (its origin substation)."""
        kv = np.array([self.substations[self.sub_index[l.from_substation]].base_kv
                       for l in self.lines])
        kv.setflags(write=False)
        return kv

    @cached_property
    def imax(self) -> np.ndarray:
        arr = np.array([l.imax for l in self.lines], dtype=float)
        arr.setflags(write=False)
        return arr

    def with_thermal_limits(self, imax: Sequence[float]) -> "GridCase":
        if len(imax) != self.n_lines:
            raise ValueError("one thermal limit per line expected")
        lines = tuple(
            Line(l.id, l.from_substation, l.to_substation, l.reactance, float(v))
            for l, v in zip(self.lines, imax)
        )
        return GridCase(self.substations, lines, self.generators, self.loads,
                        self.slack, self.base_mva)

    def to_dict(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "slack": self.slack,
            "substations": [vars(s) for s in self.substations],
            "lines": [vars(l) for l in self.lines],
            "generators": [vars(g) for g in self.generators],
            "loads": [vars(d) for d in self.loads],
        }


def validate_case(case: GridCase) -> None:
    def fail(msg):
        raise CaseValidationError(msg)

    sub_ids = [s.id for s in case.substations]
    if not sub_ids:
        fail("substations: at least one substation required")
    for section, items in (("substations", case.substations), ("lines", case.lines),
                           ("generators", case.generators), ("loads", case.loads)):
        ids = [x.id for x in items]
        if len(set(ids)) != len(ids):
            fail(f"{section}.id: duplicate ids")
        if ids != sorted(ids):
            fail(f"{section}.id: entries must be sorted by id")
    known = set(sub_ids)
    for s in case.substations:
        if not s.base_kv > 0:
            fail(f"substations[{s.id}].base_kv: must be > 0")
    for l in case.lines:
        if l.from_substation not in known:
            fail(f"lines[{l.id}].from_substation: unknown substation {l.from_substation}")
        if l.to_substation not in known:
            fail(f"lines[{l.id}].to_substation: unknown substation {l.to_substation}")
        if l.from_substation == l.to_substation:
            fail(f"lines[{l.id}].to_substation: line connects a substation to itself")
        if not (l.reactance > 0 and math.isfinite(l.reactance)):
            fail(f"lines[{l.id}].reactance: must be > 0")
        if not (l.imax > 0 and math.isfinite(l.imax)):
            fail(f"lines[{l.id}].imax: must be > 0")
    for g in case.generators:
        if g.substation not in known:
            fail(f"generators[{g.id}].substation: unknown substation {g.substation}")
        if g.kind not in GENERATOR_KINDS:
            fail(f"generators[{g.id}].kind: expected one of {GENERATOR_KINDS}")
        if not g.pmax > 0:
            fail(f"generators[{g.id}].pmax: must be > 0")
    for d in case.loads:
        if d.substation not in known:
            fail(f"loads[{d.id}].substation: unknown substation {d.substation}")
        if not d.key_factor > 0:
            fail(f"loads[{d.id}].key_factor: must be > 0")
    if case.loads and abs(sum(d.key_factor for d in case.loads) - 1.0) > 1e-9:
        fail("loads.key_factor: key factors must sum to 1")
    if case.slack not in known:
        fail(f"slack: unknown substation {case.slack}")
    if not case.base_mva > 0:
        fail("base_mva: must be > 0")
    # reference topology must be connected
    parent = {s: s for s in sub_ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for l in case.lines:
        parent[find(l.from_substation)] = find(l.to_substation)
    if len({find(s) for s in sub_ids}) > 1:
        fail("lines: reference topology graph is disconnected")


_SECTIONS = ("substations", "lines", "generators", "loads", "slack", "base_mva")
_FIELDS = {
    "substations": (Substation, ("id", "base_kv")),
    "lines": (Line, ("id", "from_substation", "to_substation", "reactance", "imax")),
    "generators": (Generator, ("id", "substation", "kind", "pmax")),
    "loads": (Load, ("id", "substation", "key_factor")),
}


def case_from_dict(doc: dict) -> GridCase:
    if not isinstance(doc, dict):
        raise CaseFormatError("case: top-level document must be a mapping")
    for key in _SECTIONS:
        if key not in doc:
            raise CaseFormatError(f"{key}: missing section")
    parsed = {}
    for section, (cls, names) in _FIELDS.items():
        rows = doc[section]
        if not isinstance(rows, list):
            raise CaseFormatError(f"{section}: expected a list")
        items = []
        for k, row in enumerate(rows):
            if not isinstance(row, dict):
                raise CaseFormatError(f"{section}[{k}]: expected a mapping")
            missing = [n for n in names if n not in row]
            if missing:
                raise CaseFormatError(f"{section}[{k}].{missing[0]}: missing field")
            try:
                vals = {}
                for n in names:
                    v = row[n]
                    if n == "kind":
                        vals[n] = str(v)
                    elif n in ("id", "substation", "from_substation", "to_substation"):
                        if isinstance(v, bool) or int(v) != v:
                            raise ValueError
                        vals[n] = int(v)
                    else:
                        vals[n] = float(v)
            except (TypeError, ValueError):
                raise CaseFormatError(f"{section}[{k}].{n}: bad value {row[n]!r}") from None
            items.append(cls(**vals))
        parsed[section] = tuple(sorted(items, key=lambda x: x.id))
    try:
        slack = int(doc["slack"])
        base_mva = float(doc["base_mva"])
    except (TypeError, ValueError) as exc:
        raise CaseFormatError(f"slack/base_mva: {exc}") from None
    return GridCase(slack=slack, base_mva=base_mva, **parsed)


def load_case(path: Union[str, Path]) -> GridCase:
    """Read and validate a case file (JSON document with the six case sections)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CaseFormatError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return case_from_dict(doc)


def save_case(case: GridCase, path: Union[str, Path]) -> None:
    text = json.dumps(case.to_dict(), indent=1) + "\n"
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def shipped_case_path(name: str = "ieee14.case") -> Path:
    return Path(__file__).parent / "data" / name


def ieee14(calibrated: bool = False) -> GridCase:
    return load_case(shipped_case_path("ieee14_calibrated.case" if calibrated else "ieee14.case"))


def case_hash(case: GridCase) -> str:
    import hashlib

    blob = json.dumps(case.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# -- topology ----------------------------------------------------------------

def normalize_config(vec: Iterable[int]) -> tuple[int, ...]:
    vec = tuple(int(v) for v in vec)
    if any(v not in (0, 1) for v in vec):
        raise ValueError(f"bus assignment values must be 0 or 1, got {vec}")
    if vec and vec[0] == 1:
        vec = tuple(1 - v for v in vec)
    return vec


@dataclass(frozen=True)
class Topology:
    """Bus assignment per substation (canonical element order) and line status."""

    buses: tuple[tuple[int, ...], ...]
    line_status: tuple[bool, ...]

    @classmethod
    def reference(cls, case: GridCase) -> "Topology":
        return cls(tuple((0,) * len(e) for e in case.elements), (True,) * case.n_lines)

    def with_substation(self, sub_index: int, config: Sequence[int]) -> "Topology":
        buses = list(self.buses)
        buses[sub_index] = normalize_config(config)
        return Topology(tuple(buses), self.line_status)

    def with_line(self, line_index: int, status: bool) -> "Topology":
        ls = list(self.line_status)
        ls[line_index] = bool(status)
        return Topology(self.buses, tuple(ls))

    def is_shaped_for(self, case: GridCase) -> bool:
        return (len(self.buses) == case.n_subs and len(self.line_status) == case.n_lines
                and all(len(b) == len(e) for b, e in zip(self.buses, case.elements)))

    def to_dict(self, case: GridCase) -> dict:
        return {
            "substations": {str(s.id): list(b) for s, b in zip(case.substations, self.buses)},
            "lines": {str(l.id): bool(v) for l, v in zip(case.lines, self.line_status)},
        }

    @classmethod
    def from_dict(cls, case: GridCase, doc: dict) -> "Topology":
        topo = cls.reference(case)
        for sid, vec in doc.get("substations", {}).items():
            si = case.sub_index.get(int(sid))
            if si is None:
                raise UnknownAssetError(f"substation {sid}")
            if len(vec) != len(case.elements[si]):
                raise ValueError(f"substation {sid}: expected {len(case.elements[si])} entries")
            topo = topo.with_substation(si, vec)
        for lid, status in doc.get("lines", {}).items():
            li = case.line_index.get(int(lid))
            if li is None:
                raise UnknownAssetError(f"line {lid}")
            topo = topo.with_line(li, bool(status))
        return topo


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class DoNothing:
    def to_dict(self) -> dict:
        return {"type": "do_nothing"}


@dataclass(frozen=True)
class SwitchLine:
    line: int

    def to_dict(self) -> dict:
        return {"type": "switch_line", "line": self.line}


@dataclass(frozen=True)
class SetSubstationConfig:
    substation: int
    target: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(v) for v in self.target))

    def to_dict(self) -> dict:
        return {"type": "set_bus", "substation": self.substation, "target": list(self.target)}


Action = Union[DoNothing, SwitchLine, SetSubstationConfig]
DO_NOTHING = DoNothing()


def action_from_dict(doc: dict | None) -> Action:
    if doc is None:
        return DO_NOTHING
    kind = doc.get("type")
    if kind == "do_nothing":
        return DO_NOTHING
    if kind == "switch_line":
        return SwitchLine(int(doc["line"]))
    if kind == "set_bus":
        return SetSubstationConfig(int(doc["substation"]), tuple(doc["target"]))
    raise ValueError(f"unknown action type {kind!r}")


def asset_of(case: GridCase, action: Action) -> int | None:
    """Asset index touched by an action: substations first, then lines. None for DoNothing."""
    if isinstance(action, DoNothing):
        return None
    if isinstance(action, SwitchLine):
        if action.line not in case.line_index:
            raise UnknownAssetError(f"line {action.line}")
        return case.n_subs + case.line_index[action.line]
    if isinstance(action, SetSubstationConfig):
        if action.substation not in case.sub_index:
            raise UnknownAssetError(f"substation {action.substation}")
        return case.sub_index[action.substation]
    raise TypeError(f"not an action: {action!r}")


def asset_label(case: GridCase, asset: int) -> tuple[str, int]:
    if asset < case.n_subs:
        return ("sub", case.substations[asset].id)
    return ("line", case.lines[asset - case.n_subs].id)


def apply_action(case: GridCase, topology: Topology, action: Action) -> Topology:
    """Return the topology reached by applying ``action``. No legality check."""
    if isinstance(action, DoNothing):
        return topology
    if isinstance(action, SwitchLine):
        li = case.line_index.get(action.line)
        if li is None:
            raise UnknownAssetError(f"line {action.line}")
        return topology.with_line(li, not topology.line_status[li])
    if isinstance(action, SetSubstationConfig):
        si = case.sub_index.get(action.substation)
        if si is None:
            raise UnknownAssetError(f"substation {action.substation}")
        if len(action.target) != len(case.elements[si]):
            raise ValueError(
                f"substation {action.substation}: target has {len(action.target)} entries, "
                f"expected {len(case.elements[si])}"
            )
        return topology.with_substation(si, action.target)
    raise TypeError(f"not an action: {action!r}")


def action_depth(case: GridCase, topology: Topology, reference: Topology,
                 dictionary: Sequence[Action]) -> int | None:
    """Fewest dictionary actions turning ``reference`` into ``topology``; None if unreachable.

    Actions on distinct assets commute, a bus-set action overwrites its substation and a
    line switch is an involution, so the search splits per asset into 0, 1 or unreachable.
    """
    if not dictionary:
        raise ValueError("dictionary must not be empty")
    sub_targets: dict[int, set] = {}
    switchable: set[int] = set()
    for a in dictionary:
        if isinstance(a, SetSubstationConfig):
            si = case.sub_index[a.substation]
            sub_targets.setdefault(si, set()).add(normalize_config(a.target))
        elif isinstance(a, SwitchLine):
            switchable.add(case.line_index[a.line])
    depth = 0
    for si, (have, ref) in enumerate(zip(topology.buses, reference.buses)):
        if have != ref:
            if have not in sub_targets.get(si, ()):
                return None
            depth += 1
    for li, (have, ref) in enumerate(zip(topology.line_status, reference.line_status)):
        if have != ref:
            if li not in switchable:
                return None
            depth += 1
    return depth


# -- electrical graph --------------------------------------------------------

@dataclass(frozen=True)
class ElectricalGraph:
    n_nodes: int
    node_substation: np.ndarray   # (n_nodes,) substation index
    node_bus: np.ndarray          # (n_nodes,) 0 or 1
    branch_line: np.ndarray       # (n_branches,) line index of each in-service branch
    branch_from: np.ndarray       # node index
    branch_to: np.ndarray
    susceptance: np.ndarray       # 1 / reactance, p.u.
    injection_node: np.ndarray    # (n_injections,) node index; generators first
    injection_signs: np.ndarray   # +1 generator, -1 load
    gen_pmax: np.ndarray          # (n_generators,)
    slack_node: int
    n_lines: int
    base_mva: float
    line_kv: np.ndarray           # (n_lines,) voltage used for current conversion

    @property
    def n_branches(self) -> int:
        return len(self.branch_line)


def _frozen(arr) -> np.ndarray:
    arr = np.asarray(arr)
    arr.setflags(write=False)
    return arr


def expand_topology(case: GridCase, topology: Topology) -> ElectricalGraph:
    if not topology.is_shaped_for(case):
        raise ValueError("topology shape does not match the case")
    node_of: dict[tuple[int, int], int] = {}
    node_sub, node_bus = [], []
    for si, vec in enumerate(topology.buses):
        for b in (0, 1):
            if b in vec:
                node_of[(si, b)] = len(node_sub)
                node_sub.append(si)
                node_bus.append(b)
    pos = case.element_position

    def node(elem):
        si, k = pos[elem]
        return node_of[(si, topology.buses[si][k])]

    br_line, br_from, br_to, br_b = [], [], [], []
    for li, line in enumerate(case.lines):
        if topology.line_status[li]:
            br_line.append(li)
            br_from.append(node(("or", li)))
            br_to.append(node(("ex", li)))
            br_b.append(1.0 / line.reactance)
    inj_node = [node(("gen", gi)) for gi in range(len(case.generators))]
    inj_node += [node(("load", di)) for di in range(len(case.loads))]

    slack_si = case.sub_index[case.slack]
    gens_at_slack = [(g.pmax, -gi) for gi, g in enumerate(case.generators)
                     if case.sub_index[g.substation] == slack_si]
    if gens_at_slack:
        gi = -max(gens_at_slack)[1]
        slack_node = inj_node[gi]
    else:
        slack_node = node_of.get((slack_si, 0), node_of.get((slack_si, 1)))
    return ElectricalGraph(
        n_nodes=len(node_sub),
        node_substation=_frozen(np.array(node_sub, dtype=np.int64)),
        node_bus=_frozen(np.array(node_bus, dtype=np.int64)),
        branch_line=_frozen(np.array(br_line, dtype=np.int64)),
        branch_from=_frozen(np.array(br_from, dtype=np.int64)),
        branch_to=_frozen(np.array(br_to, dtype=np.int64)),
        susceptance=_frozen(np.array(br_b, dtype=float)),
        injection_node=_frozen(np.array(inj_node, dtype=np.int64)),
        injection_signs=case.injection_signs,
        gen_pmax=_frozen(np.array([g.pmax for g in case.generators], dtype=float)),
        slack_node=int(slack_node),
        n_lines=case.n_lines,
        base_mva=case.base_mva,
        line_kv=case.line_kv,
    )

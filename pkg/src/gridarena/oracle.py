"""Hindsight upper bound: best course of dictionary actions over a whole scenario.

The pipeline enumerates every topology reachable by one dictionary option per asset,
scores each topology held fixed over the scenario, links topologies one asset apart
into a time-layered graph that respects the cooldown rule, and runs a longest-path
dynamic program over it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .environment import Rules
from .grid_model import (
    DO_NOTHING, Action, GridCase, SetSubstationConfig, SwitchLine, Topology,
    action_from_dict, asset_of, case_hash, expand_topology, normalize_config,
)
from .power_flow import DCSystem

log = logging.getLogger(__name__)

DEFAULT_CAP = 20_000

# Substation target configurations and line switches of the reference dictionary.
TABLE_SUBSTATIONS: dict[int, tuple[tuple[int, ...], ...]] = {
    6: ((0, 0, 0, 0, 1, 1), (0, 1, 0, 0, 1, 1)),
    5: ((0, 1, 0, 0, 1), (0, 0, 1, 0, 1)),
    4: ((0, 0, 1, 0, 1, 0), (0, 0, 0, 1, 1, 0), (1, 0, 1, 0, 1, 1), (1, 0, 1, 0, 1, 0)),
    9: ((1, 0, 1, 0, 1), (0, 0, 1, 0, 1), (1, 1, 0, 1, 1)),
    2: ((1, 1, 0, 1, 0, 1), (1, 1, 0, 1, 0, 0)),
}
TABLE_LINES: tuple[int, ...] = (4, 10, 18, 20)
# (substation, config position) of the configurations found by thermal design;
# each one applied alone to the reference topology gives a constant-topology baseline.
THERMAL_DESIGN: tuple[tuple[int, int], ...] = ((6, 0), (5, 0), (4, 0), (4, 2), (9, 0))


class OracleError(RuntimeError):
    pass


class TopologySpaceTooLarge(OracleError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} topologies exceed the cap of {cap}")
        self.count = count
        self.cap = cap


class NoFeasiblePath(OracleError):
    def __init__(self, furthest: int):
        super().__init__(f"no feasible path to the horizon; furthest reachable timestep {furthest}")
        self.furthest = furthest


# -- dictionary ----------------------------------------------------------------

def _action_key(action: Action):
    if isinstance(action, SetSubstationConfig):
        return ("sub", action.substation, normalize_config(action.target))
    if isinstance(action, SwitchLine):
        return ("line", action.line)
    raise ValueError(f"dictionary entries must be unitary topology actions, got {action!r}")


@dataclass(frozen=True)
class ActionDictionary:
    actions: tuple[Action, ...]

    def __post_init__(self):
        seen = set()
        for a in self.actions:
            key = _action_key(a)
            if key in seen:
                raise ValueError(f"duplicate dictionary action {a!r}")
            seen.add(key)

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def to_dict(self) -> dict:
        return {"actions": [a.to_dict() for a in self.actions]}

    @classmethod
    def from_dict(cls, doc) -> "ActionDictionary":
        items = doc["actions"] if isinstance(doc, dict) else doc
        return cls(tuple(action_from_dict(d) for d in items))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self, case: GridCase) -> None:
        for a in self.actions:
            idx = asset_of(case, a)
            if isinstance(a, SetSubstationConfig) and len(a.target) != len(case.elements[idx]):
                raise ValueError(f"substation {a.substation}: target has {len(a.target)} "
                                 f"entries, expected {len(case.elements[idx])}")


def table_dictionary() -> ActionDictionary:
    acts: list[Action] = [SetSubstationConfig(s, cfg)
                          for s, cfgs in TABLE_SUBSTATIONS.items() for cfg in cfgs]
    acts += [SwitchLine(l) for l in TABLE_LINES]
    return ActionDictionary(tuple(acts))


def greedy_dictionary(case: GridCase) -> ActionDictionary:
    """Reference dictionary plus a switch for every line. Table entries that do not
    fit the case (other grids) are dropped."""
    def fits(a):
        if isinstance(a, SwitchLine):
            return a.line in case.line_index
        si = case.sub_index.get(a.substation)
        return si is not None and len(case.elements[si]) == len(a.target)

    base = [a for a in table_dictionary().actions if fits(a)]
    have = {a.line for a in base if isinstance(a, SwitchLine)}
    base += [SwitchLine(l.id) for l in case.lines if l.id not in have]
    return ActionDictionary(tuple(base))


def thermal_design_topologies(case: GridCase) -> list[Topology]:
    ref = Topology.reference(case)
    return [ref.with_substation(case.sub_index[s], TABLE_SUBSTATIONS[s][k])
            for s, k in THERMAL_DESIGN]


# -- topology space -------------------------------------------------------------

@dataclass
class TopologySpace:
    """All topologies taking one option per dictionary asset.

    Assets are held in ascending asset order; option 0 of every asset is its reference
    state, so index 0 is the reference topology. Index = mixed-radix number of the
    option codes, last asset fastest.
    """
    case: GridCase
    assets: tuple[int, ...]                 # asset indices (substations first, then lines)
    options: tuple[tuple, ...]              # per asset: normalized configs or line statuses
    reference_index: int = 0

    def __post_init__(self):
        self.radix = np.array([len(o) for o in self.options], dtype=np.int64)
        self.size = int(np.prod(self.radix)) if len(self.radix) else 1
        stride = np.ones(len(self.radix), dtype=np.int64)
        for p in range(len(self.radix) - 2, -1, -1):
            stride[p] = stride[p + 1] * self.radix[p + 1]
        self.stride = stride
        self._topologies: Optional[list[Topology]] = None
        self._neighbors = None

    def __len__(self):
        return self.size

    def codes(self) -> np.ndarray:
        if not len(self.radix):
            return np.zeros((1, 0), dtype=np.int64)
        idx = np.arange(self.size, dtype=np.int64)[:, None]
        return (idx // self.stride[None, :]) % self.radix[None, :]

    def topology(self, index: int) -> Topology:
        topo = Topology.reference(self.case)
        n_subs = self.case.n_subs
        rem = index
        for p in range(len(self.assets)):
            c = int(rem // self.stride[p])
            rem -= c * int(self.stride[p])
            if c == 0:
                continue
            asset, value = self.assets[p], self.options[p][c]
            if asset < n_subs:
                topo = topo.with_substation(asset, value)
            else:
                topo = topo.with_line(asset - n_subs, value)
        return topo

    @property
    def topologies(self) -> list[Topology]:
        if self._topologies is None:
            self._topologies = [self.topology(i) for i in range(self.size)]
        return self._topologies

    def index_of(self, topology: Topology) -> Optional[int]:
        ref = Topology.reference(self.case)
        n_subs = self.case.n_subs
        index = 0
        touched = set()
        for p, asset in enumerate(self.assets):
            touched.add(asset)
            if asset < n_subs:
                have = topology.buses[asset]
            else:
                have = topology.line_status[asset - n_subs]
            try:
                c = self.options[p].index(have)
            except ValueError:
                return None
            index += c * int(self.stride[p])
        for si in range(n_subs):
            if si not in touched and topology.buses[si] != ref.buses[si]:
                return None
        for li in range(self.case.n_lines):
            if n_subs + li not in touched and topology.line_status[li] != ref.line_status[li]:
                return None
        return index

    def neighbors(self):
        """(nbr, nbr_asset): for every topology the indices one asset change away and
        the 1-based dictionary position of that asset; rows padded with -1 / 0."""
        if self._neighbors is None:
            codes = self.codes()
            M = int(np.sum(self.radix - 1))
            nbr = np.full((self.size, max(M, 1)), -1, dtype=np.int64)
            nbr_asset = np.zeros((self.size, max(M, 1)), dtype=np.int64)
            base = np.arange(self.size, dtype=np.int64)
            col = 0
            for p in range(len(self.assets)):
                for shift in range(1, int(self.radix[p])):
                    other = (codes[:, p] + shift) % self.radix[p]
                    nbr[:, col] = base + (other - codes[:, p]) * self.stride[p]
                    nbr_asset[:, col] = p + 1
                    col += 1
            self._neighbors = (nbr, nbr_asset)
        return self._neighbors

    def action_between(self, src: int, dst: int) -> Action:
        """The unitary action turning topology ``src`` into neighbour ``dst``."""
        if src == dst:
            return DO_NOTHING
        cs = (src // self.stride) % self.radix
        cd = (dst // self.stride) % self.radix
        diff = np.flatnonzero(cs != cd)
        if len(diff) != 1:
            raise ValueError(f"topologies {src} and {dst} differ in {len(diff)} assets")
        p = int(diff[0])
        asset = self.assets[p]
        if asset < self.case.n_subs:
            return SetSubstationConfig(self.case.substations[asset].id,
                                       self.options[p][int(cd[p])])
        return SwitchLine(self.case.lines[asset - self.case.n_subs].id)


def enumerate_topologies(case: GridCase, dictionary: ActionDictionary,
                         cap: int = DEFAULT_CAP) -> TopologySpace:
    dictionary.validate(case)
    ref = Topology.reference(case)
    per_asset: dict[int, list] = {}
    for a in dictionary:
        asset = asset_of(case, a)
        if isinstance(a, SetSubstationConfig):
            opts = per_asset.setdefault(asset, [ref.buses[asset]])
            cfg = normalize_config(a.target)
            if cfg not in opts:
                opts.append(cfg)
        else:
            li = asset - case.n_subs
            per_asset[asset] = [ref.line_status[li], not ref.line_status[li]]
    assets = tuple(sorted(per_asset))
    count = math.prod(len(per_asset[k]) for k in assets)
    if count > cap:
        raise TopologySpaceTooLarge(count, cap)
    return TopologySpace(case, assets, tuple(tuple(per_asset[k]) for k in assets))


# -- reward chains ----------------------------------------------------------------

@dataclass
class RewardMatrix:
    values: np.ndarray     # (N, T) score of each topology held fixed at each timestep
    feasible: np.ndarray   # (N, T) bool

    @property
    def shape(self):
        return self.values.shape


class ChainEvaluator:
    """Factorizes every topology of a space once and scores scenarios against all of them."""

    def __init__(self, case: GridCase, space: TopologySpace, chunk: int = 256):
        self.case = case
        self.space = space
        self.chunk = chunk
        N, L = len(space), case.n_lines
        self.flow_maps = np.zeros((N, L, case.n_injections))
        self.in_service = np.zeros((N, L), dtype=bool)
        self.diverged = np.zeros(N, dtype=bool)
        for i, topo in enumerate(space.topologies):
            sysm = DCSystem(expand_topology(case, topo))
            self.flow_maps[i] = sysm.flow_map
            self.in_service[i] = sysm.in_service
            self.diverged[i] = sysm.diverged
        self.amp_factor = 1000.0 / (math.sqrt(3.0) * np.asarray(case.line_kv, dtype=float))

    def amps(self, injections, rows=slice(None)) -> np.ndarray:
        x = np.asarray(injections, dtype=float)
        flows = np.einsum("nli,ti->ntl", self.flow_maps[rows], x, optimize=True)
        return np.abs(flows) * self.amp_factor

    def evaluate(self, injections, mode: str = "easy", rules: Rules = Rules()) -> RewardMatrix:
        """Score every topology held fixed. Easy mode masks diverging topologies; hard
        mode also masks each chain from its first protection trip onward."""
        if mode not in ("easy", "hard"):
            raise ValueError("mode must be 'easy' or 'hard'")
        x = np.asarray(injections, dtype=float)
        N, T = len(self.space), x.shape[0]
        values = np.zeros((N, T))
        feasible = np.repeat(~self.diverged[:, None], T, axis=1)
        imax = self.case.imax
        for lo in range(0, N, self.chunk):
            rows = slice(lo, min(lo + self.chunk, N))
            amps = self.amps(x, rows)
            ins = self.in_service[rows]
            values[rows] = kernels.line_scores(amps, imax, ins)
            if mode == "hard":
                trip = kernels.first_trip(amps, imax, ins, rules.reaction_time,
                                          rules.hard_overload_factor)
                feasible[rows] &= np.arange(T)[None, :] < trip[:, None]
        values[~feasible] = 0.0
        return RewardMatrix(values, feasible)


def evaluate_chains(case: GridCase, scenario, space: TopologySpace, mode: str = "easy",
                    rules: Rules = Rules()) -> RewardMatrix:
    return ChainEvaluator(case, space).evaluate(scenario.injections, mode, rules)


# -- graph and longest path -------------------------------------------------------------

@dataclass
class OracleGraph:
    """Time-layered graph over (topology, cooldown state). Node state (s1, s2) holds the
    dictionary asset acted on when entering the current timestep and the one before
    (0 = none). A move on asset k is allowed when k is neither, which is exactly the
    recovery rule for a cooldown of 3. The relaxed graph drops the state."""
    rewards: np.ndarray
    feasible: np.ndarray
    nbr: np.ndarray
    nbr_asset: np.ndarray
    n_assets: int
    start: int
    cooldown: int
    relaxed: bool

    @property
    def n_states(self) -> int:
        return 1 if self.relaxed else self.n_assets + 1

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def edge_count(self) -> int:
        """Edges whose source and destination node-times are both usable."""
        T = self.horizon
        valid = self.nbr >= 0
        total = 0
        for t in range(1, T):
            dst = self.feasible[:, t]
            src_stay = self.feasible[:, t - 1]
            total += int(np.sum(dst & src_stay))
            src_move = np.where(valid, self.feasible[np.maximum(self.nbr, 0), t - 1], False)
            total += int(np.sum(src_move & dst[:, None]))
        return total


def build_graph(space: TopologySpace, matrix: RewardMatrix, rules: Rules = Rules(),
                relaxed: bool = False) -> OracleGraph:
    if matrix.values.shape[0] != len(space):
        raise ValueError("reward matrix does not cover the topology space")
    if not relaxed and rules.cooldown > 3:
        raise ValueError("exact cooldown tracking supports a cooldown of at most 3 steps; "
                         "use the relaxed graph")
    nbr, nbr_asset = space.neighbors()
    return OracleGraph(np.ascontiguousarray(matrix.values, dtype=float),
                       np.ascontiguousarray(matrix.feasible, dtype=bool), nbr, nbr_asset,
                       len(space.assets), space.reference_index, rules.cooldown, relaxed)


@dataclass
class PathResult:
    score: float
    path: list[int]                         # topology index per timestep
    course: list[tuple[int, Action]]        # (t, action applied at step t -> t+1)
    n_actions: int

    def actions_by_step(self) -> dict[int, Action]:
        return {t: a for t, a in self.course}


def _layer(graph: OracleGraph, V, C, t, V_out, C_out, bp_out):
    kernels.dp_layer(V, C, graph.rewards[:, t], graph.feasible[:, t], graph.nbr,
                     graph.nbr_asset, graph.cooldown, graph.relaxed, V_out, C_out, bp_out)


def longest_path(graph: OracleGraph, checkpoint_every: int | None = None,
                 max_backpointer_bytes: int = 768 * 2**20) -> PathResult:
    """Best total reward r(start, 0) + sum of edge weights to the horizon.

    Ties go to fewer actions, then to staying put, then to the lower topology index.
    When all backpointers fit in ``max_backpointer_bytes`` they are kept from the
    forward pass. Otherwise layer values are saved every ``checkpoint_every`` steps
    (default about sqrt(T)) and each segment is recomputed during the backward walk.
    """
    N, T = graph.rewards.shape
    A = graph.n_states
    M = graph.nbr.shape[1]
    bp_dtype = np.int16 if M * A + A < np.iinfo(np.int16).max else np.int32
    layer_bytes = N * A * A * np.dtype(bp_dtype).itemsize
    keep_all = checkpoint_every is None and layer_bytes * max(T - 1, 1) <= max_backpointer_bytes
    s0 = graph.start
    if not graph.feasible[s0, 0]:
        raise NoFeasiblePath(-1)
    NEG, BIG = kernels.NEG, kernels.BIG
    V = np.full((N, A, A), NEG)
    C = np.full((N, A, A), BIG, dtype=np.int64)
    V[s0, 0, 0] = graph.rewards[s0, 0]
    C[s0, 0, 0] = 0
    K = checkpoint_every or max(1, int(math.ceil(math.sqrt(T))))
    checkpoints = {0: (V.copy(), C.copy())}
    V2, C2 = np.empty_like(V), np.empty_like(C)
    stored = np.empty((max(T - 1, 0) if keep_all else 1, N, A, A), dtype=bp_dtype)
    for t in range(1, T):
        _layer(graph, V, C, t, V2, C2, stored[t - 1 if keep_all else 0])
        if not np.any(V2 > NEG):
            raise NoFeasiblePath(t - 1)
        V, V2 = V2, V
        C, C2 = C2, C
        if not keep_all and t % K == 0 and t < T - 1:
            checkpoints[t] = (V.copy(), C.copy())

    # final node: max value, then fewest actions, then lowest index
    best = None
    flatV, flatC = V.reshape(N, -1), C.reshape(N, -1)
    vmax = flatV.max()
    cand = np.argwhere(flatV == vmax)
    for j, s in cand:
        key = (int(flatC[j, s]), int(j), int(s))
        if best is None or key < best:
            best = key
    n_actions, j, s = best
    score = float(vmax)
    cur = (j, s // A, s % A)

    path = [0] * T
    path[T - 1] = j
    segments = [(0, T - 1)] if keep_all else [
        (start, min(start + K, T - 1)) for start in sorted(checkpoints, reverse=True)]
    for start, end in segments:
        if end <= start:
            continue
        if keep_all:
            bps = stored
        else:
            Vc, Cc = (a.copy() for a in checkpoints[start])
            bps = np.empty((end - start, N, A, A), dtype=bp_dtype)
            for t in range(start + 1, end + 1):
                _layer(graph, Vc, Cc, t, V2, C2, bps[t - start - 1])
                Vc, V2 = V2, Vc
                Cc, C2 = C2, Cc
        for t in range(end, start, -1):
            j, s1, s2 = cur
            code = int(bps[t - start - 1, j, s1, s2])
            if code < 0:
                x = -code - 1
                prev = (j, s2, x)
            else:
                m, x = divmod(code, A)
                prev = (int(graph.nbr[j, m]), s2, x)
            if graph.relaxed:
                prev = (prev[0], 0, 0)
            cur = prev
            path[t - 1] = cur[0]
    if path[0] != s0:
        raise OracleError("backtracking did not return to the start topology")
    return PathResult(score, path, [], n_actions)


def attach_course(result: PathResult, space: TopologySpace) -> PathResult:
    course = []
    for t in range(1, len(result.path)):
        a, b = result.path[t - 1], result.path[t]
        if a != b:
            course.append((t - 1, space.action_between(a, b)))
    result.course = course
    return result


def normalized_score(agent: float, dn: float, oracle: float) -> float:
    """0 for the do-nothing score, 1 for the oracle score."""
    if oracle == dn:
        raise ZeroDivisionError("oracle and do-nothing scores coincide")
    return (agent - dn) / (oracle - dn)


# -- end to end ---------------------------------------------------------------------

class RewardCache:
    """On-disk store of reward matrices keyed by case, scenario, dictionary and mode."""

    def __init__(self, directory):
        self.dir = Path(directory)

    def _path(self, case: GridCase, scenario_id: str, dictionary: ActionDictionary,
              mode: str) -> Path:
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in scenario_id)
        return self.dir / (f"{case_hash(case)[:16]}_{safe}_{dictionary.digest()[:16]}"
                           f"_{mode}.npz")

    def load(self, case, scenario_id, dictionary, mode) -> Optional[RewardMatrix]:
        p = self._path(case, scenario_id, dictionary, mode)
        if not p.is_file():
            return None
        with np.load(p) as z:
            return RewardMatrix(z["values"], z["feasible"])

    def store(self, case, scenario_id, dictionary, mode, matrix: RewardMatrix) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self._path(case, scenario_id, dictionary, mode)
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, values=matrix.values, feasible=matrix.feasible)
        tmp.replace(p)


@dataclass
class OracleRun:
    scenario_id: str
    score: float
    course: list[tuple[int, Action]]
    path: list[int]
    n_actions: int
    n_topologies: int
    relaxed: bool
    mode: str
    extra: dict = field(default_factory=dict)

    def actions_by_step(self) -> dict[int, Action]:
        return {t: a for t, a in self.course}


class Oracle:
    """Reusable oracle for one case and dictionary; factorizations are shared
    across scenarios."""

    def __init__(self, case: GridCase, dictionary: ActionDictionary | None = None,
                 rules: Rules = Rules(), relaxed: bool = False, mode: str = "easy",
                 cache_dir=None, cap: int = DEFAULT_CAP):
        self.case = case
        self.dictionary = dictionary if dictionary is not None else table_dictionary()
        self.rules = rules
        self.relaxed = relaxed
        self.mode = mode
        self.space = enumerate_topologies(case, self.dictionary, cap)
        self.cache = RewardCache(cache_dir) if cache_dir else None
        self._evaluator: Optional[ChainEvaluator] = None

    @property
    def evaluator(self) -> ChainEvaluator:
        if self._evaluator is None:
            self._evaluator = ChainEvaluator(self.case, self.space)
        return self._evaluator

    def rewards(self, scenario) -> RewardMatrix:
        matrix = None
        if self.cache is not None:
            matrix = self.cache.load(self.case, scenario.id, self.dictionary, self.mode)
            if matrix is not None and matrix.values.shape != (len(self.space), scenario.horizon):
                matrix = None
        if matrix is None:
            matrix = self.evaluator.evaluate(scenario.injections, self.mode, self.rules)
            if self.cache is not None:
                self.cache.store(self.case, scenario.id, self.dictionary, self.mode, matrix)
        return matrix

    def solve(self, scenario) -> OracleRun:
        matrix = self.rewards(scenario)
        graph = build_graph(self.space, matrix, self.rules, self.relaxed)
        res = attach_course(longest_path(graph), self.space)
        return OracleRun(scenario.id, res.score, res.course, res.path, res.n_actions,
                         len(self.space), self.relaxed, self.mode)


def run_oracle(case: GridCase, scenario, dictionary: ActionDictionary | None = None,
               rules: Rules = Rules(), relaxed: bool = False, mode: str = "easy",
               cache_dir=None) -> OracleRun:
    return Oracle(case, dictionary, rules, relaxed, mode, cache_dir).solve(scenario)

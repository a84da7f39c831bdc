"""DC power flow over an :class:`ElectricalGraph`.

Every topology is factorized once into linear maps from injection MW to node angles,
line flows and balanced node injections. Solving a timestep (or a whole batch of
timesteps) is then a matrix product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .grid_model import ElectricalGraph, GridCase, Topology, expand_topology

PIVOT_TOL = 1e-12
_SQRT3 = math.sqrt(3.0)


def flows_to_amps(flow_mw, base_kv):
    """Three-phase current magnitude (A) of an active flow at nominal voltage."""
    base_kv = np.asarray(base_kv, dtype=float)
    if np.any(base_kv <= 0):
        raise ValueError("base voltage must be > 0")
    return np.abs(flow_mw) * 1000.0 / (_SQRT3 * base_kv)


@dataclass(frozen=True)
class PowerFlowResult:
    angles: np.ndarray           # (..., n_nodes) radians
    flows: np.ndarray            # (..., n_lines) MW, signed origin -> extremity
    amps: np.ndarray             # (..., n_lines) A
    node_injection: np.ndarray   # (..., n_nodes) MW after slack balancing
    in_service: np.ndarray       # (n_lines,) bool
    slack_nodes: tuple[int, ...]
    diverged: bool
    deenergized: tuple[int, ...]  # nodes with load but no generation in their island
    isolated: tuple[int, ...]     # dead nodes without any load


class DCSystem:
    """Factorized DC equations of one electrical graph."""

    def __init__(self, graph: ElectricalGraph):
        self.graph = graph
        n, n_inj = graph.n_nodes, len(graph.injection_node)
        self.in_service = np.zeros(graph.n_lines, dtype=bool)
        self.in_service[graph.branch_line] = True
        self.in_service.setflags(write=False)

        # node injection (p.u.) from injection MW, before balancing
        incidence = np.zeros((n, n_inj))
        incidence[graph.injection_node, np.arange(n_inj)] = graph.injection_signs / graph.base_mva

        adj = coo_matrix((np.ones(graph.n_branches), (graph.branch_from, graph.branch_to)),
                         shape=(n, n))
        n_comp, labels = connected_components(adj, directed=False)
        n_gen = len(graph.gen_pmax)
        gen_nodes = graph.injection_node[:n_gen]
        load_nodes = graph.injection_node[n_gen:]

        bmat = np.zeros((n, n))
        np.add.at(bmat, (graph.branch_from, graph.branch_from), graph.susceptance)
        np.add.at(bmat, (graph.branch_to, graph.branch_to), graph.susceptance)
        np.add.at(bmat, (graph.branch_from, graph.branch_to), -graph.susceptance)
        np.add.at(bmat, (graph.branch_to, graph.branch_from), -graph.susceptance)

        angle_map = np.zeros((n, n_inj))
        balanced = np.zeros((n, n_inj))
        deenergized, isolated, slacks = [], [], []
        diverged = False
        main = labels[graph.slack_node] if n else -1
        for c in range(n_comp):
            nodes = np.flatnonzero(labels == c)
            gens = [gi for gi in range(n_gen) if labels[gen_nodes[gi]] == c]
            has_load = bool(np.any(labels[load_nodes] == c))
            if not gens:
                if has_load:
                    diverged = True
                    deenergized.extend(int(v) for v in nodes)
                else:
                    isolated.extend(int(v) for v in nodes)
                continue
            if c == main:
                slack = graph.slack_node
            else:
                gi = max(gens, key=lambda g: (graph.gen_pmax[g], -g))
                slack = int(gen_nodes[gi])
            slacks.append(int(slack))
            rest = nodes[nodes != slack]
            balanced[rest] = incidence[rest]
            balanced[slack] = -incidence[rest].sum(axis=0)
            if len(rest):
                lu, piv = scipy.linalg.lu_factor(bmat[np.ix_(rest, rest)], check_finite=False)
                if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
                    diverged = True
                    continue
                angle_map[rest] = scipy.linalg.lu_solve((lu, piv), incidence[rest],
                                                        check_finite=False)
        self.diverged = diverged
        self.deenergized = tuple(sorted(deenergized))
        self.isolated = tuple(sorted(isolated))
        self.slack_nodes = tuple(slacks)

        branch_map = graph.susceptance[:, None] * (
            angle_map[graph.branch_from] - angle_map[graph.branch_to])
        flow_map = np.zeros((graph.n_lines, n_inj))
        flow_map[graph.branch_line] = branch_map * graph.base_mva
        self.angle_map = angle_map
        self.flow_map = flow_map
        self.balance_map = balanced * graph.base_mva
        self.amp_factor = 1000.0 / (_SQRT3 * np.asarray(graph.line_kv, dtype=float))

    def solve(self, injections) -> PowerFlowResult:
        x = np.asarray(injections, dtype=float)
        if x.shape[-1] != self.angle_map.shape[1]:
            raise ValueError(
                f"expected {self.angle_map.shape[1]} injections, got {x.shape[-1]}")
        angles = x @ self.angle_map.T
        flows = x @ self.flow_map.T
        if self.diverged:
            flows = np.full_like(flows, np.nan)
        amps = np.abs(flows) * self.amp_factor
        return PowerFlowResult(
            angles=angles, flows=flows, amps=amps,
            node_injection=x @ self.balance_map.T,
            in_service=self.in_service, slack_nodes=self.slack_nodes,
            diverged=self.diverged, deenergized=self.deenergized, isolated=self.isolated,
        )


def solve_dc(graph: ElectricalGraph, injections) -> PowerFlowResult:
    """Solve the DC power flow for one injection vector or a (T, n_injections) batch."""
    return DCSystem(graph).solve(injections)


def check_overloads(result: PowerFlowResult, case: GridCase) -> frozenset[int]:
    """Ids of lines whose current is at or above their thermal limit."""
    if result.diverged:
        raise ValueError("overloads are undefined for a diverged power flow")
    amps = np.asarray(result.amps)
    if amps.ndim != 1:
        raise ValueError("expected a single-timestep result")
    hit = result.in_service & (amps >= case.imax)
    return frozenset(case.lines[i].id for i in np.flatnonzero(hit))


class SolverCache:
    """Per-case memo of factorized systems keyed by topology."""

    def __init__(self, case: GridCase, max_entries: int = 50_000):
        self.case = case
        self.max_entries = max_entries
        self._systems: dict[Topology, DCSystem] = {}

    def system(self, topology: Topology) -> DCSystem:
        sysm = self._systems.get(topology)
        if sysm is None:
            if len(self._systems) >= self.max_entries:
                self._systems.clear()
            sysm = DCSystem(expand_topology(self.case, topology))
            self._systems[topology] = sysm
        return sysm

    def solve(self, topology: Topology, injections) -> PowerFlowResult:
        return self.system(topology).solve(injections)

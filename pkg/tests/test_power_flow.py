import numpy as np
import pytest

from conftest import make_case, triangle_case
from gridarena.grid_model import SetSubstationConfig, SwitchLine, Topology, apply_action, expand_topology
from gridarena.power_flow import (
    DCSystem, PowerFlowResult, SolverCache, check_overloads, flows_to_amps, solve_dc,
)


def random_case(rng, n_min=3, n_max=12):
    n = int(rng.integers(n_min, n_max + 1))
    edges = [(int(rng.integers(0, k)) + 1, k + 1) for k in range(1, n)]   # spanning tree
    for _ in range(int(rng.integers(0, n + 1))):
        a, b = rng.choice(n, 2, replace=False) + 1
        edges.append((int(a), int(b)))
    lines = [(a, b, float(rng.uniform(0.02, 1.0)), 1000.0) for a, b in edges]
    gen_subs = sorted(set(int(s) for s in rng.integers(1, n + 1, size=int(rng.integers(1, 4)))))
    gens = [(s, float(rng.uniform(50, 300))) for s in gen_subs]
    load_subs = rng.integers(1, n + 1, size=int(rng.integers(1, n + 1)))
    keys = rng.uniform(0.2, 1.0, size=len(load_subs))
    keys = keys / keys.sum()
    keys[-1] = 1.0 - keys[:-1].sum()
    loads = [(int(s), float(k)) for s, k in zip(load_subs, keys)]
    return make_case(n, lines, gens, loads, slack=gen_subs[0])


def dense_reference(graph, x):
    """Independent DC solve: full B matrix, slack row/column removed, numpy solve."""
    n = graph.n_nodes
    B = np.zeros((n, n))
    for f, t, b in zip(graph.branch_from, graph.branch_to, graph.susceptance):
        B[f, f] += b
        B[t, t] += b
        B[f, t] -= b
        B[t, f] -= b
    P = np.zeros(n)
    for node, sign, v in zip(graph.injection_node, graph.injection_signs, x):
        P[node] += sign * v / graph.base_mva
    keep = [i for i in range(n) if i != graph.slack_node]
    theta = np.zeros(n)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], P[keep])
    flows = graph.susceptance * (theta[graph.branch_from] - theta[graph.branch_to]) * graph.base_mva
    return theta, flows


def balanced_injections(case, rng):
    total = float(rng.uniform(10, 200))
    gen_share = rng.dirichlet(np.ones(len(case.generators)))
    loads = [total * l.key_factor for l in case.loads]
    return np.concatenate([total * gen_share, loads])


def test_triangle_split():
    c = triangle_case()
    res = solve_dc(expand_topology(c, Topology.reference(c)), [100.0, 100.0])
    # lines: 1 = A-B, 2 = B-C, 3 = A-C
    assert res.flows[2] == pytest.approx(200 / 3, abs=1e-6)
    assert res.flows[0] == pytest.approx(100 / 3, abs=1e-6)
    assert res.flows[1] == pytest.approx(100 / 3, abs=1e-6)
    assert not res.diverged


def test_zero_injections(case):
    res = solve_dc(expand_topology(case, Topology.reference(case)), np.zeros(16))
    assert np.all(res.flows == 0) and np.all(res.angles == 0)


def test_isolated_load_diverges(case):
    # sub 14: lines 17 and 20 stay on bus 0, load 11 alone on bus 1
    topo = apply_action(case, Topology.reference(case), SetSubstationConfig(14, [0, 0, 1]))
    graph = expand_topology(case, topo)
    res = solve_dc(graph, np.ones(16))
    assert res.diverged
    load_node = graph.injection_node[-1]
    assert res.deenergized == (int(load_node),)


def test_generator_island_survives(case):
    # sub 6 config 1 leaves the solar unit and the sub-6 load on their own bus
    topo = apply_action(case, Topology.reference(case), SetSubstationConfig(6, [0, 0, 0, 0, 1, 1]))
    res = solve_dc(expand_topology(case, topo), np.full(16, 5.0))
    assert not res.diverged and len(res.slack_nodes) == 2


def test_flows_to_amps():
    assert flows_to_amps(0.0, 63.0) == 0.0
    assert flows_to_amps(100.0, 100.0) == pytest.approx(577.35, abs=0.01)
    assert flows_to_amps(200.0, 100.0) == pytest.approx(2 * flows_to_amps(100.0, 100.0))
    assert flows_to_amps(-100.0, 100.0) == flows_to_amps(100.0, 100.0)
    with pytest.raises(ValueError):
        flows_to_amps(1.0, 0.0)


def _fake_result(amps):
    amps = np.asarray(amps, dtype=float)
    return PowerFlowResult(np.zeros(3), amps, amps, np.zeros(3), np.ones(len(amps), bool),
                           (0,), False, (), ())


def test_check_overloads():
    c = make_case(3, [(1, 2, 1.0, 100.0), (2, 3, 1.0, 100.0)], [(1, 10.0)], [(3, 1.0)])
    assert check_overloads(_fake_result([90.0, 110.0]), c) == {2}
    assert check_overloads(_fake_result([0.0, 0.0]), c) == frozenset()
    assert check_overloads(_fake_result([100.0, 99.999]), c) == {1}
    with pytest.raises(ValueError):
        check_overloads(PowerFlowResult(np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(3),
                                        np.ones(2, bool), (), True, (2,), ()), c)


def test_random_graphs_balance_and_dense_agreement():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        c = random_case(rng)
        graph = expand_topology(c, Topology.reference(c))
        x = balanced_injections(c, rng)
        res = solve_dc(graph, x)
        assert not res.diverged
        # nodal balance in p.u.: injection = sum of outgoing flows
        out = np.zeros(graph.n_nodes)
        np.add.at(out, graph.branch_from, res.flows[graph.branch_line])
        np.add.at(out, graph.branch_to, -res.flows[graph.branch_line])
        assert np.max(np.abs(out - res.node_injection)) / graph.base_mva < 1e-9
        assert res.angles[graph.slack_node] == 0.0
        theta, flows = dense_reference(graph, x)
        scale = max(np.max(np.abs(flows)), 1e-12)
        assert np.max(np.abs(res.flows[graph.branch_line] - flows)) / scale < 1e-8
        assert np.max(np.abs(res.angles - theta)) / max(np.max(np.abs(theta)), 1e-12) < 1e-8


def test_superposition():
    rng = np.random.default_rng(7)
    for _ in range(50):
        c = random_case(rng)
        sysm = DCSystem(expand_topology(c, Topology.reference(c)))
        x1, x2 = balanced_injections(c, rng), balanced_injections(c, rng)
        f12 = sysm.solve(x1 + x2).flows
        assert np.allclose(f12, sysm.solve(x1).flows + sysm.solve(x2).flows, rtol=0, atol=1e-8)


def test_islands_balance_separately(case):
    topo = Topology.reference(case)
    topo = apply_action(case, topo, SetSubstationConfig(6, [0, 0, 0, 0, 1, 1]))
    graph = expand_topology(case, topo)
    x = np.array([60.0, 60.0, 20.0, 9.0, 11.0] + [10.0] * 11)
    x[0] = x[5:].sum() - x[1:5].sum()
    res = solve_dc(graph, x)
    # every branch joins nodes of one island; each island's node injections sum to zero
    from scipy.sparse.csgraph import connected_components
    from scipy.sparse import coo_matrix
    adj = coo_matrix((np.ones(graph.n_branches), (graph.branch_from, graph.branch_to)),
                     shape=(graph.n_nodes, graph.n_nodes))
    k, labels = connected_components(adj, directed=False)
    assert k == 2
    for c in range(k):
        assert abs(res.node_injection[labels == c].sum()) < 1e-9


def test_batch_matches_single(case, day_scenarios):
    sysm = SolverCache(case).system(Topology.reference(case))
    x = day_scenarios[0].injections[:10]
    batch = sysm.solve(x)
    for t in range(10):
        assert np.allclose(batch.flows[t], sysm.solve(x[t]).flows, rtol=0, atol=1e-10)


def test_solver_cache_reuses_systems(case):
    cache = SolverCache(case)
    t = apply_action(case, Topology.reference(case), SwitchLine(4))
    assert cache.system(t) is cache.system(t)

import numpy as np
import pytest

from conftest import brute_force_path, small_dictionaries
from gridarena.agents import DoNothingAgent, ScriptedAgent, run_episode
from gridarena.environment import Rules
from gridarena.grid_model import SetSubstationConfig, SwitchLine, Topology
from gridarena.oracle import (
    ActionDictionary, ChainEvaluator, NoFeasiblePath, Oracle, RewardMatrix,
    TopologySpaceTooLarge, attach_course, build_graph, enumerate_topologies,
    greedy_dictionary, longest_path, normalized_score, table_dictionary,
)

ISOLATE_LOAD_14 = SetSubstationConfig(14, [0, 0, 1])


def _graph(case, dictionary, values, feasible=None, cooldown=3, relaxed=False):
    space = enumerate_topologies(case, dictionary)
    values = np.asarray(values, dtype=float)
    feasible = np.ones(values.shape, bool) if feasible is None else np.asarray(feasible, bool)
    return space, build_graph(space, RewardMatrix(values, feasible), Rules(cooldown=cooldown),
                              relaxed)


# -- topology space ----------------------------------------------------------------

def test_table_space_size(cal_case):
    space = enumerate_topologies(cal_case, table_dictionary())
    assert len(space) == 3 * 3 * 5 * 4 * 3 * 2 ** 4 == 8640
    assert space.topology(0) == Topology.reference(cal_case)
    sample = [space.topology(i) for i in range(0, 8640, 97)]
    assert len(set(sample)) == len(sample)
    assert all(space.index_of(t) == i for t, i in zip(sample, range(0, 8640, 97)))


def test_empty_dictionary(cal_case):
    space = enumerate_topologies(cal_case, ActionDictionary(()))
    assert len(space) == 1 and space.topologies == [Topology.reference(cal_case)]


def test_cap(cal_case):
    with pytest.raises(TopologySpaceTooLarge, match=str(8640 * 2 ** 16)):
        enumerate_topologies(cal_case, greedy_dictionary(cal_case))
    with pytest.raises(TopologySpaceTooLarge):
        enumerate_topologies(cal_case, table_dictionary(), cap=1000)


def test_one_option_per_asset(cal_case):
    space = enumerate_topologies(cal_case, table_dictionary())
    ref = Topology.reference(cal_case)
    for i in range(0, len(space), 131):
        t = space.topology(i)
        for si, s in enumerate(space.assets):
            if s < cal_case.n_subs:
                assert t.buses[s] in space.options[si]
        assert sum(a != b for a, b in zip(t.buses, ref.buses)) <= 5


def test_dictionary_io_and_errors(cal_case):
    d = table_dictionary()
    assert ActionDictionary.from_dict(d.to_dict()) == d
    assert ActionDictionary.from_dict(d.to_dict()["actions"]) == d
    with pytest.raises(ValueError, match="duplicate"):
        ActionDictionary((SwitchLine(4), SwitchLine(4)))
    with pytest.raises(ValueError):
        ActionDictionary((SetSubstationConfig(4, [0, 1]),)).validate(cal_case)


def test_neighbors_differ_in_one_asset(cal_case):
    space = enumerate_topologies(cal_case, table_dictionary())
    nbr, asset = space.neighbors()
    codes = space.codes()
    rows = np.arange(0, len(space), 53)
    for i in rows:
        got = set(int(j) for j in nbr[i] if j >= 0)
        want = {j for j in range(len(space)) if np.sum(codes[j] != codes[i]) == 1}
        assert got == want
        for j, p in zip(nbr[i], asset[i]):
            assert np.flatnonzero(codes[j] != codes[i]).tolist() == [p - 1]


def test_action_between(cal_case):
    space = enumerate_topologies(cal_case, table_dictionary())
    nbr, _ = space.neighbors()
    from gridarena.grid_model import apply_action
    for i in (0, 17, 4000):
        for j in nbr[i]:
            a = space.action_between(i, int(j))
            assert apply_action(cal_case, space.topology(i), a) == space.topology(int(j))
    with pytest.raises(ValueError, match="differ in 2"):
        space.action_between(0, int(space.stride[0] + space.stride[1]))


# -- reward chains ----------------------------------------------------------------

def test_reference_chain_matches_dn(cal_case, day_scenarios):
    s = day_scenarios[0]
    d = small_dictionaries()[2]
    oracle = Oracle(cal_case, d)
    dn = run_episode(DoNothingAgent(), cal_case, s, "easy")
    assert np.allclose(oracle.rewards(s).values[0], dn.step_scores, rtol=0, atol=1e-9)
    hard = Oracle(cal_case, d, mode="hard").rewards(s)
    dnh = run_episode(DoNothingAgent(), cal_case, s, "hard")
    n = len(dnh.steps) if dnh.game_over_step is None else dnh.game_over_step
    assert np.allclose(hard.values[0, :n], dnh.step_scores[:n], rtol=0, atol=1e-9)
    if dnh.game_over_step is not None:
        assert not hard.feasible[0, dnh.game_over_step:].any()


def test_islanding_topology_masked(cal_case, day_scenarios):
    oracle = Oracle(cal_case, ActionDictionary((ISOLATE_LOAD_14,)))
    m = oracle.rewards(day_scenarios[0])
    assert m.feasible[0].all() and not m.feasible[1].any()
    assert np.all(m.values[1] == 0.0)


def test_chunking_invariance(cal_case, day_scenarios):
    space = enumerate_topologies(cal_case, small_dictionaries()[4])
    x = day_scenarios[1].injections
    whole = ChainEvaluator(cal_case, space, chunk=256).evaluate(x, "hard")
    single = ChainEvaluator(cal_case, space, chunk=1).evaluate(x, "hard")
    assert np.array_equal(whole.values, single.values)
    assert np.array_equal(whole.feasible, single.feasible)


def test_hard_chains_mask_after_trip(cal_case, calib_scenarios):
    space = enumerate_topologies(cal_case, small_dictionaries()[4])
    ev = ChainEvaluator(cal_case, space)
    for s in calib_scenarios[:4]:
        m = ev.evaluate(s.injections, "hard")
        # once masked, a chain stays masked
        assert not np.any(~m.feasible[:, :-1] & m.feasible[:, 1:])
        easy = ev.evaluate(s.injections, "easy")
        assert np.all(m.values <= easy.values)


# -- longest path -------------------------------------------------------------------

def test_single_topology(cal_case):
    _, g = _graph(cal_case, ActionDictionary(()), [[1.0, 1.0, 1.0]])
    res = longest_path(g)
    assert res.score == 3.0 and res.n_actions == 0 and res.path == [0, 0, 0]


def test_two_topology_example(cal_case):
    d = ActionDictionary((SwitchLine(4),))
    values = [[1.0, 1.0, 1.0], [0.0, 5.0, 0.0]]
    for cooldown, relaxed in ((1, False), (3, True)):
        space, g = _graph(cal_case, d, values, cooldown=cooldown, relaxed=relaxed)
        res = attach_course(longest_path(g), space)
        assert res.score == 7.0 and res.path == [0, 1, 0]
        assert res.course == [(0, SwitchLine(4)), (1, SwitchLine(4))]
    # default rules: going back right away is on cooldown
    _, g = _graph(cal_case, d, values)
    res = longest_path(g)
    assert res.score == 6.0 and res.path == [0, 1, 1]


def test_stay_then_act_again(cal_case):
    d = ActionDictionary((SwitchLine(4),))
    values = [[1, 0, 0, 0, 0, 5, 5], [0, 5, 5, 5, 5, 0, 0]]
    _, g = _graph(cal_case, d, values)
    res = longest_path(g)
    assert res.path == [0, 1, 1, 1, 1, 0, 0] and res.score == 31.0 and res.n_actions == 2


def test_forgoes_unreachable_combination(cal_case):
    # one substation, three options: taking the best reward at t=1 would lock the
    # asset until after the big reward at t=3
    d = ActionDictionary(tuple(SetSubstationConfig(6, c) for c in
                               [(0, 0, 0, 0, 1, 1), (0, 1, 0, 0, 1, 1)]))
    values = [[1, 1, 1, 1], [0, 4, 0, 0], [0, 0, 0, 9]]
    _, g = _graph(cal_case, d, values)
    res = longest_path(g)
    assert res.score == 12.0 and res.path == [0, 0, 0, 2]
    _, g = _graph(cal_case, d, values, relaxed=True)
    assert longest_path(g).score == 15.0


def test_no_two_asset_jumps(cal_case):
    d = ActionDictionary((SwitchLine(4), SwitchLine(10)))
    # only the topology with both lines switched pays, and only at t=1
    values = [[1, 0, 0], [0, 0, 0], [0, 0, 0], [0, 50, 0]]
    space, g = _graph(cal_case, d, values)
    res = longest_path(g)
    assert res.score == 1.0 and 3 not in res.path
    assert space.index_of(space.topology(3)) == 3


def test_masked_nodes_never_used(cal_case):
    d = ActionDictionary((SwitchLine(4),))
    values = [[1, 1, 1, 1], [0, 9, 9, 9]]
    feasible = [[1, 1, 1, 1], [1, 0, 1, 1]]
    _, g = _graph(cal_case, d, values, feasible)
    res = longest_path(g)
    assert res.path == [0, 0, 1, 1] and res.score == 20.0
    assert all(g.feasible[j, t] for t, j in enumerate(res.path))


def test_no_feasible_path(cal_case):
    d = ActionDictionary((SwitchLine(4),))
    _, g = _graph(cal_case, d, [[1, 1, 1, 1], [1, 1, 1, 1]], [[1, 1, 0, 1], [1, 1, 0, 1]])
    with pytest.raises(NoFeasiblePath) as err:
        longest_path(g)
    assert err.value.furthest == 1
    _, g = _graph(cal_case, d, [[1, 1], [1, 1]], [[0, 1], [1, 1]])
    with pytest.raises(NoFeasiblePath):
        longest_path(g)


def test_cooldown_above_three_needs_relaxed(cal_case):
    d = ActionDictionary((SwitchLine(4),))
    with pytest.raises(ValueError, match="relaxed"):
        _graph(cal_case, d, [[1, 1], [1, 1]], cooldown=4)
    _graph(cal_case, d, [[1, 1], [1, 1]], cooldown=4, relaxed=True)


@pytest.mark.parametrize("cooldown, relaxed", [(1, False), (2, False), (3, False), (3, True)])
def test_matches_brute_force(cal_case, cooldown, relaxed):
    rng = np.random.default_rng(100 + cooldown + 10 * relaxed)
    dicts = small_dictionaries()
    for trial in range(40):
        d = dicts[trial % len(dicts)]
        N = len(enumerate_topologies(cal_case, d))
        T = int(rng.integers(1, 7))
        # coarse values force ties
        values = rng.integers(0, 4, size=(N, T)).astype(float) if trial % 2 else \
            rng.uniform(0, 20, size=(N, T))
        feasible = rng.uniform(size=(N, T)) < 0.85
        feasible[0, 0] = True
        space, g = _graph(cal_case, d, values, feasible, cooldown, relaxed)
        want = brute_force_path(space, g.rewards, g.feasible, cooldown, relaxed)
        if want is None:
            with pytest.raises(NoFeasiblePath):
                longest_path(g)
            continue
        res = longest_path(g)
        assert (res.score, res.n_actions) == want
        # the returned path earns its score
        assert sum(g.rewards[j, t] for t, j in enumerate(res.path)) == pytest.approx(res.score)
        assert sum(a != b for a, b in zip(res.path, res.path[1:])) == res.n_actions


def test_checkpointed_walk_matches(cal_case):
    rng = np.random.default_rng(9)
    d = small_dictionaries()[4]
    for _ in range(20):
        values = rng.integers(0, 5, size=(5, 40)).astype(float)
        feasible = rng.uniform(size=(5, 40)) < 0.9
        feasible[0, 0] = True
        _, g = _graph(cal_case, d, values, feasible)
        try:
            a = longest_path(g)
        except NoFeasiblePath:
            continue
        b = longest_path(g, checkpoint_every=3)
        c = longest_path(g, max_backpointer_bytes=0)
        assert a.path == b.path == c.path and a.score == b.score == c.score


# -- end to end -------------------------------------------------------------------------

def test_replay_reproduces_score(cal_case, calib_scenarios):
    oracle = Oracle(cal_case, ActionDictionary(small_dictionaries()[4].actions + (SwitchLine(10),)))
    for s in calib_scenarios[:2]:
        run = oracle.solve(s)
        rec = run_episode(ScriptedAgent(run.actions_by_step()), cal_case, s, "easy")
        assert not any(st.illegal for st in rec.steps)
        assert abs(rec.episode_score - run.score) <= 1e-9


def test_relaxed_bounds_exact(cal_case, calib_scenarios):
    d = ActionDictionary(small_dictionaries()[4].actions + (SwitchLine(10),))
    s = calib_scenarios[3]
    exact = Oracle(cal_case, d).solve(s)
    relaxed = Oracle(cal_case, d, relaxed=True).solve(s)
    assert relaxed.score >= exact.score


def test_monotone_in_dictionary(cal_case, calib_scenarios):
    s = calib_scenarios[5]
    sub4 = small_dictionaries()[4].actions
    nested = [(), sub4, sub4 + (SwitchLine(10),),
              sub4 + (SwitchLine(10),) + small_dictionaries()[3].actions]
    scores = [Oracle(cal_case, ActionDictionary(d)).solve(s).score for d in nested]
    dn = run_episode(DoNothingAgent(), cal_case, s, "easy").episode_score
    assert scores[0] == pytest.approx(dn, abs=1e-9)
    assert all(a <= b for a, b in zip(scores, scores[1:]))


def test_normalized_score():
    assert normalized_score(100.0, 100.0, 200.0) == 0.0
    assert normalized_score(200.0, 100.0, 200.0) == 1.0
    assert normalized_score(190.0, 100.0, 200.0) == pytest.approx(0.9)
    with pytest.raises(ZeroDivisionError):
        normalized_score(5.0, 5.0, 5.0)


def test_reward_cache(tmp_path, cal_case, day_scenarios):
    d = small_dictionaries()[2]
    s = day_scenarios[0]
    first = Oracle(cal_case, d, cache_dir=tmp_path).solve(s)
    files = list(tmp_path.glob("*.npz"))
    assert len(files) == 1
    again = Oracle(cal_case, d, cache_dir=tmp_path)
    m = again.rewards(s)
    assert again._evaluator is None          # served from disk, nothing factorized
    assert again.solve(s).score == first.score
    assert np.array_equal(m.values, Oracle(cal_case, d).rewards(s).values)

import math

import numpy as np
import pytest

from gridarena.grid_model import case_from_dict, ieee14
from gridarena.scenario_gen import Scenario, calibration_set, generate_set

AMP_PER_MW_100KV = 1000.0 / (math.sqrt(3.0) * 100.0)


def make_case(n_subs, lines, gens, loads, slack=1, kv=100.0, base_mva=100.0):
    """lines: (from, to, reactance, imax_A); gens: (sub, pmax[, kind]); loads: (sub, key)."""
    return case_from_dict({
        "substations": [{"id": i + 1, "base_kv": kv} for i in range(n_subs)],
        "lines": [{"id": k + 1, "from_substation": f, "to_substation": t, "reactance": x,
                   "imax": imax} for k, (f, t, x, imax) in enumerate(lines)],
        "generators": [{"id": k + 1, "substation": g[0], "kind": g[2] if len(g) > 2 else "thermal",
                        "pmax": g[1]} for k, g in enumerate(gens)],
        "loads": [{"id": k + 1, "substation": s, "key_factor": kf}
                  for k, (s, kf) in enumerate(loads)],
        "slack": slack, "base_mva": base_mva,
    })


def constant_scenario(case, row, horizon, forecast_row=None, sid="const"):
    inj = np.tile(np.asarray(row, dtype=float), (horizon, 1))
    fc = inj.copy() if forecast_row is None else np.tile(np.asarray(forecast_row, float),
                                                          (horizon, 1))
    return Scenario(sid, inj, fc, case.injection_labels)


def triangle_case(imax=1000.0):
    # A=1 (generator, slack), B=2, C=3 (load)
    return make_case(3, [(1, 2, 1.0, imax), (2, 3, 1.0, imax), (1, 3, 1.0, imax)],
                     gens=[(1, 500.0)], loads=[(3, 1.0)])


def cascade_case():
    """Four parallel routes from the generator at 1 to the load at 4. With 100 MW the
    direct line 1 overloads slightly; once it trips, line 2 and then line 4 exceed
    1.5 x imax in turn, and the 4-reactance backup line 6 carries everything."""
    a = AMP_PER_MW_100KV
    lines = [
        (1, 4, 1.0, 35.0 * a),   # 1: direct, 36.36 MW -> streak overload
        (1, 2, 0.5, 37.0 * a),   # 2: route via 2, hard trip at 57.14 MW
        (2, 4, 0.5, 1000.0),     # 3
        (1, 3, 1.0, 40.0 * a),   # 4: route via 3, hard trip at 66.67 MW
        (3, 4, 1.0, 1000.0),     # 5
        (1, 4, 4.0, 80.0 * a),   # 6: backup, 100 MW at the end (1.25 x imax)
    ]
    return make_case(4, lines, gens=[(1, 300.0)], loads=[(4, 1.0)])


@pytest.fixture(scope="session")
def case():
    return ieee14()


@pytest.fixture(scope="session")
def cal_case():
    return ieee14(calibrated=True)


@pytest.fixture(scope="session")
def day_scenarios(case):
    return generate_set(case, 3, 288, seed=123)


@pytest.fixture(scope="session")
def calib_scenarios(case):
    return calibration_set(case)


def brute_force_path(space, values, feasible, cooldown, relaxed=False):
    """Exhaustive search over stay/one-asset moves, cooldown tracked by last-action
    times. Returns (score, n_actions) of the best path (fewest actions on ties), or
    None when no path reaches the horizon."""
    codes = space.codes()
    N, T = values.shape
    start = space.reference_index
    if not feasible[start, 0]:
        return None
    best = None

    def walk(t, j, last, score, n_act):
        nonlocal best
        if t == T:
            key = (score, -n_act)
            if best is None or key > best:
                best = key
            return
        for k in range(N):
            diff = np.flatnonzero(codes[k] != codes[j])
            if len(diff) > 1 or not feasible[k, t]:
                continue
            if len(diff) == 1:
                p = int(diff[0])
                if not relaxed and p in last and t - last[p] < cooldown:
                    continue
                walk(t + 1, k, {**last, p: t}, score + values[k, t], n_act + 1)
            else:
                walk(t + 1, k, last, score + values[k, t], n_act)

    walk(1, start, {}, values[start, 0], 0)
    return None if best is None else (best[0], -best[1])


def small_dictionaries():
    """Dictionaries on the shipped grid whose spaces hold at most 5 topologies."""
    from gridarena.grid_model import SetSubstationConfig, SwitchLine
    from gridarena.oracle import TABLE_SUBSTATIONS, ActionDictionary
    sub = lambda s: [SetSubstationConfig(s, c) for c in TABLE_SUBSTATIONS[s]]
    return [
        ActionDictionary((SwitchLine(4),)),
        ActionDictionary((SwitchLine(4), SwitchLine(10))),
        ActionDictionary(tuple(sub(6))),
        ActionDictionary(tuple(sub(9))),
        ActionDictionary(tuple(sub(4))),
    ]


@pytest.fixture(scope="session")
def table_oracle(cal_case):
    from gridarena.oracle import Oracle, table_dictionary
    return Oracle(cal_case, table_dictionary())

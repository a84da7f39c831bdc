"""Agent interface, baseline agents, the episode runner and episode records."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .environment import Environment, Observation, Rules, StepResult, score_episode
from .grid_model import (
    DO_NOTHING, Action, DoNothing, GridCase, SetSubstationConfig, SwitchLine, Topology,
    action_depth, action_from_dict, apply_action, asset_of,
)
from .power_flow import SolverCache

log = logging.getLogger(__name__)

Simulate = Callable[[Action], StepResult]


class Agent(Protocol):
    name: str

    def act(self, observation: Observation, simulate: Simulate) -> Action: ...


class DoNothingAgent:
    name = "dn"

    def act(self, observation, simulate):
        return DO_NOTHING


class TopologyAgent:
    """Moves to a fixed target topology, one legal action per step, then stays idle.

    The plan is the list of assets differing between the first observed topology and
    the target; each planned action is issued once, as soon as its asset is off
    cooldown. Lines later opened by protections are not reconnected.
    """

    def __init__(self, case: GridCase, target: Topology, name: str = "dn-tau"):
        if not target.is_shaped_for(case):
            raise ValueError("target topology does not fit the case")
        self.case = case
        self.target = target
        self.name = name
        self._plan: Optional[list[Action]] = None

    def _make_plan(self, topo: Topology) -> list[Action]:
        plan: list[Action] = []
        for si, (have, want) in enumerate(zip(topo.buses, self.target.buses)):
            if have != want:
                plan.append(SetSubstationConfig(self.case.substations[si].id, want))
        for li, (have, want) in enumerate(zip(topo.line_status, self.target.line_status)):
            if have != want:
                plan.append(SwitchLine(self.case.lines[li].id))
        return plan

    def act(self, observation, simulate):
        if self._plan is None:
            self._plan = self._make_plan(observation.topology)
        if self._plan:
            action = self._plan[0]
            if observation.cooldowns[asset_of(self.case, action)] == 0:
                self._plan.pop(0)
                return action
        return DO_NOTHING


class GreedyAgent:
    """Simulates do-nothing and every legal dictionary action that changes the topology,
    then takes the best simulated score. Ties keep do-nothing, then the lowest asset
    index, then dictionary order."""

    name = "greedy"

    def __init__(self, case: GridCase, dictionary: Sequence[Action] | None = None):
        if dictionary is None:
            from .oracle import greedy_dictionary
            dictionary = greedy_dictionary(case)
        dictionary = list(dictionary)
        self.case = case
        order = sorted(range(len(dictionary)),
                       key=lambda k: (asset_of(case, dictionary[k]), k))
        self.actions = [dictionary[k] for k in order]
        self.last_choice: Optional[tuple[Action, float, float]] = None

    def act(self, observation, simulate):
        topo = observation.topology
        dn_score = simulate(DO_NOTHING).score
        best, best_score = DO_NOTHING, dn_score
        for a in self.actions:
            if observation.cooldowns[asset_of(self.case, a)] > 0:
                continue
            if apply_action(self.case, topo, a) == topo:
                continue
            s = simulate(a).score
            if s > best_score:
                best, best_score = a, s
        self.last_choice = (best, best_score, dn_score)
        return best


class ScriptedAgent:
    """Replays a fixed course {t: action}."""

    name = "scripted"

    def __init__(self, course: dict[int, Action], name: str = "scripted"):
        self.course = dict(course)
        self.name = name

    def act(self, observation, simulate):
        return self.course.get(observation.t, DO_NOTHING)


# -- records ---------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    action: Optional[Action]       # None for the reset entry
    illegal: Optional[str]
    score: float
    depth: Optional[int]
    overloads: list[int]
    tripped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "action": None if self.action is None else self.action.to_dict(),
            "illegal": self.illegal, "score": self.score, "depth": self.depth,
            "overloads": list(self.overloads), "tripped": list(self.tripped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        act = d.get("action")
        return cls(int(d["t"]), None if act is None else action_from_dict(act),
                   d.get("illegal"), float(d["score"]), d.get("depth"),
                   list(d.get("overloads", [])), list(d.get("tripped", [])))


@dataclass
class EpisodeRecord:
    scenario_id: str
    agent: str
    mode: str
    steps: list[StepRecord]
    episode_score: float
    game_over_step: Optional[int]
    time_consumed: Optional[float]        # None when read back from a record without timing
    budget_exceeded: bool
    start_weekday: int = 0
    resolution_minutes: int = 5
    faults: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def step_scores(self) -> list[float]:
        return [s.score for s in self.steps]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "scenario_id": self.scenario_id, "agent": self.agent, "mode": self.mode,
            "start_weekday": self.start_weekday,
            "resolution_minutes": self.resolution_minutes,
            "episode_score": self.episode_score, "game_over_step": self.game_over_step,
            "budget_exceeded": self.budget_exceeded, "faults": self.faults,
            "steps": [s.to_dict() for s in self.steps],
        }
        if include_timing:
            d["time_consumed"] = self.time_consumed
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        known = {"scenario_id", "agent", "mode", "start_weekday", "resolution_minutes",
                 "episode_score", "game_over_step", "budget_exceeded", "faults", "steps",
                 "time_consumed"}
        for key in ("scenario_id", "agent", "mode", "episode_score", "steps"):
            if key not in d:
                raise KeyError(key)
        return cls(
            scenario_id=str(d["scenario_id"]), agent=str(d["agent"]), mode=str(d["mode"]),
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            episode_score=float(d["episode_score"]),
            game_over_step=d.get("game_over_step"),
            time_consumed=(None if d.get("time_consumed") is None
                           else float(d["time_consumed"])),
            budget_exceeded=bool(d.get("budget_exceeded", False)),
            start_weekday=int(d.get("start_weekday", 0)),
            resolution_minutes=int(d.get("resolution_minutes", 5)),
            faults=list(d.get("faults", [])),
            extra={k: v for k, v in d.items() if k not in known},
        )


class RecordFormatError(ValueError):
    pass


def dump_records(records: Sequence[EpisodeRecord], include_timing: bool = False) -> str:
    return "".join(json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n"
                   for r in records)


def load_records(path) -> list[EpisodeRecord]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise RecordFormatError(f"{p}: {exc.strerror}") from None
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(EpisodeRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"{p}: line {n}: {exc.msg}") from None
        except KeyError as exc:
            raise RecordFormatError(f"{p}: line {n}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise RecordFormatError(f"{p}: line {n}: {exc}") from None
    return out


# -- runner ------------------------------------------------------------------

def _overload_ids(case: GridCase, obs: Observation) -> list[int]:
    return [case.lines[i].id for i in np.flatnonzero(obs.overloaded)]


def run_episode(agent, case: GridCase, scenario, mode: str = "hard",
                time_budget: float | None = None, rules: Rules = Rules(),
                depth_dictionary: Sequence[Action] | None = None,
                solver: SolverCache | None = None,
                clock: Callable[[], float] = time.perf_counter) -> EpisodeRecord:
    """Play one episode. Agent time (including its simulate calls) is charged against
    ``time_budget`` in seconds; exceeding it stops the episode with score 0. Agent
    exceptions become do-nothing and are recorded as faults."""
    if depth_dictionary is None:
        from .oracle import greedy_dictionary
        depth_dictionary = greedy_dictionary(case).actions
    env = Environment(case, scenario, mode, rules, solver)
    obs = env.reset()
    ref = Topology.reference(case)
    steps = [StepRecord(0, None, None, env.initial_score, 0, _overload_ids(case, obs))]
    faults: list[dict] = []
    consumed = 0.0
    exceeded = False
    game_over_step = None
    name = getattr(agent, "name", type(agent).__name__)
    while obs.t + 1 < env.horizon:
        start = clock()
        try:
            action = agent.act(obs, env.simulate)
        except Exception as exc:  # agent faults must not end the run
            log.warning("agent %s raised at t=%d: %r", name, obs.t, exc)
            faults.append({"t": obs.t, "error": f"{type(exc).__name__}: {exc}"})
            action = DO_NOTHING
        consumed += clock() - start
        if time_budget is not None and consumed > time_budget:
            exceeded = True
            break
        res = env.step(action)
        obs = res.observation
        steps.append(StepRecord(
            obs.t,
            action if isinstance(action, (DoNothing, SwitchLine, SetSubstationConfig))
            else DO_NOTHING,
            res.info["illegal"], res.score,
            action_depth(case, obs.topology, ref, depth_dictionary),
            _overload_ids(case, obs), list(res.info["tripped"])))
        if res.done:
            game_over_step = obs.t
            break
    score = score_episode([s.score for s in steps], game_over_step is not None)
    if exceeded:
        score = 0.0
    return EpisodeRecord(
        scenario_id=scenario.id, agent=name, mode=mode, steps=steps, episode_score=score,
        game_over_step=game_over_step, time_consumed=consumed, budget_exceeded=exceeded,
        start_weekday=getattr(scenario, "start_weekday", 0),
        resolution_minutes=getattr(scenario, "resolution_minutes", 5), faults=faults,
    )


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """sum_k gamma^k rewards[k]."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    total, weight = 0.0, 1.0
    for r in rewards:
        total += weight * r
        weight *= gamma
    return total

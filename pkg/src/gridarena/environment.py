"""Episodic topology-control environment: legality, protections, cascades and scoring.

Time convention: the observation at time ``t`` describes flows for injections x(t).
``step`` applies an action and moves to x(t+1). The episode score sums the score of
the reset state and of every step, and is zeroed by a game over.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .grid_model import (
    DO_NOTHING, Action, DoNothing, GridCase, SetSubstationConfig, SwitchLine, Topology,
    UnknownAssetError, apply_action, asset_of,
)
from .power_flow import PowerFlowResult, SolverCache

log = logging.getLogger(__name__)

MODES = ("easy", "hard")


class ArenaError(RuntimeError):
    pass


class SetupError(ArenaError):
    """Scenario does not fit the case, or the initial state cannot be solved."""


class EpisodeOverError(ArenaError):
    """step() or simulate() called after game over or past the horizon."""


@dataclass(frozen=True)
class Rules:
    reaction_time: int = 2
    cooldown: int = 3
    max_actions_per_step: int = 1
    hard_overload_factor: float = 1.5


def margin_score(x):
    """Line score f(x) = 1 - (1 - x)^2."""
    return 1.0 - (1.0 - x) ** 2


def margins(amps, imax, in_service):
    m = np.maximum(0.0, 1.0 - np.asarray(amps) / imax)
    return np.where(in_service, m, 0.0)


def score_step(result: PowerFlowResult, case: GridCase, illegal: bool = False) -> float:
    """Sum of f(margin) over all lines; out-of-service lines add f(0) = 0."""
    if illegal or result.diverged:
        return 0.0
    m = margins(result.amps, case.imax, result.in_service)
    return float(np.sum(np.where(result.in_service, margin_score(m), 0.0)))


def score_episode(step_scores: Sequence[float], game_over: bool) -> float:
    if game_over:
        return 0.0
    total = 0.0
    for s in step_scores:
        total += s
    return total


@dataclass(frozen=True)
class EnvState:
    t: int
    topology: Topology
    streaks: tuple[int, ...]
    cooldowns: tuple[int, ...]   # substations first, then lines
    game_over: bool
    mode: str
    rules: Rules
    result: PowerFlowResult = field(repr=False, compare=False)


@dataclass(frozen=True)
class Observation:
    t: int
    injections: np.ndarray
    forecast: Optional[np.ndarray]   # x_hat(t+1), None at the last timestep
    topology: Topology
    currents: np.ndarray
    margins: np.ndarray
    flows: np.ndarray
    streaks: tuple[int, ...]
    cooldowns: tuple[int, ...]
    overloaded: np.ndarray           # in service and current >= imax


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    score: float
    done: bool
    info: dict


def legality_check(case: GridCase, state: EnvState, action: Action) -> Optional[str]:
    """None when legal, otherwise a short reason."""
    if isinstance(action, DoNothing):
        return None
    if not isinstance(action, (SwitchLine, SetSubstationConfig)):
        return "malformed: not an action"
    try:
        asset = asset_of(case, action)
    except UnknownAssetError as exc:
        return f"malformed: unknown {exc.args[0]}"
    if isinstance(action, SetSubstationConfig):
        n = len(case.elements[asset])
        if len(action.target) != n or any(v not in (0, 1) for v in action.target):
            return f"malformed: substation {action.substation} expects {n} values in {{0, 1}}"
    if state.cooldowns[asset] > 0:
        return f"cooldown: {state.cooldowns[asset]} step(s) left"
    return None


def cascade(solver: SolverCache, topology: Topology, injections, case: GridCase,
            hard_overload_factor: float, result: PowerFlowResult | None = None):
    """Trip every line at or above ``hard_overload_factor * imax`` until none remains.

    Returns (topology, result, trace, game_over); trace lists the line indices
    opened in each round.
    """
    if result is None:
        result = solver.solve(topology, injections)
    trace: list[list[int]] = []
    while True:
        if result.diverged:
            return topology, result, trace, True
        hard = result.in_service & (result.amps >= hard_overload_factor * case.imax)
        if not hard.any():
            return topology, result, trace, False
        opened = [int(i) for i in np.flatnonzero(hard)]
        for li in opened:
            topology = topology.with_line(li, False)
        trace.append(opened)
        result = solver.solve(topology, injections)


class Environment:
    """One episode over a scenario. Not shareable across concurrent callers."""

    def __init__(self, case: GridCase, scenario, mode: str = "hard",
                 rules: Rules = Rules(), solver: SolverCache | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if rules.max_actions_per_step != 1:
            raise ValueError("only one unitary action per step is supported")
        if rules.cooldown < 1 or rules.reaction_time < 0:
            raise ValueError("invalid rule parameters")
        inj = np.asarray(scenario.injections, dtype=float)
        if inj.ndim != 2 or inj.shape[1] != case.n_injections:
            raise SetupError(
                f"scenario {scenario.id!r} has {inj.shape[-1]} injection columns, "
                f"case expects {case.n_injections}")
        labels = getattr(scenario, "labels", None)
        if labels is not None and tuple(labels) != case.injection_labels:
            raise SetupError(f"scenario {scenario.id!r} columns do not match the case")
        self.case = case
        self.scenario = scenario
        self.mode = mode
        self.rules = rules
        self.solver = solver if solver is not None else SolverCache(case)
        self.horizon = inj.shape[0]
        self.state: EnvState | None = None
        self.initial_score = 0.0

    # -- observation helpers --------------------------------------------------
    def _forecast(self, t: int):
        if t + 1 >= self.horizon:
            return None
        return np.asarray(self.scenario.forecasts[t + 1], dtype=float)

    def _observe(self, state: EnvState, injections=None) -> Observation:
        res = state.result
        if injections is None:
            injections = self.scenario.injections[state.t]
        return Observation(
            t=state.t,
            injections=np.asarray(injections, dtype=float),
            forecast=self._forecast(state.t),
            topology=state.topology,
            currents=res.amps,
            margins=margins(res.amps, self.case.imax, res.in_service),
            flows=res.flows,
            streaks=state.streaks,
            cooldowns=state.cooldowns,
            overloaded=res.in_service & (res.amps >= self.case.imax),
        )

    # -- episode API ----------------------------------------------------------
    def reset(self) -> Observation:
        case = self.case
        topo = Topology.reference(case)
        res = self.solver.solve(topo, self.scenario.injections[0])
        if res.diverged:
            raise SetupError("reference topology diverges at t=0")
        self.state = EnvState(
            t=0, topology=topo, streaks=(0,) * case.n_lines,
            cooldowns=(0,) * (case.n_subs + case.n_lines), game_over=False,
            mode=self.mode, rules=self.rules, result=res,
        )
        self.initial_score = score_step(res, case)
        return self._observe(self.state)

    def legality_check(self, action: Action) -> Optional[str]:
        return legality_check(self.case, self._require_state(), action)

    def step(self, action: Action) -> StepResult:
        state = self._require_state()
        new_state, result = self._transition(
            state, action, self.scenario.injections[state.t + 1])
        self.state = new_state
        return result

    def simulate(self, action: Action) -> StepResult:
        """Preview ``action`` against the forecast of the next injections. Mutates nothing."""
        state = self._require_state()
        _, result = self._transition(state, action, self.scenario.forecasts[state.t + 1])
        return result

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise EpisodeOverError("reset() must be called first")
        if self.state.game_over:
            raise EpisodeOverError("episode is over (game over)")
        if self.state.t + 1 >= self.horizon:
            raise EpisodeOverError("scenario horizon reached")
        return self.state

    def _transition(self, state: EnvState, action: Action, x_next):
        case, rules, hard = self.case, self.rules, self.mode == "hard"
        x_next = np.asarray(x_next, dtype=float)
        reason = legality_check(case, state, action)
        applied = DO_NOTHING if reason is not None else action
        cooldowns = list(state.cooldowns)
        topo = state.topology
        if not isinstance(applied, DoNothing):
            topo = apply_action(case, topo, applied)
            cooldowns[asset_of(case, applied)] = rules.cooldown
        res = self.solver.solve(topo, x_next)
        action_diverged = False
        if res.diverged and not isinstance(applied, DoNothing):
            action_diverged = True
            topo = state.topology
            res = self.solver.solve(topo, x_next)
        info = {"illegal": reason, "diverged": bool(res.diverged or action_diverged),
                "action": applied, "tripped": [], "cascade": []}
        if res.diverged:
            if hard:
                new_state = replace(state, t=state.t + 1, game_over=True,
                                    cooldowns=tuple(max(c - 1, 0) for c in cooldowns))
                obs = self._observe(replace(new_state, result=state.result), x_next)
                return new_state, StepResult(obs, 0.0, True, info)
            res = state.result

        amps = res.amps
        over = res.in_service & (amps >= case.imax)
        streaks = np.where(over, np.asarray(state.streaks) + 1, 0)
        game_over = False
        if hard:
            trips = np.flatnonzero(streaks > rules.reaction_time)
            for li in trips:
                topo = topo.with_line(int(li), False)
                streaks[li] = 0
                cooldowns[case.n_subs + li] = rules.cooldown
            if len(trips):
                res = self.solver.solve(topo, x_next)
            topo, res, trace, game_over = cascade(
                self.solver, topo, x_next, case, rules.hard_overload_factor, res)
            for opened in trace:
                for li in opened:
                    streaks[li] = 0
                    cooldowns[case.n_subs + li] = rules.cooldown
            info["tripped"] = [case.lines[i].id for i in trips] + [
                case.lines[i].id for opened in trace for i in opened]
            info["cascade"] = [[case.lines[i].id for i in opened] for opened in trace]
            if game_over:
                info["diverged"] = True
        cooldowns = tuple(max(c - 1, 0) for c in cooldowns)
        if game_over:
            new_state = replace(state, t=state.t + 1, topology=topo, game_over=True,
                                streaks=tuple(int(s) for s in streaks), cooldowns=cooldowns)
            obs = self._observe(replace(new_state, result=state.result), x_next)
            return new_state, StepResult(obs, 0.0, True, info)
        zeroed = reason is not None or action_diverged or res.diverged
        score = score_step(res, case, illegal=zeroed)
        new_state = EnvState(
            t=state.t + 1, topology=topo, streaks=tuple(int(s) for s in streaks),
            cooldowns=cooldowns, game_over=False, mode=state.mode, rules=rules, result=res,
        )
        return new_state, StepResult(self._observe(new_state, x_next), score, False, info)

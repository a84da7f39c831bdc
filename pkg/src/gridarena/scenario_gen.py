"""Synthetic winter injection scenarios, noisy forecasts, thermal-limit calibration,
scenario selection and scenario directories on disk."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grid_model import GridCase, Topology
from .power_flow import SolverCache

STEPS_PER_DAY = 288
WEST_CORRIDOR = (5, 10, 13)   # lines 2-5, 5-6, 6-13 of the shipped IEEE14 case


class InfeasibleConfigError(ValueError):
    """Thermal capacity cannot balance the load even after the allowed reduction."""


class ScenarioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    resolution_minutes: int = 5
    # total load
    load_level_mw: float = 259.0
    trough_level: float = 0.68
    morning_peak_hour: float = 9.0
    morning_peak_level: float = 0.93
    evening_peak_hour: float = 19.0
    evening_peak_level: float = 1.0
    peak_width_hours: float = 2.2
    weekend_factor: float = 0.85
    daily_level_sigma: float = 0.04
    load_noise_sigma: float = 0.01
    # solar
    sunrise_hour: float = 8.2
    sunset_hour: float = 17.2
    solar_shape_exponent: float = 1.5
    solar_amplitude_mean: float = 0.55
    solar_amplitude_sigma: float = 0.25
    solar_day_correlation: float = 0.6
    solar_noise_sigma: float = 0.05
    # wind
    wind_mean: float = 0.35
    wind_sigma: float = 0.2
    wind_ar: float = 0.97
    wind_solar_correlation: float = 0.0
    # nuclear
    nuclear_level: float = 0.65
    nuclear_ramp_amplitude: float = 0.05
    nuclear_ramp_period_hours: float = 72.0
    # balancing and forecasts
    max_load_reduction: float = 0.1
    forecast_sigma: float = 0.05

    def __post_init__(self):
        if self.forecast_sigma < 0 or self.load_noise_sigma < 0 or self.wind_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if self.load_level_mw <= 0 or self.weekend_factor <= 0 or self.trough_level <= 0:
            raise ValueError("load amplitudes must be positive")
        if not 0 <= self.wind_ar < 1:
            raise ValueError("wind_ar must lie in [0, 1)")
        if not -1 <= self.wind_solar_correlation <= 1:
            raise ValueError("wind_solar_correlation must lie in [-1, 1]")
        if self.sunset_hour <= self.sunrise_hour:
            raise ValueError("sunset must come after sunrise")

    @classmethod
    def from_dict(cls, doc: dict) -> "GenerationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generation parameter(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Scenario:
    id: str
    injections: np.ndarray          # (T, n_injections) MW, generators then loads
    forecasts: np.ndarray           # forecasts[t] is the forecast of injections[t]
    labels: tuple[str, ...]
    seed: Optional[int] = None
    start_weekday: int = 0          # 0 = Monday
    resolution_minutes: int = 5
    difficulty: Optional[str] = None
    adjusted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return int(self.injections.shape[0])

    def hour_of(self, t: int) -> float:
        return (t * self.resolution_minutes / 60.0) % 24.0

    def weekday_of(self, t: int) -> int:
        return (self.start_weekday + (t * self.resolution_minutes) // 1440) % 7


# -- profiles -----------------------------------------------------------------

def _wrapped(h, center):
    return (h - center + 12.0) % 24.0 - 12.0


def daily_load_shape(hours, cfg: GenerationConfig):
    """Double-peaked daily curve, 1.0 at the evening peak height."""
    w = cfg.peak_width_hours
    morning = np.exp(-0.5 * (_wrapped(hours, cfg.morning_peak_hour) / w) ** 2)
    evening = np.exp(-0.5 * (_wrapped(hours, cfg.evening_peak_hour) / w) ** 2)
    # plateau between the peaks
    day = 1.0 / (1.0 + np.exp(-(hours - 7.0) * 1.5)) / (1.0 + np.exp((hours - 22.0) * 1.5))
    base = cfg.trough_level + (0.85 - cfg.trough_level) * day
    return np.maximum.reduce([
        base,
        cfg.trough_level + (cfg.morning_peak_level - cfg.trough_level) * morning,
        cfg.trough_level + (cfg.evening_peak_level - cfg.trough_level) * evening,
    ])


def solar_bell(hours, cfg: GenerationConfig):
    span = cfg.sunset_hour - cfg.sunrise_hour
    phase = (hours - cfg.sunrise_hour) / span
    bell = np.where((phase > 0) & (phase < 1), np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)
    return bell ** cfg.solar_shape_exponent


def _ar1(rng, n, phi, sigma, mean, x0=None):
    out = np.empty(n)
    innov = sigma * math.sqrt(1.0 - phi * phi)
    prev = mean + sigma * rng.standard_normal() if x0 is None else x0
    eps = rng.standard_normal(n)
    for t in range(n):
        prev = mean + phi * (prev - mean) + innov * eps[t]
        out[t] = prev
    return out, eps


def make_forecast(injections, sigma: float, seed) -> np.ndarray:
    """Multiply every component by (1 + eps), eps ~ N(0, sigma), clip at 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(injections, dtype=float)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    noisy = x * (1.0 + sigma * rng.standard_normal(x.shape))
    return np.round(np.maximum(noisy, 0.0), 6)


def generate(case: GridCase, config: GenerationConfig = GenerationConfig(),
             horizon: int = STEPS_PER_DAY, seed: int = 0, scenario_id: str | None = None,
             start_weekday: int | None = None) -> Scenario:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cfg = config
    ss = np.random.SeedSequence(seed)
    r_meta, r_load, r_solar, r_wind, r_nuc, r_fc = (np.random.default_rng(s) for s in ss.spawn(6))
    if start_weekday is None:
        start_weekday = int(r_meta.integers(7))
    t = np.arange(horizon)
    minutes = t * cfg.resolution_minutes
    hours = (minutes / 60.0) % 24.0
    day = minutes // 1440
    n_days = int(day[-1]) + 2
    weekday = (start_weekday + day) % 7

    # total load
    day_level, _ = _ar1(r_load, n_days, 0.7, cfg.daily_level_sigma, 1.0)
    level = np.interp(minutes / 1440.0, np.arange(n_days), day_level)
    week = np.where(weekday >= 5, cfg.weekend_factor, 1.0)
    noise = np.exp(cfg.load_noise_sigma * r_load.standard_normal(horizon)
                   - 0.5 * cfg.load_noise_sigma ** 2)
    total = cfg.load_level_mw * daily_load_shape(hours, cfg) * week * level * noise
    keys = np.array([d.key_factor for d in case.loads])
    loads = total[:, None] * keys[None, :]

    # productions
    gens = case.generators
    prod = np.zeros((horizon, len(gens)))
    bell = solar_bell(hours, cfg)
    rho = cfg.wind_solar_correlation
    wind_eps = None
    for gi, g in enumerate(gens):
        if g.kind == "wind":
            cf, eps = _ar1(r_wind, horizon, cfg.wind_ar, cfg.wind_sigma, cfg.wind_mean)
            if wind_eps is None:
                wind_eps = eps
            prod[:, gi] = np.clip(cf, 0.0, 1.0) * g.pmax
    for gi, g in enumerate(gens):
        if g.kind == "solar":
            amp, _ = _ar1(r_solar, n_days, cfg.solar_day_correlation,
                          cfg.solar_amplitude_sigma, cfg.solar_amplitude_mean)
            amp = np.clip(amp, 0.05, 1.0)[day]
            own = r_solar.standard_normal(horizon)
            shared = wind_eps if wind_eps is not None else r_solar.standard_normal(horizon)
            eps = rho * shared + math.sqrt(1.0 - rho * rho) * own
            cloud = np.clip(1.0 + cfg.solar_noise_sigma * eps, 0.0, None)
            prod[:, gi] = np.clip(bell * amp * cloud, 0.0, 1.0) * g.pmax
        elif g.kind == "nuclear":
            phase = r_nuc.uniform(0, 2 * np.pi)
            ramp = np.sin(2 * np.pi * minutes / 60.0 / cfg.nuclear_ramp_period_hours + phase)
            lvl = cfg.nuclear_level * (1.0 + cfg.nuclear_ramp_amplitude * ramp)
            prod[:, gi] = np.clip(lvl, 0.0, 1.0) * g.pmax

    thermal = np.array([g.kind == "thermal" for g in gens])
    if not thermal.any():
        raise InfeasibleConfigError("no thermal generator to balance the injections")
    cap = sum(g.pmax for g, th in zip(gens, thermal) if th)
    renew = np.array([g.kind in ("wind", "solar") for g in gens])
    adjusted = False

    others = prod[:, ~thermal].sum(axis=1)
    load_sum = loads.sum(axis=1)
    residual = load_sum - others
    high = residual > cap - 1e-4
    if high.any():
        scale = (cap - 1e-4 + others[high]) / load_sum[high]
        if np.any(1.0 - scale > cfg.max_load_reduction):
            worst = float(np.max(residual[high] - cap))
            raise InfeasibleConfigError(
                f"thermal capacity short by {worst:.1f} MW beyond the allowed load reduction")
        loads[high] *= scale[:, None]
        adjusted = True
    low = residual < 1e-4
    if low.any():
        # keep a sliver of thermal output so rounding cannot push it below zero
        deficit = 1e-4 - residual[low]
        rsum = prod[low][:, renew].sum(axis=1)
        cut = np.where(rsum > 0, np.clip(1.0 - deficit / np.where(rsum > 0, rsum, 1.0), 0, 1), 0)
        block = prod[low]
        block[:, renew] *= cut[:, None]
        still = load_sum[low] - block[:, ~thermal].sum(axis=1)
        nuc = np.array([g.kind == "nuclear" for g in gens])
        if np.any(still < 1e-4) and nuc.any():
            nsum = block[:, nuc].sum(axis=1)
            factor = np.where(still < 1e-4, np.clip(
                (nsum + still - 1e-4) / np.where(nsum > 0, nsum, 1), 0, 1), 1)
            block[:, nuc] *= factor[:, None]
        prod[low] = block
        adjusted = True

    loads = np.round(loads, 6)
    prod[:, ~thermal] = np.round(prod[:, ~thermal], 6)
    residual = loads.sum(axis=1) - prod[:, ~thermal].sum(axis=1)
    th_idx = np.flatnonzero(thermal)
    shares = np.array([gens[i].pmax for i in th_idx]) / cap
    assigned = np.zeros(horizon)
    for k, gi in enumerate(th_idx):
        if k == len(th_idx) - 1:
            prod[:, gi] = residual - assigned
        else:
            prod[:, gi] = np.round(residual * shares[k], 6)
            assigned += prod[:, gi]
    prod[:, th_idx] = np.maximum(prod[:, th_idx], 0.0)

    injections = np.concatenate([prod, loads], axis=1)
    forecasts = make_forecast(injections, cfg.forecast_sigma, r_fc.integers(2 ** 63))
    return Scenario(
        id=scenario_id if scenario_id is not None else f"scenario_s{seed}",
        injections=injections, forecasts=forecasts, labels=case.injection_labels,
        seed=int(seed), start_weekday=start_weekday,
        resolution_minutes=cfg.resolution_minutes, adjusted=adjusted,
    )


def generate_set(case: GridCase, count: int, horizon: int = STEPS_PER_DAY, seed: int = 0,
                 config: GenerationConfig = GenerationConfig()) -> list[Scenario]:
    """``count`` scenarios with seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for k, child in enumerate(children):
        s = int(child.generate_state(1, dtype=np.uint32)[0])
        out.append(generate(case, config, horizon, s, scenario_id=f"scenario_{k:03d}"))
    return out


# -- calibration ---------------------------------------------------------------

CALIBRATION_COUNT = 20
CALIBRATION_SEED = 0


def calibration_set(case: GridCase, count: int = CALIBRATION_COUNT, horizon: int = STEPS_PER_DAY,
                    seed: int = CALIBRATION_SEED) -> list[Scenario]:
    """The default scenario set behind the shipped calibrated case."""
    return generate_set(case, count, horizon, seed)

def dn_currents(case: GridCase, scenarios: Sequence[Scenario],
                solver: SolverCache | None = None) -> np.ndarray:
    """Line currents (A) in the reference topology, stacked over all scenario timesteps."""
    solver = solver or SolverCache(case)
    system = solver.system(Topology.reference(case))
    return np.concatenate([system.solve(s.injections).amps for s in scenarios], axis=0)


def calibrate_thermal_limits(case: GridCase, scenarios: Sequence[Scenario],
                             target_lines: Sequence[int] = WEST_CORRIDOR,
                             overload_rate: float = 0.03,
                             headroom: float = 1.05) -> GridCase:
    """Rate target lines so the do-nothing agent overloads them ``overload_rate`` of the
    time; rate every other line ``headroom`` times above its largest observed current."""
    if not scenarios:
        raise ValueError("calibration needs at least one scenario")
    if not 0 <= overload_rate < 1:
        raise ValueError("overload_rate must lie in [0, 1)")
    unknown = [l for l in target_lines if l not in case.line_index]
    if unknown:
        raise ValueError(f"unknown target line(s): {unknown}")
    amps = dn_currents(case, scenarios)
    targets = {case.line_index[l] for l in target_lines}
    imax = np.empty(case.n_lines)
    for li in range(case.n_lines):
        col = amps[:, li]
        if li in targets:
            q = np.quantile(col, 1.0 - overload_rate)
            # just above the quantile: overload means current >= limit
            imax[li] = np.nextafter(q, np.inf)
        else:
            imax[li] = headroom * col.max()
        imax[li] = max(imax[li], 1.0)
    return case.with_thermal_limits(imax)


# -- selection -----------------------------------------------------------------

@dataclass(frozen=True)
class SelectionEntry:
    scenario_id: str
    difficulty: str
    task_time: str
    weekday: int
    horizon: int
    dn_overloads: int


def _task_time(hour: float | None) -> str:
    if hour is None:
        return "none"
    if hour < 6:
        return "night"
    if hour < 11:
        return "morning"
    if hour < 15:
        return "midday"
    return "evening"


def label_scenario(case: GridCase, scenario: Scenario,
                   baselines: Sequence[Topology] = (), solver: SolverCache | None = None
                   ) -> SelectionEntry:
    from .agents import DoNothingAgent, TopologyAgent, run_episode

    solver = solver or SolverCache(case)
    dn = run_episode(DoNothingAgent(), case, scenario, mode="hard", solver=solver)
    over_steps = [s for s in dn.steps if s.overloads]
    first = scenario.hour_of(over_steps[0].t) if over_steps else None
    if not over_steps:
        difficulty = "easy"
    else:
        finished = dn.game_over_step is None
        for target in baselines:
            if finished:
                break
            rec = run_episode(TopologyAgent(case, target), case, scenario, mode="hard",
                              solver=solver)
            finished = rec.game_over_step is None
        difficulty = "medium" if finished else "hard"
    return SelectionEntry(scenario.id, difficulty, _task_time(first), scenario.start_weekday,
                          scenario.horizon, len(over_steps))


def select_scenarios(pool: Sequence[Scenario], case: GridCase, count: int,
                     baselines: Sequence[Topology] = ()) -> list[SelectionEntry]:
    """Label every scenario and greedily pick ``count`` covering the most unseen
    (difficulty, task time, weekday, horizon) values. Ties keep pool order."""
    if count > len(pool):
        raise ValueError(f"requested {count} scenarios from a pool of {len(pool)}")
    solver = SolverCache(case)
    entries = [label_scenario(case, s, baselines, solver) for s in pool]
    dims = ("difficulty", "task_time", "weekday", "horizon")
    seen = {d: set() for d in dims}
    chosen: list[SelectionEntry] = []
    remaining = list(entries)
    while len(chosen) < count:
        gains = [sum(getattr(e, d) not in seen[d] for d in dims) for e in remaining]
        best = int(np.argmax(gains))
        e = remaining.pop(best)
        chosen.append(e)
        for d in dims:
            seen[d].add(getattr(e, d))
    return chosen


# -- files -----------------------------------------------------------------------

def _write_csv(path: Path, labels, values) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(("t",) + tuple(labels)) + "\n")
        for t, row in enumerate(values):
            # shortest repr: bit-exact on reload
            fh.write(str(t) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _read_csv(path: Path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ScenarioFormatError(f"{path}: {exc.strerror}") from None
    if not rows or rows[0][:1] != ["t"]:
        raise ScenarioFormatError(f"{path}: header must start with 't'")
    labels = tuple(rows[0][1:])
    data = np.empty((len(rows) - 1, len(labels)))
    for k, row in enumerate(rows[1:]):
        if len(row) != len(labels) + 1 or row[0] != str(k):
            raise ScenarioFormatError(f"{path}: malformed row {k + 1}")
        try:
            data[k] = [float(v) for v in row[1:]]
        except ValueError:
            raise ScenarioFormatError(f"{path}: non-numeric value in row {k + 1}") from None
    return labels, data


def write_scenario(scenario: Scenario, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "injections.csv", scenario.labels, scenario.injections)
    _write_csv(d / "forecasts.csv", scenario.labels, scenario.forecasts)
    meta = {
        "id": scenario.id, "seed": scenario.seed, "horizon": scenario.horizon,
        "start_weekday": scenario.start_weekday,
        "resolution_minutes": scenario.resolution_minutes,
        "difficulty": scenario.difficulty, "adjusted": scenario.adjusted,
    }
    meta.update(scenario.meta)
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                            encoding="utf-8", newline="\n")
    return d


def read_scenario(directory) -> Scenario:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioFormatError(f"{d / 'meta.json'}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"{d / 'meta.json'}: {exc.msg}") from None
    labels, inj = _read_csv(d / "injections.csv")
    flabels, fc = _read_csv(d / "forecasts.csv")
    if flabels != labels or fc.shape != inj.shape:
        raise ScenarioFormatError(f"{d}: forecasts.csv does not match injections.csv")
    for key in ("id", "horizon", "start_weekday"):
        if key not in meta:
            raise ScenarioFormatError(f"{d / 'meta.json'}: missing field '{key}'")
    if meta["horizon"] != inj.shape[0]:
        raise ScenarioFormatError(f"{d / 'meta.json'}: horizon {meta['horizon']} != {inj.shape[0]} rows")
    extra = {k: v for k, v in meta.items() if k not in (
        "id", "seed", "horizon", "start_weekday", "resolution_minutes", "difficulty", "adjusted")}
    return Scenario(
        id=str(meta["id"]), injections=inj, forecasts=fc, labels=labels,
        seed=meta.get("seed"), start_weekday=int(meta["start_weekday"]),
        resolution_minutes=int(meta.get("resolution_minutes", 5)),
        difficulty=meta.get("difficulty"), adjusted=bool(meta.get("adjusted", False)),
        meta=extra,
    )


def is_scenario_dir(path) -> bool:
    return (Path(path) / "injections.csv").is_file()


def read_scenarios(path) -> list[Scenario]:
    """A single scenario directory, or a directory of scenario directories (sorted)."""
    p = Path(path)
    if is_scenario_dir(p):
        return [read_scenario(p)]
    if not p.is_dir():
        raise ScenarioFormatError(f"{p}: not a directory")
    subs = sorted(q for q in p.iterdir() if is_scenario_dir(q))
    if not subs:
        raise ScenarioFormatError(f"{p}: no scenario directories found")
    return [read_scenario(q) for q in subs]

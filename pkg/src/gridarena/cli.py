"""``gridarena`` command line: run agents, generate and calibrate scenarios, compute
oracle bounds, normalized score tables and analysis reports."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .agents import (
    DoNothingAgent, EpisodeRecord, GreedyAgent, RecordFormatError, ScriptedAgent,
    TopologyAgent, dump_records, load_records, run_episode,
)
from .environment import MODES, ArenaError
from .grid_model import (
    CaseFormatError, CaseValidationError, SetSubstationConfig, SwitchLine, Topology,
    UnknownAssetError, action_from_dict, apply_action, ieee14, load_case, save_case,
)
from .oracle import (
    ActionDictionary, Oracle, OracleError, normalized_score, table_dictionary,
)
from .power_flow import SolverCache
from .scenario_gen import (
    WEST_CORRIDOR, GenerationConfig, ScenarioFormatError, calibrate_thermal_limits,
    generate_set, read_scenarios, write_scenario,
)

log = logging.getLogger("gridarena")

EXIT_OK, EXIT_ERROR, EXIT_GAME_OVER, EXIT_BUDGET = 0, 1, 2, 3


class CliError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _write_text(out: str, text: str) -> None:
    if out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        p = Path(out)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8", newline="\n")


def _read_json(path) -> object:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: line {exc.lineno}: {exc.msg}") from None


def _case(path):
    return ieee14(calibrated=True) if path is None else load_case(path)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _dictionary(path) -> ActionDictionary:
    if path is None:
        return table_dictionary()
    doc = _read_json(path)
    try:
        return ActionDictionary.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: actions: {exc}") from None


def _target_topology(case, path) -> Topology:
    """A topology document, or {"actions": [...]} applied to the reference topology."""
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected an object with 'substations'/'lines' or 'actions'")
    try:
        if "actions" in doc:
            topo = Topology.reference(case)
            for a in doc["actions"]:
                topo = apply_action(case, topo, action_from_dict(a))
            return topo
        return Topology.from_dict(case, doc)
    except UnknownAssetError as exc:
        raise CliError(f"{path}: unknown {exc.args[0]}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _make_agent(case, spec: str):
    if spec == "dn":
        return DoNothingAgent()
    if spec == "greedy":
        return GreedyAgent(case)
    if spec.startswith("dn-tau:"):
        path = spec.split(":", 1)[1]
        return TopologyAgent(case, _target_topology(case, path), name=f"dn-tau:{Path(path).stem}")
    raise CliError(f"--agent: unknown agent {spec!r} (dn, dn-tau:<file>, greedy)")


def _default_budget(case, scenarios, mode, solver) -> float:
    """Ten times the wall-clock of a do-nothing episode, measured on these scenarios."""
    worst = 0.0
    for s in scenarios:
        start = time.perf_counter()
        run_episode(DoNothingAgent(), case, s, mode, solver=solver)
        worst = max(worst, time.perf_counter() - start)
    return 10.0 * worst


# -- commands -------------------------------------------------------------------

def cmd_run(args) -> int:
    case = _case(args.case)
    scenarios = read_scenarios(args.scenario_dir)
    np.random.seed(args.seed)
    solver = SolverCache(case)
    budget = args.time_budget
    if budget is None:
        budget = _default_budget(case, scenarios, args.mode, solver)
        log.info("time budget %.3f s per episode", budget)
    records = []
    for s in scenarios:
        agent = _make_agent(case, args.agent)
        records.append(run_episode(agent, case, s, args.mode, budget, solver=solver))
    _write_text(args.out, dump_records(records, args.record_timing))
    if any(r.budget_exceeded for r in records):
        return EXIT_BUDGET
    if any(r.game_over_step is not None for r in records):
        return EXIT_GAME_OVER
    return EXIT_OK


def cmd_generate(args) -> int:
    case = _case(args.case)
    config = GenerationConfig()
    if args.config:
        doc = _read_json(args.config)
        try:
            config = GenerationConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise CliError(f"{args.config}: {exc}") from None
    out = Path(args.out)
    for s in generate_set(case, args.count, args.horizon, args.seed, config):
        write_scenario(s, out / s.id)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    case = _case(args.case)
    scenarios = read_scenarios(args.scenarios)
    try:
        cal = calibrate_thermal_limits(case, scenarios, args.target_lines, args.rate)
    except ValueError as exc:
        raise CliError(f"--target-lines/--rate: {exc}") from None
    if args.out == "-":
        sys.stdout.write(json.dumps(cal.to_dict(), indent=1) + "\n")
    else:
        save_case(cal, args.out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    case = _case(args.case)
    scenarios = read_scenarios(args.scenario_dir)
    dictionary = _dictionary(args.dictionary)
    try:
        oracle = Oracle(case, dictionary, relaxed=args.relaxed, mode=args.mode,
                        cache_dir=args.cache_dir)
    except (ValueError, OracleError) as exc:
        raise CliError(f"--dictionary: {exc}") from None
    solver = SolverCache(case)
    records = []
    for s in scenarios:
        run = oracle.solve(s)
        rec = run_episode(ScriptedAgent(run.actions_by_step(), "oracle"), case, s,
                          args.mode, solver=solver, depth_dictionary=dictionary.actions)
        rec.extra = {
            "oracle_score": run.score,
            "course": [[t, a.to_dict()] for t, a in run.course],
            "n_topologies": run.n_topologies, "relaxed": run.relaxed,
        }
        records.append(rec)
    _write_text(args.out, dump_records(records))
    return EXIT_OK


def _by_scenario(records, path) -> dict[str, EpisodeRecord]:
    out = {}
    for r in records:
        if r.scenario_id in out:
            raise CliError(f"{path}: scenario_id {r.scenario_id!r} appears twice")
        out[r.scenario_id] = r
    return out


def _oracle_value(rec: EpisodeRecord) -> float:
    return float(rec.extra.get("oracle_score", rec.episode_score))


def build_score_report(agent_records, dn_records, oracle_records) -> dict:
    """Normalized scores (x100) of every agent record against do-nothing and oracle."""
    dn = _by_scenario(dn_records, "--dn-record")
    orc = _by_scenario(oracle_records, "--oracle-record")
    rows = []
    totals: dict[str, dict] = {}
    for rec in agent_records:
        sid = rec.scenario_id
        if sid not in dn:
            raise CliError(f"--dn-record: no record for scenario_id {sid!r}")
        if sid not in orc:
            raise CliError(f"--oracle-record: no record for scenario_id {sid!r}")
        d, o = dn[sid].episode_score, _oracle_value(orc[sid])
        try:
            norm = 100.0 * normalized_score(rec.episode_score, d, o)
        except ZeroDivisionError:
            norm = None
        rows.append({
            "scenario_id": sid, "agent": rec.agent, "mode": rec.mode,
            "agent_score": rec.episode_score, "dn_score": d, "oracle_score": o,
            "normalized": norm, "game_over_step": rec.game_over_step,
            "budget_exceeded": rec.budget_exceeded,
            "runtime": rec.time_consumed,
        })
        t = totals.setdefault(rec.agent, {"agent_score": 0.0, "dn_score": 0.0,
                                          "oracle_score": 0.0, "scenarios": 0,
                                          "game_overs": 0})
        t["agent_score"] += rec.episode_score
        t["dn_score"] += d
        t["oracle_score"] += o
        t["scenarios"] += 1
        t["game_overs"] += rec.game_over_step is not None
    for t in totals.values():
        try:
            t["normalized"] = 100.0 * normalized_score(t["agent_score"], t["dn_score"],
                                                       t["oracle_score"])
        except ZeroDivisionError:
            t["normalized"] = None
    return {"rows": rows, "totals": totals}


def cmd_score(args) -> int:
    agent_records = [r for p in args.records for r in load_records(p)]
    report = build_score_report(agent_records, load_records(args.dn_record),
                                load_records(args.oracle_record))
    _write_text(args.out, json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_table(records, kind: str) -> str:
    if kind == "overload-histogram":
        counts = Counter()
        for r in records:
            for s in r.steps:
                if s.overloads:
                    minutes = s.t * r.resolution_minutes
                    day = (r.start_weekday + minutes // 1440) % 7
                    counts[(day, (minutes % 1440) // 60)] += len(s.overloads)
        rows = [(d, h, counts[(d, h)]) for d in range(7) for h in range(24)]
        return _csv(("weekday", "hour", "overloads"), rows)
    if kind == "action-usage":
        counts = Counter()
        for r in records:
            for s in r.steps:
                if s.action is None or s.illegal is not None:
                    continue
                if isinstance(s.action, SetSubstationConfig):
                    counts[(r.agent, "substation", s.action.substation)] += 1
                elif isinstance(s.action, SwitchLine):
                    counts[(r.agent, "line", s.action.line)] += 1
        rows = [(a, k, i, n) for (a, k, i), n in sorted(counts.items())]
        return _csv(("agent", "asset_type", "asset_id", "count"), rows)
    if kind == "action-depth":
        rows = [(r.scenario_id, r.agent, s.t, "" if s.depth is None else s.depth)
                for r in records for s in r.steps]
        return _csv(("scenario_id", "agent", "t", "depth"), rows)
    raise CliError(f"--kind: unknown report {kind!r}")


def cmd_report(args) -> int:
    records = [r for p in args.records for r in load_records(p)]
    _write_text(args.out, report_table(records, args.kind))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _budget(text: str) -> float:
    v = float(text)
    if math.isnan(v) or v < 0:
        raise argparse.ArgumentTypeError("time budget must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridarena", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    case_help = "case file (default: shipped calibrated IEEE14)"

    r = sub.add_parser("run", help="run an agent over scenarios")
    r.add_argument("--case", help=case_help)
    r.add_argument("--scenario-dir", required=True,
                   help="a scenario directory or a directory of them")
    r.add_argument("--agent", default="dn", help="dn | dn-tau:<topology file> | greedy")
    r.add_argument("--mode", choices=MODES, default="hard")
    r.add_argument("--time-budget", type=_budget, default=None,
                   help="seconds per episode (default: 10x a do-nothing episode)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--record-timing", action="store_true",
                   help="include wall-clock time in records (breaks byte reproducibility)")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("generate", help="generate scenario directories")
    g.add_argument("--case", help=case_help)
    g.add_argument("--config", help="JSON file of generation parameters")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--horizon", type=int, default=288)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="calibrate thermal limits on scenarios")
    c.add_argument("--case", default=None, help="case file (default: shipped IEEE14)")
    c.add_argument("--scenarios", required=True)
    c.add_argument("--target-lines", type=_int_list, default=list(WEST_CORRIDOR))
    c.add_argument("--rate", type=float, default=0.03)
    c.add_argument("--out", default="-")
    c.set_defaults(func=cmd_calibrate)

    o = sub.add_parser("oracle", help="compute the oracle upper bound")
    o.add_argument("--case", help=case_help)
    o.add_argument("--scenario-dir", required=True)
    o.add_argument("--dictionary", help="JSON action dictionary (default: reference table)")
    o.add_argument("--relaxed", action="store_true", help="ignore the cooldown rule")
    o.add_argument("--mode", choices=MODES, default="easy",
                   help="physics used to score topology chains")
    o.add_argument("--cache-dir", help="directory for cached reward matrices")
    o.add_argument("--out", default="-")
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("score", help="normalized score table")
    s.add_argument("--records", nargs="+", required=True)
    s.add_argument("--dn-record", required=True)
    s.add_argument("--oracle-record", required=True)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_score)

    rp = sub.add_parser("report", help="plot-ready analysis tables")
    rp.add_argument("--records", nargs="+", required=True)
    rp.add_argument("--kind", required=True,
                    choices=("overload-histogram", "action-usage", "action-depth"))
    rp.add_argument("--out", default="-")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "calibrate" and args.case is None:
        args.case = str(Path(__file__).parent / "data" / "ieee14.case")
    try:
        return args.func(args)
    except (CliError, CaseFormatError, CaseValidationError, ScenarioFormatError,
            RecordFormatError, ArenaError, OracleError) as exc:
        print(f"gridarena: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"gridarena: error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

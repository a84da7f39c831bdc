import json
import shutil
import subprocess
import sys

import pytest

from conftest import AMP_PER_MW_100KV, constant_scenario, make_case
from gridarena.agents import load_records
from gridarena.cli import main
from gridarena.grid_model import SetSubstationConfig, Topology, apply_action, ieee14, save_case
from gridarena.scenario_gen import write_scenario


@pytest.fixture(scope="module")
def scen_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scen")
    assert main(["generate", "--count", "2", "--horizon", "48", "--seed", "5",
                 "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def raw_case_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("case") / "raw.case"
    save_case(ieee14(), p)
    return p


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_dn_easy_scenario(scen_dir, raw_case_file, capsys):
    code, out, _ = _run(["run", "--case", raw_case_file, "--scenario-dir", scen_dir,
                         "--agent", "dn", "--time-budget", "inf"], capsys)
    assert code == 0
    recs = [json.loads(l) for l in out.splitlines()]
    assert len(recs) == 2 and all(r["episode_score"] > 0 for r in recs)
    assert [r["scenario_id"] for r in recs] == ["scenario_000", "scenario_001"]


def test_run_game_over_exit_2(tmp_path, capsys):
    c = make_case(2, [(1, 2, 1.0, 40.0 * AMP_PER_MW_100KV)], [(1, 200.0)], [(2, 1.0)])
    save_case(c, tmp_path / "tiny.case")
    write_scenario(constant_scenario(c, [50.0, 50.0], 10, sid="tiny"), tmp_path / "s")
    code, out, _ = _run(["run", "--case", tmp_path / "tiny.case", "--scenario-dir",
                         tmp_path / "s", "--time-budget", "inf"], capsys)
    assert code == 2 and json.loads(out)["game_over_step"] == 3


def test_run_budget_exit_3(scen_dir, capsys):
    code, out, _ = _run(["run", "--scenario-dir", scen_dir, "--agent", "greedy",
                         "--time-budget", "0"], capsys)
    assert code == 3
    assert all(json.loads(l)["budget_exceeded"] for l in out.splitlines())


def test_run_default_budget_and_timing(scen_dir, raw_case_file, tmp_path, capsys):
    out = tmp_path / "dn.jsonl"
    code, _, _ = _run(["run", "--case", raw_case_file, "--scenario-dir", scen_dir,
                       "--record-timing", "--out", out], capsys)
    assert code == 0
    assert all(r.time_consumed is not None for r in load_records(out))


def test_run_dn_tau_from_file(scen_dir, tmp_path, capsys):
    case = ieee14(calibrated=True)
    topo = apply_action(case, Topology.reference(case), SetSubstationConfig(9, [1, 0, 1, 0, 1]))
    (tmp_path / "tau.json").write_text(json.dumps(topo.to_dict(case)))
    code, out, _ = _run(["run", "--scenario-dir", scen_dir, "--mode", "easy",
                         "--agent", f"dn-tau:{tmp_path / 'tau.json'}", "--time-budget", "inf"],
                        capsys)
    assert code == 0
    rec = json.loads(out.splitlines()[0])
    assert rec["agent"] == "dn-tau:tau"
    assert rec["steps"][1]["action"]["type"] == "set_bus" and rec["steps"][1]["depth"] == 1


def test_full_pipeline_and_reports(scen_dir, tmp_path, capsys):
    dn, gr, orc = tmp_path / "dn.jsonl", tmp_path / "gr.jsonl", tmp_path / "oracle.jsonl"
    for agent, out in (("dn", dn), ("greedy", gr)):
        code, _, _ = _run(["run", "--scenario-dir", scen_dir, "--agent", agent,
                           "--mode", "easy", "--time-budget", "inf", "--out", out], capsys)
        assert code == 0
    d = tmp_path / "small.json"
    d.write_text(json.dumps({"actions": [
        {"type": "switch_line", "line": 10},
        {"type": "set_bus", "substation": 9, "target": [1, 0, 1, 0, 1]}]}))
    code, _, _ = _run(["oracle", "--scenario-dir", scen_dir, "--dictionary", d,
                       "--out", orc], capsys)
    assert code == 0
    orec = load_records(orc)
    assert all(abs(r.episode_score - r.extra["oracle_score"]) < 1e-9 for r in orec)

    code, out, _ = _run(["score", "--records", dn, "--dn-record", dn, "--oracle-record", orc],
                        capsys)
    report = json.loads(out)
    assert code == 0 and all(row["normalized"] in (0.0, None) for row in report["rows"])

    code, out, _ = _run(["report", "--records", dn, "--kind", "action-depth"], capsys)
    lines = out.splitlines()
    assert lines[0] == "scenario_id,agent,t,depth"
    assert {l.rsplit(",", 1)[1] for l in lines[1:]} == {"0"}

    code, out, _ = _run(["report", "--records", gr, "--kind", "action-usage"], capsys)
    assert code == 0 and out.startswith("agent,asset_type,asset_id,count\n")
    code, out, _ = _run(["report", "--records", dn, "--kind", "overload-histogram"], capsys)
    assert code == 0 and len(out.splitlines()) == 1 + 7 * 24


def test_score_report_normalization(tmp_path, capsys):
    def rec(sid, agent, score, **extra):
        return json.dumps({"scenario_id": sid, "agent": agent, "mode": "easy",
                           "episode_score": score, "steps": [], **extra}) + "\n"
    (tmp_path / "a.jsonl").write_text(rec("s", "x", 190.0))
    (tmp_path / "d.jsonl").write_text(rec("s", "dn", 100.0))
    (tmp_path / "o.jsonl").write_text(rec("s", "oracle", 0.0, oracle_score=200.0))
    code, out, _ = _run(["score", "--records", tmp_path / "a.jsonl", "--dn-record",
                         tmp_path / "d.jsonl", "--oracle-record", tmp_path / "o.jsonl"], capsys)
    row = json.loads(out)["rows"][0]
    assert code == 0 and row["normalized"] == pytest.approx(90.0)


def test_calibrate_command(scen_dir, tmp_path, capsys):
    out = tmp_path / "cal.case"
    code, _, _ = _run(["calibrate", "--scenarios", scen_dir, "--rate", "0.05", "--out", out],
                      capsys)
    assert code == 0 and out.is_file()
    code, text, _ = _run(["calibrate", "--scenarios", scen_dir], capsys)
    assert code == 0 and json.loads(text)["lines"]


def test_generate_with_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"forecast_sigma": 0.0}))
    code, _, _ = _run(["generate", "--config", cfg, "--horizon", "12", "--out", tmp_path / "g"],
                      capsys)
    assert code == 0
    a = (tmp_path / "g" / "scenario_000" / "injections.csv").read_text()
    assert a == (tmp_path / "g" / "scenario_000" / "forecasts.csv").read_text()
    cfg.write_text(json.dumps({"no_such_knob": 1}))
    code, _, err = _run(["generate", "--config", cfg, "--out", tmp_path / "h"], capsys)
    assert code == 1 and "cfg.json" in err


def test_errors_name_the_file(tmp_path, scen_dir, capsys):
    code, _, err = _run(["run", "--scenario-dir", tmp_path / "nowhere"], capsys)
    assert code == 1 and "nowhere" in err and err.startswith("gridarena: error:")

    bad = tmp_path / "bad.case"
    bad.write_text("{oops")
    code, _, err = _run(["run", "--case", bad, "--scenario-dir", scen_dir], capsys)
    assert code == 1 and "bad.case" in err

    broken = tmp_path / "broken"
    shutil.copytree(scen_dir / "scenario_000", broken)
    (broken / "meta.json").write_text("{}")
    code, _, err = _run(["run", "--scenario-dir", broken, "--time-budget", "inf"], capsys)
    assert code == 1 and "meta.json" in err

    recs = tmp_path / "r.jsonl"
    recs.write_text('{"agent": "dn"}\n')
    code, _, err = _run(["report", "--records", recs, "--kind", "action-depth"], capsys)
    assert code == 1 and "r.jsonl" in err and "scenario_id" in err

    code, _, err = _run(["run", "--scenario-dir", scen_dir, "--agent", "wizard"], capsys)
    assert code == 1 and "wizard" in err


def test_console_script(scen_dir):
    exe = shutil.which("gridarena")
    cmd = [exe] if exe else [sys.executable, "-m", "gridarena.cli"]
    res = subprocess.run(cmd + ["run", "--scenario-dir", str(scen_dir), "--mode", "easy",
                                "--time-budget", "inf"], capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.splitlines()) == 2

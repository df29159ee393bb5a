import json
import subprocess
import sys

import pytest

from dramspy.cli import main

BASE = "[run]\nmaster_seed = 7\nregion_size = 256KiBit\ndecay_time_s = 120\n"


def write_ini(tmp_path, extra="", name="run.ini"):
    p = tmp_path / name
    p.write_text(BASE + extra)
    return str(p)


def test_enroll_writes_grid(tmp_path, capsys):
    out = tmp_path / "table.json"
    assert main(["enroll", "--config", write_ini(tmp_path), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["records"]) == 29
    assert doc["meta"]["master_seed"] == 7 and "config_digest" in doc["meta"]
    assert "decay time on hardware" in capsys.readouterr().err


def test_enroll_constant_mode(tmp_path):
    ini = write_ini(tmp_path, "[enroll]\nmode = constant\ntemps = 20:40:5\nat_temp_c = 25\n")
    out = tmp_path / "table.json"
    assert main(["enroll", "--config", ini, "--out", str(out)]) == 0
    recs = json.loads(out.read_text())["records"]
    assert [r["nominal_temp_c"] for r in recs] == [20.0, 25.0, 30.0, 35.0, 40.0]
    times = [r["decay_time_s"] for r in recs]
    assert times == sorted(times) and times[1] == 120.0


def test_missing_region_size_is_config_error(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[run]\nmaster_seed = 1\n")
    assert main(["enroll", "--config", str(p)]) == 2
    assert "run.region_size" in capsys.readouterr().err


def test_missing_file_is_config_error(tmp_path):
    assert main(["enroll", "--config", str(tmp_path / "nope.ini")]) == 2


def test_fit_and_decode(tmp_path, capsys):
    table, model = tmp_path / "t.json", tmp_path / "m.json"
    assert main(["enroll", "--config", write_ini(tmp_path), "--out", str(table)]) == 0
    assert main(["fit", "--table", str(table), "--out", str(model)]) == 0
    doc = json.loads(model.read_text())
    assert doc["format"] == "dramspy.approx-model" and doc["meta"]["master_seed"] == 7
    capsys.readouterr()
    assert main(["decode", "--model", str(model), "--flips", "0", "100000"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "timestamp_s,flips,t_apx_c" and len(lines) == 3


def test_too_few_indicators_exit_3(tmp_path):
    table = tmp_path / "t.json"
    ini = write_ini(tmp_path, "[enroll]\ntemps = 20:30:0.5\n")
    assert main(["enroll", "--config", ini, "--out", str(table)]) == 0
    assert main(["fit", "--table", str(table), "--indicators", "--l", "21"]) == 3


def test_report_empty_range_exit_3(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("timestamp_s,ambient_true_c,device_true_c,inferred_c,abs_error_c\n0,30,30,30.5,0.5\n")
    assert main(["report", "--trace", str(trace), "--range", "50", "60"]) == 3
    assert main(["report", "--trace", str(trace)]) == 0


def test_refresh_locked_exit_4(tmp_path, capsys):
    ini = write_ini(tmp_path, "[attack]\nscenario = server-workload\n[defense]\nrefresh_locked = yes\n")
    assert main(["defend", "--config", ini]) == 4
    assert "0 spy messages" in capsys.readouterr().err
    assert main(["attack", "--config", ini, "--out", str(tmp_path / "x.csv")]) == 4


def test_reruns_are_byte_identical(tmp_path):
    ini = write_ini(tmp_path, "[enroll]\ntemps = 20:70:2.5\n[attack]\nscenario = server-workload\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["attack", "--config", ini, "--out", str(a)]) == 0
    assert main(["attack", "--config", ini, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    head = a.read_text().splitlines()
    assert head[0].startswith("# tool=dramspy") and head[1] == "# master_seed=7"
    assert main(["attack", "--config", ini, "--seed", "8", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_scenario_list(capsys):
    assert main(["scenario", "list"]) == 0
    assert capsys.readouterr().out.split() == ["chamber-ramp", "room-daynight", "server-workload"]


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "dramspy", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("dramspy ")


@pytest.mark.parametrize("argv", [["fit"], ["bogus"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_agent_and_collector_processes_match_attack(tmp_path):
    import socket

    ini = write_ini(tmp_path, "[enroll]\ntemps = 20:70:2.5\n[attack]\nscenario = server-workload\n")
    run = lambda *a: subprocess.run([sys.executable, "-m", "dramspy", *a], cwd=tmp_path, capture_output=True, text=True)
    assert run("enroll", "--config", ini, "--out", "table.json").returncode == 0
    assert run("fit", "--table", "table.json", "--out", "model.json").returncode == 0
    assert run("attack", "--config", ini, "--out", "trace.csv").returncode == 0
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    collector = subprocess.Popen(
        [sys.executable, "-m", "dramspy", "collector", "--model", "model.json", "--listen", str(port),
         "--out", "live.csv", "--truth", "truth.csv"],
        cwd=tmp_path, stderr=subprocess.PIPE, text=True,
    )
    agent = run("agent", "--config", ini, "--connect", f"127.0.0.1:{port}", "--truth", "truth.csv", "--retries", "10", "--backoff", "0.1")
    collector.wait(timeout=60)
    assert agent.returncode == 0 and collector.returncode == 0
    assert (tmp_path / "live.csv").read_bytes() == (tmp_path / "trace.csv").read_bytes()

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from natpen.cli import main
from natpen.orchestrator import ResultSink, ScanRecord
from natpen.core import ip

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
HOME = str(CONFIGS / "home_nat.toml")
SCAN = str(CONFIGS / "scan.toml")


def digest(*paths):
    return [hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths]


@pytest.fixture
def scan_cfg(tmp_path):
    p = tmp_path / "scan.toml"
    p.write_text('sweep_subnet = "192.168.178.16/28"\nrng_seed = 2\n')
    return str(p)


def test_sim_scan_writes_records(tmp_path, scan_cfg, capsys):
    out = tmp_path / "out.jsonl"
    before = digest(HOME, scan_cfg)
    assert main(["sim-scan", HOME, scan_cfg, str(out)]) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert recs[0]["stage"] == "prefilter" and recs[-1]["final"]
    assert {r["private_ip"] for r in recs if r["verdict"] == "HolePresent"} == {"192.168.178.17", "192.168.178.23"}
    assert digest(HOME, scan_cfg) == before
    assert "wrote" in capsys.readouterr().out


def test_missing_scenario_exit_two_no_output(tmp_path, scan_cfg, capsys):
    out = tmp_path / "out.jsonl"
    assert main(["sim-scan", str(tmp_path / "nope.toml"), scan_cfg, str(out)]) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_bad_config_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("max_rate = 3\n")
    out = tmp_path / "out.jsonl"
    assert main(["sim-scan", HOME, str(bad), str(out)]) == 2
    assert not out.exists()


def test_invalid_override_exit_two(tmp_path, scan_cfg):
    out = tmp_path / "out.jsonl"
    assert main(["sim-scan", HOME, scan_cfg, str(out), "--rate", "0"]) == 2
    assert not out.exists()


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sim-scan", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_seed_determinism(tmp_path, scan_cfg):
    outs = []
    for name, seed in (("a", "5"), ("b", "5"), ("c", "6")):
        out = tmp_path / f"{name}.jsonl"
        assert main(["sim-scan", HOME, scan_cfg, str(out), "--seed", seed]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] != outs[2]


def test_trace_then_replay(tmp_path, scan_cfg):
    out, trace, again = tmp_path / "o.jsonl", tmp_path / "t.jsonl", tmp_path / "r.jsonl"
    assert main(["sim-scan", HOME, scan_cfg, str(out), "--trace", str(trace)]) == 0
    assert main(["replay", str(trace), scan_cfg, str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_replay_of_foreign_trace_is_runtime_error(tmp_path, scan_cfg):
    out, trace = tmp_path / "o.jsonl", tmp_path / "t.jsonl"
    assert main(["sim-scan", HOME, scan_cfg, str(out), "--trace", str(trace)]) == 0
    # a different scan seed picks different ports, so the trace no longer matches
    assert main(["replay", str(trace), scan_cfg, str(tmp_path / "r.jsonl"), "--seed", "99"]) == 1


def test_resume_flag(tmp_path, scan_cfg, capsys):
    out = tmp_path / "o.jsonl"
    assert main(["sim-scan", HOME, scan_cfg, str(out)]) == 0
    full = out.read_bytes()
    assert main(["sim-scan", HOME, scan_cfg, str(out), "--resume"]) == 0
    assert out.read_bytes() == full
    assert "1 targets already done" in capsys.readouterr().out


def test_probe_command(capsys):
    assert main(["probe", HOME, "93.184.20.14", "-n", "4", "-t", "1"]) == 0
    series = json.loads(capsys.readouterr().out)
    assert len(series["values"]) == 4


def test_detect_command(capsys):
    assert main(["detect", HOME, "93.184.20.14", "192.168.178.16/28"]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert lines[0]["schedule"]["calibrated"]
    assert {l["private_ip"] for l in lines[1:] if l["verdict"] == "HolePresent"} == {"192.168.178.17", "192.168.178.23"}


GOLDEN = """\
set          #IP    #/24    #/20    #/16
U1             3       2       1       1
U2             2       2       2       2
U1&U2          1       1       1       1
1.2.3.4: reachable 192.168.178.17"""


def test_report_golden(tmp_path, capsys):
    def write(path, outposts, hole=None):
        with ResultSink(path) as sink:
            sink.write([ScanRecord(ip(a), "outpost", "QualifiedOutpost") for a in outposts])
            if hole:
                sink.write([ScanRecord(ip(hole[0]), "detect", "HolePresent", private_ip=ip(hole[1]), final=True)])
    u1, u2 = tmp_path / "u1.jsonl", tmp_path / "u2.jsonl"
    write(u1, ["1.2.3.4", "1.2.3.9", "1.2.7.1"], ("1.2.3.4", "192.168.178.17"))
    write(u2, ["1.2.3.4", "8.8.8.8"])
    assert main(["report", str(u1), "--compare", str(u2)]) == 0
    assert capsys.readouterr().out.rstrip("\n") == GOLDEN
    assert main(["report", str(u1), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["run"] == {"ips": 3, "/24": 2, "/20": 1, "/16": 1}


def test_report_on_garbage_exit_two(tmp_path):
    p = tmp_path / "junk.jsonl"
    p.write_text("{not json\n")
    assert main(["report", str(p)]) == 2


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "natpen.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sim-scan" in res.stdout

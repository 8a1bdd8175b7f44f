import csv
import json
import os
import subprocess
import sys

from shardchain.bench.serializability import split_payment_history
from shardchain.cli import EXIT_CONFIG, EXIT_OK, EXIT_ORACLE, main
from shardchain.simnet.engine import Simulator


def run(tmp_path, *argv):
    return main(list(argv) + ["--out", str(tmp_path)])


def test_xshard_prob(tmp_path, capsys):
    assert run(tmp_path, "xshard-prob", "--args", "3", "--shards", "4") == EXIT_OK
    assert "x=3 p=0.375000 (3/8)" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "xshard_prob.csv")))
    assert [r["x"] for r in rows] == ["1", "2", "3"]
    meta = json.load(open(tmp_path / "run.json"))
    assert meta["seed"] == 0 and meta["exit"] == 0


def test_sizing_writes_table(tmp_path):
    assert run(tmp_path, "sizing", "--total", "200", "--adversary", "0.125", "--resilience", "half") == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sizing.csv")))
    assert len(rows) == 1 and int(rows[0]["n"]) >= 1


def test_bad_arguments_exit_1(tmp_path):
    assert run(tmp_path, "sizing", "--adversary", "1.5") == EXIT_CONFIG
    assert run(tmp_path, "no-such-command") == EXIT_CONFIG
    assert run(tmp_path, "reconfig-sim", "--mode", "sideways") == EXIT_CONFIG


def test_config_file_and_seed_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"args": 2, "shards": 2, "seed": 9}))
    assert run(tmp_path, "xshard-prob", "--config", str(cfg)) == EXIT_OK
    assert json.load(open(tmp_path / "run.json"))["seed"] == 9
    assert run(tmp_path, "xshard-prob", "--config", str(cfg), "--seed", "4") == EXIT_OK
    assert json.load(open(tmp_path / "run.json"))["seed"] == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(tmp_path, "xshard-prob", "--config", str(cfg)) == EXIT_CONFIG


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SHARDCHAIN_OUT", str(tmp_path / "env"))
    assert main(["xshard-prob"]) == EXIT_OK
    assert (tmp_path / "env" / "xshard_prob.csv").exists()


def test_verify_trace_detects_tampering(tmp_path):
    sim = Simulator(0)
    for i in range(4):
        sim.schedule(float(i), None, sim.record, "x", "tick", {"i": i})
    sim.run()
    good = tmp_path / "t.jsonl"
    good.write_text(sim.trace.to_jsonl())
    assert run(tmp_path, "verify-trace", str(good)) == EXIT_OK
    lines = good.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["payload"]["i"] = 7
    lines[1] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines))
    assert run(tmp_path, "verify-trace", str(bad)) == EXIT_ORACLE


def test_verify_history(tmp_path):
    h = tmp_path / "h.json"
    h.write_text(json.dumps(split_payment_history().to_json()))
    assert run(tmp_path, "verify-trace", "--history", str(h)) == EXIT_ORACLE
    h.write_text("{not json")
    assert run(tmp_path, "verify-trace", "--history", str(h)) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    env = dict(os.environ, SHARDCHAIN_OUT=str(tmp_path))
    p = subprocess.run([sys.executable, "-m", "shardchain", "xshard-prob", "--args", "1"], env=env,
                       capture_output=True, text=True)
    assert p.returncode == 0 and "x=1 p=1.000000" in p.stdout

from __future__ import annotations

import json
import subprocess
import sys

import pytest

from amlas_rl.assurance import cli, pipeline
from amlas_rl.assurance.ledger import Ledger, verify_chain

SMALL_INI = """\
# tiny plan sizes so the whole pipeline runs in seconds
[plans]
episodes = 2
internal_trials = 10
general_trials = 6
targeted_trials = 6
trace_trials = 20
operational_trials = 6
balance_resets = 1000

[ddpg]
warmup = 100
hidden = 16, 16
"""

HAND_DTMC = """\
dtmc 4 -
s 0 0 10 2 2 0 1
s 1 3 9 2 2 0 0
s 2 2 9 0 2 0 0
s 3 0 0 2 2 0 0
t 0 1 0.7
t 0 2 0.05
t 0 3 0.25
t 1 1 1
t 2 2 1
t 3 3 1
"""


@pytest.fixture(scope="module")
def small_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL_INI)
    return path


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, small_ini):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["run-all", "--config", str(small_ini), "--seed", "1", "--out", str(out)])
    return out, code


def test_run_all_populates_ledger(full_run):
    out, code = full_run
    # an untrained two-episode agent cannot meet SR1
    assert code == cli.EXIT_VERDICT
    led = Ledger.open(out)
    assert set(led.index) == {"A", "B", "C", "D", "E", "H", "L", "M", "N", "O", "P", "U", "V", "X", "Z", "AA", "EE", "DD", "FF"}
    assert led.records[-1].artefact_id == "FF"
    assert verify_chain(out).passed
    for rel in ("reports/stage4.md", "reports/stage5.md", pipeline.DTMC_FILE, pipeline.PROPERTY_FILE, pipeline.MODEL_FILE, pipeline.TRACE_FILE):
        assert (out / rel).is_file(), rel


def test_ledger_verify_command(full_run, capsys):
    out, _ = full_run
    assert cli.main(["ledger", "verify", "--out", str(out)]) == cli.EXIT_OK
    assert "ledger OK" in capsys.readouterr().out


def test_ledger_manifest_command(full_run, capsys):
    out, _ = full_run
    assert cli.main(["--out", str(out), "ledger", "manifest"]) == cli.EXIT_OK
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["artefacts"]["Z"]["parents"] == ["H", "P", "V"]


def test_report_prints_failing_verdicts(full_run, capsys):
    out, _ = full_run
    before = (out / "reports" / "stage5.md").read_bytes()
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_VERDICT
    printed = capsys.readouterr().out
    assert "SR1 [internal] FAIL" in printed
    assert (out / "reports" / "stage5.md").read_bytes() == before


def test_tampered_run_fails_verification(full_run, tmp_path):
    out, _ = full_run
    copy = tmp_path / "copy"
    subprocess.run(["cp", "-r", str(out), str(copy)], check=True)
    payload = copy / Ledger.open(copy).latest("X").payload
    payload.write_bytes(payload.read_bytes().replace(b'"goal_rate"', b'"goal_rate" ', 1))
    assert cli.main(["ledger", "verify", "--out", str(copy)]) == cli.EXIT_ERROR
    assert cli.main(["report", "--out", str(copy)]) == cli.EXIT_ERROR


def test_check_before_abstract(tmp_path, small_ini, capsys):
    args = ["--config", str(small_ini), "--out", str(tmp_path)]
    for cmd in ("scope", "plan", "train"):
        assert cli.main([cmd, *args]) == cli.EXIT_OK
    assert cli.main(["check", *args]) == cli.EXIT_ERROR
    assert "run 'abstract' first" in capsys.readouterr().err


def test_stage_gates(tmp_path, small_ini, capsys):
    args = ["--config", str(small_ini), "--out", str(tmp_path)]
    assert cli.main(["plan", *args]) == cli.EXIT_ERROR
    assert "missing input artefact(s) E" in capsys.readouterr().err
    assert cli.main(["scope", *args]) == cli.EXIT_OK
    assert cli.main(["train", *args]) == cli.EXIT_ERROR
    assert cli.main(["test", *args]) == cli.EXIT_ERROR
    assert cli.main(["deploy", *args]) == cli.EXIT_ERROR


@pytest.mark.parametrize(
    "argv",
    [["frobnicate"], ["scope", "--bogus"], [], ["ledger"], ["scope", "--seed", "x"]],
)
def test_usage_errors_exit_2(argv):
    assert cli.main(argv) == cli.EXIT_ERROR


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[plans]\nepisodez = 3\n")
    assert cli.main(["scope", "--config", str(bad), "--out", str(tmp_path / "r")]) == cli.EXIT_ERROR
    bad.write_text("[rocket]\nx = 1\n")
    assert cli.main(["scope", "--config", str(bad), "--out", str(tmp_path / "r")]) == cli.EXIT_ERROR


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(pipeline.SEED_ENV, "5")
    assert pipeline.default_seed() == 5
    monkeypatch.setenv(pipeline.SEED_ENV, "five")
    with pytest.raises(pipeline.SettingsError):
        pipeline.default_seed()


def test_config_values_reach_settings(small_ini):
    s = pipeline.load_settings(small_ini)
    assert s.plans.episodes == 2 and s.ddpg.hidden == (16, 16) and s.ddpg.warmup == 100
    assert s.world == pipeline.Settings().world


def test_standalone_check(tmp_path, capsys):
    model = tmp_path / "m.dtmc"
    model.write_text(HAND_DTMC)
    props = tmp_path / "p.pctl"
    props.write_text(pipeline.MISSION_PROPERTIES)
    assert cli.main(["check", "--model", str(model), "--props", str(props)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "C1: P>=0.6 [ F m=3 ] -> 0.7 (satisfied" in out
    props.write_text("C1: P>=0.75 [ F m=3 ]\n")
    assert cli.main(["check", "--model", str(model), "--props", str(props)]) == cli.EXIT_VERDICT
    assert "VIOLATED" in capsys.readouterr().out


def test_standalone_check_errors(tmp_path):
    model = tmp_path / "m.dtmc"
    model.write_text(HAND_DTMC.replace("t 0 3 0.25", "t 0 3 0.2"))
    props = tmp_path / "p.pctl"
    props.write_text("C1: P>=0.6 [ F m=3 ]\n")
    assert cli.main(["check", "--model", str(model), "--props", str(props)]) == cli.EXIT_ERROR
    model.write_text(HAND_DTMC)
    props.write_text("C1: P>=0.6 [ F m= ]\n")
    assert cli.main(["check", "--model", str(model), "--props", str(props)]) == cli.EXIT_ERROR
    assert cli.main(["check", "--model", str(model)]) == cli.EXIT_ERROR


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "amlas_rl.assurance.cli", "scope", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert verify_chain(tmp_path).n_records == 5

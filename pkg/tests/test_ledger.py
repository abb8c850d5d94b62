from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from amlas_rl import env
from amlas_rl.assurance import erroneous, ledger as lg, report
from amlas_rl.assurance.erroneous import Violation, log_erroneous
from amlas_rl.assurance.ledger import DependencyError, IntegrityError, Ledger, record_artifact, record_bytes, verify_chain
from amlas_rl.env import WorldConfig
from conftest import make_state, zero_policy


def commit_scope(led: Ledger) -> None:
    for aid in ("A", "B", "C", "D"):
        record_bytes(led, aid, f"fixture {aid}\n".encode(), kind="fixture")
    record_bytes(led, "E", b"allocated\n", kind="fixture")


def forge(led: Ledger, artefact_id: str, data: bytes) -> None:
    """Append a well-hashed record that skips the dependency gate."""
    payload = led.root / lg.ARTIFACTS_DIR / f"{artefact_id}-forged" / "payload"
    payload.parent.mkdir(parents=True)
    payload.write_bytes(data)
    stage, label = lg.ARTEFACTS[artefact_id]
    rec = lg.ArtifactRecord(
        seq=len(led.records),
        artefact_id=artefact_id,
        stage=stage,
        label=label,
        version=1,
        payload=payload.relative_to(led.root).as_posix(),
        sha256=lg.sha256_file(payload),
        created_at="2000-01-01T00:00:00Z",
        parents={},
        kind="evidence",
        prev=led.head(),
    )
    rec = dataclasses.replace(rec, record_hash=rec.compute_hash())
    with open(led.path, "a") as fh:
        fh.write(rec.to_line() + "\n")
    led.records.append(rec)
    led.index[artefact_id] = rec


# --- artefact table ----------------------------------------------------------


def test_artefact_table_stages():
    stages = {aid: s for aid, (s, _) in lg.ARTEFACTS.items()}
    assert {a for a, s in stages.items() if s == 1} == {"A", "B", "C", "D", "E"}
    assert {a for a, s in stages.items() if s == 2} == {"H"}
    assert {a for a, s in stages.items() if s == 3} == {"L", "M", "N", "O", "P"}
    assert {a for a, s in stages.items() if s == 4} == {"U", "V", "X"}
    assert {a for a, s in stages.items() if s == 5} == {"Z", "AA"}
    assert {a for a, s in stages.items() if s == 6} == {"DD", "EE", "FF"}
    assert lg.required_inputs("H") == ("E",)
    assert set(lg.required_inputs("Z")) == {"H", "P", "V"}


@pytest.mark.parametrize("aid", ["F", "G", "I", "Q", "W", "Y", "BB", "CC"])
def test_reserved_letters_are_rejected(tmp_path, aid):
    led = Ledger.open(tmp_path)
    (tmp_path / "x").write_bytes(b"x")
    with pytest.raises(lg.UnknownArtefactError):
        record_artifact(led, aid, 1, tmp_path / "x")


# --- recording -----------------------------------------------------------------


def test_record_h_after_e(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    rec = record_bytes(led, "H", b"requirements\n")
    assert rec.parents == {"E": led.latest("E").sha256}
    assert rec.stage == 2
    assert (tmp_path / rec.payload).read_bytes() == b"requirements\n"


def test_record_h_without_e(tmp_path):
    led = Ledger.open(tmp_path)
    with pytest.raises(DependencyError) as exc:
        record_bytes(led, "H", b"requirements\n")
    assert exc.value.missing == ["E"]
    assert "E" in str(exc.value)
    assert not led.path.exists()


def test_stage_five_needs_plan(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    record_bytes(led, "H", b"h")
    record_bytes(led, "N", b"n")
    record_bytes(led, "O", b"o")
    record_bytes(led, "V", b"model")
    with pytest.raises(DependencyError) as exc:
        record_bytes(led, "Z", b"results")
    assert exc.value.missing == ["P"]


def test_wrong_stage_rejected(tmp_path):
    led = Ledger.open(tmp_path)
    (tmp_path / "x").write_bytes(b"x")
    with pytest.raises(lg.LedgerError, match="stage 1"):
        record_artifact(led, "A", 2, tmp_path / "x")


def test_missing_payload_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        record_artifact(Ledger.open(tmp_path), "A", 1, tmp_path / "nope")


def test_same_payload_twice_gives_new_version(tmp_path):
    led = Ledger.open(tmp_path)
    a = record_bytes(led, "A", b"same")
    b = record_bytes(led, "A", b"same")
    assert a.sha256 == b.sha256 and a.payload == b.payload
    assert (a.version, b.version) == (1, 2)
    assert b.prev == a.record_hash
    assert verify_chain(tmp_path).passed


def test_payload_slot_with_other_bytes_is_integrity_error(tmp_path):
    led = Ledger.open(tmp_path)
    rec = record_bytes(led, "A", b"original")
    (tmp_path / rec.payload).write_bytes(b"evil")
    with pytest.raises(IntegrityError):
        record_bytes(led, "A", b"original")


def test_ledger_reopens_identically(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    again = Ledger.open(tmp_path)
    assert again.records == led.records
    assert again.head() == led.head()
    assert again.manifest() == led.manifest()
    assert list(again.manifest()["artefacts"]) == ["A", "B", "C", "D", "E"]


# --- verification ---------------------------------------------------------------


def test_untouched_ledger_passes(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    rep = verify_chain(tmp_path)
    assert rep.passed and rep.n_records == 5
    assert "5 records" in rep.summary()


def test_edited_payload_is_flagged(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    (tmp_path / led.latest("C").payload).write_bytes(b"changed later\n")
    rep = verify_chain(tmp_path)
    assert not rep.passed
    assert rep.first_failure.artefact_id == "C"
    assert "hash mismatch" in rep.first_failure.problem
    with pytest.raises(IntegrityError):
        led.read_payload("C")


def test_edited_record_is_flagged(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    lines = led.path.read_text().splitlines()
    lines[1] = lines[1].replace('"version":1', '"version":7')
    led.path.write_text("\n".join(lines) + "\n")
    rep = verify_chain(tmp_path)
    assert rep.first_failure.seq == 1
    assert "record hash" in rep.first_failure.problem


def test_dropped_record_breaks_chain(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    lines = led.path.read_text().splitlines()
    del lines[2]
    led.path.write_text("\n".join(lines) + "\n")
    problems = [i.problem for i in verify_chain(tmp_path).issues]
    assert any("chain link broken" in p for p in problems)


def test_stage_five_gap_flagged(tmp_path):
    led = Ledger.open(tmp_path)
    commit_scope(led)
    record_bytes(led, "H", b"h")
    record_bytes(led, "N", b"n")
    record_bytes(led, "O", b"o")
    record_bytes(led, "V", b"model")
    forge(led, "Z", b"results")
    rep = verify_chain(tmp_path)
    assert not rep.passed
    assert rep.first_failure.artefact_id == "Z"
    assert "dependency gap: P" in rep.first_failure.problem


def test_missing_ledger_file(tmp_path):
    rep = verify_chain(tmp_path)
    assert not rep.passed and "not found" in rep.summary()


# --- erroneous-behaviour log -------------------------------------------------------


def collision_trace():
    # straight drive collides on step 37: 0.1 + 0.05 * 36.5 from the start
    s = make_state(position=(0.0, 0.0), heading=0.0, goal=(-1.5, 1.5), obstacle=(1.925, 0.0))
    return env.run_from(s, lambda o: (1.0, 1.0), seed=9)


def test_collision_window():
    trace = collision_trace()
    assert trace.n_steps == 37
    (entry,) = log_erroneous(trace, k=10, model_hash="abc")
    assert entry.violation is Violation.COLLISION
    assert entry.step == 37
    assert [w.t for w in entry.window] == list(range(27, 37))
    assert entry.window[-1].action == pytest.approx((1.0, 1.0))
    np.testing.assert_array_equal(entry.window[0].observation, trace.observation(27))
    assert entry.model_hash == "abc" and entry.seed == 9


def test_early_violation_truncates_window():
    s = make_state(position=(0.0, 0.0), heading=0.0, goal=(-1.5, 1.5), obstacle=(0.22, 0.0))
    trace = env.run_from(s, lambda o: (1.0, 1.0))
    (entry,) = log_erroneous(trace, k=10)
    assert entry.step == 3
    assert [w.t for w in entry.window] == [0, 1, 2]


def test_clean_success_has_no_entries():
    s = make_state(position=(0.0, 0.0), heading=0.0, goal=(0.5, 0.0))
    trace = env.run_from(s, lambda o: (1.0, 1.0))
    assert trace.termination_cause is env.TerminationCause.GOAL
    assert log_erroneous(trace) == []


def test_unsafe_time_fires_when_limit_first_exceeded():
    trace = env.run_from(make_state(zones=[(0.0, 0.1)]), zero_policy)
    found = dict(erroneous.violation_steps(trace))
    # unsafe time counts 1, 2, ... from the first step; 21 > 20 at step 21
    assert found[Violation.UNSAFE_TIME_EXCEEDED] == int(np.flatnonzero(trace.unsafe_time > 20)[0])
    assert trace.unsafe_time[found[Violation.UNSAFE_TIME_EXCEEDED] - 1] == 20
    assert found[Violation.ENERGY_DEPLETED] == 250
    entries = log_erroneous(trace, k=4)
    assert [e.violation for e in entries] == [Violation.UNSAFE_TIME_EXCEEDED, Violation.ENERGY_DEPLETED]
    assert all(len(e.window) <= 4 for e in entries)
    json.loads(erroneous.erroneous_log_json(entries))


def test_zero_window():
    (entry,) = log_erroneous(collision_trace(), k=0)
    assert entry.window == ()
    with pytest.raises(ValueError):
        log_erroneous(collision_trace(), k=-1)


# --- reports ----------------------------------------------------------------------


def stage_payloads(goal=0.576, unsafe=23.48):
    agg = {"n_trials": 250, "goal_rate": goal, "mean_energy_on_success": 150.0, "mean_unsafe_time": unsafe, "collision_rate": 0.076}
    verdicts = [
        {"id": "SR2", "regime": "targeted", "measured": unsafe, "threshold": 20.0, "direction": "<=", "passed": unsafe <= 20, "exceedance_rate": 0.4}
    ]
    x = {"model_sha256": "m", "reports": {"internal": {**agg, "n_trials": 1000}}, "baseline": {"goal_rate": 0.01}, "verdicts": verdicts}
    z = {
        "model_sha256": "m",
        "reports": {"general": {**agg, "n_trials": 500}, "targeted": agg},
        "model_checking": {
            "goal_probability": 0.604,
            "collision_probability": 0.058,
            "expected_unsafe_time": 17.52,
            "n_traces": 5000,
            "properties": [{"name": "R0", "formula": 'R{"unsafe"}=? [ F m=2 | m=3 | e=0 ]', "value": 17.52, "verdict": None, "method": "gaussian-elimination"}],
        },
        "verdicts": verdicts,
    }
    return x, z


def ledger_with_results(root, x, z) -> Ledger:
    led = Ledger.open(root)
    commit_scope(led)
    for aid in ("H", "N", "O", "P", "V"):
        record_bytes(led, aid, aid.encode())
    record_bytes(led, "X", json.dumps(x).encode())
    record_bytes(led, "Z", json.dumps(z).encode())
    return led


def test_reports_need_their_evidence(tmp_path):
    led = Ledger.open(tmp_path)
    with pytest.raises(DependencyError):
        report.stage4_report(led)
    with pytest.raises(DependencyError):
        report.stage5_report(led)


def test_stage5_table_shape_and_verdict(tmp_path):
    led = ledger_with_results(tmp_path, *stage_payloads())
    text = report.stage5_report(led)
    assert "| Description | General | Targeted | Model checking |" in text
    row = next(line for line in text.splitlines() if line.startswith("| Mean unsafe-zone time"))
    assert row.count("|") == 5
    assert "23.48" in row and "17.52" in row
    assert "| SR2 | targeted | 23.48 | <= 20 | FAIL | 40.00% |" in text
    # the reward formula's bars are escaped inside the table
    assert "m=2 \\| m=3 \\| e=0" in text
    assert [v["id"] for v in report.failing_verdicts(led)] == ["SR2", "SR2"]


def test_reports_are_byte_identical(tmp_path):
    a = ledger_with_results(tmp_path / "a", *stage_payloads())
    docs_a = report.generate_report(a, tmp_path / "a" / "reports")
    docs_b = report.generate_report(Ledger.open(tmp_path / "a"))
    assert docs_a == docs_b
    assert (tmp_path / "a" / "reports" / "stage4.md").read_text() == docs_a["stage4.md"]
    assert "Goal reached with e>0 (%) | 57.60%" in docs_a["stage4.md"]

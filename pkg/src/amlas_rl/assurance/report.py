"""Markdown result tables for the model-learning and verification stages.

Reports are rendered only from committed ledger payloads (X and Z), so the
same ledger always produces byte-identical documents.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from amlas_rl.assurance.ledger import DependencyError, Ledger

ROWS = (
    ("goal_rate", "Goal reached with e>0 (%)", "pct"),
    ("mean_energy_on_success", "Mean energy remaining on success", "num"),
    ("mean_unsafe_time", "Mean unsafe-zone time per mission (steps)", "num"),
    ("collision_rate", "Collision with obstacle (%)", "pct"),
)

# verification tables drop the energy row; model checking has no energy figure
STAGE5_ROWS = tuple(r for r in ROWS if r[0] != "mean_energy_on_success")


def _fmt(value, style: str) -> str:
    if value is None:
        return "n/a"
    value = float(value)
    if math.isinf(value):
        return "inf"
    return f"{100 * value:.2f}%" if style == "pct" else f"{value:.2f}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(c.replace("|", "\\|") for c in r) + " |" for r in rows]
    return lines


def _verdict_lines(verdicts: list[dict]) -> list[str]:
    rows = []
    for v in verdicts:
        extra = f"{100 * v['exceedance_rate']:.2f}%" if v.get("exceedance_rate") is not None else ""
        rows.append(
            [
                v["id"],
                v["regime"],
                f"{v['measured']:.4g}",
                f"{v['direction']} {v['threshold']:g}",
                "PASS" if v["passed"] else "FAIL",
                extra,
            ]
        )
    return _table(["Requirement", "Regime", "Measured", "Threshold", "Verdict", "Trials over unsafe limit"], rows)


def _load(ledger: Ledger, artefact_id: str, report: str) -> dict:
    if artefact_id not in ledger:
        raise DependencyError(report, [artefact_id])
    return json.loads(ledger.read_payload(artefact_id))


def stage4_report(ledger: Ledger) -> str:
    x = _load(ledger, "X", "stage-4 report")
    internal = x["reports"]["internal"]
    lines = [
        "# Stage 4: internal test results",
        "",
        f"Model sha256: `{x.get('model_sha256', 'n/a')}`  ",
        f"Trials: {internal['n_trials']}  ",
        f"Evidence: X `{ledger.latest('X').sha256[:16]}`",
        "",
    ]
    lines += _table(["Description", "Internal test"], [[label, _fmt(internal.get(key), style)] for key, label, style in ROWS])
    if "baseline" in x:
        lines += ["", f"Uniform-random baseline goal rate on the same scenarios: {_fmt(x['baseline']['goal_rate'], 'pct')}"]
    lines += ["", "## Requirement verdicts", ""] + _verdict_lines(x["verdicts"])
    return "\n".join(lines) + "\n"


def stage5_report(ledger: Ledger) -> str:
    z = _load(ledger, "Z", "stage-5 report")
    general, targeted = z["reports"]["general"], z["reports"]["targeted"]
    mc = z["model_checking"]
    mc_values = {"goal_rate": mc["goal_probability"], "mean_unsafe_time": mc["expected_unsafe_time"], "collision_rate": mc["collision_probability"]}
    rows = [[label, _fmt(general.get(key), style), _fmt(targeted.get(key), style), _fmt(mc_values[key], style)] for key, label, style in STAGE5_ROWS]
    lines = [
        "# Stage 5: verification results",
        "",
        f"Model sha256: `{z.get('model_sha256', 'n/a')}`  ",
        f"Trials: general {general['n_trials']}, targeted {targeted['n_trials']}, model-checking traces {mc.get('n_traces', 'n/a')}  ",
        f"Evidence: Z `{ledger.latest('Z').sha256[:16]}`",
        "",
    ]
    lines += _table(["Description", "General", "Targeted", "Model checking"], rows)
    lines += ["", "## Properties", ""]
    lines += _table(
        ["Name", "Property", "Value", "Verdict", "Method"],
        [[p["name"], f"`{p['formula']}`", _fmt(p["value"], "num") if p["formula"].startswith("R") else f"{p['value']:.4f}", {True: "PASS", False: "FAIL", None: "query"}[p["verdict"]], p["method"]] for p in mc["properties"]],
    )
    lines += ["", "## Requirement verdicts", ""] + _verdict_lines(z["verdicts"])
    return "\n".join(lines) + "\n"


def failing_verdicts(ledger: Ledger) -> list[dict]:
    out = []
    for aid in ("X", "Z"):
        if aid in ledger:
            out += [v for v in json.loads(ledger.read_payload(aid))["verdicts"] if not v["passed"]]
    return out


def generate_report(ledger: Ledger, out_dir=None) -> dict[str, str]:
    """Render ``stage4.md`` and ``stage5.md``; both need their evidence committed."""
    docs = {"stage4.md": stage4_report(ledger), "stage5.md": stage5_report(ledger)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in docs.items():
            (out / name).write_text(text, encoding="utf-8")
    return docs

"""Stage runners behind the command-line interface.

Every runner works on a :class:`Run` (one run directory plus settings),
checks its inputs through the ledger, and commits its outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from amlas_rl import abstraction, env, plans
from amlas_rl.agent import ActorPolicy, DdpgHyperparams, load_model, model_digest, save_model
from amlas_rl.assurance.erroneous import DEFAULT_WINDOW, erroneous_log_json, log_erroneous
from amlas_rl.assurance.ledger import DependencyError, Ledger, record_bytes, sha256_file
from amlas_rl.assurance.report import failing_verdicts, generate_report
from amlas_rl.pctl import MISSION_PROPERTIES, evaluate, parse_properties

log = logging.getLogger(__name__)

SEED_ENV = "AMLAS_RL_SEED"

MODEL_FILE = "models/actor.model"
TRACE_FILE = "traces/traces.jsonl"
DTMC_FILE = "dtmc/model.dtmc"
PROPERTY_FILE = "properties/mission.pctl"
GENERAL_FILE = "reports/general.json"
TARGETED_FILE = "reports/targeted.json"


@dataclass(frozen=True)
class PlanSettings:
    episodes: int = 500
    internal_trials: int = 1000
    general_trials: int = 500
    targeted_trials: int = 250
    trace_trials: int = 5000
    operational_trials: int = 200
    balance_resets: int = 10_000
    erroneous_window: int = DEFAULT_WINDOW


@dataclass(frozen=True)
class Settings:
    world: env.WorldConfig = field(default_factory=env.WorldConfig)
    ddpg: DdpgHyperparams = field(default_factory=DdpgHyperparams)
    plans: PlanSettings = field(default_factory=PlanSettings)
    abstraction: abstraction.AbstractionConfig = field(default_factory=abstraction.AbstractionConfig)

    def to_dict(self) -> dict:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in ("world", "ddpg", "plans", "abstraction")}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class SettingsError(ValueError):
    pass


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(x) for x in raw.replace(",", " ").split())
    return raw


def load_settings(path=None) -> Settings:
    """Read an INI file with optional ``[world]``, ``[ddpg]``, ``[plans]``
    and ``[abstraction]`` sections; unknown sections or keys are errors."""
    base = Settings()
    if path is None:
        return base
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise SettingsError(f"cannot read config {path}: {exc}") from None
    parts = {}
    for section in parser.sections():
        if section not in ("world", "ddpg", "plans", "abstraction"):
            raise SettingsError(f"unknown config section [{section}]")
        current = getattr(base, section)
        defaults = dataclasses.asdict(current)
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise SettingsError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _convert(raw, getattr(current, key))
            except ValueError as exc:
                raise SettingsError(f"[{section}] {key}: {exc}") from None
        try:
            parts[section] = dataclasses.replace(current, **values)
        except ValueError as exc:
            raise SettingsError(f"[{section}]: {exc}") from None
    return dataclasses.replace(base, **parts)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SettingsError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


@dataclass
class Run:
    root: Path
    settings: Settings
    seed: int
    ledger: Ledger = field(init=False)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.ledger = Ledger.open(self.root)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require_file(self, rel: str, step: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise DependencyError(step, [f"{rel} (run '{producer}' first)"])
        return p

    def require(self, step: str, *ids: str) -> None:
        missing = [i for i in ids if i not in self.ledger]
        if missing:
            raise DependencyError(step, missing)

    def commit(self, artefact_id: str, payload, parents=None, kind: str = "evidence"):
        data = payload if isinstance(payload, bytes) else _dumps(payload)
        rec = record_bytes(self.ledger, artefact_id, data, parents, kind)
        log.info("committed %s v%d (%s)", artefact_id, rec.version, rec.sha256[:16])
        return rec

    def eval_world(self) -> env.WorldConfig:
        return plans.evaluation_config(self.settings.world)

    def load_actor(self):
        self.require("model", "V")
        return load_model(self.ledger.payload_path("V"))


# --- stage 1 ------------------------------------------------------------------

_SCOPE_FIXTURES = {
    "A": "System safety requirements for a goods-delivery vehicle: the vehicle shall deliver its load without "
    "collision and without prolonged exposure of the load to hazardous areas.\n",
    "B": "Operating environment: a bounded square arena containing one goal region, one static obstacle and a "
    "number of circular unsafe zones, all placed uniformly at random.\n",
    "C": "System: differential-drive ground vehicle with a finite energy budget and a 48-beam pseudo-lidar.\n",
    "D": "RL component: deterministic actor network mapping pseudo-lidar readings to two wheel-speed commands, "
    "trained with DDPG.\n",
}


def stage_scope(run: Run) -> None:
    """Commit the scoping fixtures A-D and the allocated requirements E."""
    for aid, text in _SCOPE_FIXTURES.items():
        run.commit(aid, text.encode(), kind="fixture")
    run.commit(
        "E",
        {
            "allocated_requirements": [
                "reach the goal with energy remaining in most missions",
                "limit cumulative time spent in unsafe zones per mission",
                "rarely collide with the obstacle",
            ]
        },
        kind="fixture",
    )


# --- stages 2 and 3 -----------------------------------------------------------


def safety_requirements() -> dict:
    return {
        "SR1": {"metric": "goal_rate", "direction": ">=", "threshold": plans.SR1_MIN_GOAL_RATE},
        "SR2": {"metric": "mean_unsafe_time", "direction": "<=", "threshold": plans.SR2_MAX_UNSAFE_TIME},
        "SR3": {"metric": "collision_rate", "direction": "<=", "threshold": plans.SR3_MAX_COLLISION_RATE},
    }


def stage_plan(run: Run) -> bool:
    """Commit H, then the data requirements and plans L-P. Returns the balance verdict."""
    run.require("plan", "E")
    s = run.settings
    run.commit("H", safety_requirements())
    balance = plans.audit_scenario_balance(s.world, s.plans.balance_resets, run.seed)
    run.commit("L", {"placement": "uniform over the arena for every object class", "balance_audit": balance.to_dict()})
    run.commit("M", b"Justification: uniform random placement covers the arena; see the balance audit in L.\n", kind="fixture")
    run.commit(
        "N",
        {
            "episodes": s.plans.episodes,
            "seed": run.seed,
            "seed_base": plans.plan_base("training", run.seed),
            "world": s.world.to_dict(),
            "ddpg": _jsonable(dataclasses.asdict(s.ddpg)),
        },
    )
    run.commit("O", {"trials": s.plans.internal_trials, "seed_base": plans.plan_base("internal", run.seed), "spawn": "random"})
    props_path = run.path(PROPERTY_FILE)
    props_path.write_text(MISSION_PROPERTIES, encoding="utf-8")
    run.commit(
        "P",
        {
            "general": {"trials": s.plans.general_trials, "seed_base": plans.plan_base("general", run.seed), "spawn": "random"},
            "targeted": {
                "trials": s.plans.targeted_trials,
                "seed_base": plans.plan_base("targeted", run.seed),
                "spawn": plans.TARGETED_SPAWN.to_dict(),
            },
            "model_checking": {
                "traces": s.plans.trace_trials,
                "seed_base": plans.plan_base("traces", run.seed),
                "abstraction": _jsonable(dataclasses.asdict(s.abstraction)),
                "properties": MISSION_PROPERTIES,
            },
        },
    )
    if not balance.passed:
        log.warning("scenario balance audit flagged cells: %s", balance.flagged_cells)
    return balance.passed


# --- stage 4 ------------------------------------------------------------------


def stage_train(run: Run) -> None:
    run.require("train", "H", "N", "O")
    s = run.settings

    def progress(ep: int, entry: dict) -> None:
        if (ep + 1) % 50 == 0:
            log.info("episode %d: reward %.2f, %s", ep + 1, entry["total_reward"], entry["termination_cause"])

    result = plans.train(s.world, s.ddpg, s.plans.episodes, run.seed, progress)
    model_path = save_model(result.actor, run.path(MODEL_FILE))
    run.commit("U", result.log.to_json().encode() + b"\n")
    run.commit("V", model_path.read_bytes())


def _verdict_dicts(reports: dict) -> list[dict]:
    return [v.to_dict() for v in plans.evaluate_requirements(reports)]


def stage_test(run: Run) -> bool:
    run.require("test", "H", "N", "O", "V")
    s = run.settings
    actor = run.load_actor()
    internal = plans.internal_test(actor, s.world, s.plans.internal_trials, run.seed, s.ddpg)
    baseline = plans.random_baseline(s.world, s.plans.internal_trials, run.seed)
    verdicts = _verdict_dicts({"internal": internal})
    run.commit(
        "X",
        {
            "model_sha256": model_digest(actor),
            "reports": {"internal": json.loads(internal.to_json())},
            "baseline": baseline.metrics(),
            "verdicts": verdicts,
        },
        parents=["V"],
    )
    return all(v["passed"] for v in verdicts)


# --- stage 5 ------------------------------------------------------------------


def stage_verify(run: Run) -> None:
    run.require("verify", "H", "P", "V")
    s = run.settings
    actor = run.load_actor()
    plans.verify_general(actor, s.world, s.plans.general_trials, run.seed, s.ddpg).write(run.path(GENERAL_FILE))
    plans.verify_targeted(actor, s.world, s.plans.targeted_trials, run.seed, s.ddpg).write(run.path(TARGETED_FILE))


def stage_traces(run: Run) -> None:
    run.require("traces", "H", "P", "V")
    plans.collect_traces(run.load_actor(), run.settings.world, run.settings.plans.trace_trials, run.seed, run.path(TRACE_FILE))


def stage_abstract(run: Run) -> None:
    run.require("abstract", "P")
    path = run.require_file(TRACE_FILE, "abstract", "traces")
    traces = env.read_traces(path, run.eval_world())
    dtmc = abstraction.estimate_dtmc(traces, run.settings.abstraction)
    abstraction.export_dtmc(dtmc, run.path(DTMC_FILE))


def _count_traces(path: Path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(line.startswith('{"type": "trace"') for line in fh)


def check_properties(dtmc_path, props_text: str) -> list[dict]:
    dtmc = abstraction.import_dtmc(dtmc_path)
    out = []
    for prop in parse_properties(props_text):
        res = evaluate(dtmc, prop.formula)
        out.append(
            {"name": prop.name, "formula": res.formula, "value": res.value, "verdict": res.verdict, "method": res.method, "sweeps": res.sweeps}
        )
    return out


def stage_check(run: Run) -> bool:
    """Model-check the estimated chain and commit Z and AA."""
    run.require("check", "H", "P", "V")
    dtmc_path = run.require_file(DTMC_FILE, "check", "abstract")
    general_path = run.require_file(GENERAL_FILE, "check", "verify")
    targeted_path = run.require_file(TARGETED_FILE, "check", "verify")
    props_path = run.require_file(PROPERTY_FILE, "check", "plan")
    results = check_properties(dtmc_path, props_path.read_text(encoding="utf-8"))
    by_name = {r["name"]: r for r in results}
    general = plans.AggregateReport.from_json(general_path.read_text(encoding="utf-8"))
    targeted = plans.AggregateReport.from_json(targeted_path.read_text(encoding="utf-8"))
    mc_metrics = {
        "goal_rate": by_name["C1"]["value"],
        "collision_rate": by_name["C2"]["value"],
        "mean_unsafe_time": by_name["R0"]["value"],
    }
    verdicts = _verdict_dicts({"general": general, "targeted": targeted, "model_checking": mc_metrics})
    actor = run.load_actor()
    trace_path = run.root / TRACE_FILE
    n_traces = _count_traces(trace_path) if trace_path.exists() else None
    z = {
        "model_sha256": model_digest(actor),
        "reports": {"general": json.loads(general.to_json()), "targeted": json.loads(targeted.to_json())},
        "model_checking": {
            "goal_probability": mc_metrics["goal_rate"],
            "collision_probability": mc_metrics["collision_rate"],
            "expected_unsafe_time": mc_metrics["mean_unsafe_time"],
            "n_traces": n_traces,
            "properties": results,
        },
        "verdicts": verdicts,
    }
    run.commit("Z", z, parents=["V"])
    files = {rel: sha256_file(run.root / rel) for rel in (TRACE_FILE, DTMC_FILE, PROPERTY_FILE, GENERAL_FILE, TARGETED_FILE) if (run.root / rel).exists()}
    run.commit("AA", {"files": files, "checks": results, "abstraction": _jsonable(dataclasses.asdict(run.settings.abstraction))}, parents=["V"])
    return all(v["passed"] for v in verdicts)


# --- stage 6 ------------------------------------------------------------------


def stage_deploy(run: Run) -> bool:
    """Operational scenarios (EE), their erroneous-behaviour log (DD) and results (FF)."""
    run.require("deploy", "A", "B", "C", "V")
    s = run.settings
    base = plans.plan_base("operational", run.seed)
    n = s.plans.operational_trials
    run.commit("EE", {"trials": n, "seed_base": base, "spawn": "random", "world": s.world.to_dict()})
    actor = run.load_actor()
    digest = model_digest(actor)
    policy = ActorPolicy(actor)
    records, traces = plans.run_trials(lambda _seed: policy, s.world, range(base, base + n), env.RandomSpawn(), s.ddpg, keep_traces=True)
    entries = [e for tr in traces for e in log_erroneous(tr, s.plans.erroneous_window, digest)]
    run.commit("DD", erroneous_log_json(entries).encode() + b"\n")
    report = plans.AggregateReport.from_records(records, "operational")
    verdicts = _verdict_dicts({"operational": report})
    run.commit("FF", {"model_sha256": digest, "report": report.metrics(), "n_trials": n, "erroneous_entries": len(entries), "verdicts": verdicts})
    return all(v["passed"] for v in verdicts)


# --- reporting ------------------------------------------------------------------


def stage_report(run: Run) -> list[dict]:
    """Write the stage-4/5 markdown reports; returns the failing verdicts."""
    generate_report(run.ledger, run.root / "reports")
    return failing_verdicts(run.ledger)


def run_all(run: Run) -> list[dict]:
    stage_scope(run)
    stage_plan(run)
    stage_train(run)
    stage_test(run)
    stage_verify(run)
    stage_traces(run)
    stage_abstract(run)
    stage_check(run)
    stage_deploy(run)
    return stage_report(run)

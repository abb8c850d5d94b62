"""Training, internal-test and verification plans, their aggregate
metrics, requirement verdicts, and the scenario-balance audit.

Seed policy: trial ``i`` of a plan uses seed ``plan_base(plan, seed) + i``.
Plan bases are spaced :data:`PLAN_STRIDE` apart so development and
verification never share a scenario.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from amlas_rl import env
from amlas_rl.agent import (
    ActorPolicy,
    DdpgAgent,
    DdpgHyperparams,
    Mlp,
    ReplayBuffer,
    TrainingDivergedError,
    UniformRandomPolicy,
    ddpg_update,
    reward,
    select_action,
)
from amlas_rl.env import MissionMode, NearObstacle, RandomSpawn, TerminationCause, WorldConfig

log = logging.getLogger(__name__)

PLAN_STRIDE = 1_000_000
_PLAN_INDEX = {"training": 0, "internal": 1, "general": 2, "targeted": 3, "traces": 4, "operational": 5, "baseline": 6}

SR1_MIN_GOAL_RATE = 0.6
SR2_MAX_UNSAFE_TIME = 20.0
SR3_MAX_COLLISION_RATE = 0.1

TARGETED_SPAWN = NearObstacle(0.2, 0.3)


class UsageError(ValueError):
    pass


class IncompleteEvidenceError(KeyError):
    pass


def plan_base(plan: str, seed: int = 0) -> int:
    """First scenario seed of ``plan`` for run seed ``seed``."""
    return (int(seed) * len(_PLAN_INDEX) + _PLAN_INDEX[plan]) * PLAN_STRIDE


def evaluation_config(config: WorldConfig) -> WorldConfig:
    """Test and verification trials stop on an empty battery."""
    return dataclasses.replace(config, energy_terminates=True)


def training_config(config: WorldConfig) -> WorldConfig:
    """Training episodes may run past the energy budget up to the step cap."""
    return dataclasses.replace(config, energy_terminates=False)


# --- records ----------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    success: bool
    steps: int
    energy_remaining: int
    unsafe_time: int
    collided: bool
    total_reward: float
    termination_cause: str

    @classmethod
    def from_trace(cls, trace: env.EpisodeTrace, hp: DdpgHyperparams | None = None) -> "TrialRecord":
        hp = hp or DdpgHyperparams()
        final = trace.final_mode
        energy_left = int(trace.energy[-1])
        total = 0.0
        for t in range(trace.n_steps):
            ri = trace.reward_inputs(t)
            total += reward(ri.d_prev, ri.d_now, ri.in_unsafe, ri.collided, hp)
        return cls(
            seed=int(trace.seed),
            success=final is MissionMode.GOAL_REACHED and energy_left > 0,
            steps=trace.n_steps,
            energy_remaining=energy_left,
            unsafe_time=int(trace.unsafe_time[-1]),
            collided=final is MissionMode.COLLIDED,
            total_reward=total,
            termination_cause=trace.termination_cause.value,
        )


@dataclass(frozen=True)
class AggregateReport:
    regime: str
    n_trials: int
    goal_rate: float
    mean_energy_on_success: float | None
    mean_unsafe_time: float
    collision_rate: float
    unsafe_exceedance_rate: float
    records: tuple[TrialRecord, ...] = field(repr=False, default=())

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], regime: str) -> "AggregateReport":
        n = len(records)
        if n == 0:
            raise UsageError("cannot aggregate zero trials")
        wins = [r for r in records if r.success]
        return cls(
            regime=regime,
            n_trials=n,
            goal_rate=len(wins) / n,
            mean_energy_on_success=(sum(r.energy_remaining for r in wins) / len(wins)) if wins else None,
            mean_unsafe_time=sum(r.unsafe_time for r in records) / n,
            collision_rate=sum(r.collided for r in records) / n,
            unsafe_exceedance_rate=sum(r.unsafe_time > SR2_MAX_UNSAFE_TIME for r in records) / n,
            records=tuple(records),
        )

    def metrics(self) -> dict[str, float | None]:
        return {
            "goal_rate": self.goal_rate,
            "mean_energy_on_success": self.mean_energy_on_success,
            "mean_unsafe_time": self.mean_unsafe_time,
            "collision_rate": self.collision_rate,
            "unsafe_exceedance_rate": self.unsafe_exceedance_rate,
        }

    def to_json(self) -> str:
        data = {"regime": self.regime, "n_trials": self.n_trials, **self.metrics()}
        data["records"] = [dataclasses.asdict(r) for r in self.records]
        return json.dumps(data, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AggregateReport":
        data = json.loads(text)
        records = tuple(TrialRecord(**r) for r in data.pop("records", []))
        return cls(records=records, **data)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


@dataclass
class DevelopmentLog:
    """Per-episode training record (append-only)."""

    hyperparams: dict
    reward_function: str
    seed: int
    episodes: list[dict] = field(default_factory=list)

    def append(self, entry: dict) -> None:
        self.episodes.append(dict(entry))

    def __len__(self) -> int:
        return len(self.episodes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DevelopmentLog":
        return cls(**json.loads(text))


REWARD_DESCRIPTION = (
    "R_t = (D_{t-1} - D_t) * beta + c_t; D = distance to goal; "
    "c_t = -c_collision if d(o) < obstacle radius, else -c_unsafe if inside an unsafe zone, else 0"
)


@dataclass
class TrainResult:
    agent: DdpgAgent
    log: DevelopmentLog

    @property
    def actor(self) -> Mlp:
        return self.agent.actor


# --- plans ------------------------------------------------------------------


def train(
    config: WorldConfig,
    hp: DdpgHyperparams,
    n_episodes: int = 500,
    seed: int = 0,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run DDPG for ``n_episodes`` random-placement episodes."""
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    cfg = training_config(config)
    rng = np.random.default_rng(seed)
    agent = DdpgAgent.create(hp, rng)
    buffer = ReplayBuffer(hp.buffer_capacity)
    dev_log = DevelopmentLog(
        hyperparams={k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(hp).items()},
        reward_function=REWARD_DESCRIPTION,
        seed=int(seed),
    )
    base = plan_base("training", seed)
    episode = 0

    def policy(obs: np.ndarray):
        if len(buffer) < hp.warmup:
            return rng.uniform(-1.0, 1.0, size=2)
        return select_action(agent.actor, obs, noise, rng)

    stats = {"reward": 0.0, "loss": 0.0, "updates": 0}

    def on_step(obs, act, outcome: env.StepOutcome, next_obs) -> None:
        ri = outcome.reward_inputs
        r = reward(ri.d_prev, ri.d_now, ri.in_unsafe, ri.collided, hp)
        stats["reward"] += r
        terminal = outcome.termination_cause in (TerminationCause.GOAL, TerminationCause.COLLISION)
        buffer.add(obs, (act.v_left, act.v_right), r, next_obs, terminal)
        if len(buffer) >= max(hp.warmup, hp.batch_size):
            try:
                diag = ddpg_update(agent, buffer.sample(hp.batch_size, rng))
            except FloatingPointError as exc:
                raise TrainingDivergedError(str(exc), episode) from exc
            stats["loss"] += diag.critic_loss
            stats["updates"] += 1

    for episode in range(n_episodes):
        frac = episode / max(n_episodes - 1, 1)
        noise = hp.noise_start + (hp.noise_end - hp.noise_start) * frac
        stats.update(reward=0.0, loss=0.0, updates=0)
        trace = env.run_episode(cfg, policy, base + episode, RandomSpawn(), on_step=on_step)
        success = trace.final_mode is MissionMode.GOAL_REACHED
        entry = {
            "episode": episode,
            "seed": base + episode,
            "total_reward": stats["reward"],
            "success": success,
            "time_to_goal": trace.n_steps if success else None,
            "collided": trace.final_mode is MissionMode.COLLIDED,
            "unsafe_time": int(trace.unsafe_time[-1]),
            "steps": trace.n_steps,
            "termination_cause": trace.termination_cause.value,
            "mean_critic_loss": stats["loss"] / stats["updates"] if stats["updates"] else None,
            "noise_scale": noise,
        }
        if not math.isfinite(entry["total_reward"]):
            raise TrainingDivergedError("non-finite episode reward", episode)
        dev_log.append(entry)
        if progress is not None:
            progress(episode, entry)
    return TrainResult(agent, dev_log)


def run_trials(
    policy_for: Callable[[int], env.Policy],
    config: WorldConfig,
    seeds: Iterable[int],
    spawn: env.SpawnMode,
    hp: DdpgHyperparams | None = None,
    keep_traces: bool = False,
) -> tuple[list[TrialRecord], list[env.EpisodeTrace]]:
    cfg = evaluation_config(config)
    records, traces = [], []
    for s in seeds:
        trace = env.run_episode(cfg, policy_for(s), s, spawn)
        records.append(TrialRecord.from_trace(trace, hp))
        if keep_traces:
            traces.append(trace)
    return records, traces


def _actor_policy(actor: Mlp) -> Callable[[int], env.Policy]:
    policy = ActorPolicy(actor)
    return lambda _seed: policy


def _evaluate(actor: Mlp, config, n, seed, plan, spawn, hp) -> AggregateReport:
    if n < 1:
        raise UsageError(f"{plan} plan needs at least one trial, got {n}")
    base = plan_base(plan, seed)
    records, _ = run_trials(_actor_policy(actor), config, range(base, base + n), spawn, hp)
    return AggregateReport.from_records(records, plan)


def internal_test(actor: Mlp, config: WorldConfig, n: int = 1000, seed: int = 0, hp: DdpgHyperparams | None = None) -> AggregateReport:
    return _evaluate(actor, config, n, seed, "internal", RandomSpawn(), hp)


def verify_general(actor: Mlp, config: WorldConfig, n: int = 500, seed: int = 0, hp: DdpgHyperparams | None = None) -> AggregateReport:
    return _evaluate(actor, config, n, seed, "general", RandomSpawn(), hp)


def verify_targeted(actor: Mlp, config: WorldConfig, n: int = 250, seed: int = 0, hp: DdpgHyperparams | None = None) -> AggregateReport:
    return _evaluate(actor, config, n, seed, "targeted", TARGETED_SPAWN, hp)


def random_baseline(config: WorldConfig, n: int, seed: int = 0, plan: str = "internal") -> AggregateReport:
    """Uniform-random wheel commands on the same scenarios as ``plan``."""
    base = plan_base(plan, seed)
    records, _ = run_trials(lambda s: UniformRandomPolicy(s), config, range(base, base + n), RandomSpawn())
    return AggregateReport.from_records(records, f"random-{plan}")


def collect_traces(
    actor: Mlp | env.Policy,
    config: WorldConfig,
    n: int = 5000,
    seed: int = 0,
    path=None,
) -> list[env.EpisodeTrace]:
    """Run ``n`` random-placement trials and keep their full traces.

    With ``path`` the traces are also written as one trace file; a failed
    write leaves no partial file behind.
    """
    if n < 1:
        raise UsageError("need at least one trace")
    policy = ActorPolicy(actor) if isinstance(actor, Mlp) else actor
    base = plan_base("traces", seed)
    _, traces = run_trials(lambda _s: policy, config, range(base, base + n), RandomSpawn(), keep_traces=True)
    if path is not None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(prefix=".traces-", dir=path.parent)
        os.close(fd)
        try:
            env.write_traces(tmp, traces)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    return traces


# --- requirements -----------------------------------------------------------


@dataclass(frozen=True)
class RequirementVerdict:
    id: str
    regime: str
    measured: float
    threshold: float
    direction: str
    passed: bool
    evidence: str
    exceedance_rate: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_REQUIREMENTS = (
    ("SR1", "goal_rate", SR1_MIN_GOAL_RATE, ">="),
    ("SR2", "mean_unsafe_time", SR2_MAX_UNSAFE_TIME, "<="),
    ("SR3", "collision_rate", SR3_MAX_COLLISION_RATE, "<="),
)


def evaluate_requirements(
    reports: Mapping[str, AggregateReport | Mapping[str, float]],
    evidence: Mapping[str, str] | None = None,
) -> list[RequirementVerdict]:
    """SR1-SR3 verdicts for every regime in ``reports``.

    A report may be an :class:`AggregateReport` or a plain mapping with
    ``goal_rate``, ``mean_unsafe_time`` and ``collision_rate``.
    """
    if not reports:
        raise UsageError("no reports to evaluate")
    evidence = evidence or {}
    verdicts = []
    for regime, report in reports.items():
        metrics = report.metrics() if isinstance(report, AggregateReport) else dict(report)
        for req_id, key, threshold, direction in _REQUIREMENTS:
            value = metrics.get(key)
            if value is None or not math.isfinite(value):
                raise IncompleteEvidenceError(f"{regime}: metric {key!r} for {req_id} is missing")
            passed = value >= threshold if direction == ">=" else value <= threshold
            verdicts.append(
                RequirementVerdict(
                    id=req_id,
                    regime=regime,
                    measured=float(value),
                    threshold=threshold,
                    direction=direction,
                    passed=bool(passed),
                    evidence=evidence.get(regime, regime),
                    exceedance_rate=metrics.get("unsafe_exceedance_rate") if req_id == "SR2" else None,
                )
            )
    return verdicts


# --- scenario balance ---------------------------------------------------------

MIN_BALANCE_RESETS = 1_000


@dataclass(frozen=True)
class BalanceReport:
    n_resets: int
    grid: int
    tolerance: float
    histograms: dict[str, np.ndarray]
    max_relative_deviation: dict[str, float]
    flagged_cells: dict[str, list[tuple[int, int]]]

    @property
    def passed(self) -> bool:
        return not any(self.flagged_cells.values())

    def to_dict(self) -> dict:
        return {
            "n_resets": self.n_resets,
            "grid": self.grid,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "histograms": {k: v.tolist() for k, v in self.histograms.items()},
            "max_relative_deviation": self.max_relative_deviation,
            "flagged_cells": {k: [list(c) for c in v] for k, v in self.flagged_cells.items()},
        }


def audit_scenario_balance(
    config: WorldConfig, n_resets: int = 10_000, seed: int = 0, grid: int = 4, tolerance: float = 0.25
) -> BalanceReport:
    """Histogram spawn positions per object class on a ``grid`` x ``grid``
    partition of the arena and flag cells whose count is off the uniform
    expectation by more than ``tolerance`` (relative)."""
    if n_resets < MIN_BALANCE_RESETS:
        raise UsageError(f"balance audit needs at least {MIN_BALANCE_RESETS} resets, got {n_resets}")
    half = config.arena_half_extent
    points: dict[str, list[np.ndarray]] = {"vehicle": [], "goal": [], "obstacle": [], "unsafe_zones": []}
    base = plan_base("training", seed)
    for i in range(n_resets):
        s = env.reset(config, base + i, RandomSpawn())
        points["vehicle"].append(s.position)
        points["goal"].append(s.goal)
        points["obstacle"].append(s.obstacle)
        points["unsafe_zones"].extend(s.unsafe_zones)
    edges = np.linspace(-half, half, grid + 1)
    hists, devs, flagged = {}, {}, {}
    for name, pts in points.items():
        if not pts:
            hists[name] = np.zeros((grid, grid), dtype=np.int64)
            devs[name] = 0.0
            flagged[name] = []
            continue
        arr = np.asarray(pts)
        h, _, _ = np.histogram2d(arr[:, 0], arr[:, 1], bins=(edges, edges))
        expected = len(arr) / grid**2
        rel = np.abs(h - expected) / expected
        hists[name] = h.astype(np.int64)
        devs[name] = float(rel.max())
        flagged[name] = [tuple(int(v) for v in c) for c in np.argwhere(rel > tolerance)]
    return BalanceReport(n_resets, grid, tolerance, hists, devs, flagged)

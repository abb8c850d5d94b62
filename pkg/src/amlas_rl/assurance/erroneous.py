"""Erroneous-behaviour log: the state-action window leading up to each
violation in a trace."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from amlas_rl.env import EpisodeTrace, MissionMode
from amlas_rl.plans import SR2_MAX_UNSAFE_TIME

DEFAULT_WINDOW = 10


class Violation(str, Enum):
    COLLISION = "Collision"
    UNSAFE_TIME_EXCEEDED = "UnsafeTimeExceeded"
    ENERGY_DEPLETED = "EnergyDepleted"


@dataclass(frozen=True)
class WindowStep:
    t: int
    observation: tuple[float, ...]
    action: tuple[float, float]
    mode: int


@dataclass(frozen=True)
class ErroneousBehaviourEntry:
    seed: int
    violation: Violation
    step: int
    window: tuple[WindowStep, ...]
    model_hash: str

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "violation": self.violation.value,
            "step": self.step,
            "model_hash": self.model_hash,
            "window": [
                {"t": w.t, "observation": list(w.observation), "action": list(w.action), "mode": w.mode}
                for w in self.window
            ],
        }


def violation_steps(trace: EpisodeTrace, unsafe_limit: float = SR2_MAX_UNSAFE_TIME) -> list[tuple[Violation, int]]:
    """First step index of each violation type present in ``trace``, in step order."""
    found = []
    hits = np.flatnonzero(trace.modes == MissionMode.COLLIDED)
    if hits.size:
        found.append((Violation.COLLISION, int(hits[0])))
    hits = np.flatnonzero(trace.unsafe_time > unsafe_limit)
    if hits.size:
        found.append((Violation.UNSAFE_TIME_EXCEEDED, int(hits[0])))
    hits = np.flatnonzero(trace.energy <= 0)
    if hits.size:
        found.append((Violation.ENERGY_DEPLETED, int(hits[0])))
    return sorted(found, key=lambda vs: (vs[1], vs[0].value))


def log_erroneous(trace: EpisodeTrace, k: int = DEFAULT_WINDOW, model_hash: str = "") -> list[ErroneousBehaviourEntry]:
    """One entry per violation, holding steps ``max(0, v - k) .. v - 1``.

    Step ``t`` of a window pairs the observation at ``t`` with the action
    taken there, so the last entry is the action that led into the violation.
    """
    if k < 0:
        raise ValueError("window size must be non-negative")
    entries = []
    for violation, v in violation_steps(trace):
        window = tuple(
            WindowStep(
                t=t,
                observation=tuple(float(x) for x in trace.observation(t)),
                action=(float(trace.actions[t, 0]), float(trace.actions[t, 1])),
                mode=int(trace.modes[t]),
            )
            for t in range(max(0, v - k), v)
        )
        entries.append(ErroneousBehaviourEntry(trace.seed, violation, v, window, model_hash))
    return entries


def erroneous_log_json(entries: Iterable[ErroneousBehaviourEntry]) -> str:
    return json.dumps([e.to_dict() for e in entries], indent=1, sort_keys=True)

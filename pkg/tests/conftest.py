from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from amlas_rl import env


def make_state(
    config: env.WorldConfig | None = None,
    position=(0.0, 0.0),
    heading: float = 0.0,
    goal=(1.5, 1.5),
    zones=(),
    obstacle=(-1.5, -1.5),
    energy: int | None = None,
) -> env.WorldState:
    config = config or env.WorldConfig()
    state = env.WorldState(
        config=config,
        position=np.array(position, dtype=float),
        heading=float(heading),
        goal=np.array(goal, dtype=float),
        unsafe_zones=np.array(zones, dtype=float).reshape(-1, 2),
        obstacle=np.array(obstacle, dtype=float),
        energy=config.initial_energy if energy is None else energy,
    )
    return dataclasses.replace(state, mode=env.classify(state))


@pytest.fixture
def state_factory():
    return make_state


def zero_policy(_obs):
    return (0.0, 0.0)


# acceptance criteria append "criterion N: PASS/FAIL ..." lines here
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

"""Seedable 2D world: a differential-drive vehicle, a goal, unsafe zones,
one obstacle and a finite energy budget.

States are immutable values; :func:`step` returns a new state. The hot
geometry lives in :mod:`amlas_rl.kernels`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Iterator, Union

import numpy as np

from amlas_rl import kernels

#: Largest action magnitude kept after clamping; keeps commands inside (-1, 1).
ACTION_LIMIT = 1.0 - 1e-9
MAX_PLACEMENT_ATTEMPTS = 10_000
OBS_DIM = 3 * kernels.N_BEAMS


class ConfigError(ValueError):
    """Invalid world configuration or impossible object placement."""


class UsageError(RuntimeError):
    """Operation called on a state it does not apply to."""


class MissionMode(IntEnum):
    TRAVELLING = 0
    IN_UNSAFE_ZONE = 1
    COLLIDED = 2
    GOAL_REACHED = 3

    @property
    def is_terminal(self) -> bool:
        return self in (MissionMode.COLLIDED, MissionMode.GOAL_REACHED)


class TerminationCause(str, Enum):
    NONE = "none"
    GOAL = "goal"
    COLLISION = "collision"
    ENERGY_DEPLETED = "energy_depleted"
    STEP_CAP = "step_cap"


@dataclass(frozen=True)
class WorldConfig:
    arena_half_extent: float = 2.0
    n_unsafe_zones: int = 8
    unsafe_radius: float = 0.2
    obstacle_radius: float = 0.1
    goal_radius: float = 0.3
    initial_energy: int = 250
    max_episode_steps: int = 500
    wheel_speed_scale: float = 0.05
    axle_width: float = 0.2
    min_spawn_separation: float = 0.5
    sensor_max_range: float = 3.0
    # training lets episodes run past an empty battery; energy then saturates at 0
    energy_terminates: bool = True

    def __post_init__(self) -> None:
        positive = (
            "arena_half_extent",
            "unsafe_radius",
            "obstacle_radius",
            "goal_radius",
            "wheel_speed_scale",
            "axle_width",
            "min_spawn_separation",
            "sensor_max_range",
        )
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.initial_energy < 1:
            raise ConfigError("initial_energy must be >= 1")
        if self.n_unsafe_zones < 0:
            raise ConfigError("n_unsafe_zones must be >= 0")
        if self.max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short stable hash identifying this configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RandomSpawn:
    def to_dict(self) -> dict:
        return {"kind": "random"}


@dataclass(frozen=True)
class NearObstacle:
    """Vehicle starts at a distance in ``[d_min, d_max]`` from the obstacle."""

    d_min: float = 0.2
    d_max: float = 0.3

    def __post_init__(self) -> None:
        if not (0 <= self.d_min < self.d_max):
            raise ConfigError(f"NearObstacle needs 0 <= d_min < d_max, got {self.d_min}, {self.d_max}")

    def to_dict(self) -> dict:
        return {"kind": "near_obstacle", "d_min": self.d_min, "d_max": self.d_max}


SpawnMode = Union[RandomSpawn, NearObstacle]


def spawn_from_dict(data: dict) -> SpawnMode:
    if data["kind"] == "random":
        return RandomSpawn()
    return NearObstacle(data["d_min"], data["d_max"])


@dataclass(frozen=True)
class Action:
    v_left: float
    v_right: float

    @classmethod
    def clamped(cls, v_left: float, v_right: float) -> "Action":
        lo, hi = -ACTION_LIMIT, ACTION_LIMIT
        if not (math.isfinite(v_left) and math.isfinite(v_right)):
            raise UsageError("action components must be finite")
        return cls(min(max(float(v_left), lo), hi), min(max(float(v_right), lo), hi))

    @classmethod
    def coerce(cls, value) -> "Action":
        if isinstance(value, Action):
            return cls.clamped(value.v_left, value.v_right)
        v_left, v_right = value
        return cls.clamped(v_left, v_right)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class WorldState:
    config: WorldConfig
    position: np.ndarray
    heading: float
    goal: np.ndarray
    unsafe_zones: np.ndarray
    obstacle: np.ndarray
    energy: int
    step_count: int = 0
    cumulative_unsafe_time: int = 0
    mode: MissionMode = MissionMode.TRAVELLING
    termination: TerminationCause = TerminationCause.NONE

    @property
    def terminated(self) -> bool:
        return self.termination is not TerminationCause.NONE

    def distances(self) -> tuple[float, float, float]:
        """(distance to goal, to obstacle, to nearest unsafe zone)."""
        return kernels.distances(
            self.position[0], self.position[1], self.goal, self.unsafe_zones, self.obstacle
        )

    def same_as(self, other: "WorldState") -> bool:
        """Bit-level equality of every field."""
        return (
            self.config == other.config
            and np.array_equal(self.position, other.position)
            and self.heading == other.heading
            and np.array_equal(self.goal, other.goal)
            and np.array_equal(self.unsafe_zones, other.unsafe_zones)
            and np.array_equal(self.obstacle, other.obstacle)
            and self.energy == other.energy
            and self.step_count == other.step_count
            and self.cumulative_unsafe_time == other.cumulative_unsafe_time
            and self.mode == other.mode
            and self.termination == other.termination
        )


@dataclass(frozen=True)
class RewardInputs:
    d_prev: float
    d_now: float
    in_unsafe: bool
    collided: bool


@dataclass(frozen=True)
class StepOutcome:
    next_state: WorldState
    reward_inputs: RewardInputs
    terminated: bool
    termination_cause: TerminationCause


def _rng_for(seed: int) -> np.random.Generator:
    seed = int(seed)
    if seed >= 0:
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence([-seed, 1]))


def distance(state: WorldState, target) -> float:
    """Euclidean distance from the vehicle to ``target``."""
    target = np.asarray(target, dtype=np.float64)
    return math.hypot(target[0] - state.position[0], target[1] - state.position[1])


def classify_distances(config: WorldConfig, d_goal: float, d_obstacle: float, d_unsafe: float) -> MissionMode:
    if d_obstacle < config.obstacle_radius:
        return MissionMode.COLLIDED
    if d_goal < config.goal_radius:
        return MissionMode.GOAL_REACHED
    if d_unsafe < config.unsafe_radius:
        return MissionMode.IN_UNSAFE_ZONE
    return MissionMode.TRAVELLING


def classify(state: WorldState) -> MissionMode:
    """Mission mode; precedence Collided > GoalReached > InUnsafeZone > Travelling."""
    return classify_distances(state.config, *state.distances())


def reset(config: WorldConfig, seed: int, spawn_mode: SpawnMode | None = None) -> WorldState:
    """Place every object uniformly at random in the arena.

    All objects (and the vehicle) keep ``min_spawn_separation`` from one another,
    except the vehicle/obstacle pair under :class:`NearObstacle`.
    """
    spawn_mode = RandomSpawn() if spawn_mode is None else spawn_mode
    rng = _rng_for(seed)
    half = config.arena_half_extent
    sep = config.min_spawn_separation
    placed: list[np.ndarray] = []
    attempts = 0

    def sample(name: str) -> np.ndarray:
        nonlocal attempts
        while attempts < MAX_PLACEMENT_ATTEMPTS:
            attempts += 1
            p = rng.uniform(-half, half, size=2)
            if all(math.hypot(*(p - q)) >= sep for q in placed):
                placed.append(p)
                return p
        raise ConfigError(
            f"could not place {name} with min_spawn_separation={sep} m after "
            f"{MAX_PLACEMENT_ATTEMPTS} attempts (arena half extent {half} m)"
        )

    if isinstance(spawn_mode, NearObstacle):
        obstacle = sample("obstacle")
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise ConfigError(
                    f"could not place vehicle within [{spawn_mode.d_min}, {spawn_mode.d_max}] m "
                    f"of the obstacle after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            r = rng.uniform(spawn_mode.d_min, spawn_mode.d_max)
            phi = rng.uniform(-math.pi, math.pi)
            position = obstacle + r * np.array([math.cos(phi), math.sin(phi)])
            if np.all(np.abs(position) <= half):
                placed.append(position)
                break
        goal = sample("goal")
    else:
        position = sample("vehicle")
        goal = sample("goal")
        obstacle = sample("obstacle")
    zones = [sample(f"unsafe zone {i}") for i in range(config.n_unsafe_zones)]
    heading = float(rng.uniform(-math.pi, math.pi))

    state = WorldState(
        config=config,
        position=_frozen(position),
        heading=heading,
        goal=_frozen(goal),
        unsafe_zones=_frozen(np.reshape(zones, (config.n_unsafe_zones, 2))),
        obstacle=_frozen(obstacle),
        energy=config.initial_energy,
    )
    return dataclasses.replace(state, mode=classify(state))


def step(state: WorldState, action) -> StepOutcome:
    if state.terminated:
        raise UsageError(f"cannot step a terminated state (cause: {state.termination.value})")
    cfg = state.config
    act = Action.coerce(action)
    d_prev = kernels.distances(state.position[0], state.position[1], state.goal, state.unsafe_zones, state.obstacle)[0]
    x, y, heading = kernels.kinematics(
        state.position[0],
        state.position[1],
        state.heading,
        act.v_left,
        act.v_right,
        cfg.wheel_speed_scale,
        cfg.axle_width,
        cfg.arena_half_extent,
    )
    d_goal, d_obs, d_zone = kernels.distances(x, y, state.goal, state.unsafe_zones, state.obstacle)
    mode = classify_distances(cfg, d_goal, d_obs, d_zone)
    energy = max(state.energy - 1, 0)
    t = state.step_count + 1
    unsafe_time = state.cumulative_unsafe_time + (mode is MissionMode.IN_UNSAFE_ZONE)

    if mode is MissionMode.COLLIDED:
        cause = TerminationCause.COLLISION
    elif mode is MissionMode.GOAL_REACHED:
        cause = TerminationCause.GOAL
    elif energy == 0 and cfg.energy_terminates:
        cause = TerminationCause.ENERGY_DEPLETED
    elif t >= cfg.max_episode_steps:
        cause = TerminationCause.STEP_CAP
    else:
        cause = TerminationCause.NONE

    nxt = dataclasses.replace(
        state,
        position=_frozen((x, y)),
        heading=heading,
        energy=energy,
        step_count=t,
        cumulative_unsafe_time=unsafe_time,
        mode=mode,
        termination=cause,
    )
    inputs = RewardInputs(d_prev, d_goal, d_zone < cfg.unsafe_radius, mode is MissionMode.COLLIDED)
    return StepOutcome(nxt, inputs, cause is not TerminationCause.NONE, cause)


def observe(state: WorldState) -> np.ndarray:
    """48 pseudo-lidar readings: goal beams, unsafe-zone beams, obstacle beams.

    Beam ``k`` of each array covers bearings ``[k*22.5, (k+1)*22.5)`` degrees
    counter-clockwise from the heading; it reads ``1 - d/max_range`` for the
    nearest object of its class in that sector, 0 if none is in range.
    """
    return kernels.observe(
        state.position[0],
        state.position[1],
        state.heading,
        state.goal,
        state.unsafe_zones,
        state.obstacle,
        state.config.sensor_max_range,
    )


Policy = Callable[[np.ndarray], object]


@dataclass(eq=False)
class EpisodeTrace:
    """Columnar record of one episode.

    Row ``t`` of the per-state arrays describes the state after ``t`` actions;
    ``actions[t]`` moved the vehicle from state ``t`` to ``t + 1``.
    """

    config: WorldConfig
    seed: int
    spawn: SpawnMode
    goal: np.ndarray
    unsafe_zones: np.ndarray
    obstacle: np.ndarray
    positions: np.ndarray
    headings: np.ndarray
    energy: np.ndarray
    modes: np.ndarray
    unsafe_time: np.ndarray
    in_unsafe: np.ndarray
    d_goal: np.ndarray
    d_obstacle: np.ndarray
    d_unsafe_min: np.ndarray
    actions: np.ndarray
    termination_cause: TerminationCause = TerminationCause.NONE
    config_hash: str = field(default="")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def final_mode(self) -> MissionMode:
        return MissionMode(int(self.modes[-1]))

    def state(self, t: int) -> WorldState:
        if t < 0:
            t += len(self)
        last = t == len(self) - 1
        return WorldState(
            config=self.config,
            position=_frozen(self.positions[t]),
            heading=float(self.headings[t]),
            goal=_frozen(self.goal),
            unsafe_zones=_frozen(self.unsafe_zones),
            obstacle=_frozen(self.obstacle),
            energy=int(self.energy[t]),
            step_count=t,
            cumulative_unsafe_time=int(self.unsafe_time[t]),
            mode=MissionMode(int(self.modes[t])),
            termination=self.termination_cause if last else TerminationCause.NONE,
        )

    def observation(self, t: int) -> np.ndarray:
        return observe(self.state(t))

    def reward_inputs(self, t: int) -> RewardInputs:
        """Reward inputs of the transition ``t -> t + 1``."""
        return RewardInputs(
            float(self.d_goal[t]),
            float(self.d_goal[t + 1]),
            bool(self.in_unsafe[t + 1]),
            int(self.modes[t + 1]) == MissionMode.COLLIDED,
        )

    def __iter__(self) -> Iterator[tuple[WorldState, Action | None, RewardInputs | None, MissionMode]]:
        for t in range(len(self)):
            if t < self.n_steps:
                act = Action(float(self.actions[t, 0]), float(self.actions[t, 1]))
                yield self.state(t), act, self.reward_inputs(t), MissionMode(int(self.modes[t]))
            else:
                yield self.state(t), None, None, MissionMode(int(self.modes[t]))


class _TraceBuilder:
    def __init__(self, state: WorldState, seed: int, spawn: SpawnMode):
        self.state0 = state
        self.seed = seed
        self.spawn = spawn
        self.rows: list[tuple] = []
        self.actions: list[tuple[float, float]] = []
        self.add(state)

    def add(self, s: WorldState) -> None:
        d_goal, d_obs, d_zone = s.distances()
        self.rows.append(
            (
                s.position[0],
                s.position[1],
                s.heading,
                s.energy,
                int(s.mode),
                s.cumulative_unsafe_time,
                d_zone < s.config.unsafe_radius,
                d_goal,
                d_obs,
                d_zone,
            )
        )

    def build(self, cause: TerminationCause) -> EpisodeTrace:
        cols = list(zip(*self.rows))
        s0 = self.state0
        return EpisodeTrace(
            config=s0.config,
            seed=self.seed,
            spawn=self.spawn,
            goal=np.array(s0.goal),
            unsafe_zones=np.array(s0.unsafe_zones),
            obstacle=np.array(s0.obstacle),
            positions=np.column_stack((cols[0], cols[1])).astype(np.float64),
            headings=np.array(cols[2], dtype=np.float64),
            energy=np.array(cols[3], dtype=np.int64),
            modes=np.array(cols[4], dtype=np.int8),
            unsafe_time=np.array(cols[5], dtype=np.int64),
            in_unsafe=np.array(cols[6], dtype=bool),
            d_goal=np.array(cols[7], dtype=np.float64),
            d_obstacle=np.array(cols[8], dtype=np.float64),
            d_unsafe_min=np.array(cols[9], dtype=np.float64),
            actions=np.array(self.actions, dtype=np.float64).reshape(-1, 2),
            termination_cause=cause,
            config_hash=s0.config.digest(),
        )


def run_episode(
    config: WorldConfig,
    policy: Policy,
    seed: int,
    spawn_mode: SpawnMode | None = None,
    on_step: Callable[[np.ndarray, Action, StepOutcome, np.ndarray], None] | None = None,
) -> EpisodeTrace:
    """Roll ``policy`` (observation -> action) until the episode terminates.

    ``on_step(obs, action, outcome, next_obs)`` is called after every step,
    which is how the training loop feeds its replay buffer.
    """
    spawn_mode = RandomSpawn() if spawn_mode is None else spawn_mode
    return run_from(reset(config, seed, spawn_mode), policy, seed, spawn_mode, on_step)


def run_from(
    state: WorldState,
    policy: Policy,
    seed: int = 0,
    spawn_mode: SpawnMode | None = None,
    on_step: Callable[[np.ndarray, Action, StepOutcome, np.ndarray], None] | None = None,
) -> EpisodeTrace:
    """Same as :func:`run_episode` from an explicit initial state."""
    builder = _TraceBuilder(state, seed, RandomSpawn() if spawn_mode is None else spawn_mode)
    obs = observe(state)
    while True:
        act = Action.coerce(policy(obs))
        outcome = step(state, act)
        state = outcome.next_state
        builder.actions.append((act.v_left, act.v_right))
        builder.add(state)
        next_obs = observe(state)
        if on_step is not None:
            on_step(obs, act, outcome, next_obs)
        obs = next_obs
        if outcome.terminated:
            return builder.build(outcome.termination_cause)


# --- trace file -------------------------------------------------------------

_STEP_FIELDS = ("t", "x0", "x1", "theta", "e", "v_l", "v_r", "m", "in_unsafe", "d_goal", "d_obstacle", "d_unsafe_min")


def _num(v: float):
    return None if not math.isfinite(v) else float(v)


def trace_lines(trace: EpisodeTrace) -> Iterator[str]:
    """Encode ``trace`` as one header line plus one JSON line per state."""
    header = {
        "type": "trace",
        "config_hash": trace.config_hash or trace.config.digest(),
        "seed": trace.seed,
        "spawn": trace.spawn.to_dict(),
        "n_states": len(trace),
        "termination_cause": trace.termination_cause.value,
        "goal": trace.goal.tolist(),
        "obstacle": trace.obstacle.tolist(),
        "unsafe_zones": trace.unsafe_zones.tolist(),
    }
    yield json.dumps(header)
    n = trace.n_steps
    for t in range(len(trace)):
        v_l = float(trace.actions[t, 0]) if t < n else None
        v_r = float(trace.actions[t, 1]) if t < n else None
        row = (
            t,
            float(trace.positions[t, 0]),
            float(trace.positions[t, 1]),
            float(trace.headings[t]),
            int(trace.energy[t]),
            v_l,
            v_r,
            int(trace.modes[t]),
            bool(trace.in_unsafe[t]),
            _num(trace.d_goal[t]),
            _num(trace.d_obstacle[t]),
            _num(trace.d_unsafe_min[t]),
        )
        yield json.dumps(dict(zip(_STEP_FIELDS, row)))


def write_traces(path, traces: Iterable[EpisodeTrace]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for line in trace_lines(trace):
                fh.write(line)
                fh.write("\n")
            count += 1
    return count


def read_traces(path, config: WorldConfig) -> list[EpisodeTrace]:
    """Decode a trace file written by :func:`write_traces`.

    ``config`` must be the configuration the traces were recorded under;
    its hash is checked against every header.
    """
    traces = []
    digest = config.digest()
    with open(path, encoding="utf-8") as fh:
        lines = iter(enumerate(fh, start=1))
        for lineno, line in lines:
            if not line.strip():
                continue
            header = json.loads(line)
            if header.get("type") != "trace":
                raise ValueError(f"{path}:{lineno}: expected a trace header")
            if header["config_hash"] != digest:
                raise ValueError(f"{path}:{lineno}: trace recorded under config {header['config_hash']}, not {digest}")
            rows = [json.loads(next(lines)[1]) for _ in range(header["n_states"])]

            def col(name, dtype):
                return np.array([math.inf if r[name] is None else r[name] for r in rows], dtype=dtype)

            traces.append(
                EpisodeTrace(
                    config=config,
                    seed=header["seed"],
                    spawn=spawn_from_dict(header["spawn"]),
                    goal=np.array(header["goal"], dtype=np.float64),
                    unsafe_zones=np.array(header["unsafe_zones"], dtype=np.float64).reshape(-1, 2),
                    obstacle=np.array(header["obstacle"], dtype=np.float64),
                    positions=np.column_stack((col("x0", np.float64), col("x1", np.float64))),
                    headings=col("theta", np.float64),
                    energy=col("e", np.int64),
                    modes=col("m", np.int8),
                    unsafe_time=np.cumsum(col("m", np.int8) == MissionMode.IN_UNSAFE_ZONE) - (rows[0]["m"] == 1),
                    in_unsafe=col("in_unsafe", bool),
                    d_goal=col("d_goal", np.float64),
                    d_obstacle=col("d_obstacle", np.float64),
                    d_unsafe_min=col("d_unsafe_min", np.float64),
                    actions=np.array([(r["v_l"], r["v_r"]) for r in rows[:-1]], dtype=np.float64).reshape(-1, 2),
                    termination_cause=TerminationCause(header["termination_cause"]),
                    config_hash=header["config_hash"],
                )
            )
    return traces

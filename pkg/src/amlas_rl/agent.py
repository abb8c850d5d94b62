"""DDPG from scratch on numpy: feed-forward nets with hand-written
backprop, Adam, a ring replay buffer, and Polyak-averaged target nets.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from amlas_rl.env import ACTION_LIMIT, OBS_DIM, Action

ACTION_DIM = 2
ACTIVATIONS = ("tanh", "relu", "identity")
MODEL_MAGIC = b"AMLASMLP"


class IntegrityError(ValueError):
    """Model file is truncated, corrupted, or has the wrong architecture."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, episode: int | None = None):
        super().__init__(message if episode is None else f"{message} (episode {episode})")
        self.episode = episode


@dataclass(frozen=True)
class DdpgHyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    warmup: int = 1_000
    noise_start: float = 0.3
    noise_end: float = 0.05
    beta: float = 1.0
    c_unsafe: float = 0.1
    c_collision: float = 10.0
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ValueError("noise scales must be non-negative")


def reward(d_prev: float, d_now: float, in_unsafe: bool, collided: bool, hp: DdpgHyperparams) -> float:
    """Progress toward the goal scaled by ``beta``, minus a safety cost.

    The collision cost wins when a step is both in a zone and a collision.
    """
    penalty = 0.0
    if collided:
        penalty = -hp.c_collision
    elif in_unsafe:
        penalty = -hp.c_unsafe
    return (d_prev - d_now) * hp.beta + penalty


# --- networks ---------------------------------------------------------------


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Dense layers ``y = act(x @ W + b)``; weights are ``(fan_in, fan_out)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations) >= 1):
            raise ValueError("weights, biases and activations must have equal nonzero length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator, final_scale: float = 3e-3) -> "Mlp":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = final_scale if i == len(dims) - 2 else 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, tuple(activations))

    @classmethod
    def zeros(cls, dims: Sequence[int], activations: Sequence[str]) -> "Mlp":
        return cls(
            [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
            [np.zeros(b) for b in dims[1:]],
            tuple(activations),
        )

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        for w, b, a in zip(self.weights, self.biases, self.activations):
            x = _act(a, x @ w + b)
        return x

    def forward_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        cache = [(x, None, None)]
        for w, b, a in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            x = _act(a, z)
            cache.append((x, z, a))
        return x, cache

    def backward(self, cache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Backprop ``dL/dy`` to ``(parameter grads in params() order, dL/dx)``."""
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(len(self.weights) - 1, -1, -1):
            out, z, a = cache[i + 1]
            g = g * _act_grad(a, z, out)
            x_in = cache[i][0]
            if g.ndim == 1:
                grads[2 * i] = np.outer(x_in, g)
                grads[2 * i + 1] = g.copy()
            else:
                grads[2 * i] = x_in.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        for gr in grads:
            if not np.all(np.isfinite(gr)):
                raise FloatingPointError("non-finite gradient")
        return grads, g


def gradients(net: Mlp, inputs: np.ndarray, loss_grad: Callable[[np.ndarray], np.ndarray] | np.ndarray) -> list[np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter of ``net``.

    ``loss_grad`` is either ``dL/dy`` or a function mapping the output ``y``
    to ``dL/dy``.
    """
    y, cache = net.forward_cache(inputs)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite network output")
    g = loss_grad(y) if callable(loss_grad) else loss_grad
    return net.backward(cache, g)[0]


def make_actor(rng: np.random.Generator, hidden: Sequence[int] = (64, 64)) -> Mlp:
    dims = (OBS_DIM, *hidden, ACTION_DIM)
    return Mlp.init(dims, ("relu",) * len(hidden) + ("tanh",), rng)


def make_critic(rng: np.random.Generator, hidden: Sequence[int] = (64, 64)) -> Mlp:
    dims = (OBS_DIM + ACTION_DIM, *hidden, 1)
    return Mlp.init(dims, ("relu",) * len(hidden) + ("identity",), rng)


def _check_obs(obs: np.ndarray, dim: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != dim:
        raise ValueError(f"observation must have {dim} readings, got {obs.shape[-1]}")
    return obs


def actor_forward(net: Mlp, obs: np.ndarray) -> np.ndarray:
    """Deterministic action(s), strictly inside (-1, 1)."""
    obs = _check_obs(obs, net.input_dim)
    return np.clip(net.forward(obs), -ACTION_LIMIT, ACTION_LIMIT)


def critic_forward(net: Mlp, obs: np.ndarray, action: np.ndarray) -> np.ndarray | float:
    obs = _check_obs(obs, net.input_dim - ACTION_DIM)
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != ACTION_DIM:
        raise ValueError(f"action must have {ACTION_DIM} components, got {action.shape[-1]}")
    q = net.forward(np.concatenate((obs, action), axis=-1))[..., 0]
    return float(q) if q.ndim == 0 else q


def select_action(net: Mlp, obs: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Actor output plus Gaussian exploration noise, clamped into (-1, 1)."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    a = actor_forward(net, obs)
    if noise_scale == 0:
        return a
    return np.clip(a + rng.normal(0.0, noise_scale, size=a.shape), -ACTION_LIMIT, ACTION_LIMIT)


class ActorPolicy:
    """Frozen actor as an observation -> action callable."""

    def __init__(self, actor: Mlp):
        self.actor = actor

    def __call__(self, obs: np.ndarray) -> Action:
        a = actor_forward(self.actor, obs)
        return Action(float(a[0]), float(a[1]))


class UniformRandomPolicy:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs: np.ndarray) -> Action:
        v = self.rng.uniform(-1.0, 1.0, size=2)
        return Action.clamped(v[0], v[1])


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """In place ``theta' <- tau*theta + (1 - tau)*theta'``; returns ``target``."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    if target.dims != online.dims:
        raise ValueError(f"shape mismatch: {target.dims} vs {online.dims}")
    for t, o in zip(target.params(), online.params()):
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
    return target


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.idx = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward: float, next_obs, terminal: bool) -> None:
        if not math.isfinite(reward):
            raise FloatingPointError("non-finite reward")
        i = self.idx
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        self.idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> "Batch":
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        ix = rng.integers(0, self.size, size=batch_size)
        return Batch(self.obs[ix], self.actions[ix], self.rewards[ix], self.next_obs[ix], self.terminal[ix])


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass
class DdpgAgent:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    hp: DdpgHyperparams
    actor_opt: Adam = field(init=False)
    critic_opt: Adam = field(init=False)

    def __post_init__(self) -> None:
        self.actor_opt = Adam(self.actor.params(), self.hp.actor_lr)
        self.critic_opt = Adam(self.critic.params(), self.hp.critic_lr)

    @classmethod
    def create(cls, hp: DdpgHyperparams, rng: np.random.Generator) -> "DdpgAgent":
        actor = make_actor(rng, hp.hidden)
        critic = make_critic(rng, hp.hidden)
        return cls(actor, critic, actor.copy(), critic.copy(), hp)


@dataclass(frozen=True)
class UpdateDiagnostics:
    critic_loss: float
    actor_loss: float
    mean_td_error: float


def td_targets(agent: DdpgAgent, batch: Batch) -> np.ndarray:
    """``y = r + gamma * Q'(s', mu'(s'))``, bootstrap dropped on terminal samples."""
    next_a = agent.actor_target.forward(batch.next_obs)
    q_next = agent.critic_target.forward(np.concatenate((batch.next_obs, next_a), axis=1))[:, 0]
    return batch.rewards + agent.hp.gamma * np.where(batch.terminal, 0.0, q_next)


def ddpg_update(agent: DdpgAgent, batch: Batch) -> UpdateDiagnostics:
    """One critic step on squared TD error, one actor step ascending Q, then
    soft target updates."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    y = td_targets(agent, batch)

    q, c_cache = agent.critic.forward_cache(np.concatenate((batch.obs, batch.actions), axis=1))
    td = q[:, 0] - y
    critic_loss = float(np.mean(td * td))
    if not math.isfinite(critic_loss):
        raise FloatingPointError("non-finite critic loss")
    c_grads, _ = agent.critic.backward(c_cache, (2.0 / n) * td[:, None])
    agent.critic_opt.step(agent.critic.params(), c_grads)

    mu, a_cache = agent.actor.forward_cache(batch.obs)
    q_pi, qc_cache = agent.critic.forward_cache(np.concatenate((batch.obs, mu), axis=1))
    actor_loss = -float(np.mean(q_pi))
    _, dq_dx = agent.critic.backward(qc_cache, np.full((n, 1), -1.0 / n))
    a_grads, _ = agent.actor.backward(a_cache, dq_dx[:, -ACTION_DIM:])
    agent.actor_opt.step(agent.actor.params(), a_grads)

    soft_update(agent.critic_target, agent.critic, agent.hp.tau)
    soft_update(agent.actor_target, agent.actor, agent.hp.tau)
    return UpdateDiagnostics(critic_loss, actor_loss, float(np.mean(np.abs(td))))


# --- model file ---------------------------------------------------------------
#
# b"AMLASMLP\n"
# one JSON header line: {"format": 1, "dims": [...], "activations": [...],
#                        "n_params": N, "sha256": <hex of the parameter bytes>}
# N little-endian float64 values: W0 (row-major), b0, W1, b1, ...


def _param_bytes(net: Mlp) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())


def save_model(net: Mlp, path) -> Path:
    path = Path(path)
    body = _param_bytes(net)
    header = {
        "format": 1,
        "dims": list(net.dims),
        "activations": list(net.activations),
        "n_params": len(body) // 8,
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(body)
    return path


def _read_header(fh) -> dict:
    if fh.readline() != MODEL_MAGIC + b"\n":
        raise IntegrityError("not a model file (bad magic)")
    line = fh.readline()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise IntegrityError(f"unreadable model header: {exc}") from None
    if header.get("format") != 1:
        raise IntegrityError(f"unsupported model format {header.get('format')!r}")
    return header


def read_model_header(path) -> dict:
    """Architecture header only (``dims``, ``activations``, ``n_params``, ``sha256``)."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_model(path, expect_dims: Sequence[int] | None = None) -> Mlp:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        body = fh.read()
    dims = header["dims"]
    if expect_dims is not None and list(expect_dims) != list(dims):
        raise IntegrityError(f"architecture mismatch: file has {dims}, expected {list(expect_dims)}")
    n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if n != header["n_params"] or len(body) != 8 * n:
        raise IntegrityError(f"model file holds {len(body)} parameter bytes, expected {8 * n}")
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise IntegrityError("parameter checksum mismatch")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    weights, biases, off = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[off : off + a * b].reshape(a, b).copy())
        off += a * b
        biases.append(flat[off : off + b].copy())
        off += b
    return Mlp(weights, biases, tuple(header["activations"]))


def model_digest(net: Mlp) -> str:
    return hashlib.sha256(_param_bytes(net)).hexdigest()


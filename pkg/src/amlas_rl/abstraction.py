"""Abstract states ``(mode, energy bin, obstacle-distance bin,
unsafe-distance bin)`` and maximum-likelihood DTMC estimation from traces.

Energy bin 0 holds exactly ``e == 0``; bin ``k >= 1`` holds
``e in ((k-1)*width, k*width]``, capped at ``energy_bins``. Distance bins
are indices into ``distance_edges`` (``d < 0.3`` near, ``d < 1.0`` mid,
else far by default).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse

from amlas_rl.env import EpisodeTrace, MissionMode, WorldState

ROW_SUM_TOL = 1e-9
FIELDS = ("m", "e", "do", "du")


class MalformedTraceError(ValueError):
    pass


class DtmcFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DtmcValidationError(ValueError):
    pass


@dataclass(frozen=True)
class AbstractionConfig:
    energy_bins: int = 10
    energy_bin_width: int = 25
    distance_edges: tuple[float, ...] = (0.3, 1.0)

    def __post_init__(self) -> None:
        if self.energy_bins < 1 or self.energy_bin_width < 1:
            raise ValueError("energy_bins and energy_bin_width must be >= 1")
        edges = tuple(self.distance_edges)
        if any(b <= a for a, b in zip(edges, edges[1:])) or any(e <= 0 for e in edges):
            raise ValueError("distance_edges must be positive and strictly increasing")

    @property
    def n_distance_bins(self) -> int:
        return len(self.distance_edges) + 1

    def digest(self) -> str:
        blob = json.dumps(
            {"energy_bins": self.energy_bins, "width": self.energy_bin_width, "edges": list(self.distance_edges)},
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def energy_bin(self, energy):
        e = np.asarray(energy)
        return np.minimum(np.ceil(np.maximum(e, 0) / self.energy_bin_width), self.energy_bins).astype(np.int64)

    def distance_bin(self, d):
        return np.searchsorted(np.asarray(self.distance_edges), np.asarray(d, dtype=np.float64), side="right").astype(np.int64)


class AbstractState(NamedTuple):
    mode: int
    energy_bin: int
    d_obstacle_bin: int
    d_unsafe_bin: int

    @property
    def terminal(self) -> bool:
        return self.mode in (MissionMode.COLLIDED, MissionMode.GOAL_REACHED) or self.energy_bin == 0


def abstract_state(ws: WorldState, cfg: AbstractionConfig | None = None) -> AbstractState:
    cfg = cfg or AbstractionConfig()
    _, d_obs, d_zone = ws.distances()
    return AbstractState(
        int(ws.mode),
        int(cfg.energy_bin(ws.energy)),
        int(cfg.distance_bin(d_obs)),
        int(cfg.distance_bin(d_zone)),
    )


def abstract_trace_array(trace: EpisodeTrace, cfg: AbstractionConfig | None = None) -> np.ndarray:
    """``(len(trace), 4)`` int array of abstract states; last row must be terminal."""
    cfg = cfg or AbstractionConfig()
    if len(trace) == 0:
        raise MalformedTraceError("empty trace")
    rows = np.column_stack(
        (
            trace.modes.astype(np.int64),
            cfg.energy_bin(trace.energy),
            cfg.distance_bin(trace.d_obstacle),
            cfg.distance_bin(trace.d_unsafe_min),
        )
    )
    terminal = _terminal_mask(rows)
    if not terminal[-1]:
        raise MalformedTraceError(f"trace (seed {trace.seed}) does not end in a terminal state")
    if terminal[:-1].any():
        t = int(np.argmax(terminal[:-1]))
        raise MalformedTraceError(f"trace (seed {trace.seed}) reaches a terminal state at step {t} before its end")
    return rows


def abstract_trace(trace: EpisodeTrace, cfg: AbstractionConfig | None = None) -> list[AbstractState]:
    return [AbstractState(*map(int, r)) for r in abstract_trace_array(trace, cfg)]


def _terminal_mask(rows: np.ndarray) -> np.ndarray:
    return (rows[:, 0] == MissionMode.COLLIDED) | (rows[:, 0] == MissionMode.GOAL_REACHED) | (rows[:, 1] == 0)


@dataclass
class Dtmc:
    """Finite DTMC over abstract states with state rewards.

    ``transitions`` is a CSR matrix; terminal states carry a probability-1
    self-loop. ``counts[i]`` is the number of observed departures from
    state ``i`` (``None`` when the chain was not estimated from data).
    """

    states: list[AbstractState]
    initial: np.ndarray
    transitions: sparse.csr_matrix
    rewards: dict[str, np.ndarray]
    counts: np.ndarray | None = None
    cfg_hash: str = ""
    index: dict[AbstractState, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.states = [AbstractState(*map(int, s)) for s in self.states]
        self.index = {s: i for i, s in enumerate(self.states)}
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transitions = sparse.csr_matrix(self.transitions, dtype=np.float64)
        self.transitions.sort_indices()

    @classmethod
    def from_edges(
        cls,
        states: Sequence[Sequence[int]],
        initial: Sequence[float],
        edges: dict[tuple[int, int], float],
        rewards: dict[str, Sequence[float]] | None = None,
    ) -> "Dtmc":
        """Build a chain by hand; ``edges`` maps ``(src, dst)`` to a probability."""
        n = len(states)
        rows, cols, vals = zip(*((i, j, p) for (i, j), p in sorted(edges.items()))) if edges else ((), (), ())
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        st = [AbstractState(*map(int, s)) for s in states]
        if rewards is None:
            rewards = {"unsafe": [float(s.mode == MissionMode.IN_UNSAFE_ZONE) for s in st]}
        return cls(st, np.asarray(initial, dtype=np.float64), mat, {k: np.asarray(v, dtype=np.float64) for k, v in rewards.items()})

    @property
    def n_states(self) -> int:
        return len(self.states)

    def field_values(self, name: str) -> np.ndarray:
        col = FIELDS.index(name)
        return np.array([s[col] for s in self.states], dtype=np.int64)

    @property
    def terminal(self) -> np.ndarray:
        return np.array([s.terminal for s in self.states], dtype=bool)

    def validate(self) -> None:
        p = self.transitions
        n = self.n_states
        if p.shape != (n, n):
            raise DtmcValidationError(f"transition matrix shape {p.shape} does not match {n} states")
        if p.nnz and (p.data.min() < 0 or p.data.max() > 1):
            raise DtmcValidationError("transition probabilities must lie in [0, 1]")
        sums = np.asarray(p.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            i = int(bad[0])
            raise DtmcValidationError(f"row {i} sums to {sums[i]!r}, not 1")
        if self.initial.shape != (n,) or abs(self.initial.sum() - 1.0) > ROW_SUM_TOL or self.initial.min(initial=0) < 0:
            raise DtmcValidationError("initial distribution must be a probability vector over the states")
        diag = p.diagonal()
        for i in np.flatnonzero(self.terminal):
            if abs(diag[i] - 1.0) > ROW_SUM_TOL:
                raise DtmcValidationError(f"terminal state {i} {self.states[i]} lacks a probability-1 self-loop")
        for name, r in self.rewards.items():
            if r.shape != (n,):
                raise DtmcValidationError(f"reward {name!r} has shape {r.shape}, expected ({n},)")


def _encode(rows: np.ndarray, cfg: AbstractionConfig) -> np.ndarray:
    nd = cfg.n_distance_bins
    return ((rows[:, 0] * (cfg.energy_bins + 1) + rows[:, 1]) * nd + rows[:, 2]) * nd + rows[:, 3]


def _decode(codes: np.ndarray, cfg: AbstractionConfig) -> np.ndarray:
    nd = cfg.n_distance_bins
    du = codes % nd
    rest = codes // nd
    do = rest % nd
    rest //= nd
    e = rest % (cfg.energy_bins + 1)
    m = rest // (cfg.energy_bins + 1)
    return np.column_stack((m, e, do, du))


def estimate_dtmc(traces: Sequence[EpisodeTrace], cfg: AbstractionConfig | None = None) -> Dtmc:
    """Maximum-likelihood chain ``P(s -> s') = count(s -> s') / count(s)``.

    Only visited states appear; no smoothing. The initial distribution is
    the empirical distribution of trace start states.
    """
    cfg = cfg or AbstractionConfig()
    return estimate_from_sequences([abstract_trace_array(tr, cfg) for tr in traces], cfg)


def estimate_from_sequences(sequences: Sequence[np.ndarray], cfg: AbstractionConfig | None = None) -> Dtmc:
    """Same estimator over ready-made ``(T, 4)`` abstract-state arrays."""
    cfg = cfg or AbstractionConfig()
    if len(sequences) == 0:
        raise ValueError("cannot estimate a DTMC from zero traces")
    starts, src, dst, finals = [], [], [], []
    for rows in sequences:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        terminal = _terminal_mask(rows)
        if not terminal.size or not terminal[-1] or terminal[:-1].any():
            raise MalformedTraceError("an abstract sequence must end in, and only in, its final terminal state")
        codes = _encode(rows, cfg)
        starts.append(codes[0])
        src.append(codes[:-1])
        dst.append(codes[1:])
        finals.append(codes[-1])
    src_all = np.concatenate(src)
    dst_all = np.concatenate(dst)
    codes = np.unique(np.concatenate((src_all, dst_all, np.asarray(starts), np.asarray(finals))))
    n = codes.size
    si = np.searchsorted(codes, src_all)
    di = np.searchsorted(codes, dst_all)

    counts = sparse.coo_matrix((np.ones(si.size), (si, di)), shape=(n, n)).tocsr()
    counts.sum_duplicates()
    departures = np.asarray(counts.sum(axis=1)).ravel()

    states = _decode(codes, cfg)
    terminal = _terminal_mask(states)
    # terminal states are never departed in a well-formed trace
    loops = sparse.csr_matrix((np.ones(int(terminal.sum())), (np.flatnonzero(terminal), np.flatnonzero(terminal))), shape=(n, n))
    inv = np.zeros(n)
    inv[departures > 0] = 1.0 / departures[departures > 0]
    probs = sparse.diags(inv) @ counts + loops

    initial = np.bincount(np.searchsorted(codes, np.asarray(starts)), minlength=n).astype(np.float64)
    initial /= initial.sum()
    unsafe = (states[:, 0] == MissionMode.IN_UNSAFE_ZONE).astype(np.float64)
    return Dtmc(
        [AbstractState(*map(int, s)) for s in states],
        initial,
        probs.tocsr(),
        {"unsafe": unsafe},
        counts=departures.astype(np.int64),
        cfg_hash=cfg.digest(),
    )


# --- text format ---------------------------------------------------------------
#
#   dtmc <n_states> <cfg_hash>
#   s <index> <m> <energy_bin> <d_o_bin> <d_u_bin> <unsafe_reward> <initial_prob>
#   t <from> <to> <probability>
#
# '#' starts a comment line; floats are written with repr() so a round trip is exact.


def _g(x: float) -> str:
    return repr(float(x))


def dtmc_lines(dtmc: Dtmc):
    yield "# amlas-rl DTMC: s <i> <m> <e> <do> <du> <reward> <init> / t <from> <to> <p>"
    yield f"dtmc {dtmc.n_states} {dtmc.cfg_hash or '-'}"
    reward = dtmc.rewards.get("unsafe", np.zeros(dtmc.n_states))
    for i, s in enumerate(dtmc.states):
        yield f"s {i} {s.mode} {s.energy_bin} {s.d_obstacle_bin} {s.d_unsafe_bin} {_g(reward[i])} {_g(dtmc.initial[i])}"
    coo = dtmc.transitions.tocoo()
    order = np.lexsort((coo.col, coo.row))
    for k in order:
        yield f"t {coo.row[k]} {coo.col[k]} {_g(coo.data[k])}"


def export_dtmc(dtmc: Dtmc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dtmc_lines(dtmc):
            fh.write(line + "\n")


def parse_dtmc(text: str) -> Dtmc:
    n = None
    cfg_hash = ""
    states: dict[int, tuple] = {}
    edges: dict[tuple[int, int], float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "dtmc":
                if n is not None or len(parts) != 3:
                    raise DtmcFormatError(lineno, "expected a single header 'dtmc <n_states> <cfg_hash>'")
                n = int(parts[1])
                cfg_hash = "" if parts[2] == "-" else parts[2]
            elif n is None:
                raise DtmcFormatError(lineno, "header line 'dtmc ...' must come first")
            elif parts[0] == "s":
                if len(parts) != 8:
                    raise DtmcFormatError(lineno, f"state line needs 7 fields, got {len(parts) - 1}")
                i = int(parts[1])
                if not 0 <= i < n or i in states:
                    raise DtmcFormatError(lineno, f"bad or duplicate state index {i}")
                states[i] = (tuple(int(v) for v in parts[2:6]), float(parts[6]), float(parts[7]))
            elif parts[0] == "t":
                if len(parts) != 4:
                    raise DtmcFormatError(lineno, f"transition line needs 3 fields, got {len(parts) - 1}")
                i, j, p = int(parts[1]), int(parts[2]), float(parts[3])
                if not (0 <= i < n and 0 <= j < n):
                    raise DtmcFormatError(lineno, f"transition {i}->{j} references an unknown state")
                if (i, j) in edges:
                    raise DtmcFormatError(lineno, f"duplicate transition {i}->{j}")
                if not math.isfinite(p):
                    raise DtmcFormatError(lineno, "probability must be finite")
                edges[(i, j)] = p
            else:
                raise DtmcFormatError(lineno, f"unknown record type {parts[0]!r}")
        except ValueError as exc:
            if isinstance(exc, DtmcFormatError):
                raise
            raise DtmcFormatError(lineno, str(exc)) from None
    if n is None:
        raise DtmcFormatError(0, "missing 'dtmc' header")
    if len(states) != n:
        missing = sorted(set(range(n)) - set(states))
        raise DtmcFormatError(0, f"header declares {n} states; missing state lines for {missing[:5]}")
    order = [states[i] for i in range(n)]
    dtmc = Dtmc.from_edges([s[0] for s in order], [s[2] for s in order], edges, {"unsafe": [s[1] for s in order]})
    dtmc.cfg_hash = cfg_hash
    dtmc.validate()
    return dtmc


def import_dtmc(path) -> Dtmc:
    with open(path, encoding="utf-8") as fh:
        return parse_dtmc(fh.read())

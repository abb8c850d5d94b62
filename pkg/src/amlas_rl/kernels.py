"""Hot inner loops, each in two flavours.

The ``_*_loop`` functions are scalar loops compiled with numba; the
``_*_np`` functions are vectorised numpy equivalents used when numba is
unavailable or disabled (see :mod:`amlas_rl._accel`). Both flavours are kept
importable through :data:`numba_impl` and :data:`numpy_impl` so the test
suite and the benchmark can compare them directly.
"""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from amlas_rl._accel import HAVE_NUMBA, USE_NUMBA, njit

N_BEAMS = 16
SECTOR = 2.0 * math.pi / N_BEAMS
TWO_PI = 2.0 * math.pi


# --- kinematics -------------------------------------------------------------


def _kinematics_loop(x, y, heading, v_left, v_right, scale, axle, half_extent):
    speed = 0.5 * (v_left + v_right) * scale
    turn = (v_right - v_left) / axle * scale
    nx = x + speed * math.cos(heading)
    ny = y + speed * math.sin(heading)
    nx = min(max(nx, -half_extent), half_extent)
    ny = min(max(ny, -half_extent), half_extent)
    nh = heading + turn
    nh = (nh + math.pi) % TWO_PI - math.pi
    return nx, ny, nh


# scalar maths is already the fastest pure-Python route
_kinematics_np = _kinematics_loop


# --- distances --------------------------------------------------------------


def _distances_loop(x, y, goal, zones, obstacle):
    d_goal = math.hypot(goal[0] - x, goal[1] - y)
    d_obs = math.hypot(obstacle[0] - x, obstacle[1] - y)
    d_zone = math.inf
    for i in range(zones.shape[0]):
        d = math.hypot(zones[i, 0] - x, zones[i, 1] - y)
        if d < d_zone:
            d_zone = d
    return d_goal, d_obs, d_zone


def _distances_np(x, y, goal, zones, obstacle):
    d_goal = math.hypot(goal[0] - x, goal[1] - y)
    d_obs = math.hypot(obstacle[0] - x, obstacle[1] - y)
    if zones.shape[0] == 0:
        return d_goal, d_obs, math.inf
    d_zone = float(np.min(np.hypot(zones[:, 0] - x, zones[:, 1] - y)))
    return d_goal, d_obs, d_zone


# --- pseudo-lidar -----------------------------------------------------------


def _beam_fill_loop(out, offset, x, y, heading, points, max_range):
    for i in range(points.shape[0]):
        dx = points[i, 0] - x
        dy = points[i, 1] - y
        d = math.hypot(dx, dy)
        if d >= max_range:
            continue
        bearing = (math.atan2(dy, dx) - heading) % TWO_PI
        k = int(bearing / SECTOR)
        if k >= N_BEAMS:
            k = N_BEAMS - 1
        value = 1.0 - d / max_range
        if value > out[offset + k]:
            out[offset + k] = value


def _observe_loop(x, y, heading, goal, zones, obstacle, max_range):
    out = np.zeros(3 * N_BEAMS)
    _beam_fill_loop(out, 0, x, y, heading, goal.reshape(1, 2), max_range)
    _beam_fill_loop(out, N_BEAMS, x, y, heading, zones, max_range)
    _beam_fill_loop(out, 2 * N_BEAMS, x, y, heading, obstacle.reshape(1, 2), max_range)
    return out


def _beams_np(x, y, heading, points, max_range):
    beams = np.zeros(N_BEAMS)
    if points.shape[0] == 0:
        return beams
    dx = points[:, 0] - x
    dy = points[:, 1] - y
    d = np.hypot(dx, dy)
    near = d < max_range
    if not near.any():
        return beams
    bearing = np.mod(np.arctan2(dy[near], dx[near]) - heading, TWO_PI)
    k = np.minimum((bearing / SECTOR).astype(np.int64), N_BEAMS - 1)
    np.maximum.at(beams, k, 1.0 - d[near] / max_range)
    return beams


def _observe_np(x, y, heading, goal, zones, obstacle, max_range):
    return np.concatenate(
        (
            _beams_np(x, y, heading, goal.reshape(1, 2), max_range),
            _beams_np(x, y, heading, zones, max_range),
            _beams_np(x, y, heading, obstacle.reshape(1, 2), max_range),
        )
    )


# --- Jacobi value iteration on a CSR matrix ---------------------------------


def _jacobi_loop(indptr, indices, data, b, x0, tol, max_sweeps):
    n = b.shape[0]
    x = x0.copy()
    nxt = np.empty(n)
    sweeps = 0
    delta = math.inf
    while sweeps < max_sweeps:
        delta = 0.0
        for i in range(n):
            acc = b[i]
            for j in range(indptr[i], indptr[i + 1]):
                acc += data[j] * x[indices[j]]
            diff = abs(acc - x[i])
            if diff > delta:
                delta = diff
            nxt[i] = acc
        x, nxt = nxt, x
        sweeps += 1
        if delta < tol:
            break
    return x, sweeps, delta


def _jacobi_np(indptr, indices, data, b, x0, tol, max_sweeps):
    from scipy.sparse import csr_matrix

    n = b.shape[0]
    a = csr_matrix((data, indices, indptr), shape=(n, n))
    x = x0.copy()
    sweeps = 0
    delta = math.inf
    while sweeps < max_sweeps:
        nxt = a @ x + b
        delta = float(np.max(np.abs(nxt - x))) if n else 0.0
        x = nxt
        sweeps += 1
        if delta < tol:
            break
    return x, sweeps, delta


numpy_impl = SimpleNamespace(
    name="numpy",
    kinematics=_kinematics_np,
    distances=_distances_np,
    observe=_observe_np,
    jacobi=_jacobi_np,
)

if HAVE_NUMBA:
    _beam_fill_loop = njit(_beam_fill_loop)
    numba_impl = SimpleNamespace(
        name="numba",
        kinematics=njit(_kinematics_loop),
        distances=njit(_distances_loop),
        observe=njit(_observe_loop),
        jacobi=njit(_jacobi_loop),
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl

kinematics = active.kinematics
distances = active.distances
observe = active.observe
jacobi = active.jacobi

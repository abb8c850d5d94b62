"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--episodes 20]

Per-kernel timings call both implementations directly in this process.
The episode timing runs a short rollout twice in child processes, once
with ``AMLAS_RL_DISABLE_NUMBA=1``, so it measures the switch users see.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from amlas_rl import kernels
from amlas_rl.env import WorldConfig, reset

EPISODE_SNIPPET = """
import time
import numpy as np
from amlas_rl import env
rng = np.random.default_rng(0)
policy = lambda obs: rng.uniform(-1, 1, 2)
env.run_episode(env.WorldConfig(), policy, 0)  # compile / warm up
t = time.perf_counter()
for s in range({episodes}):
    env.run_episode(env.WorldConfig(), policy, s)
print(time.perf_counter() - t)
"""


def kernel_cases():
    s = reset(WorldConfig(), 1)
    x, y, h = float(s.position[0]), float(s.position[1]), s.heading
    rng = np.random.default_rng(0)
    n = 400
    dense = rng.uniform(0, 1, (n, n)) * (rng.uniform(0, 1, (n, n)) < 0.02)
    dense *= 0.9 / np.maximum(dense.sum(axis=1, keepdims=True), 1e-12)
    from scipy.sparse import csr_matrix

    a = csr_matrix(dense)
    b = rng.uniform(0, 0.1, n)
    return {
        "kinematics": lambda impl: impl.kinematics(x, y, h, 0.3, 0.7, 0.05, 0.2, 2.0),
        "distances": lambda impl: impl.distances(x, y, s.goal, s.unsafe_zones, s.obstacle),
        "observe": lambda impl: impl.observe(x, y, h, s.goal, s.unsafe_zones, s.obstacle, 3.0),
        "jacobi (400 states)": lambda impl: impl.jacobi(
            a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data, b, np.zeros(n), 1e-12, 1_000_000
        ),
    }


def time_call(fn, repeat: int) -> float:
    fn()  # warm-up, includes JIT compilation
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def episode_seconds(episodes: int, disable: bool) -> float:
    child_env = dict(os.environ, AMLAS_RL_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run(
        [sys.executable, "-c", EPISODE_SNIPPET.format(episodes=episodes)], env=child_env, capture_output=True, text=True, check=True
    )
    return float(out.stdout.strip())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--episodes", type=int, default=20)
    args = parser.parse_args(argv)

    if kernels.numba_impl is None:
        print("numba is not importable; nothing to compare")
        return 1
    print(f"{'kernel':<22}{'numba':>12}{'numpy':>12}{'speed-up':>10}")
    for name, case in kernel_cases().items():
        t_nb = time_call(lambda: case(kernels.numba_impl), args.repeat)
        t_np = time_call(lambda: case(kernels.numpy_impl), args.repeat)
        print(f"{name:<22}{t_nb * 1e6:>10.2f}us{t_np * 1e6:>10.2f}us{t_np / t_nb:>9.1f}x")

    t_nb = episode_seconds(args.episodes, disable=False)
    t_np = episode_seconds(args.episodes, disable=True)
    label = f"{args.episodes} episodes"
    print(f"{label:<22}{t_nb:>11.3f}s{t_np:>11.3f}s{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

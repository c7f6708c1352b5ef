"""Compare the compiled projection solver against the pure-Python fallback.

Runs identical crowded-step workloads through both backends, checks the
outputs are bit-identical, and prints the timing ratio.

Usage: python3 benchmarks/bench_solver.py [--agents 20,60,120] [--repeats 5]
"""

import argparse
import time

import numpy as np

from blocknav import _solver_py
from blocknav.dynamics import SolverConfig
from blocknav.nn import rng_stream

try:
    from blocknav import _solver
except ImportError:
    _solver = None


def crowded_case(n: int, seed: int):
    """n agents packed into a strip, all pushing toward the opposite side."""
    rng = rng_stream(seed, 0)
    side = max(4.0, np.sqrt(n) * 0.9)
    pos = rng.uniform(0.5, side - 0.5, size=(n, 2))
    # spread overlapping spawns apart so the initial state is feasible
    for _ in range(200):
        d = pos[:, None, :] - pos[None, :, :]
        dist = np.hypot(d[..., 0], d[..., 1])
        np.fill_diagonal(dist, np.inf)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] >= 0.45:
            break
        shift = (pos[i] - pos[j]) / max(dist[i, j], 1e-9)
        pos[i] = np.clip(pos[i] + shift * 0.25, 0.3, side - 0.3)
    target = np.array([side / 2.0, side / 2.0])
    to_mid = target - pos
    norms = np.maximum(np.hypot(to_mid[:, 0], to_mid[:, 1]), 1e-9)
    desired = 0.2 * to_mid / norms[:, None]
    obstacles = np.array([[side / 2 - 0.5, side / 2 - 0.5, side / 2 + 0.5, side / 2 + 0.5]])
    bounds = np.array([0.0, 0.0, side, side])
    return pos, desired, obstacles, bounds


def run(backend, case, cfg, repeats):
    pos, desired, obstacles, bounds = case
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out, stalls = backend.solve_step(
            pos, desired, 0.2, obstacles, bounds,
            cfg.substeps, cfg.projection_sweeps, cfg.tolerance, cfg.bisect_iters,
        )
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--agents", default="20,60,120")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _solver is None:
        print("compiled solver not built; run pip install -e . first")
        return

    cfg = SolverConfig()
    print(f"{'agents':>7} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}  identical")
    for n in (int(v) for v in args.agents.split(",")):
        case = crowded_case(n, args.seed)
        ref, t_py = run(_solver_py, case, cfg, args.repeats)
        fast, t_c = run(_solver, case, cfg, args.repeats)
        same = np.array_equal(ref, np.asarray(fast))
        assert same, f"backends disagree at n={n}"
        print(
            f"{n:>7} {t_py * 1e3:>10.2f} {t_c * 1e3:>12.2f} "
            f"{t_py / t_c:>8.1f}x  {same}"
        )


if __name__ == "__main__":
    main()

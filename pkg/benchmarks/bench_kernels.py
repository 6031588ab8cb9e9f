"""Benchmark the compiled kernel backend against the numpy reference.

Times each kernel on planner-shaped workloads (13-branch vehicle tree) and,
with --e2e, a full planner step per backend in subprocesses (the backend is
fixed at import time via BRANCHMPC_KERNELS).

Usage: python3 benchmarks/bench_kernels.py [--repeats 2000] [--e2e]
"""

from __future__ import annotations

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from branchmpc._kernels import pure

try:
    from branchmpc._kernels import native
except ImportError:
    native = None

rng = np.random.default_rng(7)


def _interior_soc(d: int) -> np.ndarray:
    u = rng.normal(size=d)
    u[0] = np.linalg.norm(u[1:]) + 1.0
    return u


def workloads():
    """(name, callable(impl)) pairs sized like one 13-branch planner step."""
    e = rng.normal(scale=8.0, size=(78, 2))   # 13 branches x 6 samples
    z = rng.normal(scale=8.0, size=(78, 2))
    margins = rng.normal(size=12)
    xs = rng.normal(size=(78, 4))
    us = rng.normal(size=(78, 2))
    s_blocks = [_interior_soc(3) for _ in range(40)]
    z_blocks = [_interior_soc(3) for _ in range(40)]
    scalings = [pure.soc_nt_scaling(s, zz) for s, zz in zip(s_blocks, z_blocks)]
    v = rng.normal(size=3)
    orthant_u = rng.uniform(0.5, 2.0, size=600)
    orthant_du = rng.normal(size=600)

    return [
        ("box_collision (78 pts)",
         lambda impl: impl.box_collision(e, z, 8.0, 2.0, 10.0)),
        ("circle_collision (78 pts)",
         lambda impl: impl.circle_collision(e, z, 5.0)),
        ("smooth_min (12 values)",
         lambda impl: impl.smooth_min(margins, 0.1)),
        ("vehicle_linearize_batch (78)",
         lambda impl: impl.vehicle_linearize_batch(xs, us, 0.25)),
        ("soc_nt_scaling (40 blocks, d=3)",
         lambda impl: [impl.soc_nt_scaling(s, zz)
                       for s, zz in zip(s_blocks, z_blocks)]),
        ("soc_apply_w (40 blocks)",
         lambda impl: [impl.soc_apply_w(eta, wbar, v)
                       for eta, wbar, _ in scalings]),
        ("soc_wtw_matrix (40 blocks)",
         lambda impl: [impl.soc_wtw_matrix(eta, wbar)
                       for eta, wbar, _ in scalings]),
        ("soc_max_step (40 blocks)",
         lambda impl: [impl.soc_max_step(s, v) for s in s_blocks]),
        ("orthant_max_step (600)",
         lambda impl: impl.orthant_max_step(orthant_u, orthant_du)),
    ]


def time_call(fn, repeats: int) -> float:
    """Median seconds per call."""
    fn()  # warm up
    samples = []
    for _ in range(7):
        start = time.perf_counter()
        for _ in range(repeats):
            fn()
        samples.append((time.perf_counter() - start) / repeats)
    return statistics.median(samples)


def bench_kernels(repeats: int) -> None:
    if native is None:
        print("compiled backend not built; showing pure timings only\n")
    width = max(len(name) for name, _ in workloads())
    header = f"{'kernel':<{width}}  {'pure':>10}  {'native':>10}  {'speedup':>7}"
    print(header)
    print("-" * len(header))
    for name, call in workloads():
        t_pure = time_call(lambda: call(pure), repeats)
        if native is not None:
            t_native = time_call(lambda: call(native), repeats)
            print(f"{name:<{width}}  {t_pure * 1e6:>8.1f}us  "
                  f"{t_native * 1e6:>8.1f}us  {t_pure / t_native:>6.1f}x")
        else:
            print(f"{name:<{width}}  {t_pure * 1e6:>8.1f}us")


E2E_SNIPPET = """
import statistics, time
import branchmpc
from branchmpc import ocp, sim
cfg = sim.overtake_scenario(alpha=0.9, seed=0)
x, z = cfg.x0, cfg.z0
prev = None
times = []
for _ in range(8):
    t0 = time.perf_counter()
    prev = ocp.plan(x, z, prev, cfg.planner, current_policy=0)
    times.append(time.perf_counter() - t0)
print(f"{branchmpc.backend_name()}: median planner step "
      f"{statistics.median(times) * 1e3:.0f} ms over {len(times)} solves")
"""


def bench_end_to_end() -> None:
    print("\nend-to-end planner step (13-branch CVaR tree), per backend:")
    for backend in ("pure", "native"):
        env = dict(os.environ, BRANCHMPC_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        print("  " + out.stdout.strip())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=2000,
                        help="calls per timing sample")
    parser.add_argument("--e2e", action="store_true",
                        help="also time a full planner step per backend")
    args = parser.parse_args()
    bench_kernels(args.repeats)
    if args.e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()

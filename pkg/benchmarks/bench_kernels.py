"""Benchmark the triangular Volterra sweep: numba JIT vs pure numpy.

Both backends are exercised on the same random workload (the forward-state
recursion with drift, diffusion and two jump atoms).  The JIT warm-up call is
excluded from timing; repeats report mean / std wall time and the result
agreement between the backends.

Run:

    python benchmarks/bench_kernels.py [n_steps] [n_paths]
"""

import statistics
import sys
import time

import numpy as np

from volterra_control import _kernels


def make_workload(n_steps, n_paths, n_atoms=2, seed=123):
    rng = np.random.default_rng(seed)
    n_nodes = n_steps + 1
    source = np.ones((n_nodes, n_paths))
    a = np.tril(rng.normal(0.05, 0.01, size=(n_nodes, n_nodes)))
    b = np.tril(rng.normal(0.2, 0.02, size=(n_nodes, n_nodes)))
    c = np.ones(n_steps)
    db = rng.normal(scale=0.1, size=(n_paths, n_steps))
    p = np.tril(rng.normal(0.0, 0.05, size=(n_atoms, n_nodes, n_nodes)))
    cj = rng.normal(scale=0.02, size=(n_atoms, n_paths, n_steps))
    return source, a, c, b, db, p, cj, 1.0 / n_steps


def time_backend(fn, args, repeats=5):
    durations = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        durations.append(time.perf_counter() - t0)
    return {
        "mean": statistics.mean(durations),
        "std": statistics.pstdev(durations),
        "result": result,
    }


def main():
    n_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    n_paths = int(sys.argv[2]) if len(sys.argv) > 2 else 20_000
    args = make_workload(n_steps, n_paths)
    print(f"workload: n_steps={n_steps} n_paths={n_paths} atoms=2")

    out_np = time_backend(_kernels.volterra_sweep_numpy, args)
    print(f"numpy : {out_np['mean']*1e3:8.1f} ms  (+/- {out_np['std']*1e3:.1f})")

    if not _kernels.HAVE_NUMBA:
        print("numba : not installed -- numpy path only "
              "(install the 'accel' extra to compare)")
        return

    _kernels.volterra_sweep_numba(*args)  # warm-up / JIT compile, untimed
    out_nb = time_backend(_kernels.volterra_sweep_numba, args)
    print(f"numba : {out_nb['mean']*1e3:8.1f} ms  (+/- {out_nb['std']*1e3:.1f})")

    gap = np.max(np.abs(out_np["result"] - out_nb["result"]))
    rel = out_np["mean"] / out_nb["mean"]
    print(f"speedup x{rel:.2f}, max backend gap {gap:.3e}")


if __name__ == "__main__":
    main()

import subprocess
import sys

import numpy as np
import pytest

from volterra_control import _kernels


def _random_problem(seed=0, n_steps=40, n_paths=300, n_atoms=2):
    rng = np.random.default_rng(seed)
    n_nodes = n_steps + 1
    source = np.repeat(rng.normal(size=(n_nodes, 1)), n_paths, axis=1)
    a = np.tril(rng.normal(scale=0.2, size=(n_nodes, n_nodes)))
    b = np.tril(rng.normal(scale=0.3, size=(n_nodes, n_nodes)))
    c = rng.uniform(0.0, 1.0, size=n_steps)
    db = rng.normal(scale=0.1, size=(n_paths, n_steps))
    p = np.tril(rng.normal(scale=0.2, size=(n_atoms, n_nodes, n_nodes)))
    cj = rng.normal(scale=0.05, size=(n_atoms, n_paths, n_steps))
    return source, a, c, b, db, p, cj, 0.025


def test_numpy_backend_matches_direct_recursion():
    source, a, c, b, db, p, cj, dt = _random_problem()
    got = _kernels.volterra_sweep_numpy(source, a, c, b, db, p, cj, dt)
    n_paths, n_nodes = db.shape[0], source.shape[0]
    ref = np.empty((n_paths, n_nodes))
    ref[:, 0] = source[0]
    for i in range(1, n_nodes):
        acc = source[i].copy()
        for j in range(i):
            term = (a[i, j] - c[j]) * ref[:, j] * dt + b[i, j] * ref[:, j] * db[:, j]
            for q in range(p.shape[0]):
                term += ref[:, j] * p[q, i, j] * cj[q, :, j]
            acc += term
        ref[:, i] = acc
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_numba_backend_matches_numpy():
    source, a, c, b, db, p, cj, dt = _random_problem(seed=3)
    ref = _kernels.volterra_sweep_numpy(source, a, c, b, db, p, cj, dt)
    got = _kernels.volterra_sweep_numba(source, a, c, b, db, p, cj, dt)
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_env_flag_selects_numpy_fallback():
    # the flag is read at import time, so probe it in a fresh interpreter
    code = (
        "import volterra_control._kernels as k; "
        "print(k.NUMBA_ENABLED)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "VOLTERRA_CONTROL_NUMBA": "0",
             "PYTHONPATH": ":".join(sys.path)},
    )
    assert out.stdout.strip() == "False", out.stderr

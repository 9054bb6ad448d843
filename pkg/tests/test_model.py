import math

import numpy as np
import pytest

from volterra_control.model import (
    Kernel,
    KernelDomainError,
    LevyMeasure,
    ValidationError,
    build_time_grid,
    eval_kernel,
    levy_integral,
    time_quadrature_weights,
    validate_scenario,
)

S0_RAW = {
    "grid": {"horizon": 1.0, "n_steps": 100},
    "initial": 1.0,
    "gamma": 0.0,
    "alpha_kernel": {"kind": "constant", "value": 0.05},
    "beta_kernel": {"kind": "constant", "value": 0.2},
    "levy": {"atoms": []},
    "pi_kernels": [],
    "filtration": {"mode": "trivial"},
    "mc": {"n_paths": 1000, "seed": 42, "n_blocks": 8},
}


# --------------------------------------------------------------------------- #
# time grid
# --------------------------------------------------------------------------- #

def test_grid_nodes_uniform_partition():
    grid = build_time_grid(1.0, 4)
    assert np.allclose(grid.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_grid_dt():
    assert build_time_grid(2.0, 2).dt == 1.0


@pytest.mark.parametrize("horizon,n", [(1.0, 1), (0.0, 4), (-1.0, 4), (1.0, 0)])
def test_grid_rejects_bad_inputs(horizon, n):
    with pytest.raises(ValidationError):
        build_time_grid(horizon, n)


def test_grid_gaps_equal():
    grid = build_time_grid(0.7, 97)
    gaps = np.diff(grid.nodes)
    assert np.all(np.abs(gaps - grid.dt) <= 1e-12 * grid.horizon)


def test_quadrature_weights_integrate_constants():
    grid = build_time_grid(2.5, 40)
    assert math.isclose(time_quadrature_weights(grid).sum(), 2.5, rel_tol=1e-14)


# --------------------------------------------------------------------------- #
# kernels
# --------------------------------------------------------------------------- #

def test_constant_kernel_value():
    k = Kernel.constant(0.05)
    assert eval_kernel(k, 0.7, 0.2) == 0.05


def test_exp_decay_kernel_value():
    k = Kernel.exp_decay(0.05, 1.0)
    assert math.isclose(eval_kernel(k, 1.0, 0.0), 0.05 * math.exp(-1.0), rel_tol=1e-14)


def test_kernel_outside_triangle_raises():
    with pytest.raises(KernelDomainError):
        eval_kernel(Kernel.constant(1.0), 0.2, 0.7)


def test_exp_decay_derivative_matches_finite_differences():
    # central differences converge at second order: quartering h should cut
    # the defect by ~16
    k = Kernel.exp_decay(0.05, 1.3)
    t, s = 0.8, 0.3
    exact = k.d_first(t, s)

    def defect(h):
        return abs((k(t + h, s) - k(t - h, s)) / (2 * h) - exact)

    d1, d2 = defect(1e-3), defect(2.5e-4)
    assert d1 < 1e-6
    assert d2 < d1 / 8


def test_table_kernel_roundtrip():
    grid = build_time_grid(1.0, 3)
    vals = np.arange(10, dtype=float)  # (n+1)(n+2)/2 entries
    k = Kernel.from_table(vals, 3)
    mat = k.at_nodes(grid)
    assert mat[0, 0] == 0.0 and mat[2, 1] == 4.0 and mat[3, 3] == 9.0
    assert np.all(mat[np.triu_indices(4, k=1)] == 0.0)
    assert np.allclose(k.row_at_nodes(grid, 2), [3.0, 4.0, 5.0])


def test_table_kernel_scalar_query_raises():
    k = Kernel.from_table(np.zeros(10), 3)
    with pytest.raises(KernelDomainError):
        k(0.5, 0.25)


def test_table_kernel_wrong_length():
    with pytest.raises(ValidationError):
        Kernel.from_table(np.zeros(9), 3)


# --------------------------------------------------------------------------- #
# discrete jump measure
# --------------------------------------------------------------------------- #

def test_levy_single_atom_mean():
    m = LevyMeasure.from_atoms([[-0.1, 0.5]])
    assert math.isclose(levy_integral(m, lambda e: e), -0.05, rel_tol=1e-14)


def test_levy_log_moment():
    m = LevyMeasure.from_atoms([[-0.1, 0.5]])
    val = levy_integral(m, lambda e: math.log1p(e) - e)
    assert math.isclose(val, 0.5 * (math.log(0.9) + 0.1), rel_tol=1e-12)


def test_levy_empty_measure():
    m = LevyMeasure.from_atoms([])
    assert levy_integral(m, lambda e: e**2) == 0.0


def test_levy_integral_linearity():
    rng = np.random.default_rng(7)
    m = LevyMeasure.from_atoms([[0.3, 1.2], [-0.4, 0.7], [1.5, 0.1]])
    for _ in range(20):
        a, b = rng.normal(size=2)
        f = lambda e: math.sin(e)
        g = lambda e: e**2 - 1.0
        lhs = levy_integral(m, lambda e: a * f(e) + b * g(e))
        rhs = a * levy_integral(m, f) + b * levy_integral(m, g)
        assert math.isclose(lhs, rhs, rel_tol=1e-13, abs_tol=1e-13)


@pytest.mark.parametrize("atoms", [[[0.0, 1.0]], [[0.5, -1.0]], [[0.5, 0.0]]])
def test_levy_rejects_degenerate_atoms(atoms):
    with pytest.raises(ValidationError):
        LevyMeasure.from_atoms(atoms)


# --------------------------------------------------------------------------- #
# scenario validation
# --------------------------------------------------------------------------- #

def test_validate_accepts_reference_scenario():
    spec = validate_scenario(dict(S0_RAW))
    assert spec.grid.n_steps == 100
    assert spec.time_invariant


def test_validate_rejects_jump_killing_positivity():
    raw = dict(S0_RAW)
    raw["levy"] = {"atoms": [[-1.5, 0.5]]}
    raw["pi_kernels"] = [{"kind": "constant", "value": -1.5}]
    with pytest.raises(ValidationError, match="positive"):
        validate_scenario(raw)


def test_validate_rejects_zero_initial():
    raw = dict(S0_RAW)
    raw["initial"] = 0.0
    with pytest.raises(ValidationError):
        validate_scenario(raw)


def test_validate_rejects_unknown_kernel_kind():
    raw = dict(S0_RAW)
    raw["alpha_kernel"] = {"kind": "fancy", "value": 1.0}
    with pytest.raises(ValidationError, match="kind"):
        validate_scenario(raw)


def test_validate_rejects_ambiguous_kernel():
    raw = dict(S0_RAW)
    raw["alpha_kernel"] = {"kind": "constant", "value": 1.0, "table": [1.0]}
    with pytest.raises(ValidationError, match="ambiguous"):
        validate_scenario(raw)


def test_validate_requires_grid_section():
    raw = dict(S0_RAW)
    del raw["grid"]
    with pytest.raises(ValidationError, match="grid"):
        validate_scenario(raw)


def test_validate_requires_kernel_per_atom():
    raw = dict(S0_RAW)
    raw["levy"] = {"atoms": [[0.5, 1.0]]}
    with pytest.raises(ValidationError, match="atom"):
        validate_scenario(raw)


def test_validate_gamma_table_length():
    raw = dict(S0_RAW)
    raw["gamma"] = [0.0] * 5
    with pytest.raises(ValidationError, match="gamma"):
        validate_scenario(raw)


def test_spec_is_immutable(s0):
    with pytest.raises((AttributeError, TypeError)):
        s0.convention = "paper_ode"

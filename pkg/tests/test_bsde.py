import math

import numpy as np
import pytest

from volterra_control.bsde import (
    recursive_utility,
    recursive_utility_bsde,
    solve_bsde,
)
from volterra_control.condexp import CondExpEngine
from volterra_control.controls import ControlFn
from volterra_control.fsvie import simulate_fsvie
from volterra_control.model import (
    FiltrationMode,
    LevyMeasure,
    RegressionSpec,
    build_time_grid,
    validate_scenario,
)
from volterra_control.paths import generate_noise

GRID = build_time_grid(1.0, 100)
EMPTY = LevyMeasure.from_atoms([])


def brownian_engine(noise, degree=2, mode="full"):
    return CondExpEngine(
        FiltrationMode(mode=mode), RegressionSpec(degree=degree, variables=("brownian",)), noise
    )


def test_null_solution_is_exactly_zero():
    noise = generate_noise(GRID, EMPTY, n_paths=256, seed=1, n_blocks=1)
    sol = solve_bsde(np.zeros(256), None, noise, brownian_engine(noise))
    assert np.all(sol.y == 0.0) and np.all(sol.z == 0.0)


def test_terminal_square_recovers_variance():
    noise = generate_noise(GRID, EMPTY, n_paths=20_000, seed=2, n_blocks=8)
    terminal = noise.brownian_levels[:, -1] ** 2
    sol = solve_bsde(terminal, None, noise, brownian_engine(noise))
    # projections preserve means, so the estimator error is the terminal SE
    se = terminal.std(ddof=1) / math.sqrt(noise.n_paths)
    assert abs(sol.y0 - 1.0) <= 3 * se


def test_linear_generator_matches_discrete_compounding():
    noise = generate_noise(GRID, EMPTY, n_paths=64, seed=3, n_blocks=1)
    engine = CondExpEngine(FiltrationMode(mode="trivial"), RegressionSpec(), noise)

    def gen(i, t, x, y, z, k):
        return y

    sol = solve_bsde(np.ones(64), gen, noise, engine)
    assert abs(sol.y0 - (1.0 + GRID.dt) ** GRID.n_steps) < 1e-12
    assert abs(sol.y0 - math.e) < 0.02 * math.e


def test_comparison_in_the_terminal_value():
    noise = generate_noise(GRID, EMPTY, n_paths=10_000, seed=4, n_blocks=8)
    terminal = noise.brownian_levels[:, -1]
    engine = brownian_engine(noise)
    lo = solve_bsde(terminal, None, noise, engine)
    hi = solve_bsde(terminal + 0.5, None, noise, engine)
    se = 0.5 / math.sqrt(noise.n_paths)
    assert hi.y0 - lo.y0 >= 0.5 - 3 * se


def test_martingale_coefficient_for_deterministic_integrand():
    # terminal int f dB with f(t) = t: fitted z should track f at each node.
    # The regression state must carry the running integral itself -- lossy
    # states (e.g. the Brownian level alone) cannot represent the target.
    noise = generate_noise(GRID, EMPTY, n_paths=40_000, seed=5, n_blocks=8)
    f = GRID.nodes[:-1]
    running = np.zeros((noise.n_paths, GRID.n_steps + 1))
    np.cumsum(noise.d_brownian * f, axis=1, out=running[:, 1:])
    terminal = running[:, -1]
    engine = CondExpEngine(
        FiltrationMode(mode="full"), RegressionSpec(degree=2, variables=("x",)),
        noise, x_paths=running,
    )
    sol = solve_bsde(terminal, None, noise, engine)
    for i in (20, 50, 80):
        t = GRID.nodes[i]
        se = math.sqrt((t**3 / 3.0 / GRID.dt + 2 * f[i] ** 2) / noise.n_paths)
        assert abs(sol.z[:, i].mean() - f[i]) <= 3 * se


def test_martingale_coefficient_noise_shrinks_with_paths():
    # node-averaged cross-path spread of the fitted coefficient decays like
    # 1/sqrt(n_paths); single nodes are too noisy to compare across seeds
    stds = []
    for n_paths in (5_000, 80_000):
        noise = generate_noise(GRID, EMPTY, n_paths=n_paths, seed=6, n_blocks=8)
        terminal = noise.brownian_levels[:, -1]
        sol = solve_bsde(terminal, None, noise, brownian_engine(noise))
        stds.append(sol.z.std(axis=0, ddof=1).mean())
    assert stds[1] < 0.5 * stds[0]


def test_jump_coefficient_for_compensated_count_terminal():
    levy = LevyMeasure.from_atoms([[1.0, 2.0]])
    noise = generate_noise(GRID, levy, n_paths=20_000, seed=7, n_blocks=8)
    terminal = noise.compensated_counts[0].sum(axis=1)
    engine = CondExpEngine(
        FiltrationMode(mode="full"),
        RegressionSpec(degree=2, variables=("brownian", "jump_counts")),
        noise,
    )
    sol = solve_bsde(terminal, None, noise, engine)
    k_means = sol.k[0].mean(axis=0)
    assert abs(k_means.mean() - 1.0) < 0.05
    assert np.max(np.abs(k_means - 1.0)) < 0.3


def test_flatness_in_trivial_mode_is_exact():
    noise = generate_noise(GRID, EMPTY, n_paths=128, seed=8, n_blocks=1)
    engine = CondExpEngine(FiltrationMode(mode="trivial"), RegressionSpec(), noise)
    sol = solve_bsde(np.full(128, 5.0), None, noise, engine)
    assert np.all(sol.y == 5.0)


def test_mean_level_flatness_under_regression():
    # projections preserve sample means exactly, so the value curve is flat
    # in expectation even when the state regression loses path information
    noise = generate_noise(GRID, EMPTY, n_paths=5_000, seed=9, n_blocks=8)
    terminal = noise.brownian_levels[:, 50] ** 2
    sol = solve_bsde(terminal, None, noise, brownian_engine(noise))
    means = sol.y.mean(axis=0)
    assert np.max(np.abs(means - terminal.mean())) < 1e-10


# --------------------------------------------------------------------------- #
# recursive utility
# --------------------------------------------------------------------------- #

def test_recursive_utility_unit_rate(s0_small, s0_noise):
    one = ControlFn.constant(1.0, s0_small.grid)
    fwd = simulate_fsvie(s0_small, s0_noise, one, through_node=s0_small.grid.n_steps - 1)
    y0, se = recursive_utility(s0_small, one, fwd)
    assert abs(y0 + 0.485) <= 3 * se
    assert se < 0.01


def test_recursive_utility_optimal_rate(s0_small, s0_noise):
    cstar = ControlFn.theta_cstar(1.0, s0_small.gamma, s0_small.convention)
    fwd = simulate_fsvie(s0_small, s0_noise, cstar, through_node=s0_small.grid.n_steps - 1)
    y0, se = recursive_utility(s0_small, cstar, fwd)
    assert abs(y0 - 0.015) <= 3 * se


def test_recursive_utility_flat_state_zero_log():
    # drift exactly offsetting the unit rate freezes the state at 1, so
    # log(c X) vanishes identically and the discount rate is irrelevant
    spec = validate_scenario({
        "grid": {"horizon": 1.0, "n_steps": 50},
        "initial": 1.0,
        "gamma": 5.0,
        "alpha_kernel": {"kind": "constant", "value": 1.0},
        "beta_kernel": {"kind": "constant", "value": 0.0},
        "levy": {"atoms": []},
        "pi_kernels": [],
        "filtration": {"mode": "trivial"},
        "mc": {"n_paths": 16, "seed": 1, "n_blocks": 1},
    })
    noise = generate_noise(spec.grid, spec.levy, 16, 1, 1)
    one = ControlFn.constant(1.0, spec.grid)
    fwd = simulate_fsvie(spec, noise, one)
    y0, se = recursive_utility(spec, one, fwd)
    assert y0 == 0.0 and se == 0.0


def test_generic_solver_cross_checks_closed_form(s0_small, s0_noise):
    one = ControlFn.constant(1.0, s0_small.grid)
    fwd = simulate_fsvie(s0_small, s0_noise, one, through_node=s0_small.grid.n_steps - 1)
    y0, _ = recursive_utility(s0_small, one, fwd)
    y0_bsde, _ = recursive_utility_bsde(s0_small, one, fwd, s0_noise)
    assert abs(y0_bsde - y0) < 0.02 * abs(y0)


def test_generic_solver_cross_check_with_discounting():
    spec = validate_scenario({
        "grid": {"horizon": 1.0, "n_steps": 100},
        "initial": 1.0,
        "gamma": 1.0,
        "alpha_kernel": {"kind": "constant", "value": 0.05},
        "beta_kernel": {"kind": "constant", "value": 0.2},
        "levy": {"atoms": []},
        "pi_kernels": [],
        "filtration": {"mode": "trivial"},
        "mc": {"n_paths": 20000, "seed": 11, "n_blocks": 8},
    })
    noise = generate_noise(spec.grid, spec.levy, spec.mc.n_paths, spec.mc.seed, 8)
    one = ControlFn.constant(1.0, spec.grid)
    fwd = simulate_fsvie(spec, noise, one, through_node=spec.grid.n_steps - 1)
    y0, _ = recursive_utility(spec, one, fwd)
    y0_bsde, _ = recursive_utility_bsde(spec, one, fwd, noise)
    assert abs(y0_bsde - y0) < 0.02 * max(abs(y0), 0.1)

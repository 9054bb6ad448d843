"""Domain model: time grids, two-time kernels, jump measures, scenarios.

Everything downstream (path generation, forward/backward solvers, the
control layer) consumes the immutable value types defined here:

* :class:`TimeGrid` -- uniform partition of ``[0, T]``.
* :class:`Kernel` -- coefficient ``K(t, s)`` on the triangle ``0 <= s <= t``.
* :class:`LevyMeasure` -- finite discrete measure of jump sizes.
* :class:`FiltrationMode` -- information available to the controller.
* :class:`ScenarioSpec` -- a fully validated model instance.

``validate_scenario`` is the single entry point that turns raw dictionaries
(parsed JSON) into a checked :class:`ScenarioSpec`.  All types are frozen
dataclasses and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ValidationError",
    "KernelDomainError",
    "TimeGrid",
    "Kernel",
    "LevyMeasure",
    "FiltrationMode",
    "McSpec",
    "RegressionSpec",
    "ScenarioSpec",
    "build_time_grid",
    "eval_kernel",
    "levy_integral",
    "validate_scenario",
    "time_quadrature_weights",
]

_REL_TOL = 1e-12


class ValidationError(ValueError):
    """A scenario or one of its components violates an invariant."""


class KernelDomainError(ValidationError):
    """Kernel evaluated outside the triangle ``0 <= s <= t`` (or off-grid)."""


# --------------------------------------------------------------------------- #
# Time grid
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_0 = 0 < t_1 < ... < t_n = T``."""

    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.horizon) or self.horizon <= 0.0:
            raise ValidationError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValidationError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def node_index(self, t: float) -> int:
        """Index of the grid node equal to ``t`` (within relative tolerance)."""
        idx = int(round(t / self.dt))
        if idx < 0 or idx > self.n_steps or abs(t - idx * self.dt) > _REL_TOL * max(1.0, self.horizon):
            raise KernelDomainError(f"t={t} is not a grid node")
        return idx


def build_time_grid(horizon: float, n_steps: int) -> TimeGrid:
    """Uniform grid with ``n_steps + 1`` nodes spanning ``[0, horizon]``."""
    return TimeGrid(horizon=float(horizon), n_steps=n_steps)


def time_quadrature_weights(grid: TimeGrid) -> np.ndarray:
    """Weights over nodes ``t_0 .. t_{n-1}`` integrating samples over ``[0, T]``.

    Trapezoid rule on ``[0, t_{n-1}]`` plus a left rectangle on the final
    interval: second-order accurate wherever the integrand is smooth while
    never sampling ``t = T`` (integrands such as the optimal consumption rate
    blow up there).
    """
    n, dt = grid.n_steps, grid.dt
    w = np.full(n, dt)
    w[0] = 0.5 * dt
    w[-1] = 1.5 * dt
    return w


# --------------------------------------------------------------------------- #
# Kernels
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class Kernel:
    """Two-time coefficient ``K(t, s)`` defined on ``{0 <= s <= t}``.

    Three kinds are supported:

    * ``constant``   -- ``K(t, s) = value``;
    * ``exp_decay``  -- ``K(t, s) = amplitude * exp(-rate * (t - s))``;
    * ``table``      -- values given on the lower triangle of a grid,
      row-major, one row per ``t``-node.

    ``constant`` and ``exp_decay`` have an analytic first-argument derivative;
    ``table`` falls back to finite differences along the first index.
    """

    kind: str
    value: float = 0.0
    amplitude: float = 0.0
    rate: float = 0.0
    table: np.ndarray | None = None  # flattened lower triangle, row-major
    table_n: int = 0

    # -- constructors -------------------------------------------------------

    @staticmethod
    def constant(value: float) -> "Kernel":
        return Kernel(kind="constant", value=float(value))

    @staticmethod
    def exp_decay(amplitude: float, rate: float) -> "Kernel":
        if rate < 0.0:
            raise ValidationError(f"exp_decay rate must be >= 0, got {rate}")
        return Kernel(kind="exp_decay", amplitude=float(amplitude), rate=float(rate))

    @staticmethod
    def from_table(values: Sequence[float], n_steps: int) -> "Kernel":
        values = np.asarray(values, dtype=float)
        expected = (n_steps + 1) * (n_steps + 2) // 2
        if values.ndim != 1 or values.size != expected:
            raise ValidationError(
                f"table kernel for n={n_steps} needs {expected} lower-triangular "
                f"values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("table kernel contains non-finite entries")
        return Kernel(kind="table", table=values, table_n=int(n_steps))

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "exp_decay", "table"):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")

    # -- queries ------------------------------------------------------------

    @property
    def time_invariant(self) -> bool:
        """True when ``K(t, s)`` does not depend on the first argument."""
        if self.kind == "constant":
            return True
        if self.kind == "exp_decay":
            return self.rate == 0.0
        return False

    def _table_entry(self, i: int, j: int) -> float:
        assert self.table is not None
        return float(self.table[i * (i + 1) // 2 + j])

    def __call__(self, t: float, s: float) -> float:
        if s > t + _REL_TOL * max(1.0, abs(t)):
            raise KernelDomainError(f"kernel evaluated outside triangle: t={t}, s={s}")
        if s < -_REL_TOL:
            raise KernelDomainError(f"kernel evaluated at negative time s={s}")
        if self.kind == "constant":
            return self.value
        if self.kind == "exp_decay":
            return self.amplitude * float(np.exp(-self.rate * (t - s)))
        # table: both arguments must sit on the table's grid
        if self.table_n <= 0:
            raise KernelDomainError("table kernel has no grid attached")
        raise KernelDomainError(
            "table kernels are evaluated through at_nodes(); scalar off-grid "
            "queries are not defined"
        )

    def at_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Matrix ``M[i, j] = K(t_i, t_j)`` for ``j <= i``; zeros above."""
        n = grid.n_steps
        out = np.zeros((n + 1, n + 1))
        if self.kind == "constant":
            out[np.tril_indices(n + 1)] = self.value
        elif self.kind == "exp_decay":
            t = grid.nodes
            diff = t[:, None] - t[None, :]
            vals = self.amplitude * np.exp(-self.rate * np.maximum(diff, 0.0))
            out = np.tril(vals)
        else:
            if self.table_n != n:
                raise KernelDomainError(
                    f"table kernel built for n={self.table_n}, grid has n={n}"
                )
            idx = np.tril_indices(n + 1)
            out[idx] = self.table
        return out

    def row_at_nodes(self, grid: TimeGrid, i: int) -> np.ndarray:
        """Row ``K(t_i, t_j)`` for ``j = 0..i`` without building the matrix."""
        n = grid.n_steps
        if not 0 <= i <= n:
            raise KernelDomainError(f"row index {i} outside the grid")
        if self.kind == "constant":
            return np.full(i + 1, self.value)
        if self.kind == "exp_decay":
            t = grid.nodes
            return self.amplitude * np.exp(-self.rate * (t[i] - t[: i + 1]))
        if self.table_n != n:
            raise KernelDomainError(
                f"table kernel built for n={self.table_n}, grid has n={n}"
            )
        start = i * (i + 1) // 2
        return np.asarray(self.table[start : start + i + 1])

    def d_first(self, t: float, s: float) -> float:
        """Analytic ``dK/dt (t, s)`` for constant and exp_decay kinds."""
        if self.kind == "constant":
            return 0.0
        if self.kind == "exp_decay":
            return -self.rate * self(t, s)
        raise KernelDomainError("table kernels only support node-based finite differences")

    def d_first_at_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Matrix of ``dK/dt (t_i, t_j)`` on the triangle.

        Analytic for constant / exp_decay; first-index finite differences for
        table kind (central where both neighbours stay inside the triangle).
        """
        n, dt = grid.n_steps, grid.dt
        if self.kind == "constant":
            return np.zeros((n + 1, n + 1))
        if self.kind == "exp_decay":
            return -self.rate * self.at_nodes(grid)
        vals = self.at_nodes(grid)
        out = np.zeros((n + 1, n + 1))
        for i in range(n + 1):
            for j in range(i + 1):
                if j <= i - 1 and i + 1 <= n:
                    out[i, j] = (vals[i + 1, j] - vals[i - 1, j]) / (2 * dt) if i - 1 >= j else \
                        (vals[i + 1, j] - vals[i, j]) / dt
                elif i + 1 <= n:
                    out[i, j] = (vals[i + 1, j] - vals[i, j]) / dt
                else:
                    out[i, j] = (vals[i, j] - vals[i - 1, j]) / dt if i - 1 >= j else 0.0
        return out


def eval_kernel(kernel: Kernel, t: float, s: float) -> float:
    """Evaluate ``K(t, s)`` with triangle-domain checking."""
    return kernel(t, s)


# --------------------------------------------------------------------------- #
# Jump measure
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class LevyMeasure:
    """Finite discrete jump-size measure: atoms ``e_m`` with weights ``w_m``."""

    sizes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        sizes = np.atleast_1d(np.asarray(self.sizes, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if sizes.shape != weights.shape:
            raise ValidationError("jump sizes and weights must have equal length")
        if np.any(sizes == 0.0):
            raise ValidationError("jump sizes must be nonzero")
        if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
            raise ValidationError("jump weights must be positive and finite")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", weights)

    @staticmethod
    def from_atoms(atoms: Sequence[Sequence[float]]) -> "LevyMeasure":
        atoms = list(atoms)
        if not atoms:
            return LevyMeasure(sizes=np.empty(0), weights=np.empty(0))
        arr = np.asarray(atoms, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValidationError("atoms must be [size, weight] pairs")
        return LevyMeasure(sizes=arr[:, 0], weights=arr[:, 1])

    @property
    def n_atoms(self) -> int:
        return int(self.sizes.size)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def integral(self, f: Callable[[float], float]) -> float:
        """``sum_m w_m * f(e_m)`` (zero for the empty measure)."""
        if self.n_atoms == 0:
            return 0.0
        vals = np.array([f(e) for e in self.sizes], dtype=float)
        return float(self.weights @ vals)


def levy_integral(measure: LevyMeasure, f: Callable[[float], float]) -> float:
    """Integral of ``f`` against the discrete measure."""
    return measure.integral(f)


# --------------------------------------------------------------------------- #
# Filtration / MC / regression configuration
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class FiltrationMode:
    """Information flow for conditional expectations.

    ``full`` conditions on the state at the current node, ``trivial`` on
    nothing (plain means), ``delay`` on the state lagged by ``delay`` time
    units.  A delay of zero is the full mode.
    """

    mode: str = "full"
    delay: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("full", "trivial", "delay"):
            raise ValidationError(f"unknown filtration mode {self.mode!r}")
        if self.delay < 0.0:
            raise ValidationError("delay must be >= 0")
        if self.mode == "delay" and self.delay == 0.0:
            object.__setattr__(self, "mode", "full")


@dataclass(frozen=True)
class McSpec:
    n_paths: int = 100_000
    seed: int = 42
    n_blocks: int = 8

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValidationError("n_paths must be >= 1")
        if self.n_blocks < 1 or self.n_paths % self.n_blocks != 0:
            raise ValidationError(
                f"n_blocks ({self.n_blocks}) must divide n_paths ({self.n_paths})"
            )


@dataclass(frozen=True)
class RegressionSpec:
    degree: int = 2
    variables: tuple[str, ...] = ("x",)

    def __post_init__(self) -> None:
        if self.degree < 1 or self.degree > 8:
            raise ValidationError("regression degree must be in [1, 8]")
        allowed = {"x", "log_x", "brownian", "jump_counts"}
        for v in self.variables:
            if v not in allowed:
                raise ValidationError(f"unknown regression state variable {v!r}")


# --------------------------------------------------------------------------- #
# Scenario
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """A validated model instance.

    ``initial`` is the (positive, constant) starting level of the cash flow;
    a per-node table is accepted for simulation-only use.  ``pi_kernels``
    holds one two-time kernel per jump atom.  ``gamma`` is the deterministic
    discount/aggregator rate tabulated on the grid nodes.
    """

    grid: TimeGrid
    initial: float | np.ndarray
    alpha: Kernel
    beta: Kernel
    pi_kernels: tuple[Kernel, ...]
    levy: LevyMeasure
    gamma: np.ndarray
    filtration: FiltrationMode = field(default_factory=FiltrationMode)
    convention: str = "discounting"
    mc: McSpec = field(default_factory=McSpec)
    regression: RegressionSpec = field(default_factory=RegressionSpec)

    @property
    def n_atoms(self) -> int:
        return self.levy.n_atoms

    @property
    def time_invariant(self) -> bool:
        """All kernels constant in the first argument and constant initial level."""
        kernels_ok = (
            self.alpha.time_invariant
            and self.beta.time_invariant
            and all(k.time_invariant for k in self.pi_kernels)
        )
        return kernels_ok and np.isscalar(self.initial)

    @property
    def initial_at_nodes(self) -> np.ndarray:
        if np.isscalar(self.initial):
            return np.full(self.grid.n_steps + 1, float(self.initial))
        return np.asarray(self.initial, dtype=float)

    def pi_values(self) -> np.ndarray:
        """Constant jump coefficients ``pi_m`` for time-invariant scenarios."""
        if not self.time_invariant:
            raise ValidationError("pi_values() requires time-invariant kernels")
        return np.array([k(0.0, 0.0) for k in self.pi_kernels], dtype=float)

    def with_mc(self, **kwargs) -> "ScenarioSpec":
        return replace(self, mc=replace(self.mc, **kwargs))


def _kernel_from_raw(raw, n_steps: int, field_name: str) -> Kernel:
    if isinstance(raw, Kernel):
        return raw
    if isinstance(raw, (int, float)):
        return Kernel.constant(float(raw))
    if not isinstance(raw, dict):
        raise ValidationError(f"{field_name}: expected a kernel object, got {type(raw).__name__}")
    kind = raw.get("kind")
    if kind is None:
        raise ValidationError(f"{field_name}: missing 'kind'")
    if "value" in raw and ("table" in raw or "values" in raw):
        raise ValidationError(f"{field_name}: both 'value' and 'table' given (ambiguous)")
    if kind == "constant":
        if "value" not in raw:
            raise ValidationError(f"{field_name}: constant kernel needs 'value'")
        return Kernel.constant(raw["value"])
    if kind == "exp_decay":
        try:
            return Kernel.exp_decay(raw["amplitude"], raw["rate"])
        except KeyError as exc:
            raise ValidationError(f"{field_name}: exp_decay kernel needs {exc}") from exc
    if kind == "table":
        values = raw.get("values", raw.get("table"))
        if values is None:
            raise ValidationError(f"{field_name}: table kernel needs 'values'")
        n = raw.get("n", n_steps)
        if n != n_steps:
            raise ValidationError(f"{field_name}: table n={n} does not match grid n={n_steps}")
        return Kernel.from_table(values, n_steps)
    raise ValidationError(f"{field_name}: unknown kernel kind {kind!r}")


def validate_scenario(raw: dict | ScenarioSpec) -> ScenarioSpec:
    """Normalize and validate a scenario given as a dict (JSON shape) or spec.

    Checks: positive initial level, kernels evaluable on the full grid
    triangle, one jump kernel per atom with ``1 + pi > 0`` everywhere, a
    known sign convention, and a consistent Monte Carlo block partition.
    """
    if isinstance(raw, ScenarioSpec):
        spec = raw
    else:
        if "grid" not in raw:
            raise ValidationError("missing 'grid' section")
        g = raw["grid"]
        try:
            grid = build_time_grid(g["horizon"], g["n_steps"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"grid section malformed: {exc}") from exc

        levy = LevyMeasure.from_atoms(raw.get("levy", {}).get("atoms", []))
        pi_raw = raw.get("pi_kernels", [])
        if len(pi_raw) != levy.n_atoms:
            raise ValidationError(
                f"pi_kernels has {len(pi_raw)} entries for {levy.n_atoms} atoms"
            )
        gamma_raw = raw.get("gamma", 0.0)
        if np.isscalar(gamma_raw):
            gamma = np.full(grid.n_steps + 1, float(gamma_raw))
        else:
            gamma = np.asarray(gamma_raw, dtype=float)
            if gamma.shape != (grid.n_steps + 1,):
                raise ValidationError(
                    f"gamma table must have {grid.n_steps + 1} node values"
                )

        filt_raw = raw.get("filtration", {})
        filtration = FiltrationMode(
            mode=filt_raw.get("mode", "full"), delay=float(filt_raw.get("delay", 0.0))
        )
        mc_raw = raw.get("mc", {})
        mc = McSpec(
            n_paths=int(mc_raw.get("n_paths", 100_000)),
            seed=int(mc_raw.get("seed", 42)),
            n_blocks=int(mc_raw.get("n_blocks", 8)),
        )
        reg_raw = raw.get("regression", {})
        regression = RegressionSpec(
            degree=int(reg_raw.get("degree", 2)),
            variables=tuple(reg_raw.get("state", ("x",))),
        )
        initial = raw.get("initial")
        if initial is None:
            raise ValidationError("missing 'initial'")
        if not np.isscalar(initial):
            initial = np.asarray(initial, dtype=float)
            if initial.shape != (grid.n_steps + 1,):
                raise ValidationError("initial table must have one value per node")

        spec = ScenarioSpec(
            grid=grid,
            initial=float(initial) if np.isscalar(initial) else initial,
            alpha=_kernel_from_raw(raw.get("alpha_kernel", 0.0), grid.n_steps, "alpha_kernel"),
            beta=_kernel_from_raw(raw.get("beta_kernel", 0.0), grid.n_steps, "beta_kernel"),
            pi_kernels=tuple(
                _kernel_from_raw(k, grid.n_steps, f"pi_kernels[{m}]")
                for m, k in enumerate(pi_raw)
            ),
            levy=levy,
            gamma=gamma,
            filtration=filtration,
            convention=raw.get("gamma_sign_convention", "discounting"),
            mc=mc,
            regression=regression,
        )

    if spec.convention not in ("discounting", "paper_ode"):
        raise ValidationError(f"unknown gamma_sign_convention {spec.convention!r}")
    if np.isscalar(spec.initial):
        if not np.isfinite(spec.initial) or spec.initial <= 0.0:
            raise ValidationError(f"initial level must be > 0, got {spec.initial}")
    else:
        if not np.all(np.isfinite(spec.initial)):
            raise ValidationError("initial table contains non-finite entries")
        if spec.initial[0] <= 0.0:
            raise ValidationError("initial level at t=0 must be > 0")
    if not np.all(np.isfinite(spec.gamma)):
        raise ValidationError("gamma contains non-finite entries")
    if len(spec.pi_kernels) != spec.levy.n_atoms:
        raise ValidationError("need exactly one jump kernel per atom")

    # Kernels must be evaluable on the whole triangle; jump factors must keep
    # the state positive.
    for name, k in (("alpha", spec.alpha), ("beta", spec.beta)):
        vals = k.at_nodes(spec.grid)
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"{name} kernel produced non-finite values")
    for m, k in enumerate(spec.pi_kernels):
        vals = k.at_nodes(spec.grid)[np.tril_indices(spec.grid.n_steps + 1)]
        if np.any(vals <= -1.0 + 1e-12):
            raise ValidationError(
                f"jump kernel {m}: 1 + pi must stay positive, min pi = {vals.min():.6g}"
            )
    return spec

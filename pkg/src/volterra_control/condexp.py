"""Conditional-expectation engine.

Conditional means are realized as least-squares polynomial regressions on a
declared state (the classic regress-now Monte Carlo approach):

* ``trivial``  -- plain sample mean broadcast to every path;
* ``full``     -- regression on the state observed at the current node;
* ``delay``    -- regression on the state lagged by a fixed delay.

Design matrices are column-standardized; when the normal equations are
ill-conditioned a small trace-normalized ridge penalty rescues the solve
(the intercept is never penalized, so sample means are always preserved).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .model import FiltrationMode, RegressionSpec, TimeGrid, ValidationError
from .paths import NoiseBundle

__all__ = [
    "RegressionError",
    "ProjectionFn",
    "fit_projection",
    "project",
    "conditional_mean",
    "CondExpEngine",
]

_COND_LIMIT = 1e10
_RIDGE = 1e-8


class RegressionError(RuntimeError):
    """Least-squares fit failed beyond the ridge rescue."""

    def __init__(self, message: str, condition_number: float):
        self.condition_number = condition_number
        super().__init__(f"{message} (condition number {condition_number:.3e})")


def _monomial_powers(n_vars: int, degree: int) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials with total degree <= degree."""
    powers = [tuple([0] * n_vars)]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_vars), d):
            p = [0] * n_vars
            for v in combo:
                p[v] += 1
            powers.append(tuple(p))
    return powers


def _design(states: np.ndarray, powers: list[tuple[int, ...]]) -> np.ndarray:
    n = states.shape[0]
    cols = np.empty((n, len(powers)))
    for j, p in enumerate(powers):
        col = np.ones(n)
        for v, e in enumerate(p):
            if e:
                col = col * states[:, v] ** e
        cols[:, j] = col
    return cols


@dataclass(frozen=True, eq=False)
class ProjectionFn:
    """A fitted polynomial conditional-mean estimate."""

    powers: tuple[tuple[int, ...], ...]
    coef_std: np.ndarray  # coefficients in standardized column space
    col_mean: np.ndarray
    col_scale: np.ndarray
    r_squared: float
    residual_variance: float
    condition_number: float
    ridged: bool

    @property
    def n_vars(self) -> int:
        return len(self.powers[0])

    def coefficients(self) -> np.ndarray:
        """Coefficients in the raw (unstandardized) monomial basis."""
        coef = self.coef_std / self.col_scale
        coef[0] = self.coef_std[0] - float(np.sum(self.coef_std[1:] * self.col_mean[1:] / self.col_scale[1:]))
        return coef

    def __call__(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.ndim == 0:
            states = states.reshape(1, 1)
        elif states.ndim == 1:
            # a batch of scalar states when the fit is univariate, otherwise
            # a single multivariate sample
            states = states[:, None] if self.n_vars == 1 else states[None, :]
        if states.shape[1] != self.n_vars:
            raise ValidationError(
                f"state dimension {states.shape[1]} != fitted dimension {self.n_vars}"
            )
        phi = _design(states, list(self.powers))
        phi_std = (phi - self.col_mean) / self.col_scale
        phi_std[:, 0] = 1.0
        return phi_std @ self.coef_std


def fit_projection(states: np.ndarray, targets: np.ndarray, degree: int) -> ProjectionFn:
    """Least-squares polynomial fit of ``targets`` on ``states``.

    Accepts 1-D or 2-D states (paths along the first axis).  Raises
    :class:`RegressionError` when the inputs are non-finite or the solve
    cannot be rescued.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    targets = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(states)) or not np.all(np.isfinite(targets)):
        raise RegressionError("non-finite entries in regression inputs", np.inf)
    powers = _monomial_powers(states.shape[1], degree)
    if states.shape[0] < len(powers):
        raise RegressionError(
            f"need at least {len(powers)} samples for {len(powers)} basis functions",
            np.inf,
        )
    phi = _design(states, powers)
    col_mean = phi.mean(axis=0)
    col_scale = phi.std(axis=0)
    col_scale[col_scale == 0.0] = 1.0
    col_mean[0], col_scale[0] = 0.0, 1.0
    phi_std = (phi - col_mean) / col_scale
    phi_std[:, 0] = 1.0

    coef, _, rank, sv = np.linalg.lstsq(phi_std, targets, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    ridged = False
    if rank < len(powers) or cond > _COND_LIMIT:
        # trace-normalized ridge on the non-intercept block
        gram = phi_std.T @ phi_std
        pen = _RIDGE * np.trace(gram) / len(powers)
        reg = np.eye(len(powers)) * pen
        reg[0, 0] = 0.0
        try:
            coef = np.linalg.solve(gram + reg, phi_std.T @ targets)
        except np.linalg.LinAlgError as exc:
            raise RegressionError("normal equations singular beyond ridge rescue", cond) from exc
        ridged = True
    fitted = phi_std @ coef
    resid = targets - fitted
    sst = float(np.sum((targets - targets.mean()) ** 2))
    ssr = float(np.sum(resid**2))
    r2 = 1.0 if sst == 0.0 else 1.0 - ssr / sst
    dof = max(states.shape[0] - len(powers), 1)
    return ProjectionFn(
        powers=tuple(powers),
        coef_std=coef,
        col_mean=col_mean,
        col_scale=col_scale,
        r_squared=r2,
        residual_variance=ssr / dof,
        condition_number=cond,
        ridged=ridged,
    )


def project(fn: ProjectionFn, states: np.ndarray) -> np.ndarray:
    """Evaluate a fitted projection at new states."""
    return fn(states)


def conditional_mean(
    mode: FiltrationMode,
    targets: np.ndarray,
    states: np.ndarray | None = None,
    degree: int = 2,
) -> np.ndarray:
    """Per-path conditional mean of ``targets`` under the given filtration.

    ``states`` must be the state observed at the conditioning time (already
    lagged for delay mode); trivial mode ignores it.
    """
    targets = np.asarray(targets, dtype=float)
    if mode.mode == "trivial" or states is None:
        return np.full_like(targets, targets.mean())
    fn = fit_projection(states, targets, degree)
    return fn(states)


class CondExpEngine:
    """Node-indexed projection engine shared by the backward solvers.

    Caches the standardized design and its pseudo-inverse per node, so the
    many projections performed at the same node (value, martingale
    coefficients, jump coefficients, repeated fixed-point passes) price as
    matrix-vector products.
    """

    def __init__(
        self,
        filtration: FiltrationMode,
        regression: RegressionSpec,
        noise: NoiseBundle,
        x_paths: np.ndarray | None = None,
        cache_designs: bool = True,
    ):
        self.filtration = filtration
        self.regression = regression
        self.noise = noise
        self.x_paths = x_paths
        self.cache_designs = cache_designs  # worth it only when nodes repeat
        self.grid: TimeGrid = noise.grid
        self._design_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._brownian = None
        self._counts = None

    # -- state assembly ------------------------------------------------------

    def _state_columns(self, node: int) -> np.ndarray | None:
        cols = []
        for var in self.regression.variables:
            if var == "x":
                if self.x_paths is None:
                    continue
                cols.append(self.x_paths[:, node])
            elif var == "log_x":
                if self.x_paths is None:
                    continue
                cols.append(np.log(self.x_paths[:, node]))
            elif var == "brownian":
                if self._brownian is None:
                    self._brownian = self.noise.brownian_levels
                cols.append(self._brownian[:, node])
            elif var == "jump_counts":
                if self._counts is None:
                    self._counts = self.noise.count_levels
                for q in range(self.noise.levy.n_atoms):
                    cols.append(self._counts[q, :, node])
        if not cols:
            return None
        return np.column_stack(cols)

    def conditioning_node(self, node: int) -> int:
        if self.filtration.mode == "delay":
            lag = int(round(self.filtration.delay / self.grid.dt))
            return max(node - lag, 0)
        return node

    # -- projections ---------------------------------------------------------

    def project(self, node: int, targets: np.ndarray) -> np.ndarray:
        """Conditional mean of ``targets`` given the node's information."""
        if self.filtration.mode == "trivial":
            return np.full_like(targets, targets.mean())
        cnode = self.conditioning_node(node)
        if self.filtration.mode == "delay" and cnode == 0:
            return np.full_like(targets, targets.mean())
        cached = self._design_cache.get(cnode)
        if cached is None:
            states = self._state_columns(cnode)
            if states is None:
                raise ValidationError(
                    "no regression state available; declare state variables or use trivial mode"
                )
            powers = _monomial_powers(states.shape[1], self.regression.degree)
            phi = _design(states, powers)
            col_mean = phi.mean(axis=0)
            col_scale = phi.std(axis=0)
            col_scale[col_scale == 0.0] = 1.0
            col_mean[0], col_scale[0] = 0.0, 1.0
            phi_std = (phi - col_mean) / col_scale
            phi_std[:, 0] = 1.0
            sv = np.linalg.svd(phi_std, compute_uv=False)
            cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
            if cond > _COND_LIMIT:
                gram = phi_std.T @ phi_std
                pen = _RIDGE * np.trace(gram) / phi_std.shape[1]
                reg = np.eye(phi_std.shape[1]) * pen
                reg[0, 0] = 0.0
                solver = np.linalg.solve(gram + reg, phi_std.T)
            else:
                solver = np.linalg.pinv(phi_std)
            cached = (phi_std, solver)
            if self.cache_designs:
                self._design_cache[cnode] = cached
        phi_std, solver = cached
        return phi_std @ (solver @ targets)

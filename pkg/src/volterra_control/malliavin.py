"""Stochastic-gradient utilities for a small functional calculus.

Functionals are composition trees over three primitives -- constants, Wiener
integrals ``int f dB`` with deterministic integrands, and compensated jump
integrals ``int int h dN~`` with deterministic marks -- combined by sums,
products and integer powers.  The calculus is closed under both derivative
operators:

* the Brownian derivative at a node follows the linear chain rule and is
  returned as another tree;
* the jump derivative at ``(node, atom)`` is the difference form: re-evaluate
  the tree with one extra jump inserted, subtract the plain evaluation.

The duality checkers estimate both sides of the integration-by-parts
identities on the same noise:

    E[ F int Psi dB ]        = E[ int E[D_t F | F_t] Psi(t) dt ]
    E[ F int int Phi dN~ ]   = E[ int int Phi(t,e) E[D_{t,e} F | F_t] nu(de) dt ]

with the conditional projections computed by the regression engine on the
state ``(B(t), jump counts up to t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .condexp import CondExpEngine
from .model import FiltrationMode, RegressionSpec, ValidationError, time_quadrature_weights
from .paths import NoiseBundle

__all__ = [
    "Functional",
    "Const",
    "WienerIntegral",
    "JumpIntegral",
    "Sum",
    "Product",
    "Power",
    "brownian_derivative",
    "jump_derivative",
    "DualityResult",
    "verify_duality_brownian",
    "verify_duality_jump",
    "clark_ocone_reconstruction",
    "duality_rows",
]


class Functional:
    """Base node of the composition tree."""

    def evaluate(self, noise: NoiseBundle) -> np.ndarray:
        raise NotImplementedError

    def evaluate_with_jump(self, noise: NoiseBundle, node: int, atom: int) -> np.ndarray:
        """Evaluate with one extra jump of ``atom`` inserted at ``node``."""
        raise NotImplementedError

    def d_brownian(self, node: int) -> "Functional":
        """Chain-rule derivative with respect to the Brownian noise at a node."""
        raise NotImplementedError

    # operator sugar keeps test code readable
    def __add__(self, other):
        return Sum(self, _wrap(other))

    def __radd__(self, other):
        return Sum(_wrap(other), self)

    def __mul__(self, other):
        return Product(self, _wrap(other))

    def __rmul__(self, other):
        return Product(_wrap(other), self)

    def __pow__(self, k: int):
        return Power(self, k)


def _wrap(v) -> "Functional":
    return v if isinstance(v, Functional) else Const(float(v))


@dataclass
class Const(Functional):
    value: float

    def evaluate(self, noise):
        return np.full(noise.n_paths, self.value)

    def evaluate_with_jump(self, noise, node, atom):
        return self.evaluate(noise)

    def d_brownian(self, node):
        return Const(0.0)


class WienerIntegral(Functional):
    """``int_0^T f(t) dB(t)`` with a deterministic integrand on left nodes."""

    def __init__(self, f: Callable[[float], float] | np.ndarray | float = 1.0):
        self.f = f
        self._memo: tuple[int, np.ndarray] | None = None

    def _values(self, noise: NoiseBundle) -> np.ndarray:
        t = noise.grid.nodes[:-1]
        if callable(self.f):
            return np.array([float(self.f(ti)) for ti in t])
        if np.isscalar(self.f):
            return np.full(noise.n_steps, float(self.f))
        vals = np.asarray(self.f, dtype=float)
        if vals.shape[0] != noise.n_steps:
            raise ValidationError("integrand table must have one value per step")
        return vals

    def evaluate(self, noise):
        # one-slot memo: derivative trees re-evaluate the same primitive at
        # every node of a duality sweep
        if self._memo is not None and self._memo[0] == id(noise):
            return self._memo[1]
        vals = noise.d_brownian @ self._values(noise)
        self._memo = (id(noise), vals)
        return vals

    def evaluate_with_jump(self, noise, node, atom):
        return self.evaluate(noise)  # a jump does not move the Brownian path

    def d_brownian(self, node):
        f = self.f
        if callable(f):
            return _NodeConst(lambda noise: float(f(noise.grid.nodes[node])))
        if np.isscalar(f):
            return Const(float(f))
        return _NodeConst(lambda noise, _v=np.asarray(f, float), _n=node: float(_v[_n]))


class _NodeConst(Functional):
    """Deterministic value resolved against the noise grid at evaluation time."""

    def __init__(self, fn: Callable[[NoiseBundle], float]):
        self.fn = fn

    def evaluate(self, noise):
        return np.full(noise.n_paths, self.fn(noise))

    def evaluate_with_jump(self, noise, node, atom):
        return self.evaluate(noise)

    def d_brownian(self, node):
        return Const(0.0)


class JumpIntegral(Functional):
    """``int_0^T int h(t, e) dN~`` with deterministic marks on left nodes."""

    def __init__(self, h: Callable[[float, float], float] | float = 1.0):
        self.h = h
        self._memo: tuple[int, np.ndarray] | None = None

    def _values(self, noise: NoiseBundle) -> np.ndarray:
        m = noise.levy.n_atoms
        t = noise.grid.nodes[:-1]
        out = np.empty((m, noise.n_steps))
        for q in range(m):
            e = noise.levy.sizes[q]
            if callable(self.h):
                out[q] = [float(self.h(ti, e)) for ti in t]
            else:
                out[q] = float(self.h)
        return out

    def evaluate(self, noise):
        if noise.levy.n_atoms == 0:
            return np.zeros(noise.n_paths)
        if self._memo is not None and self._memo[0] == id(noise):
            return self._memo[1]
        vals = self._values(noise)
        out = np.einsum("ms,mps->p", vals, noise.compensated_counts)
        self._memo = (id(noise), out)
        return out

    def evaluate_with_jump(self, noise, node, atom):
        base = self.evaluate(noise)
        vals = self._values(noise)
        return base + vals[atom, node]

    def d_brownian(self, node):
        return Const(0.0)


@dataclass
class Sum(Functional):
    left: Functional
    right: Functional

    def evaluate(self, noise):
        return self.left.evaluate(noise) + self.right.evaluate(noise)

    def evaluate_with_jump(self, noise, node, atom):
        return self.left.evaluate_with_jump(noise, node, atom) + \
            self.right.evaluate_with_jump(noise, node, atom)

    def d_brownian(self, node):
        return Sum(self.left.d_brownian(node), self.right.d_brownian(node))


@dataclass
class Product(Functional):
    left: Functional
    right: Functional

    def evaluate(self, noise):
        return self.left.evaluate(noise) * self.right.evaluate(noise)

    def evaluate_with_jump(self, noise, node, atom):
        return self.left.evaluate_with_jump(noise, node, atom) * \
            self.right.evaluate_with_jump(noise, node, atom)

    def d_brownian(self, node):
        return Sum(
            Product(self.left.d_brownian(node), self.right),
            Product(self.left, self.right.d_brownian(node)),
        )


@dataclass
class Power(Functional):
    base: Functional
    exponent: int

    def __post_init__(self):
        if not (1 <= int(self.exponent) <= 4):
            raise ValidationError("power exponent limited to 1..4")

    def evaluate(self, noise):
        return self.base.evaluate(noise) ** self.exponent

    def evaluate_with_jump(self, noise, node, atom):
        return self.base.evaluate_with_jump(noise, node, atom) ** self.exponent

    def d_brownian(self, node):
        if self.exponent == 1:
            return self.base.d_brownian(node)
        return Product(
            Product(Const(float(self.exponent)), Power(self.base, self.exponent - 1)),
            self.base.d_brownian(node),
        )


class _JumpDifference(Functional):
    """Difference-form jump derivative, itself a functional."""

    def __init__(self, base: Functional, node: int, atom: int):
        self.base = base
        self.node = node
        self.atom = atom

    def evaluate(self, noise):
        return self.base.evaluate_with_jump(noise, self.node, self.atom) - \
            self.base.evaluate(noise)

    def evaluate_with_jump(self, noise, node, atom):
        raise ValidationError("nested jump derivatives are not supported")

    def d_brownian(self, node):
        raise ValidationError("mixed derivatives are not supported")


def brownian_derivative(f: Functional, node: int) -> Functional:
    """Chain-rule derivative with respect to the Brownian increment time."""
    return f.d_brownian(node)


def jump_derivative(f: Functional, node: int, atom: int) -> Functional:
    """Difference-form derivative: add one jump at the node, subtract."""
    return _JumpDifference(f, node, atom)


# --------------------------------------------------------------------------- #
# Duality verifiers
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class DualityResult:
    name: str
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.se_lhs, self.se_rhs))

    @property
    def gap_in_se(self) -> float:
        se = self.combined_se
        return abs(self.lhs - self.rhs) / se if se > 0 else 0.0


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.shape[0]
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))


def _projection_engine(noise: NoiseBundle, degree: int = 2) -> CondExpEngine:
    variables = ("brownian", "jump_counts") if noise.levy.n_atoms else ("brownian",)
    return CondExpEngine(
        FiltrationMode(mode="full"), RegressionSpec(degree=degree, variables=variables),
        noise, cache_designs=False,
    )


def verify_duality_brownian(
    f: Functional,
    psi: Callable[[int, NoiseBundle], np.ndarray],
    noise: NoiseBundle,
    name: str = "brownian",
    degree: int = 2,
) -> DualityResult:
    """Both sides of the Brownian integration-by-parts identity on one noise.

    ``psi(step, noise)`` must return the adapted integrand values at the left
    node of the step.
    """
    n = noise.n_steps
    f_vals = f.evaluate(noise)
    psi_vals = np.column_stack([np.broadcast_to(psi(i, noise), (noise.n_paths,)) for i in range(n)])
    lhs_samples = f_vals * np.einsum("ps,ps->p", psi_vals, noise.d_brownian)
    engine = _projection_engine(noise, degree)
    w = time_quadrature_weights(noise.grid)
    rhs_samples = np.zeros(noise.n_paths)
    for i in range(n):
        d_vals = brownian_derivative(f, i).evaluate(noise)
        proj = engine.project(i, d_vals) if i > 0 else np.full(noise.n_paths, d_vals.mean())
        rhs_samples += proj * psi_vals[:, i] * w[i]
    lhs, se_lhs = _mean_se(lhs_samples)
    rhs, se_rhs = _mean_se(rhs_samples)
    return DualityResult(name=name, lhs=lhs, rhs=rhs, se_lhs=se_lhs, se_rhs=se_rhs)


def verify_duality_jump(
    f: Functional,
    phi: Callable[[int, int, NoiseBundle], np.ndarray],
    noise: NoiseBundle,
    name: str = "jump",
    degree: int = 2,
) -> DualityResult:
    """Both sides of the jump integration-by-parts identity on one noise.

    ``phi(step, atom, noise)`` returns the adapted two-argument integrand at
    the left node.
    """
    if noise.levy.n_atoms == 0:
        raise ValidationError("jump duality needs at least one atom")
    n = noise.n_steps
    m = noise.levy.n_atoms
    f_vals = f.evaluate(noise)
    comp = noise.compensated_counts
    lhs_samples = np.zeros(noise.n_paths)
    for q in range(m):
        for i in range(n):
            lhs_samples += np.broadcast_to(phi(i, q, noise), (noise.n_paths,)) * comp[q, :, i]
    lhs_samples *= f_vals
    engine = _projection_engine(noise)
    w_t = time_quadrature_weights(noise.grid)
    rhs_samples = np.zeros(noise.n_paths)
    for q in range(m):
        w = noise.levy.weights[q]
        for i in range(n):
            d_vals = jump_derivative(f, i, q).evaluate(noise)
            proj = engine.project(i, d_vals) if i > 0 else np.full(noise.n_paths, d_vals.mean())
            rhs_samples += np.broadcast_to(phi(i, q, noise), (noise.n_paths,)) * proj * w * w_t[i]
    lhs, se_lhs = _mean_se(lhs_samples)
    rhs, se_rhs = _mean_se(rhs_samples)
    return DualityResult(name=name, lhs=lhs, rhs=rhs, se_lhs=se_lhs, se_rhs=se_rhs)


def clark_ocone_reconstruction(f: Functional, noise: NoiseBundle, degree: int = 2) -> np.ndarray:
    """Martingale-representation reconstruction ``E[F] + sum E[D_t F|F_t] dB``.

    Returns per-path reconstructed values; the mean-square gap to the true
    functional shrinks linearly in the step size.
    """
    f_vals = f.evaluate(noise)
    engine = _projection_engine(noise, degree)
    recon = np.full(noise.n_paths, f_vals.mean())
    for i in range(noise.n_steps):
        d_vals = brownian_derivative(f, i).evaluate(noise)
        proj = engine.project(i, d_vals) if i > 0 else np.full(noise.n_paths, d_vals.mean())
        recon += proj * noise.d_brownian[:, i]
    return recon


def duality_rows(results: list[DualityResult]) -> list[dict]:
    return [
        {
            "identity": r.name,
            "lhs": r.lhs,
            "rhs": r.rhs,
            "se_lhs": r.se_lhs,
            "se_rhs": r.se_rhs,
            "gap_over_se": r.gap_in_se,
        }
        for r in results
    ]

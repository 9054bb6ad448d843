"""Seeded generation of Brownian increments and compound-Poisson jump marks.

A :class:`NoiseBundle` holds, per path and per step, the Brownian increment
over ``(t_i, t_{i+1}]`` and the number of jumps of each atom landing in that
interval.  Generation is split into blocks with one independent child stream
per block (``numpy.random.SeedSequence.spawn``), so the result is
bit-reproducible for a fixed ``(seed, n_paths, grid, n_blocks)`` regardless
of how the blocks are later consumed.

Jump times inside a step are not recorded: left-point stepping only needs the
per-step aggregate counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .model import LevyMeasure, TimeGrid, ValidationError

__all__ = [
    "NoiseBundle",
    "generate_noise",
    "compensated_jump_sum",
    "save_noise",
    "load_noise",
]

_MAGIC = b"VCNB0001"


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Per-path Brownian increments and jump counts on a fixed grid.

    The derived arrays below are cached; treat them as read-only.
    """

    grid: TimeGrid
    levy: LevyMeasure
    seed: int
    n_blocks: int
    d_brownian: np.ndarray  # (n_paths, n_steps), variance dt each
    jump_counts: np.ndarray  # (n_atoms, n_paths, n_steps), int64

    @property
    def n_paths(self) -> int:
        return self.d_brownian.shape[0]

    @property
    def n_steps(self) -> int:
        return self.d_brownian.shape[1]

    @cached_property
    def brownian_levels(self) -> np.ndarray:
        """B(t_i) per path, shape (n_paths, n_steps + 1), B(0) = 0."""
        levels = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.d_brownian, axis=1, out=levels[:, 1:])
        return levels

    @cached_property
    def count_levels(self) -> np.ndarray:
        """Cumulative jump counts N_m(t_i), shape (n_atoms, n_paths, n_steps + 1)."""
        m = self.levy.n_atoms
        levels = np.zeros((m, self.n_paths, self.n_steps + 1), dtype=float)
        if m:
            np.cumsum(self.jump_counts, axis=2, out=levels[:, :, 1:])
        return levels

    @cached_property
    def compensated_counts(self) -> np.ndarray:
        """Per-step compensated counts ``count - w_m * dt``, shape (m, n_paths, n_steps)."""
        m = self.levy.n_atoms
        if m == 0:
            return np.zeros((0, self.n_paths, self.n_steps))
        comp = self.levy.weights[:, None, None] * self.grid.dt
        return self.jump_counts.astype(float) - comp

    def compensated_mark_sum(self, f_atom_values: np.ndarray) -> np.ndarray:
        """``sum_m f(e_m) * (count - w_m dt)`` per path/step, shape (n_paths, n_steps)."""
        if self.levy.n_atoms == 0:
            return np.zeros((self.n_paths, self.n_steps))
        return np.einsum("m,mps->ps", f_atom_values, self.compensated_counts)


def generate_noise(
    grid: TimeGrid,
    levy: LevyMeasure,
    n_paths: int,
    seed: int,
    n_blocks: int = 8,
) -> NoiseBundle:
    """Draw the Brownian and jump sources for ``n_paths`` paths.

    One child stream per block; within a block the normals are drawn before
    the Poisson counts, so regeneration with identical arguments is
    byte-identical.
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if n_blocks < 1 or n_paths % n_blocks != 0:
        raise ValidationError(f"n_blocks ({n_blocks}) must divide n_paths ({n_paths})")
    n = grid.n_steps
    m = levy.n_atoms
    block = n_paths // n_blocks
    db = np.empty((n_paths, n))
    counts = np.zeros((m, n_paths, n), dtype=np.int64)
    sqrt_dt = np.sqrt(grid.dt)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    for b, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        rows = slice(b * block, (b + 1) * block)
        db[rows] = rng.standard_normal((block, n)) * sqrt_dt
        for q in range(m):
            counts[q, rows] = rng.poisson(levy.weights[q] * grid.dt, size=(block, n))
    return NoiseBundle(
        grid=grid, levy=levy, seed=int(seed), n_blocks=int(n_blocks),
        d_brownian=db, jump_counts=counts,
    )


def compensated_jump_sum(
    bundle: NoiseBundle, path: int, step: int, f: Callable[[float], float]
) -> float:
    """Increment of the compensated jump integral of ``f`` over one step.

    ``sum_m [count_{p,i,m} - w_m dt] * f(e_m)``; zero for the empty measure.
    """
    levy = bundle.levy
    if levy.n_atoms == 0:
        return 0.0
    f_vals = np.array([f(e) for e in levy.sizes], dtype=float)
    counts = bundle.jump_counts[:, path, step].astype(float)
    return float(f_vals @ (counts - levy.weights * bundle.grid.dt))


# --------------------------------------------------------------------------- #
# Binary dump / restore (regression-test fixture format)
# --------------------------------------------------------------------------- #
# Layout (little-endian): magic, then int64 {n_steps, n_paths, seed, n_blocks,
# n_atoms}, float64 horizon, float64 atom sizes, float64 atom weights, the
# float64 increment matrix, and the int64 jump-count array.

def save_noise(bundle: NoiseBundle, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(
            "<5q", bundle.n_steps, bundle.n_paths, bundle.seed,
            bundle.n_blocks, bundle.levy.n_atoms,
        ))
        fh.write(struct.pack("<d", bundle.grid.horizon))
        fh.write(np.ascontiguousarray(bundle.levy.sizes, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.levy.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.d_brownian, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.jump_counts, dtype="<i8").tobytes())


def load_noise(path: str) -> NoiseBundle:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValidationError(f"{path}: not a noise bundle file")
        n, n_paths, seed, n_blocks, m = struct.unpack("<5q", fh.read(40))
        (horizon,) = struct.unpack("<d", fh.read(8))
        sizes = np.frombuffer(fh.read(8 * m), dtype="<f8")
        weights = np.frombuffer(fh.read(8 * m), dtype="<f8")
        db = np.frombuffer(fh.read(8 * n_paths * n), dtype="<f8").reshape(n_paths, n)
        counts = np.frombuffer(fh.read(8 * m * n_paths * n), dtype="<i8").reshape(m, n_paths, n)
    grid = TimeGrid(horizon=horizon, n_steps=int(n))
    levy = LevyMeasure(sizes=sizes.copy(), weights=weights.copy()) if m else \
        LevyMeasure(sizes=np.empty(0), weights=np.empty(0))
    return NoiseBundle(
        grid=grid, levy=levy, seed=int(seed), n_blocks=int(n_blocks),
        d_brownian=db.copy(), jump_counts=counts.copy(),
    )

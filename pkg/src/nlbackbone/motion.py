"""Spatial motion, the diffusion semigroup on a grid, and offspring displacement.

Grid operators act on piecewise-linear interpolants of the grid values,
extended by constants beyond ``[-L, L]``.  Integrating that interpolant
exactly against a Gaussian gives non-negative weights whose rows sum to
one, so constants are fixed points and the operators are monotone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Union

import numpy as np
from scipy import special

from .errors import GridTooNarrow

__all__ = [
    "MotionSpec",
    "DisplacementKernel",
    "Grid",
    "GridFunction",
    "semigroup_apply",
    "semigroup_matrix",
    "displacement_apply",
    "displacement_matrix",
    "displacement_at",
    "sample_path_increment",
    "sample_path",
    "sample_displacement",
    "as_spatial_function",
]


@dataclass(frozen=True)
class MotionSpec:
    """Brownian motion with constant drift: generator (sigma^2/2) d^2 + drift d."""

    diffusion_coeff: float = 1.0
    drift: Union[float, tuple] = 0.0
    dimension: int = 1

    def __post_init__(self):
        if not (self.diffusion_coeff > 0 and math.isfinite(self.diffusion_coeff)):
            raise ValueError("diffusion coefficient must be positive and finite")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        drift = np.atleast_1d(np.asarray(self.drift, dtype=float))
        if drift.size == 1:
            drift = np.full(self.dimension, drift[0])
        if drift.size != self.dimension:
            raise ValueError("drift length does not match dimension")
        object.__setattr__(self, "drift", tuple(float(d) for d in drift))

    @property
    def drift_vector(self) -> np.ndarray:
        return np.asarray(self.drift)


@dataclass(frozen=True)
class DisplacementKernel:
    """Translation-invariant law of the offspring displacement Theta.

    A mixture of point masses ``(probability, shift)`` and one normal
    component.  ``pi(x, .)`` is the law of ``x + Theta``; in more than one
    dimension each coordinate is shifted by the same point-mass value and
    receives an independent normal draw.
    """

    atoms: tuple = ((1.0, 0.0),)
    normal_weight: float = 0.0
    normal_mean: float = 0.0
    normal_var: float = 1.0

    def __post_init__(self):
        atoms = tuple((float(p), float(a)) for p, a in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if any(p < 0 for p, _ in atoms) or self.normal_weight < 0:
            raise ValueError("displacement weights must be non-negative")
        total = sum(p for p, _ in atoms) + self.normal_weight
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"displacement law has total mass {total}, expected 1")
        if self.normal_weight > 0 and not self.normal_var > 0:
            raise ValueError("normal component needs positive variance")

    @classmethod
    def identity(cls) -> "DisplacementKernel":
        return cls()

    @classmethod
    def normal(cls, mean: float = 0.0, var: float = 1.0) -> "DisplacementKernel":
        return cls(atoms=(), normal_weight=1.0, normal_mean=mean, normal_var=var)

    @property
    def is_identity(self) -> bool:
        return self.normal_weight == 0 and all(a == 0 for p, a in self.atoms if p > 0)

    @property
    def mean(self) -> float:
        return sum(p * a for p, a in self.atoms) + self.normal_weight * self.normal_mean

    @property
    def variance(self) -> float:
        second = sum(p * a * a for p, a in self.atoms)
        second += self.normal_weight * (self.normal_var + self.normal_mean**2)
        return second - self.mean**2


@dataclass(frozen=True)
class Grid:
    """Uniform grid ``x_i = -L + i h`` on ``[-L, L]``."""

    half_width: float
    spacing: float

    def __post_init__(self):
        if not (self.half_width > 0 and self.spacing > 0):
            raise ValueError("grid half-width and spacing must be positive")
        if self.spacing > 2 * self.half_width:
            raise ValueError("grid spacing exceeds the domain width")

    @cached_property
    def size(self) -> int:
        return int(math.floor(2 * self.half_width / self.spacing + 1e-9)) + 1

    @cached_property
    def x(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.size)


@dataclass
class GridFunction:
    grid: Grid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError(
                f"expected {self.grid.size} grid values, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function has non-finite values")

    @classmethod
    def constant(cls, grid: Grid, c: float, time: float = 0.0) -> "GridFunction":
        return cls(grid, np.full(grid.size, float(c)), time)

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable, time: float = 0.0) -> "GridFunction":
        return cls(grid, np.broadcast_to(fn(grid.x), grid.x.shape).astype(float), time)

    def __call__(self, x):
        """Piecewise-linear interpolant, constant beyond the grid ends."""
        return np.interp(x, self.grid.x, self.values)


def as_spatial_function(data) -> Callable:
    """Turn a constant, a GridFunction or a callable into a vectorised callable."""
    if isinstance(data, GridFunction):
        return data
    if callable(data):
        return data
    c = float(data)
    return lambda x: np.full(np.shape(x), c)


# -- grid operators ---------------------------------------------------------


def _gaussian_hat_weights(means: np.ndarray, nodes: np.ndarray, std: float) -> np.ndarray:
    """Row i integrates the hat basis on ``nodes`` against N(means[i], std^2).

    The two outermost nodes also collect the Gaussian tails.
    """
    means = np.asarray(means, dtype=float)[:, None]
    h = nodes[1] - nodes[0]
    a = nodes[:-1][None, :]
    b = nodes[1:][None, :]
    A = (a - means) / std
    B = (b - means) / std
    d_cdf = special.ndtr(B) - special.ndtr(A)
    d_pdf = (np.exp(-0.5 * A * A) - np.exp(-0.5 * B * B)) / math.sqrt(2 * math.pi)
    rising = ((means - a) * d_cdf + std * d_pdf) / h
    falling = ((b - means) * d_cdf - std * d_pdf) / h
    w = np.zeros((means.shape[0], nodes.size))
    w[:, :-1] += falling
    w[:, 1:] += rising
    w[:, 0] += special.ndtr(A[:, 0])
    w[:, -1] += special.ndtr(-B[:, -1])
    return np.maximum(w, 0.0)


def _shift_weights(points: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Linear-interpolation weights at ``points`` with constant extrapolation."""
    points = np.clip(np.asarray(points, dtype=float), nodes[0], nodes[-1])
    h = nodes[1] - nodes[0]
    j = np.clip(np.floor((points - nodes[0]) / h).astype(int), 0, nodes.size - 2)
    frac = (points - nodes[j]) / h
    w = np.zeros((points.size, nodes.size))
    rows = np.arange(points.size)
    w[rows, j] = 1.0 - frac
    w[rows, j + 1] += frac
    return w


def escaped_mass(motion: MotionSpec, grid: Grid, t: float) -> float:
    """Probability that the motion started at 0 leaves ``[-L, L]`` by time t (at time t)."""
    if t <= 0:
        return 0.0
    s = math.sqrt(motion.diffusion_coeff * t)
    m = motion.drift[0] * t
    L = grid.half_width
    return float(special.ndtr((-L - m) / s) + special.ndtr((m - L) / s))


def check_grid_width(motion: MotionSpec, grid: Grid, t: float, tol: float = 1e-6) -> float:
    mass = escaped_mass(motion, grid, t)
    if mass > tol:
        warnings.warn(
            f"kernel mass {mass:.3g} beyond +/-{grid.half_width} at t={t} exceeds {tol:g}",
            GridTooNarrow,
            stacklevel=3,
        )
    return mass


@lru_cache(maxsize=128)
def semigroup_matrix(motion: MotionSpec, grid: Grid, t: float) -> np.ndarray:
    if motion.dimension != 1:
        raise ValueError("grid operators are one-dimensional")
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return np.eye(grid.size)
    std = math.sqrt(motion.diffusion_coeff * t)
    return _gaussian_hat_weights(grid.x + motion.drift[0] * t, grid.x, std)


def semigroup_apply(
    motion: MotionSpec, t: float, f: GridFunction, escape_tol: float = 1e-6
) -> GridFunction:
    """Apply the heat semigroup P_t to a grid function."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return GridFunction(f.grid, f.values.copy(), f.time)
    check_grid_width(motion, f.grid, t, escape_tol)
    return GridFunction(f.grid, semigroup_matrix(motion, f.grid, t) @ f.values, f.time)


def _displacement_weights(kernel: DisplacementKernel, points: np.ndarray, nodes: np.ndarray):
    w = np.zeros((np.size(points), nodes.size))
    for p, a in kernel.atoms:
        if p > 0:
            w += p * _shift_weights(points + a, nodes)
    if kernel.normal_weight > 0:
        w += kernel.normal_weight * _gaussian_hat_weights(
            points + kernel.normal_mean, nodes, math.sqrt(kernel.normal_var)
        )
    return w


@lru_cache(maxsize=32)
def displacement_matrix(kernel: DisplacementKernel, grid: Grid) -> np.ndarray:
    return _displacement_weights(kernel, grid.x, grid.x)


def displacement_apply(kernel: DisplacementKernel, f: GridFunction) -> GridFunction:
    """x -> pi(x, f), the average of f over the displaced position x + Theta."""
    if kernel.is_identity:
        return GridFunction(f.grid, f.values.copy(), f.time)
    return GridFunction(f.grid, displacement_matrix(kernel, f.grid) @ f.values, f.time)


def displacement_at(kernel: DisplacementKernel, grid: Grid, values: np.ndarray, points) -> np.ndarray:
    """pi(x, f) at arbitrary points x for grid values of f."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if kernel.is_identity:
        return np.interp(points, grid.x, values)
    return _displacement_weights(kernel, points, grid.x) @ values


# -- samplers ---------------------------------------------------------------


def sample_path_increment(motion: MotionSpec, dt, rng: np.random.Generator, size=None):
    """Exact Gaussian increments over a step dt (scalar or array of steps).

    Returns shape ``(d,)`` for scalar dt without ``size``, otherwise
    ``(n, d)``.
    """
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    d = motion.dimension
    if dt.ndim == 0 and size is None:
        z = rng.standard_normal(d)
        return motion.drift_vector * dt + math.sqrt(motion.diffusion_coeff * dt) * z
    n = dt.size if dt.ndim else int(size)
    dt = np.broadcast_to(dt.reshape(-1), (n,))[:, None]
    z = rng.standard_normal((n, d))
    return motion.drift_vector[None, :] * dt + np.sqrt(motion.diffusion_coeff * dt) * z


def sample_path(motion: MotionSpec, x0, times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Positions at ``times`` (increasing, starting at the birth time) from ``x0``."""
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (motion.dimension,))
    out = np.empty((times.size, motion.dimension))
    out[0] = x0
    if times.size > 1:
        steps = sample_path_increment(motion, np.diff(times), rng)
        out[1:] = x0 + np.cumsum(steps, axis=0)
    return out


def sample_displacement(kernel: DisplacementKernel, rng: np.random.Generator, size=None, dimension: int = 1):
    """Draw Theta; shape ``(d,)`` without ``size``, else ``(size, d)``."""
    n = 1 if size is None else int(size)
    probs = np.array([p for p, _ in kernel.atoms] + [kernel.normal_weight])
    shifts = np.array([a for _, a in kernel.atoms] + [0.0])
    comp = rng.choice(probs.size, size=n, p=probs / probs.sum()) if probs.size > 1 else np.zeros(n, int)
    out = np.repeat(shifts[comp][:, None], dimension, axis=1)
    is_normal = comp == probs.size - 1
    k = int(is_normal.sum())
    if k:
        out[is_normal] = kernel.normal_mean + math.sqrt(kernel.normal_var) * rng.standard_normal((k, dimension))
    return out[0] if size is None else out

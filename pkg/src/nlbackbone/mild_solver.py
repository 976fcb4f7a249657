"""Time-marching solvers for the mild (Volterra) equations of the model.

Every equation has the form

    X(t) = P_t[X0] + int_0^t P_s[R(X(t - s))] ds,

which, by the semigroup property, is advanced one step at a time as

    X^{n+1} = P_dt X^n + dt/2 (R(X^{n+1}) + P_dt R(X^n)),

the trapezoidal rule on the last step of the Volterra integral, with the
implicit level solved by Picard iteration.  In scalar mode (``grid=None``)
data are spatial constants and P_dt, pi(x, .) act as the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import IdentityViolation, PicardDivergence, RangeViolation, StepSizeTooLarge
from .mechanism import chi_derivative_bound, subordinator_exponent
from .model import Model
from .motion import Grid, GridFunction, check_grid_width, displacement_matrix, semigroup_matrix

__all__ = [
    "SolverConfig",
    "SolutionField",
    "ScalarPath",
    "solve_u",
    "solve_u_star",
    "solve_v",
    "solve_backbone",
    "solve_w",
    "h_function",
    "ode_csbp",
    "extinction_exponent",
    "u_star_bound",
    "integrate_scalar",
]


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    picard_tol: float = 1e-12
    picard_max_iters: int = 100
    grid: Optional[Grid] = None
    identity_tol: Optional[float] = None
    range_tol: float = 1e-9
    escape_tol: float = 1e-6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")

    @property
    def scalar(self) -> bool:
        return self.grid is None

    @property
    def identity_tolerance(self) -> float:
        if self.identity_tol is not None:
            return self.identity_tol
        return 1e-6 if self.scalar else 1e-4


@dataclass
class SolutionField:
    """Solution levels on a uniform time grid.

    ``values[n]`` holds the solution at ``times[n]``: one column in scalar
    mode, one column per grid node otherwise.
    """

    tag: str
    times: np.ndarray
    values: np.ndarray
    grid: Optional[Grid]
    data: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_scalar(self) -> bool:
        return self.grid is None

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def at(self, t: float) -> np.ndarray:
        """Values at time t, linear in time between levels."""
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ValueError(f"t = {t} outside [0, {self.horizon}]")
        pos = min(max(t / self.dt, 0.0), len(self.times) - 1)
        n = min(int(math.floor(pos)), len(self.times) - 2)
        w = pos - n
        return (1 - w) * self.values[n] + w * self.values[n + 1]

    def scalar_path(self) -> np.ndarray:
        if not self.is_scalar:
            raise ValueError("field is not in scalar mode")
        return self.values[:, 0]

    def __call__(self, x, s):
        """Bilinear interpolation at points x and times s (broadcast together)."""
        s = np.asarray(s, dtype=float)
        pos = np.clip(s / self.dt, 0.0, len(self.times) - 1)
        n = np.minimum(np.floor(pos).astype(int), len(self.times) - 2)
        w = pos - n
        if self.is_scalar:
            v = self.values[:, 0]
            out = (1 - w) * v[n] + w * v[n + 1]
            return np.broadcast_to(out, np.broadcast(np.asarray(x), s).shape).copy()
        x = np.asarray(x, dtype=float)
        x, n, w = np.broadcast_arrays(x, n, w)
        g = self.grid
        px = np.clip((x - g.x[0]) / g.spacing, 0.0, g.size - 1)
        j = np.minimum(np.floor(px).astype(int), g.size - 2)
        wx = px - j
        V = self.values
        lo = (1 - wx) * V[n, j] + wx * V[n, j + 1]
        hi = (1 - wx) * V[n + 1, j] + wx * V[n + 1, j + 1]
        return (1 - w) * lo + w * hi

    def to_columns(self) -> str:
        """Columnar text: one ``time x value`` row per level and node."""
        lines = [f"# tag={self.tag}", "time\tx\tvalue"]
        xs = [math.nan] if self.is_scalar else list(self.grid.x)
        for t, row in zip(self.times, self.values):
            for x, v in zip(xs, row):
                lines.append(f"{t:.17g}\t{x:.17g}\t{v:.17g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_columns())


@dataclass
class ScalarPath:
    times: np.ndarray
    values: np.ndarray
    variant: str
    theta: float


# -- plumbing ---------------------------------------------------------------


class _Operators:
    def __init__(self, model: Model, cfg: SolverConfig, dt: float):
        self.scalar = cfg.scalar
        self.size = 1 if cfg.scalar else cfg.grid.size
        self._P = None
        self._pi = None
        if not cfg.scalar:
            self._P = semigroup_matrix(model.motion, cfg.grid, dt)
            if not model.displacement.is_identity:
                self._pi = displacement_matrix(model.displacement, cfg.grid)

    def P(self, v):
        return v if self._P is None else self._P @ v

    def pi(self, v):
        return v if self._pi is None else self._pi @ v


def _data_values(data, cfg: SolverConfig, name: str) -> np.ndarray:
    if cfg.scalar:
        if isinstance(data, GridFunction) or callable(data):
            raise ValueError(f"scalar mode needs a constant {name}")
        return np.array([float(data)])
    g = cfg.grid
    if isinstance(data, GridFunction):
        if data.grid != g:
            raise ValueError(f"{name} lives on a different grid")
        return data.values.astype(float)
    if callable(data):
        return np.broadcast_to(np.asarray(data(g.x), dtype=float), g.x.shape).copy()
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0:
        return np.full(g.size, float(arr))
    if arr.shape != (g.size,):
        raise ValueError(f"{name} has shape {arr.shape}, grid has {g.size} nodes")
    return arr.copy()


def _steps(T: float, dt: float):
    if T <= 0:
        raise ValueError("horizon must be positive")
    n = max(1, int(round(T / dt)))
    return n, T / n


def _march(x0, rhs, n, dt, ops, cfg, clamp=False, decay=1.0, label="", lip=math.nan):
    levels = np.empty((n + 1, x0.size))
    levels[0] = x0
    r_prev = rhs(0, x0)
    iters = 0
    for k in range(n):
        base = decay * ops.P(levels[k] + 0.5 * dt * r_prev)
        x = decay * ops.P(levels[k] + dt * r_prev)
        if clamp:
            x = np.clip(x, 0.0, 1.0)
        for it in range(cfg.picard_max_iters):
            raw = base + 0.5 * dt * rhs(k + 1, x)
            new = np.clip(raw, 0.0, 1.0) if clamp else raw
            diff = float(np.max(np.abs(new - x)))
            x = new
            if diff <= cfg.picard_tol:
                break
        else:
            raise PicardDivergence(
                f"{label}: Picard iteration did not converge at step {k + 1} "
                f"(last increment {diff:.3g}, Lipschitz bound x dt = {lip * dt:.3g})"
            )
        iters += it + 1
        if clamp:
            raw = base + 0.5 * dt * rhs(k + 1, x)
            excess = max(float(-raw.min()), float(raw.max() - 1.0), 0.0)
            if excess > cfg.range_tol:
                raise RangeViolation(f"{label}: solution leaves [0, 1] by {excess:.3g} at step {k + 1}")
        levels[k + 1] = x
        r_prev = rhs(k + 1, x)
    return levels, iters


def _guard(lipschitz: float, dt: float, label: str) -> float:
    if not lipschitz * dt < 1.0:
        raise StepSizeTooLarge(f"{label}: Lipschitz bound {lipschitz:.3g} times dt = {dt:g} is not below 1")
    return lipschitz


def _check_width(model: Model, cfg: SolverConfig, T: float):
    if not cfg.scalar:
        check_grid_width(model.motion, cfg.grid, T, cfg.escape_tol)


def _u_lipschitz(model: Model, top: float) -> float:
    mech = model.mechanism
    d_lo, d_hi = float(mech.dphi_L(0.0)), float(mech.dphi_L(top))
    return max(abs(d_lo), abs(d_hi)) + float(mech.dzeta(0.0))


# -- the four equations -----------------------------------------------------


def solve_u(model: Model, f, T: float, cfg: SolverConfig = SolverConfig()) -> SolutionField:
    """Exponent u_f of the Laplace functional of X (non-negative solution)."""
    mech = model.mechanism
    f0 = _data_values(f, cfg, "f")
    if np.any(f0 < 0):
        raise ValueError("f must be non-negative")
    n, dt = _steps(T, cfg.dt)
    lip = _guard(_u_lipschitz(model, max(float(f0.max()), model.lambda_star)), dt, "solve_u")
    _check_width(model, cfg, T)
    ops = _Operators(model, cfg, dt)

    def rhs(k, u):
        return -(mech.phi_L(u) - mech.zeta(ops.pi(u)))

    levels, iters = _march(f0, rhs, n, dt, ops, cfg, label="solve_u", lip=lip)
    return SolutionField("u", np.linspace(0, n * dt, n + 1), levels, cfg.grid, {"f": f0}, {"picard_iters": iters})


def solve_u_star(model: Model, f, T: float, cfg: SolverConfig = SolverConfig(), check: bool = True) -> SolutionField:
    """Exponent u*_f for the process conditioned on extinction.

    Solved directly with the shifted nonlinearities; with ``check`` the
    result is compared with u_{f + lambda*} - lambda*.
    """
    mech = model.mechanism
    ls = model.lambda_star
    f0 = _data_values(f, cfg, "f")
    if np.any(f0 < 0):
        raise ValueError("f must be non-negative")
    n, dt = _steps(T, cfg.dt)
    lip = _guard(_u_lipschitz(model, float(f0.max()) + ls), dt, "solve_u_star")
    _check_width(model, cfg, T)
    ops = _Operators(model, cfg, dt)

    def rhs(k, u):
        return -(mech.phi_L(u + ls) - mech.zeta(ls + ops.pi(u)))

    levels, iters = _march(f0, rhs, n, dt, ops, cfg, label="solve_u_star", lip=lip)
    out = SolutionField(
        "u_star", np.linspace(0, n * dt, n + 1), levels, cfg.grid, {"f": f0}, {"picard_iters": iters}
    )
    if check:
        shifted = solve_u(model, f0 + ls if not cfg.scalar else float(f0[0]) + ls, T, cfg)
        gap = float(np.max(np.abs(levels - (shifted.values - ls))))
        out.diagnostics["shift_gap"] = gap
        if gap > cfg.identity_tolerance:
            raise IdentityViolation(f"u*_f and u_(f+lambda*) - lambda* differ by {gap:.3g}")
    return out


def _matching_u_star(model, f, T, cfg, u_star):
    if u_star is None:
        return solve_u_star(model, f, T, cfg, check=False)
    n, dt = _steps(T, cfg.dt)
    if u_star.tag != "u_star" or u_star.grid != cfg.grid or len(u_star.times) != n + 1:
        raise ValueError("u_star field does not match the requested grid and horizon")
    if abs(u_star.dt - dt) > 1e-12:
        raise ValueError("u_star field has a different time step")
    return u_star


def _e_lipschitz(model: Model, u_bar: float) -> float:
    mech, consts = model.mechanism, model.constants
    return chi_derivative_bound(mech, consts, u_bar) + float(subordinator_exponent(mech, consts, u_bar))


def solve_v(
    model: Model, f, h, T: float, cfg: SolverConfig = SolverConfig(), u_star: Optional[SolutionField] = None
) -> SolutionField:
    """exp(-v_{f,h}): joint Laplace exponent of the dressing and the backbone.

    Returns the levels of exp(-v), which lie in [0, 1].
    """
    mech = model.mechanism
    ls = model.lambda_star
    h0 = _data_values(h, cfg, "h")
    if np.any(h0 < 0):
        raise ValueError("h must be non-negative")
    us = _matching_u_star(model, f, T, cfg, u_star)
    n, dt = _steps(T, cfg.dt)
    lip = _guard(_e_lipschitz(model, float(max(us.values.max(), 0.0))), dt, "solve_v")
    _check_width(model, cfg, T)
    ops = _Operators(model, cfg, dt)
    U = us.values
    pi_u = [ops.pi(U[k]) for k in range(n + 1)]
    phi_ref = [mech.phi_L(ls + U[k]) for k in range(n + 1)]
    zeta_ref = [mech.zeta(ls + pi_u[k]) for k in range(n + 1)]

    def rhs(k, E):
        shifted = ls + U[k] - ls * E
        nonlin = mech.phi_L(shifted) - phi_ref[k] - mech.zeta(ls + pi_u[k] - ls * ops.pi(E)) + zeta_ref[k]
        return nonlin / ls

    levels, iters = _march(np.exp(-h0), rhs, n, dt, ops, cfg, clamp=True, label="solve_v", lip=lip)
    return SolutionField(
        "v",
        np.linspace(0, n * dt, n + 1),
        levels,
        cfg.grid,
        {"f": us.data.get("f"), "h": h0},
        {"picard_iters": iters},
    )


def solve_backbone(model: Model, h, T: float, cfg: SolverConfig = SolverConfig()) -> SolutionField:
    """exp(-v_h) for the backbone alone, from its offspring generating function.

    Uses the first-branching-time form with the truncated offspring series,
    a discretisation independent of ``solve_v``.
    """
    laws = model.laws
    q = model.q
    h0 = _data_values(h, cfg, "h")
    n, dt = _steps(T, cfg.dt)
    lip = _guard(q * laws.mean_offspring, dt, "solve_backbone")
    _check_width(model, cfg, T)
    ops = _Operators(model, cfg, dt)
    p_loc, p_nl = laws.p_local, laws.p_nonlocal

    def rhs(k, E):
        gen = np.polynomial.polynomial.polyval(E, p_loc) + np.polynomial.polynomial.polyval(ops.pi(E), p_nl)
        return q * gen

    levels, iters = _march(
        np.exp(-h0), rhs, n, dt, ops, cfg, clamp=True, decay=math.exp(-q * dt), label="solve_backbone", lip=lip
    )
    return SolutionField(
        "backbone", np.linspace(0, n * dt, n + 1), levels, cfg.grid, {"h": h0}, {"picard_iters": iters}
    )


def h_function(model: Model, E, u_star, pi_E, pi_u_star):
    """Branch-point nonlinearity H evaluated at e^{-w} = E.

    ``pi_E`` and ``pi_u_star`` are pi(x, E) and pi(x, u*) at the same points.
    """
    mech = model.mechanism
    ls, q = model.lambda_star, model.q
    L, NL = mech.pi_L, mech.pi_NL
    out = -ls * q * E + mech.beta * ls * ls * E * E + mech.gamma * ls * pi_E
    if not L.is_zero:
        a = ls + u_star
        out = out + L.laplace_moment(0, a - ls * E) - L.laplace_moment(0, a) - ls * E * L.laplace_moment(1, a)
    if not NL.is_zero:
        b = ls + pi_u_star
        out = out + NL.laplace_moment(0, b - ls * pi_E) - NL.laplace_moment(0, b)
    return out


def solve_w(
    model: Model,
    f,
    h,
    T: float,
    cfg: SolverConfig = SolverConfig(),
    g=None,
    u_star: Optional[SolutionField] = None,
    check_collapse: bool = True,
) -> SolutionField:
    """exp(-w) for the backbone with branch-point immigration and killing g.

    ``g`` may be None (no killing), a constant, an array of levels with
    shape (n_steps + 1, n_points), or ``"subordinator"`` for g = Phi(u*_f);
    in the last case the result is checked against ``solve_v``.
    """
    ls = model.lambda_star
    h0 = _data_values(h, cfg, "h")
    us = _matching_u_star(model, f, T, cfg, u_star)
    n, dt = _steps(T, cfg.dt)
    ops = _Operators(model, cfg, dt)
    U = us.values
    if g is None:
        G = np.zeros_like(U)
    elif isinstance(g, str):
        if g != "subordinator":
            raise ValueError(f"unknown killing rate {g!r}")
        G = subordinator_exponent(model.mechanism, model.constants, U)
    else:
        G = np.broadcast_to(np.asarray(g, dtype=float), U.shape)
    lip = _guard(_e_lipschitz(model, float(max(U.max(), 0.0))) + float(np.max(np.abs(G))), dt, "solve_w")
    _check_width(model, cfg, T)
    pi_u = [ops.pi(U[k]) for k in range(n + 1)]

    def rhs(k, E):
        H = h_function(model, E, U[k], ops.pi(E), pi_u[k])
        return (H - ls * G[k] * E) / ls

    levels, iters = _march(np.exp(-h0), rhs, n, dt, ops, cfg, clamp=True, label="solve_w", lip=lip)
    out = SolutionField(
        "w", np.linspace(0, n * dt, n + 1), levels, cfg.grid, {"f": us.data.get("f"), "h": h0}, {"picard_iters": iters}
    )
    if isinstance(g, str) and check_collapse:
        ref = solve_v(model, f, h, T, cfg, u_star=us)
        gap = float(np.max(np.abs(ref.values - levels)))
        out.diagnostics["collapse_gap"] = gap
        if gap > 1e-6:
            raise IdentityViolation(f"exp(-w) with g = Phi(u*) differs from exp(-v) by {gap:.3g}")
    return out


# -- scalar ODE oracle ------------------------------------------------------


def _rk4(rhs, y, h):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_scalar(
    rhs: Callable[[float], float],
    y0: float,
    T: float,
    dt: float,
    tol: float = 1e-12,
    adaptive: bool = True,
    max_substeps: int = 1_000_000,
):
    """Classical RK4 for an autonomous scalar ODE, reported every dt.

    Each step is checked by step doubling; with ``adaptive`` the step is
    halved (and later regrown) until the local error estimate is below
    ``tol * (1 + |y|)``, otherwise StepSizeTooLarge is raised.
    """
    n, dt = _steps(T, dt)
    out = np.empty(n + 1)
    out[0] = y = float(y0)
    h = dt
    used = 0
    for k in range(n):
        t, t_end = 0.0, dt
        while t < t_end * (1 - 1e-14):
            step = min(h, t_end - t)
            full = _rk4(rhs, y, step)
            half = _rk4(rhs, _rk4(rhs, y, 0.5 * step), 0.5 * step)
            err = abs(half - full) / 15.0
            if err <= tol * (1 + abs(half)):
                y = half + (half - full) / 15.0
                t += step
                if err < tol * (1 + abs(half)) / 64:
                    h = min(2 * step, dt)
            else:
                if not adaptive:
                    raise StepSizeTooLarge(f"local error {err:.3g} exceeds {tol:g} with step {step:g}")
                h = 0.5 * step
            used += 1
            if used > max_substeps:
                raise StepSizeTooLarge("substep budget exhausted")
        out[k + 1] = y
    return np.linspace(0, n * dt, n + 1), out


def ode_csbp(
    model: Model, theta: float, variant: str = "psi_bar", T: float = 1.0, dt: float = 1e-3, tol: float = 1e-13
) -> ScalarPath:
    """u' = -psi_bar(u) (or psi_bar(u + lambda*) for ``psi_bar_star``) from u(0) = theta."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    mech = model.mechanism
    if variant == "psi_bar":
        rhs = lambda u: -float(mech.psi_bar(u))  # noqa: E731
    elif variant == "psi_bar_star":
        ls = model.lambda_star
        rhs = lambda u: -float(mech.psi_bar(u + ls))  # noqa: E731
    else:
        raise ValueError(f"unknown variant {variant!r}")
    times, values = integrate_scalar(rhs, theta, T, dt, tol)
    return ScalarPath(times, values, variant, float(theta))


def u_star_bound(model: Model, theta: float, T: float, dt: float = 1e-3) -> ScalarPath:
    """U*_theta, solving U + int_0^s psi_bar(U + lambda*) = theta; bounds u*_f when f <= theta."""
    return ode_csbp(model, theta, "psi_bar_star", T, dt)


def extinction_exponent(model: Model, T: float, theta: float = 1e6, dt: float = 1e-2):
    """w_T, the limit of u_T(theta) as theta grows, with a doubling check.

    Integrates y = 1/u, which solves y' = y^2 psi_bar(1/y) and stays smooth
    for huge theta (the right side tends to beta as y -> 0).  Returns
    ``(w_T, |u_T(2 theta) - u_T(theta)|)``; P(extinct by T) = exp(-||mu|| w_T).
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    mech = model.mechanism

    def rhs(y):
        if y <= 0:
            return mech.beta
        return float(y * y * mech.psi_bar(1.0 / y))

    a = integrate_scalar(rhs, 1.0 / theta, T, dt)[1][-1]
    b = integrate_scalar(rhs, 0.5 / theta, T, dt)[1][-1]
    return float(1.0 / b), float(abs(1.0 / b - 1.0 / a))

"""Mass immigrating onto the backbone: conditional Laplace values and particle states.

Two modes.  ``analytic_conditional_laplace`` integrates out every source of
immigration given the tree and returns E[exp(-<f, Delta_t> - <h, Z_t>) | Z].
``sample_immigration_events`` plus ``particle_dressing`` produce an actual
atomic-measure state made of particles of mass epsilon; that route is
approximate and ``particle_scheme_laplace`` gives its exact total-mass
Laplace transform so the discretisation bias can be reported.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .backbone_sim import ALIVE, LOCAL, AtomicMeasure, BackboneTree, evaluate_Z
from .errors import ApproximationWarning, FieldMismatch, PopulationExplosion
from .mechanism import immigration_law, subordinator_exponent
from .mild_solver import SolutionField, SolverConfig, integrate_scalar, solve_w
from .model import Model
from .motion import displacement_at, sample_displacement, sample_path_increment

__all__ = [
    "SOURCES",
    "ImmigrationEvent",
    "ImmigrationEvents",
    "ConditionalLaplace",
    "DressedState",
    "analytic_conditional_laplace",
    "sample_immigration_events",
    "particle_dressing",
    "particle_scheme_laplace",
    "particle_scheme_fields",
    "stochastic_round",
]

CONTINUOUS, DISCONTINUOUS, BRANCH_LOCAL, BRANCH_NONLOCAL = range(4)
SOURCES = ("continuous", "discontinuous", "branch-local", "branch-nonlocal")
INITIAL = -1


# -- analytic mode ----------------------------------------------------------


@dataclass(frozen=True)
class ConditionalLaplace:
    value: float
    initial_factor: float
    branch_factor: float
    branch_point_factor: float
    h_factor: float


def _as_fn(h):
    if callable(h):
        return h
    c = float(h)
    return lambda x: np.full(np.shape(x)[:1], c)


def _check_field(tree: BackboneTree, t: float, u_star: SolutionField, model: Model):
    if u_star.tag != "u_star":
        raise FieldMismatch(f"expected a u_star field, got {u_star.tag!r}")
    if t > tree.horizon + 1e-12:
        raise FieldMismatch(f"tree horizon {tree.horizon} is before t = {t}")
    if t > u_star.horizon + 1e-12:
        raise FieldMismatch(f"u_star solved up to {u_star.horizon}, needed up to {t}")
    if not u_star.is_scalar and model.motion.dimension != 1:
        raise FieldMismatch("grid fields are one-dimensional")


def _rate_field(model: Model, u_star: SolutionField) -> SolutionField:
    rates = subordinator_exponent(model.mechanism, model.constants, np.maximum(u_star.values, 0.0))
    return SolutionField("rate", u_star.times, np.asarray(rates, dtype=float), u_star.grid)


def analytic_conditional_laplace(
    tree: BackboneTree,
    f,
    h,
    t: float,
    u_star: SolutionField,
    model: Model,
    mu: Optional[AtomicMeasure] = None,
    rate: Optional[SolutionField] = None,
) -> ConditionalLaplace:
    """E[exp(-<f, Delta_t> - <h, Z_t>) | Z] for one backbone tree.

    ``u_star`` must hold u*_f on [0, t].  ``mu`` is the initial measure of
    the independent conditioned copy (default: the tree's initial atoms).
    ``rate`` overrides the killing rate Phi(u*_f) along branches; it is
    used to evaluate discretised schemes.
    """
    _check_field(tree, t, u_star, model)
    mu = tree.initial if mu is None else mu
    if rate is None:
        rate = _rate_field(model, u_star)
    mech, consts = model.mechanism, model.constants

    initial = math.exp(-mu.integrate(lambda x: u_star(x, t)))

    along = 0.0
    if u_star.is_scalar:
        # A(s) = int_0^s rate(r) dr on the solver grid; a branch alive on
        # [a, b] contributes A(t - a) - A(t - b).
        r = rate.values[:, 0]
        A = np.concatenate([[0.0], np.cumsum(0.5 * rate.dt * (r[1:] + r[:-1]))])
        for node in tree:
            a, b = min(node.tau, t), min(node.sigma, t)
            if b > a:
                along += np.interp(t - a, rate.times, A) - np.interp(t - b, rate.times, A)
    else:
        for node in tree:
            a, b = min(node.tau, t), min(node.sigma, t)
            if b <= a:
                continue
            keep = node.times <= b
            times, pts = node.times[keep], node.path[keep, 0]
            if times[-1] < b:
                times = np.append(times, b)
                pts = np.append(pts, node.position(b)[0])
            vals = rate(pts, t - times)
            along += float(np.sum(0.5 * np.diff(times) * (vals[1:] + vals[:-1])))
    branch = math.exp(-along)

    points = 1.0
    for node in tree:
        if node.branch_type == ALIVE or node.sigma > t:
            continue
        law = immigration_law(mech, consts, node.branch_type, node.n_offspring)
        if law.is_degenerate_zero:
            continue
        x = node.death_position
        age = t - node.sigma
        if node.branch_type == LOCAL or u_star.is_scalar:
            s = float(u_star(x[0], age))
        else:
            s = float(displacement_at(model.displacement, u_star.grid, u_star.at(age), x[:1])[0])
        points *= law.laplace(s)

    z_t = evaluate_Z(tree, t)
    h_factor = math.exp(-z_t.integrate(_as_fn(h)))
    value = initial * branch * points * h_factor
    return ConditionalLaplace(value, initial, branch, points, h_factor)


# -- sampled immigration ----------------------------------------------------


@dataclass(frozen=True)
class ImmigrationEvent:
    source: str
    label: tuple
    time: float
    mass: float
    location: np.ndarray
    displaced: bool


@dataclass
class ImmigrationEvents:
    """Columnar store of immigration events; iterate for event objects."""

    source: np.ndarray
    node: np.ndarray
    time: np.ndarray
    mass: np.ndarray
    location: np.ndarray
    labels: list

    def __len__(self) -> int:
        return int(self.time.size)

    def __iter__(self) -> Iterator[ImmigrationEvent]:
        for i in range(len(self)):
            s = int(self.source[i])
            yield ImmigrationEvent(
                SOURCES[s],
                self.labels[self.node[i]],
                float(self.time[i]),
                float(self.mass[i]),
                self.location[i],
                s == BRANCH_NONLOCAL,
            )

    def count(self, source: str) -> int:
        return int(np.sum(self.source == SOURCES.index(source)))

    def to_lines(self):
        out = ["source\tlabel\ttime\tmass\tlocation"]
        for ev in self:
            loc = ",".join(f"{c:.17g}" for c in ev.location)
            lab = ".".join(map(str, ev.label))
            out.append(f"{ev.source}\t{lab}\t{ev.time:.17g}\t{ev.mass:.17g}\t{loc}")
        return out


def _positions(node, r: np.ndarray) -> np.ndarray:
    """Linear interpolation of a stored path at several times."""
    return np.stack([np.interp(r, node.times, node.path[:, k]) for k in range(node.path.shape[1])], axis=1)


def sample_immigration_events(
    tree: BackboneTree, t: float, model: Model, m: float, rng: np.random.Generator
) -> ImmigrationEvents:
    """Draw the immigration events up to time t given the tree.

    Continuous immigration is replaced by atoms of mass m arriving at rate
    2 beta / m along each branch; jump immigration arrives at rate
    int y e^{-lambda* y} Pi^L(dy); branch points carry the exact laws.
    """
    if not m > 0:
        raise ValueError("mass floor m must be positive")
    mech, consts = model.mechanism, model.constants
    ls = consts.lambda_star
    cont_rate = 2 * mech.beta / m
    jump_rate = mech.pi_L.laplace_moment(1, ls) if not mech.pi_L.is_zero else 0.0
    dim = model.motion.dimension
    src, nodes, times, masses, locs = [], [], [], [], []
    labels = []
    for k, node in enumerate(tree):
        labels.append(node.label)
        a, b = min(node.tau, t), min(node.sigma, t)
        length = b - a
        if length > 0:
            for code, rate in ((CONTINUOUS, cont_rate), (DISCONTINUOUS, jump_rate)):
                if rate <= 0:
                    continue
                n = int(rng.poisson(rate * length))
                if n == 0:
                    continue
                r = np.sort(a + length * rng.random(n))
                if code == CONTINUOUS:
                    y = np.full(n, m)
                else:
                    y = mech.pi_L.sample_poisson_tilt(1, ls, rng, n)
                src.append(np.full(n, code))
                nodes.append(np.full(n, k))
                times.append(r)
                masses.append(y)
                locs.append(_positions(node, r))
        if node.branch_type != ALIVE and node.sigma <= t:
            law = immigration_law(mech, consts, node.branch_type, node.n_offspring)
            if law.is_degenerate_zero:
                continue
            y = float(law.sample(rng))
            if y > 0:
                src.append(np.array([BRANCH_LOCAL if node.branch_type == LOCAL else BRANCH_NONLOCAL]))
                nodes.append(np.array([k]))
                times.append(np.array([node.sigma]))
                masses.append(np.array([y]))
                locs.append(node.death_position[None, :])
    if not src:
        return ImmigrationEvents(
            np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros((0, dim)), labels
        )
    return ImmigrationEvents(
        np.concatenate(src),
        np.concatenate(nodes),
        np.concatenate(times),
        np.concatenate(masses),
        np.concatenate(locs),
        labels,
    )


# -- particle mode ----------------------------------------------------------


@dataclass
class DressedState:
    """Particles of mass epsilon; ``provenance[i]`` is the index of the
    immigration event a particle descends from, or -1 for the initial copy."""

    epsilon: float
    time: float
    locations: np.ndarray
    provenance: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return int(self.provenance.size)

    @property
    def total_mass(self) -> float:
        return self.epsilon * self.n_particles

    def measure(self) -> AtomicMeasure:
        return AtomicMeasure(np.full(self.n_particles, self.epsilon), self.locations)

    def integrate(self, f) -> float:
        if self.n_particles == 0:
            return 0.0
        pts = self.locations[:, 0] if self.locations.shape[1] == 1 else self.locations
        return self.epsilon * float(np.sum(_as_fn(f)(pts)))


def stochastic_round(x, rng: np.random.Generator) -> np.ndarray:
    """floor(x) plus a Bernoulli of the fractional part: unbiased integers."""
    x = np.asarray(x, dtype=float)
    base = np.floor(x)
    return (base + (rng.random(x.shape) < x - base)).astype(np.int64)


def _particle_rates(model: Model, epsilon: float):
    """Per-particle birth and death rates of the mass-epsilon scheme."""
    cm = model.conditioned
    c = cm.alpha + 1.0 - cm.gamma + cm.pi_L.moment(1)
    base = cm.beta / epsilon
    return base + max(0.0, -c), base + max(0.0, c)


def _birth_death(counts: np.ndarray, tau: np.ndarray, b: float, d: float, rng) -> np.ndarray:
    """Exact linear birth-death population after time tau from each single particle.

    Repeated for every one of ``counts`` ancestors; returns the total per entry.
    """
    x = (b - d) * tau
    if b == d:
        p0 = beta_ = b * tau / (1 + b * tau)
    else:
        em = np.expm1(x)
        den = b * em + (b - d)
        p0 = d * em / den
        beta_ = b * em / den
    out = np.zeros(counts.shape, dtype=np.int64)
    survivors = rng.binomial(counts, 1 - p0)
    alive = survivors > 0
    if np.any(alive):
        # a sum of k geometric(1 - beta) variables on {1, 2, ...}
        k = survivors[alive]
        bt = np.broadcast_to(beta_, counts.shape)[alive]
        out[alive] = k + rng.negative_binomial(k, 1 - bt)
    return out


def particle_dressing(
    tree: BackboneTree,
    events: ImmigrationEvents,
    t: float,
    epsilon: float,
    rng: np.random.Generator,
    model: Model,
    mu: Optional[AtomicMeasure] = None,
    step: float = 0.05,
    cap: int = 2_000_000,
) -> DressedState:
    """Particle approximation of Delta_t: the conditioned copy plus every immigrant.

    Each immigrant of mass y becomes stochastic_round(y / epsilon) particles
    evolving as a branching particle system whose total mass follows
    psi_bar(. + lambda*) as epsilon -> 0.  Branching is exact linear
    birth-death; motion, relocation and jumps are applied once per ``step``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    warnings.warn(
        f"particle dressing carries O(epsilon) bias (epsilon = {epsilon:g})", ApproximationWarning, stacklevel=2
    )
    mu = tree.initial if mu is None else mu
    cm = model.conditioned
    motion = model.motion
    dim = motion.dimension
    b, d = _particle_rates(model, epsilon)
    L, NL = cm.pi_L, cm.pi_NL
    rate_L = 0.0 if L.is_zero else epsilon * L.total_mass()
    rate_NL = 0.0 if NL.is_zero else epsilon * NL.total_mass()
    move_prob = -math.expm1(-cm.gamma * step)

    # arrivals: (time, location, provenance, particle count)
    a_time = [np.zeros(mu.n_atoms)]
    a_loc = [mu.locations]
    a_prov = [np.full(mu.n_atoms, INITIAL)]
    a_n = [stochastic_round(mu.masses / epsilon, rng)]
    keep = events.time <= t
    if np.any(keep):
        idx = np.flatnonzero(keep)
        a_time.append(events.time[idx])
        a_loc.append(events.location[idx])
        a_prov.append(idx)
        a_n.append(stochastic_round(events.mass[idx] / epsilon, rng))
    arr_time = np.concatenate(a_time)
    arr_n = np.concatenate(a_n)
    arr_prov = np.concatenate(a_prov)
    arr_loc = np.concatenate(a_loc).reshape(-1, dim)
    displaced = np.concatenate([np.zeros(mu.n_atoms, bool), events.source[keep] == BRANCH_NONLOCAL])
    arr_loc = np.repeat(arr_loc, arr_n, axis=0)
    arr_time = np.repeat(arr_time, arr_n)
    arr_prov = np.repeat(arr_prov, arr_n)
    disp = np.repeat(displaced, arr_n)
    if np.any(disp):
        arr_loc[disp] += sample_displacement(model.displacement, rng, int(disp.sum()), dim)
    if arr_time.size > cap:
        raise PopulationExplosion(f"{arr_time.size} immigrant particles exceed cap {cap}")

    n_steps = max(1, int(math.ceil(t / step - 1e-9)))
    edges = np.minimum(step * np.arange(n_steps + 1), t)
    loc = np.zeros((0, dim))
    prov = np.zeros(0, dtype=np.int64)
    for k in range(n_steps):
        lo, hi = edges[k], edges[k + 1]
        # particles present at lo run the whole step, arrivals in (lo, hi] run from arrival
        new = (arr_time > lo) & (arr_time <= hi) if k else (arr_time <= hi)
        start = np.concatenate([np.full(prov.size, lo), arr_time[new]])
        loc = np.concatenate([loc, arr_loc[new]])
        prov = np.concatenate([prov, arr_prov[new]])
        if prov.size == 0:
            continue
        dur = np.maximum(hi - start, 0.0)
        counts = _birth_death(np.ones(prov.size, dtype=np.int64), dur, b, d, rng)
        loc = np.repeat(loc, counts, axis=0)
        prov = np.repeat(prov, counts)
        dur = np.repeat(dur, counts)
        if prov.size == 0:
            continue
        extra_loc, extra_prov = [], []
        for rate, measure, moved in ((rate_L, L, False), (rate_NL, NL, True)):
            if rate <= 0:
                continue
            jumps = rng.poisson(rate * dur)
            hit = np.flatnonzero(jumps)
            if hit.size == 0:
                continue
            parents = np.repeat(hit, jumps[hit])
            sizes = stochastic_round(measure.sample_jumps(rng, parents.size) / epsilon, rng)
            parents = np.repeat(parents, sizes)
            jl = loc[parents]
            if moved:
                jl = jl + sample_displacement(model.displacement, rng, parents.size, dim)
            extra_loc.append(jl)
            extra_prov.append(prov[parents])
        if move_prob > 0:
            movers = rng.random(prov.size) < -np.expm1(-cm.gamma * dur)
            if np.any(movers):
                loc[movers] += sample_displacement(model.displacement, rng, int(movers.sum()), dim)
        live = dur > 0
        if np.any(live):
            loc[live] += sample_path_increment(motion, dur[live], rng)
        if extra_loc:
            loc = np.concatenate([loc] + extra_loc)
            prov = np.concatenate([prov] + extra_prov)
        if prov.size > cap:
            raise PopulationExplosion(f"particle population {prov.size} exceeds cap {cap}")
    return DressedState(float(epsilon), float(t), loc, prov, {"birth_rate": b, "death_rate": d})


# -- exact Laplace transform of the particle scheme ------------------------


def _rounding_laplace(y: float, epsilon: float, s):
    """E exp(-s epsilon K) with K = stochastic_round(y / epsilon)."""
    x = y / epsilon
    k = math.floor(x)
    frac = x - k
    s = np.asarray(s, dtype=float)
    return np.exp(-s * epsilon * k) * (1 - frac + frac * np.exp(-s * epsilon))


def particle_scheme_fields(model: Model, lam: float, t: float, epsilon: float, m: float, dt: float = 1e-3):
    """Exponent and branch killing rate of the particle scheme for f = lam.

    Returns ``(u_field, rate_field)``: U solves U' = -F_eps(U), U(0) = lam,
    the Laplace exponent per unit mass of the scheme's conditioned process;
    the rate is the scheme's counterpart of Phi(u*) along backbone branches.
    Plugging both into ``analytic_conditional_laplace`` gives the scheme's
    exact conditional Laplace value for a fixed tree.  Branch-point and jump
    immigrants use the continuum immigrant masses; their rounding to
    particles is ignored.
    """
    mech, consts = model.mechanism, model.constants
    ls = consts.lambda_star
    cm = model.conditioned
    b, d = _particle_rates(model, epsilon)
    L, NL = cm.pi_L, cm.pi_NL

    def F(U):
        out = b * math.expm1(-epsilon * U) / epsilon + d * math.expm1(epsilon * U) / epsilon
        if not L.is_zero:
            out += L.laplace_moment(0, U) - L.total_mass()
        if not NL.is_zero:
            out += NL.laplace_moment(0, U) - NL.total_mass()
        return out

    times, U = integrate_scalar(lambda u: -F(u), lam, t, dt)
    g = 2 * mech.beta / m * (1 - _rounding_laplace(m, epsilon, U))
    if not mech.pi_L.is_zero:
        g = g + mech.pi_L.laplace_moment(1, ls) - mech.pi_L.laplace_moment(1, ls + U)
    u_field = SolutionField("u_star", times, U[:, None], None, {"f": np.array([lam])})
    rate_field = SolutionField("rate", times, np.asarray(g, dtype=float)[:, None], None)
    return u_field, rate_field


def particle_scheme_laplace(
    model: Model, lam: float, t: float, epsilon: float, m: float, mu_mass: float = 1.0, dt: float = 1e-3
) -> float:
    """E exp(-lam ||Delta_t||) for the particle scheme with a Poissonised backbone.

    Combines ``particle_scheme_fields`` with the backbone equation whose
    killing rate is the scheme's rate.
    """
    u_field, rate_field = particle_scheme_fields(model, lam, t, epsilon, m, dt)
    cfg = SolverConfig(dt=u_field.dt)
    E = solve_w(model, lam, 0.0, t, cfg, g=rate_field.values, u_star=u_field).values[-1, 0]
    U_t = u_field.values[-1, 0]
    return float(math.exp(-mu_mass * U_t) * math.exp(-model.lambda_star * mu_mass * (1 - E)))

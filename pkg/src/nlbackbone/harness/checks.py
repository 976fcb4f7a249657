"""Registered verification checks.

Each check takes the experiment config, its own parameters and its
registered name (which keys its random streams) and returns report records.
Monte Carlo checks gate at three standard errors; solver checks use
absolute tolerances.
"""

from __future__ import annotations

import math
from functools import partial
from typing import Callable, Dict, List

import numpy as np

from ..backbone_sim import LOCAL, AtomicMeasure, BackboneTree, evaluate_Z, poissonize, sample_tree
from ..dressing import analytic_conditional_laplace, particle_dressing, particle_scheme_laplace, sample_immigration_events
from ..errors import PopulationExplosion
from ..mechanism import subordinator_forms
from ..mild_solver import SolverConfig, extinction_exponent, ode_csbp, solve_u, solve_u_star, solve_v
from ..model import Model
from .config import PRESETS, ExperimentConfig, build_mechanism
from .report import ReportRecord
from .rng import map_replicates, replicate_rng
from .stats import chi_square_fit, mean_se

__all__ = ["CHECKS", "register"]

CHECKS: Dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        CHECKS[name] = fn
        return fn

    return deco


def _preset_model(params, default="m0", require_grey=True) -> Model:
    return Model(build_mechanism({"preset": params.get("mechanism", default)}), require_grey=require_grey)


def _solver(cfg: ExperimentConfig, grid=None, dt=None) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(
        dt=float(dt if dt is not None else s.get("dt", 1e-3)),
        picard_tol=float(s.get("picard_tol", 1e-12)),
        picard_max_iters=int(s.get("picard_max_iters", 100)),
        grid=grid,
    )


def _quadratic_closed_form(model: Model, theta: float, t: float) -> float:
    """u_t(theta) when psi_bar(l) = beta l^2 - a l (no jumps)."""
    mech = model.mechanism
    a = -(mech.alpha + 1 - mech.gamma)
    e = math.exp(a * t)
    return a * theta * e / (a + mech.beta * theta * (e - 1))


# -- constants --------------------------------------------------------------


@register("constants")
def check_constants(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = _preset_model(params)
    mech = model.mechanism
    if not (mech.pi_L.is_zero and mech.pi_NL.is_zero):
        raise ValueError("closed-form constants need a mechanism without jumps")
    # quadratic case: psi_bar(l) = beta l^2 + (alpha + 1 - gamma) l
    ls = -(mech.alpha + 1 - mech.gamma) / mech.beta
    q = mech.alpha + 1 + 2 * mech.beta * ls
    c, laws = model.constants, model.laws
    out = [
        ReportRecord.make(f"{name}.lambda_star", ls, "closed form", c.lambda_star, 1e-10),
        ReportRecord.make(f"{name}.q", q, "closed form", c.q, 1e-12),
        ReportRecord.make(f"{name}.p_local_2", mech.beta * ls / q, "closed form", laws.p_local[2], 1e-12),
        ReportRecord.make(f"{name}.p_nonlocal_1", mech.gamma / q, "closed form", laws.p_nonlocal[1], 1e-12),
    ]
    for preset in params.get("normalization", sorted(PRESETS)):
        m = Model(build_mechanism({"preset": preset}), require_grey=False)
        total = m.laws.local_mass + m.laws.nonlocal_mass
        out.append(ReportRecord.make(f"{name}.normalization.{preset}", 1.0, "probability", total, 1e-9,
                                     n_max=m.laws.n_max, tail=m.laws.tail_mass))
    return out


# -- lambda shift identity --------------------------------------------------

_GRID_DATA = {
    "bump": lambda x: 0.5 * np.exp(-x * x),
    "wide": lambda x: 1.0 / (1.0 + 0.1 * x * x),
    "step": lambda x: np.where(x > 0, 1.0, 0.2),
    "ramp": lambda x: 0.05 * np.clip(x + 10, 0, 20),
    "twin": lambda x: 2.0 * np.exp(-((x - 2) ** 2)) + np.exp(-((x + 3) ** 2) / 2),
}


@register("lambda_shift_identity")
def check_lambda_shift(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = cfg.model()
    T = float(params.get("t", 2.0))
    scalar_cfg = _solver(cfg)
    scalar_gap = 0.0
    for f in params.get("scalar_data", [0.0, 0.1, 0.5, 1.0, 3.0]):
        us = solve_u_star(model, float(f), T, scalar_cfg)
        scalar_gap = max(scalar_gap, us.diagnostics["shift_gap"])
    grid_cfg = _solver(cfg, grid=cfg.grid, dt=params.get("grid_dt", 0.01))
    grid_gap = 0.0
    for fn in _GRID_DATA.values():
        us = solve_u_star(model, fn, T, grid_cfg)
        grid_gap = max(grid_gap, us.diagnostics["shift_gap"])
    return [
        ReportRecord.make(f"{name}.scalar", 0.0, "identity", scalar_gap, 1e-6),
        ReportRecord.make(f"{name}.grid", 0.0, "identity", grid_gap, 1e-4, functions=",".join(_GRID_DATA)),
    ]


# -- scalar closed form -----------------------------------------------------


@register("scalar_oracle")
def check_scalar_oracle(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = _preset_model(params)
    theta, t = float(params.get("theta", 1.0)), float(params.get("t", 1.0))
    u = ode_csbp(model, theta, "psi_bar", t).values[-1]
    T = float(params.get("extinction_t", 50.0))
    w, doubling_gap = extinction_exponent(model, T)
    target_w = model.lambda_star
    return [
        ReportRecord.make(f"{name}.ode", _quadratic_closed_form(model, theta, t), "closed form", u, 1e-8),
        ReportRecord.make(f"{name}.extinction", math.exp(-target_w), "closed form", math.exp(-w), 1e-6,
                          doubling_gap=doubling_gap),
    ]


# -- Monte Carlo over trees -------------------------------------------------


def _empty_tree(nu: AtomicMeasure, T: float, dt: float) -> BackboneTree:
    return BackboneTree({}, T, nu, dt)


def _analytic_replicate(rng, i, model, field, f, h, t, mu, poissonized, dt, cap):
    nu = poissonize(mu, model.lambda_star, rng) if poissonized else mu
    try:
        tree = sample_tree(nu, t, model, rng, dt, cap) if nu.n_atoms else _empty_tree(nu, t, dt)
    except PopulationExplosion:
        return math.nan
    return analytic_conditional_laplace(tree, f, h, t, field, model, mu=mu).value


def _mc_record(name, values, target, source, se_ratio=None, **details):
    vals = np.asarray(values, dtype=float)
    ok = vals[np.isfinite(vals)]
    est, se = mean_se(ok)
    rec = [ReportRecord.make(name, target, source, est, 3 * se, se=se, replicates=ok.size,
                             cap_hits=int(vals.size - ok.size), **details)]
    if vals.size != ok.size:
        rec[0].passed = False
    if se_ratio is not None:
        rec.append(ReportRecord.make(f"{name}.relative_se", 0.0, "design", se / target, se_ratio))
    return rec


@register("conditional_laplace_mc")
def check_conditional_laplace(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = cfg.model()
    sim = cfg.simulation
    f, h, t = float(params.get("f", 0.5)), float(params.get("h", 0.2)), float(params.get("t", 1.0))
    n = int(params.get("replicates", sim["replicates"]))
    scfg = _solver(cfg)
    us = solve_u_star(model, f, t, scfg)
    E = solve_v(model, f, h, t, scfg, u_star=us).values[-1, 0]
    target = math.exp(-us.values[-1, 0]) * E
    mu = AtomicMeasure.dirac(np.zeros(model.motion.dimension))
    task = partial(_analytic_replicate, model=model, field=us, f=f, h=h, t=t, mu=mu, poissonized=False,
                   dt=float(sim["dt"]), cap=int(sim["cap"]))
    vals = map_replicates(task, n, cfg.seed, name, int(sim.get("workers", 1)))
    return _mc_record(name, vals, target, "solver", se_ratio=float(params.get("max_relative_se", 0.003)))


@register("poissonized_laplace_mc")
def check_poissonized_laplace(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = cfg.model()
    sim = cfg.simulation
    f, h, t = float(params.get("f", 0.5)), float(params.get("h", 0.0)), float(params.get("t", 1.0))
    mass = float(params.get("mu_mass", 1.0))
    n = int(params.get("replicates", sim["replicates"]))
    scfg = _solver(cfg)
    us = solve_u_star(model, f, t, scfg)
    shifted = f + model.lambda_star * (1 - math.exp(-h))
    target = math.exp(-mass * solve_u(model, shifted, t, scfg).values[-1, 0])
    mu = AtomicMeasure.dirac(np.zeros(model.motion.dimension), mass)
    task = partial(_analytic_replicate, model=model, field=us, f=f, h=h, t=t, mu=mu, poissonized=True,
                   dt=float(sim["dt"]), cap=int(sim["cap"]))
    vals = map_replicates(task, n, cfg.seed, name, int(sim.get("workers", 1)))
    return _mc_record(name, vals, target, "solver")


# -- backbone split identity ------------------------------------------------


@register("backbone_split_identity")
def check_backbone_split(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = cfg.model()
    ls = model.lambda_star
    fs = params.get("f", [0.1, 0.5, 1.0])
    hs = params.get("h", [0.0, 0.2, 1.0])
    ts = params.get("t", [0.5, 1.0, 2.0])
    T = max(ts)
    scfg = _solver(cfg)
    worst, where = 0.0, None
    for f in fs:
        us = solve_u_star(model, f, T, scfg, check=False)
        for h in hs:
            shifted = f + ls * (1 - math.exp(-h))
            E = solve_v(model, f, h, T, scfg, u_star=us)
            u = solve_u(model, shifted, T, scfg)
            us2 = solve_u_star(model, shifted, T, scfg, check=False)
            E2 = solve_v(model, shifted, 0.0, T, scfg, u_star=us2)
            for t in ts:
                lhs = us.at(t)[0] + ls * (1 - E.at(t)[0])
                rhs = us2.at(t)[0] + ls * (1 - E2.at(t)[0])
                res = max(abs(u.at(t)[0] - lhs), abs(lhs - rhs))
                if res > worst:
                    worst, where = res, (f, h, t)
    return [ReportRecord.make(name, 0.0, "identity", worst, 1e-6, worst_at=str(where))]


# -- backbone laws ----------------------------------------------------------


def _tree_stats(rng, i, model, t, dt, cap):
    nu = AtomicMeasure.dirac(np.zeros(model.motion.dimension))
    try:
        tree = sample_tree(nu, t, model, rng, dt, cap)
    except PopulationExplosion:
        return None
    deaths = [node for node in tree if node.sigma < t]
    exposure = sum(node.sigma - node.tau for node in tree)
    cats = [(node.branch_type == LOCAL, node.n_offspring) for node in deaths]
    return len(deaths), exposure, cats, evaluate_Z(tree, t).n_atoms


@register("backbone_laws")
def check_backbone(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    model = cfg.model()
    sim = cfg.simulation
    t = float(params.get("t", 1.0))
    n = int(params.get("replicates", sim["replicates"]))
    task = partial(_tree_stats, model=model, t=t, dt=float(sim["dt"]), cap=int(sim["cap"]))
    results = map_replicates(task, n, cfg.seed, name, int(sim.get("workers", 1)))
    good = [r for r in results if r is not None]
    deaths = sum(r[0] for r in good)
    exposure = sum(r[1] for r in good)
    laws = model.laws
    is_local, counts, probs = laws.categories
    index = {(bool(a), int(b)): k for k, (a, b) in enumerate(zip(is_local, counts))}
    observed = np.zeros(len(probs))
    for r in good:
        for cat in r[2]:
            observed[index[cat]] += 1
    n_local = observed[is_local].sum()
    p_local = n_local / deaths
    stat, dof, pval = chi_square_fit(observed, probs)
    # exponential lifetimes censored at t: exposure / deaths estimates 1/q
    life = exposure / deaths
    life_se = life / math.sqrt(deaths)
    sizes = [r[3] for r in good]
    growth, growth_se = mean_se(sizes)
    c = model.constants
    out = [
        ReportRecord.make(f"{name}.lifetime_mean", 1 / c.q, "closed form", life, 3 * life_se, se=life_se,
                          deaths=deaths),
        ReportRecord.make(f"{name}.local_fraction", laws.local_mass, "closed form", p_local,
                          3 * math.sqrt(p_local * (1 - p_local) / deaths),
                          se=math.sqrt(p_local * (1 - p_local) / deaths)),
        ReportRecord.make(f"{name}.offspring_chi2", 1.0, "chi-square p-value", pval, 1e-3, rule="at_least",
                          statistic=stat, dof=dof),
        ReportRecord.make(f"{name}.mean_growth", math.exp(c.mean_rate * t), "closed form", growth,
                          3 * growth_se, se=growth_se, cap_hits=len(results) - len(good)),
    ]
    if len(good) != len(results):
        for r in out:
            r.passed = False
    return out


# -- subordinator forms -----------------------------------------------------


@register("subordinator")
def check_subordinator(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    presets = params.get("mechanisms", ["jumps_mixed", "jumps_exp", "jumps_atoms", "jumps_heavy_quadratic", "jumps_nogrey"])
    rng = replicate_rng(cfg.seed, name, 0)
    lam = rng.uniform(0.0, float(params.get("max_lambda", 20.0)), int(params.get("points", 100)))
    worst = 0.0
    for preset in presets:
        model = Model(build_mechanism({"preset": preset}), require_grey=False)
        a, b = subordinator_forms(model.mechanism, model.constants, lam)
        worst = max(worst, float(np.max(np.abs(a - b) / (1 + np.abs(a)))))
    return [ReportRecord.make(name, 0.0, "identity", worst, 1e-10, mechanisms=",".join(presets))]


# -- particle dressing ------------------------------------------------------


def _particle_replicate(rng, i, model, mu, t, epsilon, m, step, dt, cap):
    nu = poissonize(mu, model.lambda_star, rng)
    try:
        tree = sample_tree(nu, t, model, rng, dt, cap) if nu.n_atoms else _empty_tree(nu, t, dt)
        events = sample_immigration_events(tree, t, model, m, rng)
        state = particle_dressing(tree, events, t, epsilon, rng, model, mu=mu, step=step)
    except PopulationExplosion:
        return math.nan
    return state.total_mass


@register("particle_dressing")
def check_particle(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    import warnings

    from ..errors import ApproximationWarning

    model = cfg.model()
    sim = cfg.simulation
    t = float(params.get("t", 1.0))
    lams = [float(x) for x in params.get("lambdas", [0.5, 1.0, 2.0])]
    n = int(params.get("replicates", 4000))
    eps, m = float(params.get("epsilon", sim["epsilon"])), float(params.get("m", sim["m"]))
    mu = AtomicMeasure.dirac(np.zeros(model.motion.dimension))
    out, gaps = [], {}
    for level, scale in (("base", 1.0), ("half", 0.5)):
        e, mm = eps * scale, m * scale
        task = partial(_particle_replicate, model=model, mu=mu, t=t, epsilon=e, m=mm,
                       step=float(sim.get("step", 0.05)), dt=float(sim["dt"]), cap=int(sim["cap"]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ApproximationWarning)
            masses = np.asarray(map_replicates(task, n, cfg.seed, f"{name}.{level}", int(sim.get("workers", 1))))
        ok = masses[np.isfinite(masses)]
        for lam in lams:
            continuum = math.exp(-ode_csbp(model, lam, "psi_bar", t).values[-1])
            scheme = particle_scheme_laplace(model, lam, t, e, mm)
            bias = abs(scheme - continuum)
            gaps[(level, lam)] = bias
            est, se = mean_se(np.exp(-lam * ok))
            rec = ReportRecord.make(
                f"{name}.{level}.lambda={lam:g}", continuum, "closed form", est, 3 * se + bias, se=se,
                epsilon=e, m=mm, bias_constant=bias / (e + mm), scheme_value=scheme,
                scheme_z=(est - scheme) / se, cap_hits=int(masses.size - ok.size),
            )
            rec.passed = rec.passed and ok.size == masses.size
            out.append(rec)
    ratio = max(gaps[("half", lam)] / gaps[("base", lam)] for lam in lams)
    out.append(ReportRecord.make(f"{name}.richardson", 0.0, "halving (epsilon, m)", ratio, 0.999,
                                 gaps={f"{k[0]}:{k[1]:g}": v for k, v in gaps.items()}))
    return out


# -- determinism ------------------------------------------------------------

_DETERMINISM_CHECKS = [
    {"name": "constants"},
    {"name": "scalar_oracle"},
    {"name": "conditional_laplace_mc", "params": {"replicates": 400}},
    {"name": "poissonized_laplace_mc", "params": {"replicates": 400}},
    {"name": "particle_dressing", "params": {"replicates": 30, "lambdas": [1.0]}},
]


@register("determinism")
def check_determinism(cfg: ExperimentConfig, params: dict, name: str) -> List[ReportRecord]:
    from .runner import results_text, run_verify

    raw = dict(cfg.raw)
    raw["checks"] = params.get("checks", _DETERMINISM_CHECKS)
    sub = ExperimentConfig(raw)
    first = results_text(run_verify(sub))
    second = results_text(run_verify(sub))
    same = first == second
    return [ReportRecord.make(name, 0.0, "byte comparison", 0.0 if same else 1.0, 0.0, bytes=len(first))]

import math
import warnings

import numpy as np
import pytest

from conftest import preset_model
from nlbackbone import Grid
from nlbackbone.backbone_sim import AtomicMeasure, BackboneTree, poissonize, sample_tree
from nlbackbone.dressing import (
    analytic_conditional_laplace,
    particle_dressing,
    particle_scheme_fields,
    particle_scheme_laplace,
    sample_immigration_events,
    stochastic_round,
)
from nlbackbone.dressing import _birth_death
from nlbackbone.errors import ApproximationWarning, FieldMismatch
from nlbackbone.mild_solver import SolverConfig, ode_csbp, solve_u, solve_u_star, solve_v

CFG = SolverConfig(dt=1e-3)
ORIGIN = AtomicMeasure.dirac(0.0)


def grown_tree(model, rng, T=1.5, min_nodes=4):
    while True:
        tree = sample_tree(ORIGIN, T, model, rng, dt=0.05)
        if len(tree) >= min_nodes:
            return tree


def quiet_dressing(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ApproximationWarning)
        return particle_dressing(*args, **kw)


def test_zero_f_leaves_only_backbone_factor(jump_model, rng):
    tree = grown_tree(jump_model, rng)
    us = solve_u_star(jump_model, 0.0, 1.5, CFG)
    res = analytic_conditional_laplace(tree, 0.0, 0.4, 1.5, us, jump_model)
    alive = sum(n.branch_type == "alive" for n in tree)
    assert res.initial_factor == pytest.approx(1.0, abs=1e-12)
    assert res.branch_factor == pytest.approx(1.0, abs=1e-12)
    assert res.branch_point_factor == pytest.approx(1.0, abs=1e-12)
    assert res.value == pytest.approx(math.exp(-0.4 * alive), rel=1e-12)


def test_m0_branch_points_carry_no_mass(m0, rng):
    tree = grown_tree(m0, rng, min_nodes=6)
    us = solve_u_star(m0, 1.0, 1.5, CFG)
    res = analytic_conditional_laplace(tree, 1.0, 0.0, 1.5, us, m0)
    assert res.branch_point_factor == 1.0
    # killing rate along branches is Phi(u*) = 2 beta u* for M0
    total = sum(min(n.sigma, 1.5) - n.tau for n in tree)
    assert res.branch_factor < 1.0
    assert res.branch_factor >= math.exp(-2 * total * us.values.max())


def test_value_decreases_in_f(rng):
    model = preset_model("jumps_mixed")
    tree = grown_tree(model, rng)
    vals = []
    for f in [0.1, 0.5, 1.0, 2.0]:
        us = solve_u_star(model, f, 1.5, SolverConfig(dt=1e-2))
        vals.append(analytic_conditional_laplace(tree, f, 0.2, 1.5, us, model).value)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_field_mismatch(m0, rng):
    tree = grown_tree(m0, rng)
    us = solve_u_star(m0, 0.5, 1.0, CFG)
    with pytest.raises(FieldMismatch):
        analytic_conditional_laplace(tree, 0.5, 0.0, 1.2, us, m0)
    with pytest.raises(FieldMismatch):
        analytic_conditional_laplace(tree, 0.5, 0.0, 1.0, solve_u(m0, 0.5, 1.0, CFG), m0)
    with pytest.raises(FieldMismatch):
        analytic_conditional_laplace(tree, 0.5, 0.0, 1.6, solve_u_star(m0, 0.5, 2.0, CFG), m0)


@pytest.mark.parametrize("name", ["m0", "jumps_mixed"])
def test_conditional_laplace_averages_to_solver(name):
    model = preset_model(name)
    rng = np.random.default_rng(7)
    f, h, t, n = 0.5, 0.2, 1.0, 4000
    us = solve_u_star(model, f, t, CFG)
    target = math.exp(-us.values[-1, 0]) * solve_v(model, f, h, t, CFG, u_star=us).values[-1, 0]
    vals = [analytic_conditional_laplace(sample_tree(ORIGIN, t, model, rng, dt=1.0), f, h, t, us, model).value
            for _ in range(n)]
    assert abs(np.mean(vals) - target) < 4 * np.std(vals) / math.sqrt(n)


def test_poissonised_average_matches_shifted_u():
    model = preset_model("jumps_exp")
    rng = np.random.default_rng(8)
    f, h, t, n = 0.5, 0.3, 1.0, 4000
    us = solve_u_star(model, f, t, CFG)
    target = math.exp(-solve_u(model, f + model.lambda_star * (1 - math.exp(-h)), t, CFG).values[-1, 0])
    vals = []
    for _ in range(n):
        nu = poissonize(ORIGIN, model.lambda_star, rng)
        tree = sample_tree(nu, t, model, rng, dt=1.0) if nu.n_atoms else BackboneTree({}, t, nu, 1.0)
        vals.append(analytic_conditional_laplace(tree, f, h, t, us, model, mu=ORIGIN).value)
    assert abs(np.mean(vals) - target) < 4 * np.std(vals) / math.sqrt(n)


def test_grid_mode_average_matches_grid_solver(m0):
    rng = np.random.default_rng(9)
    f = lambda x: 0.8 * np.exp(-x * x)  # noqa: E731
    h = lambda x: 0.5 * (x > 0)  # noqa: E731
    t, n = 1.0, 2000
    cfg = SolverConfig(dt=1e-2, grid=Grid(10.0, 0.05))
    us = solve_u_star(m0, f, t, cfg)
    target = math.exp(-us(0.0, t)) * solve_v(m0, f, h, t, cfg, u_star=us)(0.0, t)
    vals = [analytic_conditional_laplace(sample_tree(ORIGIN, t, m0, rng, dt=0.02), f, h, t, us, m0).value
            for _ in range(n)]
    assert abs(np.mean(vals) - target) < 4 * np.std(vals) / math.sqrt(n) + 1e-4


def test_m0_immigration_events(m0, rng):
    tree = grown_tree(m0, rng)
    m = 0.01
    length = sum(min(n.sigma, 1.5) - n.tau for n in tree)
    counts = []
    for _ in range(200):
        ev = sample_immigration_events(tree, 1.5, m0, m, rng)
        assert ev.count("discontinuous") == 0
        assert ev.count("branch-nonlocal") == 0 and ev.count("branch-local") == 0
        assert np.all(ev.mass == m)
        counts.append(ev.count("continuous"))
    mean = 2 / m * length
    assert abs(np.mean(counts) - mean) < 4 * math.sqrt(mean / 200)
    with pytest.raises(ValueError):
        sample_immigration_events(tree, 1.5, m0, 0.0, rng)


def test_jump_immigration_rate(rng):
    model = preset_model("jumps_atoms")
    ls = model.lambda_star
    levy = model.mechanism.pi_L
    rate = sum(w * y * math.exp(-ls * y) for w, y in levy.atoms)
    if levy.exp_coeff > 0:
        rate += levy.exp_coeff / (levy.exp_rate + ls) ** 2
    tree = grown_tree(model, rng)
    length = sum(min(n.sigma, 1.5) - n.tau for n in tree)
    counts = [sample_immigration_events(tree, 1.5, model, 1.0, rng).count("discontinuous") for _ in range(400)]
    assert abs(np.mean(counts) - rate * length) < 4 * math.sqrt(rate * length / 400)
    ev = sample_immigration_events(tree, 1.5, model, 1.0, rng)
    for e in ev:
        if e.source == "discontinuous":
            assert any(abs(e.mass - y) < 1e-12 for _, y in levy.atoms) or levy.exp_coeff > 0
    assert ev.to_lines()[0].startswith("source\t")


def test_stochastic_round_unbiased(rng):
    x = np.full(200000, 2.3)
    r = stochastic_round(x, rng)
    assert set(np.unique(r)) == {2, 3}
    assert abs(r.mean() - 2.3) < 4 * math.sqrt(0.21 / x.size)
    assert np.array_equal(stochastic_round(np.array([0.0, 4.0]), rng), [0, 4])


@pytest.mark.parametrize("b,d", [(3.0, 2.0), (2.0, 3.0), (2.5, 2.5)])
def test_birth_death_mean(b, d, rng):
    tau = 0.7
    out = _birth_death(np.ones(100000, dtype=np.int64), np.full(100000, tau), b, d, rng)
    ref = math.exp((b - d) * tau)
    assert abs(out.mean() - ref) < 4 * out.std() / math.sqrt(out.size)
    # extinction probability of linear birth-death
    if b != d:
        em = math.expm1((b - d) * tau)
        p0 = d * em / (b * em + b - d)
    else:
        p0 = b * tau / (1 + b * tau)
    assert abs(np.mean(out == 0) - p0) < 4 * math.sqrt(p0 * (1 - p0) / out.size)


def test_dressed_state_warns_and_uses_fixed_masses(rng):
    model = preset_model("jumps_mixed")
    tree = grown_tree(model, rng, T=1.0, min_nodes=2)
    events = sample_immigration_events(tree, 1.0, model, 0.02, rng)
    with pytest.warns(ApproximationWarning):
        state = particle_dressing(tree, events, 1.0, 0.02, rng, model)
    meas = state.measure()
    assert np.all(meas.masses == 0.02)
    assert state.total_mass == pytest.approx(0.02 * state.n_particles)
    assert state.integrate(1.0) == pytest.approx(state.total_mass)
    assert np.all(state.provenance >= -1) and np.all(state.provenance < len(events))
    with pytest.raises(ValueError):
        quiet_dressing(tree, events, 1.0, 0.0, rng, model)


def test_immigrant_mass_decays_at_conditioned_rate():
    model = preset_model("jumps_mixed")
    rng = np.random.default_rng(10)
    y, s, eps, n = 1.0, 1.0, 0.01, 1500
    mu = AtomicMeasure.dirac(0.0, y)
    empty = BackboneTree({}, s, AtomicMeasure.empty(), 0.05)
    events = sample_immigration_events(empty, s, model, 0.01, rng)
    masses = np.array([quiet_dressing(empty, events, s, eps, rng, model, mu=mu).total_mass for _ in range(n)])
    ref = y * math.exp(-model.constants.backbone_rate * s)
    assert abs(masses.mean() - ref) < 4 * masses.std() / math.sqrt(n)


def test_scheme_laplace_converges_to_continuum(m0):
    cont = math.exp(-ode_csbp(m0, 1.0, "psi_bar", 1.0).values[-1])
    gaps = [abs(particle_scheme_laplace(m0, 1.0, 1.0, e, e) - cont) for e in (4e-3, 2e-3, 1e-3)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[1] / gaps[0] == pytest.approx(0.5, abs=0.02)
    assert gaps[2] / gaps[1] == pytest.approx(0.5, abs=0.02)


def test_scheme_fields_rao_blackwell(m0):
    # for a fixed M0 tree, averaging the particle mass Laplace value over
    # immigration and particle randomness recovers the scheme's analytic value
    rng = np.random.default_rng(11)
    eps = m = 0.02
    lam, n = 1.0, 1000
    u_field, rate_field = particle_scheme_fields(m0, lam, 1.0, eps, m)
    z = []
    for _ in range(10):
        tree = sample_tree(ORIGIN, 1.0, m0, rng, dt=0.05)
        exact = analytic_conditional_laplace(tree, lam, 0.0, 1.0, u_field, m0, rate=rate_field).value
        vals = np.empty(n)
        for i in range(n):
            events = sample_immigration_events(tree, 1.0, m0, m, rng)
            vals[i] = math.exp(-lam * quiet_dressing(tree, events, 1.0, eps, rng, m0).total_mass)
        z.append((vals.mean() - exact) / (vals.std() / math.sqrt(n)))
    z = np.array(z)
    assert np.all(np.abs(z) < 4)
    # the ten standardised gaps behave like standard normals
    assert abs(z.mean()) < 4 / math.sqrt(10)


def test_particle_total_mass_matches_scheme(m0):
    rng = np.random.default_rng(12)
    eps = m = 0.01
    lam, t, n = 1.0, 1.0, 1000
    vals = np.empty(n)
    for i in range(n):
        nu = poissonize(ORIGIN, m0.lambda_star, rng)
        tree = sample_tree(nu, t, m0, rng, dt=0.05) if nu.n_atoms else BackboneTree({}, t, nu, 0.05)
        events = sample_immigration_events(tree, t, m0, m, rng)
        vals[i] = math.exp(-lam * quiet_dressing(tree, events, t, eps, rng, m0, mu=ORIGIN).total_mass)
    scheme = particle_scheme_laplace(m0, lam, t, eps, m)
    assert abs(vals.mean() - scheme) < 4 * vals.std() / math.sqrt(n)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from conftest import JUMP_PRESETS, PRESETS, preset_model
from nlbackbone import M0, LevyMeasure, Mechanism, derive_constants, eval_psi_bar, immigration_law, offspring_laws
from nlbackbone.errors import GreyViolation, NotSupercritical, RepresentationMismatch, ZeroProbabilityBranch
from nlbackbone.mechanism import (
    chi_derivative_bound,
    subordinator_exponent,
    subordinator_forms,
)


def levy_integral(levy, fn):
    """Integral of fn against a Lévy measure by quadrature (independent of closed forms)."""
    out = sum(w * fn(y) for w, y in levy.atoms)
    if levy.exp_coeff > 0:
        c, r = levy.exp_coeff, levy.exp_rate
        out += integrate.quad(lambda y: fn(y) * c * math.exp(-r * y), 0, np.inf, limit=200)[0]
    return out


def psi_bar_quadrature(mech, lam):
    local = levy_integral(mech.pi_L, lambda y: math.exp(-lam * y) - 1 + lam * y)
    nonlocal_ = levy_integral(mech.pi_NL, lambda y: 1 - math.exp(-lam * y))
    return (mech.alpha + 1) * lam + mech.beta * lam**2 + local - mech.gamma * lam - nonlocal_


def test_m0_constants():
    c = derive_constants(M0)
    assert c.lambda_star == pytest.approx(0.5, abs=1e-10)
    assert c.q == pytest.approx(1.5, abs=1e-12)
    assert c.mean_rate == pytest.approx(0.5, abs=1e-12)
    assert c.grey_lower_ok and c.grey_upper_ok and c.supercritical_ok
    laws = offspring_laws(M0, c)
    assert laws.p_local[2] == pytest.approx(1 / 3, abs=1e-12)
    assert laws.p_nonlocal[1] == pytest.approx(2 / 3, abs=1e-12)
    assert laws.local_mass + laws.nonlocal_mass == pytest.approx(1, abs=1e-12)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_lambda_star_matches_brentq_on_quadrature(name):
    model = preset_model(name, require_grey=False)
    mech = model.mechanism
    root = optimize.brentq(lambda l: psi_bar_quadrature(mech, l), 1e-6, 50.0, xtol=1e-14)
    assert model.lambda_star == pytest.approx(root, rel=1e-9)
    assert abs(mech.psi_bar(model.lambda_star)) < 1e-10


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_branching_rate_is_derivative_of_phi(name):
    model = preset_model(name, require_grey=False)
    mech, ls = model.mechanism, model.lambda_star
    h = 1e-5
    fd = (mech.phi_L(ls + h) - mech.phi_L(ls - h)) / (2 * h)
    assert model.q == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_offspring_laws_normalised(name):
    laws = preset_model(name, require_grey=False).laws
    assert abs(laws.local_mass + laws.nonlocal_mass - 1) < 1e-9
    assert np.all(laws.p_local[:2] == 0) and laws.p_nonlocal[0] == 0
    assert np.all(laws.p_local >= 0) and np.all(laws.p_nonlocal >= 0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_offspring_generating_function(name):
    # q (G(s) - s) = psi_bar(lambda* (1 - s)) / lambda*, where G(s) = sum p_n s^n
    model = preset_model(name, require_grey=False)
    laws, ls, q = model.laws, model.lambda_star, model.q
    for s in np.linspace(0, 1, 11):
        G = np.polynomial.polynomial.polyval(s, laws.p_local + laws.p_nonlocal)
        assert q * (G - s) == pytest.approx(psi_bar_quadrature(model.mechanism, ls * (1 - s)) / ls, abs=1e-9)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_backbone_mean_growth_rate_is_malthusian(name):
    # q (mean offspring - 1) equals -psi_bar'(0+), the growth rate of E ||X_t||.
    model = preset_model(name, require_grey=False)
    assert model.q * (model.laws.mean_offspring - 1) == pytest.approx(model.constants.mean_rate, abs=1e-8)


def test_psi_bar_closed_form_matches_quadrature(jump_model):
    mech = jump_model.mechanism
    for lam in [0.0, 0.3, 1.0, 4.0]:
        assert eval_psi_bar(mech, lam) == pytest.approx(psi_bar_quadrature(mech, lam), abs=1e-10)


def test_laplace_moments_match_quadrature():
    levy = LevyMeasure(atoms=((0.4, 1.0), (0.2, 2.5)), exp_coeff=0.7, exp_rate=1.5)
    for k in range(3):
        for s in [0.0, 0.5, 2.0]:
            ref = levy_integral(levy, lambda y: y**k * math.exp(-s * y))
            assert levy.laplace_moment(k, s) == pytest.approx(ref, rel=1e-10)
    for n in range(5):
        ref = levy_integral(levy, lambda y: (0.8 * y) ** n / math.factorial(n) * math.exp(-0.8 * y))
        assert levy.poisson_tilt(n, 0.8) == pytest.approx(ref, rel=1e-10)
    assert levy.small_jump_moment() == pytest.approx(levy_integral(levy, lambda y: min(y, y * y)), rel=1e-8)


def test_poisson_tilt_sampling_matches_law(rng):
    levy = LevyMeasure(atoms=((0.5, 1.0),), exp_coeff=1.0, exp_rate=2.0)
    draws = levy.sample_poisson_tilt(2, 0.5, rng, 40000)
    mean_ref = levy_integral(levy, lambda y: y * (0.5 * y) ** 2 / 2 * math.exp(-0.5 * y)) / levy.poisson_tilt(2, 0.5)
    assert abs(draws.mean() - mean_ref) < 4 * draws.std() / math.sqrt(draws.size)


def test_conditioned_mechanism_shifts_psi_bar(jump_model):
    ls = jump_model.lambda_star
    cm = jump_model.conditioned
    lam = np.linspace(0, 5, 21)
    assert np.allclose(cm.psi_bar(lam), jump_model.mechanism.psi_bar(lam + ls), atol=1e-12)
    assert cm.dpsi_bar(0.0) == pytest.approx(jump_model.constants.backbone_rate, abs=1e-12)


def test_immigration_laws():
    model = preset_model("jumps_mixed")
    mech, c = model.mechanism, model.constants
    ls = c.lambda_star
    law = immigration_law(mech, c, "local", 2)
    # weight of zero: beta lambda*^2 against the Poisson tilt of Pi^L at n = 2
    total = mech.beta * ls**2 + mech.pi_L.poisson_tilt(2, ls)
    assert law.atom_at_zero == pytest.approx(mech.beta * ls**2 / total)
    s = 0.7
    ref = (mech.beta * ls**2 + mech.pi_L.poisson_tilt_laplace(2, ls, s)) / total
    assert law.laplace(s) == pytest.approx(ref, rel=1e-12)
    nl = immigration_law(mech, c, "nonlocal", 3)
    assert nl.atom_at_zero == 0.0
    assert immigration_law(M0, derive_constants(M0), "nonlocal", 1).is_degenerate_zero
    with pytest.raises(ZeroProbabilityBranch):
        immigration_law(M0, derive_constants(M0), "local", 3)
    with pytest.raises(ZeroProbabilityBranch):
        immigration_law(mech, c, "local", 1)


def test_immigration_law_sampling(rng):
    model = preset_model("jumps_exp")
    law = immigration_law(model.mechanism, model.constants, "local", 3)
    draws = law.sample(rng, 40000)
    assert abs(draws.mean() - law.mean()) < 4 * draws.std() / 200
    assert abs(np.mean(np.exp(-draws)) - law.laplace(1.0)) < 0.01


def test_subordinator_two_forms_agree(rng):
    lam = rng.uniform(0, 20, 100)
    for name in JUMP_PRESETS + ["jumps_nogrey"]:
        model = preset_model(name, require_grey=False)
        a, b = subordinator_forms(model.mechanism, model.constants, lam)
        assert np.max(np.abs(a - b) / (1 + np.abs(a))) < 1e-10
    m0 = preset_model("m0")
    assert subordinator_exponent(m0.mechanism, m0.constants, 1.0) == pytest.approx(2.0)


def test_subordinator_mismatch_detected(monkeypatch):
    model = preset_model("m0")
    with pytest.raises(ValueError):
        subordinator_exponent(model.mechanism, model.constants, -1.0)
    orig = Mechanism.dphi_L
    monkeypatch.setattr(Mechanism, "dphi_L", lambda self, z: orig(self, z) + 1e-6 * np.asarray(z))
    with pytest.raises(RepresentationMismatch):
        subordinator_exponent(model.mechanism, model.constants, 2.0)


def test_chi_bound_m0():
    c = derive_constants(M0)
    assert chi_derivative_bound(M0, c, 1.0) == pytest.approx(2.5, abs=1e-12)


def test_errors():
    critical = Mechanism(alpha=0.0, beta=1.0, gamma=1.0)
    with pytest.raises(NotSupercritical):
        derive_constants(critical)
    nogrey = preset_model("jumps_nogrey", require_grey=False).mechanism
    with pytest.raises(GreyViolation):
        derive_constants(nogrey)
    assert not derive_constants(nogrey, require_grey=False).grey_upper_ok
    with pytest.raises(ValueError):
        Mechanism(alpha=-1, beta=1, gamma=0.9, pi_NL=LevyMeasure(atoms=((0.5, 1.0),)))
    with pytest.raises(ValueError):
        LevyMeasure(atoms=((1.0, -1.0),))
    with pytest.raises(ValueError):
        LevyMeasure(exp_coeff=1.0, exp_rate=0.0)
    with pytest.raises(ValueError):
        eval_psi_bar(M0, -1.0)


mechanisms = st.builds(
    lambda a, b, g, w, y, c, r, wn: Mechanism(
        alpha=a,
        beta=b,
        gamma=g,
        pi_L=LevyMeasure(atoms=((w, y),), exp_coeff=c, exp_rate=r),
        pi_NL=LevyMeasure(atoms=((wn * (1 - g), 1.0),)),
    ),
    st.floats(-3.0, -1.2),
    st.floats(0.1, 3.0),
    st.floats(0.0, 0.9),
    st.floats(0.01, 2.0),
    st.floats(0.05, 5.0),
    st.floats(0.0, 2.0),
    st.floats(0.5, 5.0),
    st.floats(0.01, 0.9),
)


@settings(max_examples=40, deadline=None)
@given(mechanisms)
def test_random_mechanisms_properties(mech):
    c = derive_constants(mech)
    assert abs(mech.psi_bar(c.lambda_star)) < 1e-9 * max(1.0, c.q * c.lambda_star)
    lam = np.linspace(0, 3 * c.lambda_star, 31)
    vals = mech.psi_bar(lam)
    # convexity: second differences are non-negative
    assert np.all(np.diff(vals, 2) >= -1e-10)
    assert c.q > 0 and c.backbone_rate > 0
    laws = offspring_laws(mech, c)
    assert abs(laws.local_mass + laws.nonlocal_mass - 1) < 1e-9
    assert c.q * (laws.mean_offspring - 1) == pytest.approx(c.mean_rate, rel=1e-6, abs=1e-8)

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nlbackbone.errors import GridTooNarrow
from nlbackbone.motion import (
    DisplacementKernel,
    Grid,
    GridFunction,
    MotionSpec,
    displacement_apply,
    displacement_at,
    sample_displacement,
    sample_path,
    sample_path_increment,
    semigroup_apply,
)

GRID = Grid(8.0, 0.02)


def test_grid_size_and_nodes():
    g = Grid(1.0, 0.3)
    assert g.size == math.floor(2 / 0.3) + 1
    assert g.x[0] == -1.0
    assert Grid(10.0, 0.05).size == 401
    with pytest.raises(ValueError):
        Grid(1.0, 0.0)
    with pytest.raises(ValueError):
        GridFunction(g, np.zeros(3))
    with pytest.raises(ValueError):
        GridFunction(g, np.full(g.size, np.nan))


def test_motion_invariants():
    with pytest.raises(ValueError):
        MotionSpec(diffusion_coeff=0.0)
    with pytest.raises(ValueError):
        MotionSpec(drift=(1.0, 2.0), dimension=3)
    assert MotionSpec(drift=0.5, dimension=2).drift == (0.5, 0.5)
    with pytest.raises(ValueError):
        DisplacementKernel(atoms=((0.5, 0.0),))


def test_semigroup_identity_and_constants():
    m = MotionSpec()
    f = GridFunction.from_callable(GRID, lambda x: np.sin(x) ** 2)
    assert np.array_equal(semigroup_apply(m, 0.0, f).values, f.values)
    c = GridFunction.constant(GRID, 0.7)
    for t in [0.01, 0.5, 2.0]:
        assert np.allclose(semigroup_apply(m, t, c).values, 0.7, atol=1e-12)


def test_semigroup_matches_heat_kernel_quadrature():
    m = MotionSpec(diffusion_coeff=1.3, drift=0.4)
    fn = lambda x: np.exp(-x * x) * (1 + 0.5 * np.sin(2 * x))  # noqa: E731
    out = semigroup_apply(m, 0.7, GridFunction.from_callable(GRID, fn))
    s = math.sqrt(1.3 * 0.7)
    for x in [-1.0, 0.0, 0.5, 2.0]:
        mean = x + 0.4 * 0.7
        ref = integrate.quad(lambda y: fn(y) * math.exp(-((y - mean) ** 2) / (2 * s * s)) / (s * math.sqrt(2 * math.pi)),
                             -np.inf, np.inf)[0]
        assert out(x) == pytest.approx(ref, abs=1e-4)


def test_semigroup_of_indicator_at_origin(rng):
    # the node at the jump takes the midpoint value so the interpolant is symmetric
    f = GridFunction.from_callable(GRID, lambda x: np.where(x > 0, 1.0, np.where(x == 0, 0.5, 0.0)))
    val = semigroup_apply(MotionSpec(), 1.0, f)(0.0)
    assert val == pytest.approx(0.5, abs=1e-6)
    # Monte Carlo oracle of the same quantity
    mc = np.mean(rng.standard_normal(10**6) >= 0)
    assert abs(val - mc) < 4 * 0.5 / 1000


def test_grid_too_narrow_warns():
    with pytest.warns(GridTooNarrow):
        semigroup_apply(MotionSpec(), 5.0, GridFunction.constant(Grid(2.0, 0.1), 1.0))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_semigroup_property_and_monotonicity(t, s, coef):
    m = MotionSpec()
    fn = lambda x: np.exp(-((x - coef[0]) ** 2)) * (1.5 + np.tanh(coef[1] * x)) + 0.1 * coef[2] ** 2  # noqa: E731
    f = GridFunction.from_callable(GRID, fn)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridTooNarrow)
        two = semigroup_apply(m, t, semigroup_apply(m, s, f))
        one = semigroup_apply(m, t + s, f)
        assert np.max(np.abs(two.values - one.values)) < 2e-4
        g = GridFunction(GRID, f.values + np.abs(np.sin(GRID.x)))
        assert np.all(semigroup_apply(m, t, g).values >= semigroup_apply(m, t, f).values - 1e-14)


def test_displacement_apply():
    f = GridFunction.from_callable(GRID, lambda x: (x >= 0).astype(float))
    assert np.array_equal(displacement_apply(DisplacementKernel.identity(), f).values, f.values)
    shift = DisplacementKernel(atoms=((1.0, 1.0),))
    assert displacement_at(shift, GRID, f.values, [-0.5])[0] == pytest.approx(1.0)
    c = GridFunction.constant(GRID, 0.3)
    mix = DisplacementKernel(atoms=((0.5, 0.0),), normal_weight=0.5)
    assert np.allclose(displacement_apply(mix, c).values, 0.3)
    # normal displacement equals the heat semigroup with matching variance
    normal = displacement_apply(DisplacementKernel.normal(0.0, 0.5), f)
    heat = semigroup_apply(MotionSpec(), 0.5, f)
    assert np.allclose(normal.values, heat.values, atol=1e-12)


def test_path_increments_law(rng):
    m = MotionSpec(diffusion_coeff=2.0, drift=0.3)
    inc = sample_path_increment(m, 0.1, rng, size=10**6)[:, 0]
    assert abs(inc.mean() - 0.03) < 4 * math.sqrt(0.2) / 1000
    assert inc.var() == pytest.approx(0.2, rel=0.01)
    with pytest.raises(ValueError):
        sample_path_increment(m, 0.0, rng)
    path = sample_path(m, 1.0, np.array([0.0, 0.5, 1.0]), rng)
    assert path.shape == (3, 1) and path[0, 0] == 1.0


def test_displacement_sampling_variance(rng):
    k = DisplacementKernel(atoms=((0.5, 0.0),), normal_weight=0.5)
    draws = sample_displacement(k, rng, 10**6)[:, 0]
    se = math.sqrt(np.var(draws**2) / draws.size)
    assert abs(draws.var() - 0.5) < 4 * se
    assert k.variance == pytest.approx(0.5)

import numpy as np
import pytest

from epimem.curves import FunctionCurve, PiecewiseLinear, Step
from epimem.errors import ConfigError, NonConvergent, ZeroLimit
from epimem.model import (AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace, gamma_star,
                          validate_model)


def _spec(gamma, lam=None, kernel=None, n=1, grid=None):
    grid = grid or AgeGrid(1 / 64, 10.0)
    traits = TraitSpace.uniform(n)
    lam = lam or [Step([1.0], [2.0, 0.0])] * n
    gamma = gamma if isinstance(gamma, list) else [gamma] * n
    kernel = kernel or MemoryKernel.constant(n)
    return ModelSpec(traits, lam, gamma, kernel, 2.0, InitialDensity.uniform(grid, traits, 2.0), grid)


def test_trait_space_invariants():
    with pytest.raises(ConfigError):
        TraitSpace([0.5, 0.6])
    with pytest.raises(ConfigError):
        TraitSpace([0.5, 0.5], ["a", "a"])
    with pytest.raises(ConfigError):
        TraitSpace([1.0, 0.0])


def test_age_grid():
    g = AgeGrid(0.25, 5.0)
    assert g.count == 20 and g.count * g.step == g.max_age
    with pytest.raises(ConfigError):
        AgeGrid(1.0, 5.0)
    with pytest.raises(ConfigError):
        AgeGrid(0.3, 5.0)


def test_sis_step_passes_all_checks(sis_step):
    rep = validate_model(sis_step)
    assert rep.ok, rep.failures()
    assert rep.sigma == 1.0 and rep.a_star == 1.0


def test_gamma_at_zero_violation():
    rep = validate_model(_spec(PiecewiseLinear([0.0, 1.0], [0.5, 1.0])))
    assert "gamma_at_zero" in rep.failures()
    assert rep.checks["gamma_at_zero"].atom == 0


def test_kernel_row_deficit():
    p = np.array([0.5, 0.5])
    k = np.array([[0.9, 0.9], [1.0, 1.0]])  # first row sums to 0.9 under nu
    rep = validate_model(_spec(Step([1.0], [0.0, 1.0]), kernel=MemoryKernel(k), n=2))
    c = rep.checks["kernel_row_stochastic"]
    assert not c.ok and c.atom == 0
    assert c.value == pytest.approx(0.1)
    assert np.allclose(MemoryKernel(k).row_sums(p), [0.9, 1.0])


def test_support_order_violation():
    rep = validate_model(_spec(Step([0.5], [0.0, 1.0])))
    assert not rep.checks["support_order"].ok


def test_gamma_star_examples(sis_step):
    assert gamma_star(sis_step, 0) == 1.0
    beta = _spec(Step([1.0, 2.0], [0.0, 1.0, 0.5]))
    assert gamma_star(beta, 0) == 0.5
    grid = AgeGrid(1.0, 1000.0)
    cos = FunctionCurve(lambda a: 0.5 * (1.0 - np.cos(2 * np.pi * a)), name="cos")
    spec = _spec(cos, grid=grid)
    assert gamma_star(spec, 0) == pytest.approx(0.5, abs=1e-6)


def test_gamma_star_errors():
    with pytest.raises(ZeroLimit):
        gamma_star(_spec(Step([], [0.0])), 0)
    slow = FunctionCurve(lambda a: a / (a + 50.0), name="slow")
    with pytest.raises(NonConvergent):
        gamma_star(_spec(slow), 0)


def test_lambda_gamma_disjoint_on_grid(sis_model):
    rep = validate_model(sis_model)
    assert rep.checks["support_order"].ok
    ages = np.arange(sis_model.grid.count + 1) * sis_model.grid.step
    for i in range(0, sis_model.n_atoms, 17):
        assert np.all(sis_model.lam[i](ages) * sis_model.gamma[i](ages) == 0.0)


def test_initial_density_mass():
    grid = AgeGrid(0.1, 5.0)
    traits = TraitSpace([0.25, 0.75])
    u0 = InitialDensity.from_function(grid, traits, lambda a, i: np.exp(-a) * (i + 1))
    assert u0.mass(grid, traits) == pytest.approx(1.0, abs=1e-12)

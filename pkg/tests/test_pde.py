import numpy as np
import pytest

from epimem.curves import Step
from epimem.equilibrium import find_equilibria
from epimem.errors import GridMismatch
from epimem.io import perturbed
from epimem.model import AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace
from epimem.pde import (WeakFormTest, initial_from_solution, mass_identity_residual, reconstruct_density,
                        solve_pde, weak_form_residual)
from epimem.scenarios import build_sis, sis_from_durations


def _ones(a, i):
    return np.ones(np.broadcast(a, i).shape)


ONE = WeakFormTest(lambda s, a, i: _ones(a, i), lambda s, a, i: 0 * _ones(a, i), name="one")
EXP = WeakFormTest(lambda s, a, i: np.exp(-a) * _ones(a, i), lambda s, a, i: -np.exp(-a) * _ones(a, i), name="exp")
SHIFT = WeakFormTest(lambda s, a, i: (a - s) * _ones(a, i), lambda s, a, i: _ones(a, i),
                     lambda s, a, i: -_ones(a, i), name="shift")


@pytest.fixture(scope="module")
def silent():
    """lambda == 0: no infections, pure transport (max_age keeps mass out of the overflow cell)."""
    grid = AgeGrid(1 / 16, 20.0)
    traits = TraitSpace([0.5, 0.5])
    u0 = InitialDensity.from_function(grid, traits, lambda a, i: np.exp(-(a - 2 - i) ** 2))
    return ModelSpec(traits, [Step([], [0.0])] * 2, [Step([1.0], [0.0, 1.0])] * 2, MemoryKernel.constant(2), 0.0,
                     u0, grid)


def test_pure_transport(silent):
    sol = solve_pde(silent, 3.0, snapshot_times=[3.0])
    assert np.all(sol.F == 0.0)
    u, W = sol.density(3.0)
    shift = 48
    assert np.allclose(u[shift:], silent.u0.values[:-shift], atol=1e-15)
    assert np.all(u[:shift] == 0.0)
    assert mass_identity_residual(sol, 3.0) <= 1e-10


def test_reconstruct_examples(silent, sis_model):
    u, W = reconstruct_density([], np.zeros((0, 2)), silent.u0, silent, 0.0)
    assert np.array_equal(u, silent.u0.values)
    sol = solve_pde(silent, 1.0)
    u, _ = reconstruct_density(sol.F, sol.S, silent.u0, silent, 1.0)
    assert np.allclose(u[16:], silent.u0.values[:-16], atol=1e-15)
    d = sis_model.grid.step
    sol = solve_pde(sis_model, 5 * d)
    u_pde, W_pde = sol.density(5 * d)
    u_rec, W_rec = reconstruct_density(sol.F, sol.S, sis_model.u0, sis_model, 5 * d)
    assert np.max(np.abs(u_rec - u_pde)) <= 1e-10
    assert np.max(np.abs(W_rec - W_pde)) <= 1e-10
    with pytest.raises(GridMismatch):
        reconstruct_density(sol.F, sol.S, sis_model.u0, sis_model, 0.3 * d)


def test_reconstruct_long_run(sis_step):
    sol = solve_pde(sis_step, 4.0, snapshot_times=[2.0, 4.0])
    for t in (2.0, 4.0):
        u_pde, _ = sol.density(t)
        u_rec, _ = reconstruct_density(sol.F, sol.S, sis_step.u0, sis_step, t)
        assert np.max(np.abs(u_rec - u_pde)) <= 1e-8


def test_bounds_and_mass(sis_model):
    sol = solve_pde(sis_model, 10.0)
    assert np.all(sol.F >= 0) and np.all(sol.F <= sis_model.lambda_star)
    assert np.all(sol.S @ sis_model.weights <= 1 + 1e-8)
    assert np.max(np.abs(sol.mass - 1.0)) <= 1e-12
    assert mass_identity_residual(sol, 0.0) <= 1e-8
    u, W = sol.density(10.0)
    assert np.all(u >= 0) and np.all(W >= 0)


def test_mass_identity_first_order():
    r = []
    for d in (1 / 16, 1 / 32, 1 / 64):
        spec = sis_from_durations(2.0, [1.0], step=d, max_age=8.0)
        r.append(mass_identity_residual(solve_pde(spec, 5.0), 5.0))
    assert all(1.8 < a / b < 2.2 for a, b in zip(r, r[1:]))


def test_refinement_order():
    F = [solve_pde(build_sis(2.0, 1.0, 3.0, quantiles=16, step=d), 1.0).F[-1] for d in (1 / 16, 1 / 32, 1 / 64, 1 / 128)]
    diffs = np.abs(np.diff(F))
    order = np.log2(diffs[:-1] / diffs[1:])
    assert np.all(order >= 0.9), order


def test_weak_form_examples(silent, sis_step):
    sol = solve_pde(sis_step, 5.0, tests=[ONE])
    assert weak_form_residual(sol, ONE) <= 1e-12
    sol = solve_pde(silent, 5.0, tests=[SHIFT])
    assert weak_form_residual(sol, SHIFT) <= 1e-12


def test_weak_form_sis():
    spec = build_sis(2.0, 1.0, 3.0, quantiles=16)
    sol = solve_pde(spec, 10.0, tests=[EXP])
    assert weak_form_residual(sol, EXP) <= 5e-3


def test_stationary_start(sis_model):
    rep = find_equilibria(sis_model)
    us = rep.u_star[0]
    sol = solve_pde(sis_model.with_u0(us.to_initial()), 20.0)
    assert np.max(np.abs(sol.F - rep.roots[0])) <= 1e-6


def test_perturbed_sis_converges(sis_model):
    rep = find_equilibria(sis_model)
    u0 = perturbed(rep.u_star[0], 0.2, sis_model.traits)
    sol = solve_pde(sis_model.with_u0(u0), 200.0)
    assert abs(sol.F[-1] - rep.roots[0]) <= 1e-3


def test_initial_from_solution(sis_step):
    sol = solve_pde(sis_step, 2.0)
    u0 = initial_from_solution(sol, 2.0)
    assert u0.mass(sis_step.grid, sis_step.traits) == pytest.approx(1.0, abs=1e-12)


def test_susceptibility_stays_bounded_through_extinction():
    # R0 = 0.25: F decays to zero and S must approach 1 from below
    grid = AgeGrid(1 / 16, 8.0)
    tr = TraitSpace([1.0])
    spec = ModelSpec(tr, [Step([0.25], [1.0, 0.0])], [Step([0.25, 1.25], [0.0, 1.0, 1.0])],
                     MemoryKernel.constant(1), 1.0, InitialDensity.uniform(grid, tr, 1.0), grid)
    sol = solve_pde(spec, 5.0)
    assert sol.F[-1] < 1e-12
    assert np.all(sol.S <= 1 + 1e-8) and sol.S[-1, 0] > 1 - 1e-8

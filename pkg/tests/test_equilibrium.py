import numpy as np
import pytest

from epimem.curves import Step
from epimem.equilibrium import (HFunction, OperatorT, find_equilibria, solve_S_star, stationary_density,
                                uniqueness_condition)
from epimem.errors import NonPositiveForce, NonPositiveKernel
from epimem.model import AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace
from epimem.scenarios import OneShotParams, build_one_shot

from conftest import x_plus_exp_root


def two_atom_spec(k21=1.2, k12=0.8):
    """Atoms with int lambda = 2 and 1, p = (1/2, 1/2); rows nu-normalised via the diagonal."""
    p = np.array([0.5, 0.5])
    K = np.array([[2.0 - k12, k12], [k21, 2.0 - k21]])
    grid = AgeGrid(1 / 64, 10.0)
    traits = TraitSpace(p)
    lam = [Step([1.0], [2.0, 0.0]), Step([1.0], [1.0, 0.0])]
    gam = [Step([1.0], [0.0, 1.0])] * 2
    return ModelSpec(traits, lam, gam, MemoryKernel(K), 2.0, InitialDensity.uniform(grid, traits, 2.0), grid)


def test_operator_preserves_mass():
    rng = np.random.default_rng(0)
    K = rng.uniform(0.1, 2.0, (5, 5))
    p = rng.dirichlet(np.ones(5))
    K /= (K @ p)[:, None]
    op = OperatorT(MemoryKernel(K), p)
    B = rng.normal(size=5)
    assert (op(B) @ p) == pytest.approx(B @ p, abs=1e-12)
    assert np.allclose(op.table @ B, op(B))


def test_s_star_no_memory(sis_step):
    S = solve_S_star(sis_step)
    assert S == pytest.approx([0.5], abs=1e-12)


def test_s_star_two_atom_closed_form():
    spec = two_atom_spec()
    K = spec.kernel.table
    S = solve_S_star(spec)
    # closed form: proportional to (K21, K12) normalised by sum p_i S_i int lambda_i = 1
    v = np.array([K[1, 0], K[0, 1]])
    v = v / (0.5 * v[0] * 2 + 0.5 * v[1] * 1)
    assert np.allclose(S, v, atol=1e-10)
    assert np.allclose(S, [0.75, 0.5], atol=1e-10)


def test_s_star_requires_positive_kernel():
    spec = two_atom_spec(k12=2.0)
    with pytest.raises(NonPositiveKernel):
        solve_S_star(spec)


def test_h_examples(example55, sis_step):
    spec, cf = example55
    h = HFunction(spec, solve_S_star(spec))
    assert h(0.0) == pytest.approx(0.5, abs=1e-12)
    for x in (0.01, 0.5, 2.0, 7.5):
        assert h(x) == pytest.approx(0.25 * (x + 1 + np.exp(-x)), abs=1e-12)
        assert h(x) == pytest.approx(float(cf(x)), abs=1e-12)
    assert h(1e-9) == pytest.approx(h.H0, abs=1e-8)
    hs = HFunction(sis_step, solve_S_star(sis_step))
    assert hs(1.0) == pytest.approx(1.0, abs=1e-12)
    assert hs(3.0) == pytest.approx(0.5 * (3.0 + 1.0), abs=1e-12)


def test_example55_root(example55):
    rep = find_equilibria(example55[0])
    assert len(rep.roots) == 1
    assert rep.roots[0] == pytest.approx(x_plus_exp_root(), abs=1e-9)
    assert abs(rep.h(rep.roots[0]) - 1) <= 1e-9
    assert rep.unique_condition.ok


def test_sis_step_root(sis_step):
    rep = find_equilibria(sis_step)
    assert rep.roots == [pytest.approx(1.0, abs=1e-9)]
    assert rep.kappa == pytest.approx(0.5) and rep.R0_star == pytest.approx(2.0)


def test_disease_free_certificate():
    # monotone gamma, H(0) = S*/gamma* = 1.3 > 1
    grid = AgeGrid(1 / 16, 10.0)
    traits = TraitSpace([1.0])
    g = 1.0 / (1.3 * 1.0)
    spec = ModelSpec(traits, [Step([1.0], [1.0, 0.0])], [Step([1.0], [0.0, g])], MemoryKernel.constant(1), 1.0,
                     InitialDensity.uniform(grid, traits, 2.0), grid)
    rep = find_equilibria(spec)
    assert rep.H0 == pytest.approx(1.3)
    assert rep.roots == [] and rep.disease_free_certified


def test_uniqueness_condition_examples(example55):
    assert uniqueness_condition(example55[0]).ok
    spec, _ = build_one_shot(OneShotParams(1.0, 0.2, 1.0, 1.0, 2.0, kappa=0.25))
    res = uniqueness_condition(spec)
    assert not res.ok and res.atom == 0
    assert 2.0 <= res.age <= 2.0 + 2 * spec.grid.step


def test_stationary_density_sis(sis_step):
    us = stationary_density(sis_step, 1.0, [0.5])
    assert us(0.5, 0) == pytest.approx(0.5, abs=1e-14)
    assert us(2.0, 0) == pytest.approx(0.5 * np.exp(-1.0), abs=1e-14)
    assert us.mass(sis_step.weights) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(NonPositiveForce):
        stationary_density(sis_step, 0.0, [0.5])


def test_reversible_kernel():
    rng = np.random.default_rng(3)
    n = 4
    p = np.full(n, 0.25)
    pi = rng.uniform(0.5, 2.0, n)
    sym = rng.uniform(0.5, 1.5, (n, n))
    sym = sym + sym.T
    # K(x, y) = pi(y) * c(x, y) with c symmetric is reversible for pi; normalise rows by scaling c
    K = pi[None, :] * sym
    for _ in range(2000):
        r = K @ p
        sym = sym / np.sqrt(np.outer(r, r))
        K = pi[None, :] * sym
    grid = AgeGrid(1 / 16, 10.0)
    traits = TraitSpace(p)
    spec = ModelSpec(traits, [Step([1.0], [2.0, 0.0])] * n, [Step([1.0], [0.0, 1.0])] * n, MemoryKernel(K), 2.0,
                     InitialDensity.uniform(grid, traits, 2.0), grid)
    S = solve_S_star(spec)
    assert np.allclose(S / S.sum(), pi / pi.sum(), atol=1e-8)

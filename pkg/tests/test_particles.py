import numpy as np
import pytest

from epimem.curves import Step
from epimem.equilibrium import find_equilibria
from epimem.errors import InsufficientReplicas
from epimem.model import AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace
from epimem.particles import (PopulationState, SimConfig, empirical_force, empirical_measure, martingale_path,
                              martingale_residual, simulate, simulate_ensemble)


def _spec(lam, gam, lstar=2.0, n=1):
    grid = AgeGrid(1 / 16, 10.0)
    traits = TraitSpace.uniform(n)
    return ModelSpec(traits, [lam] * n, [gam] * n, MemoryKernel.constant(n), lstar,
                     InitialDensity.uniform(grid, traits, 2.0), grid)


def _exp_test(s, a, i):
    return np.exp(-np.asarray(a, dtype=float)) * np.ones(np.broadcast(a, i).shape)


def test_no_infectivity_no_events():
    spec = _spec(Step([], [0.0]), Step([1.0], [0.0, 1.0]))
    tr = simulate(spec, SimConfig(1, 5.0, seed=1, initial=[(2.0, 0)]))
    assert tr.accepted == 0
    assert tr.final.ages[0] == pytest.approx(7.0)
    assert np.all(tr.F == 0.0)


def test_no_susceptibility_no_events():
    spec = _spec(Step([1.0], [2.0, 0.0]), Step([], [0.0]))
    tr = simulate(spec, SimConfig(50, 5.0, seed=2))
    assert tr.accepted == 0
    assert np.allclose(tr.final.ages, tr.initial.ages + 5.0)


def test_determinism(sis_model):
    cfg = SimConfig(500, 5.0, seed=42)
    a, b = simulate(sis_model, cfg), simulate(sis_model, cfg)
    assert np.array_equal(a.events, b.events) and np.array_equal(a.F, b.F)


def test_force_bounds_and_event_count(sis_model):
    N, T, R = 200, 5.0, 10
    runs = simulate_ensemble(sis_model, SimConfig(N, T, seed=3, replicas=R))
    for tr in runs:
        assert np.all(tr.F >= 0) and np.all(tr.F <= sis_model.lambda_star)
        assert np.all(np.diff(tr.events["t"]) > 0)
    mean_events = np.mean([tr.accepted for tr in runs])
    lam = N * sis_model.lambda_star * T
    assert mean_events <= lam + 5 * np.sqrt(lam / R)


def test_acceptance_rate(sis_model):
    tr = simulate(sis_model, SimConfig(2000, 10.0, seed=5, record_step=0.01, store_states=True))
    # acceptance probability at each proposal is F^N * gamma(a_k) / lambda*
    expected = np.mean([np.mean(sis_model.packed_gamma(a, th)) * F
                        for (_, a, th), F in zip(tr.states, tr.F)]) / sis_model.lambda_star
    frac = tr.accepted / tr.proposals
    assert abs(frac - expected) <= 5 * np.sqrt(expected / tr.proposals) + 0.01 * expected


def test_sis_long_run_force(sis_model):
    F_star = find_equilibria(sis_model).roots[0]
    tr = simulate(sis_model, SimConfig(10_000, 50.0, seed=11))
    assert abs(tr.F[-1] - F_star) <= 0.1


def test_empirical_force_examples():
    spec = _spec(Step([1.0], [2.0, 0.0]), Step([1.0], [0.0, 1.0]))
    assert empirical_force(PopulationState([0.1, 0.5], [0, 0]), spec) == 2.0
    assert empirical_force(PopulationState([1.5, 3.0], [0, 0]), spec) == 0.0
    half = _spec(Step([1.0], [1.0, 0.0]), Step([1.0], [0.0, 1.0]), lstar=1.0)
    assert empirical_force(PopulationState([0.5, 2.0], [0, 0]), half) == 0.5


def test_empirical_measure_examples():
    grid = AgeGrid(1.0, 10.0)
    h = empirical_measure(PopulationState([3.2], [0]), grid, 1)
    assert h.sum() == 1.0 and h[3, 0] == 1.0
    h = empirical_measure(PopulationState([0.1, 0.2, 5.5, 5.6], [0, 0, 1, 1]), grid, 2)
    assert h[0, 0] == 0.5 and h[5, 1] == 0.5
    h = empirical_measure(PopulationState([12.0], [0]), grid, 1)
    assert h[grid.count, 0] == 1.0


def test_long_run_histogram(sis_model):
    rep = find_equilibria(sis_model)
    us = rep.u_star[0]
    T = 40.0
    tr = simulate(sis_model, SimConfig(100_000, T, seed=8, snapshot_times=(T,)))
    hist = tr.snapshots[T]
    p = sis_model.weights
    target = np.vstack([us.cells * sis_model.grid.step, us.overflow[None, :]]) * p[None, :]
    # total variation of the age marginal
    tv = 0.5 * np.abs(hist.sum(axis=1) - target.sum(axis=1)).sum()
    assert tv <= 0.05


class PermutedStream:
    """Wraps a generator; relabels the infectee and infector uniforms through ``perm``."""

    def __init__(self, rng, perm):
        self.rng, self.perm, self.pos = rng, np.asarray(perm), 0

    def random(self, size):
        u = self.rng.random(size)
        g = self.pos + np.arange(size)
        self.pos += size
        N = self.perm.size
        sel = (g >= 1) & (((g - 1) % 5) < 2)
        x = u[sel] * N
        k = np.minimum(x.astype(int), N - 1)
        u[sel] = (self.perm[k] + (x - k)) / N
        return u


def test_exchangeability(sis_step):
    ages = np.array([0.3, 1.7, 2.4])
    perm = np.array([2, 0, 1])
    cfg = SimConfig(3, 20.0, initial=PopulationState(ages, [0, 0, 0]))
    # first seed whose run has a few events
    seed = next(s for s in range(100) if simulate(sis_step, cfg, np.random.default_rng(s)).accepted > 3)
    base = simulate(sis_step, cfg, np.random.default_rng(seed))
    p_ages = np.empty(3)
    p_ages[perm] = ages
    swapped = simulate(sis_step, SimConfig(3, 20.0, initial=PopulationState(p_ages, [0, 0, 0])),
                       PermutedStream(np.random.default_rng(seed), perm))
    assert np.array_equal(perm[base.events["k"]], swapped.events["k"])
    assert np.allclose(base.events["t"], swapped.events["t"])


def test_martingale_trivial_cases(sis_model):
    const = lambda s, a, i: np.ones(np.broadcast(a, i).shape)
    tr = simulate(sis_model, SimConfig(300, 3.0, seed=1, record_step=0.05, store_states=True))
    assert np.max(np.abs(martingale_path(tr, const))) <= 1e-12
    silent = _spec(Step([], [0.0]), Step([1.0], [0.0, 1.0]))
    res = martingale_residual(silent, SimConfig(100, 2.0, seed=1), _exp_test, 1.0, replicas=10, dt=0.1)
    assert res.estimate == 0.0
    with pytest.raises(InsufficientReplicas):
        martingale_residual(sis_model, SimConfig(100, 1.0), _exp_test, 1.0, replicas=5)


def test_martingale_bound_small(sis_model):
    res = martingale_residual(sis_model, SimConfig(1000, 10.0, seed=4), _exp_test, 1.0, replicas=20, dt=0.05)
    assert res.bound == pytest.approx(0.32)
    assert res.passed and res.estimate < res.bound

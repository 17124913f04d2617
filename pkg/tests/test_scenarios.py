import numpy as np
import pytest

from epimem.curves import PiecewiseLinear, Step
from epimem.equilibrium import HFunction, find_equilibria, solve_S_star
from epimem.errors import BetaZero
from epimem.scenarios import (OneShotParams, RenewalParams, build_one_shot, build_renewal, build_sis,
                              one_shot_regime, renewal_gamma_star, sis_moments)

BISTABLE = OneShotParams([1.0, 1.0], [0.1, 0.3], 1.0, 1.0, [5.0, 4.0], kappa=0.25)


def test_sis_mean_duration():
    spec = build_sis(2.0, 1.0, 3.0)
    m1, _ = sis_moments(1.0, 3.0)
    assert abs(spec.info["E_T"] - m1) <= 1e-4
    assert spec.r0() == pytest.approx(1.9004, abs=1e-4)
    long = build_sis(2.0, 1.0, 20.0, quantiles=256)
    assert abs(long.info["E_T"] - 1.0) <= 1e-6


def test_sis_mean_exact_and_second_moment_converges():
    # equal-probability slices with conditional means keep E[T] exact
    _, m2 = sis_moments(1.0, 3.0)
    err = []
    for q in (32, 64, 128):
        spec = build_sis(2.0, 1.0, 3.0, quantiles=q)
        T = np.array([c.breakpoints[0] for c in spec.lam])
        assert T @ spec.weights == pytest.approx(sis_moments(1.0, 3.0)[0], abs=1e-12)
        err.append(abs(T ** 2 @ spec.weights - m2))
    assert err[1] <= err[0] / 2 and err[2] <= err[1] / 2


def test_sis_equilibrium_force():
    spec = build_sis(2.0, 1.0, 3.0)
    F = find_equilibria(spec).roots
    R0, ET = spec.r0(), spec.info["E_T"]
    assert F == [pytest.approx((R0 - 1) / ET, abs=1e-6)]


def test_one_shot_closed_form_matches_quadrature(example55):
    spec, cf = example55
    h = HFunction(spec, solve_S_star(spec))
    x = np.linspace(0.0, 20.0, 81)
    assert np.max(np.abs(h(x) - cf(x))) <= 1e-8
    assert np.allclose(cf(x), 0.25 * (x + 1 + np.exp(-x)), atol=1e-14)


@pytest.mark.parametrize("params", [
    OneShotParams(0.6, 0.6, 1.0, 1.5, 3.0, kappa=0.3),
    OneShotParams([1.0, 0.5], [0.4, 0.9], [0.5, 1.0], [1.0, 2.0], [2.0, 1.5], kappa=0.2),
    BISTABLE,
])
def test_closed_form_and_derivative(params):
    spec, cf = build_one_shot(params)
    h = HFunction(spec, solve_S_star(spec))
    x = np.linspace(0.0, 20.0, 41)
    assert np.max(np.abs(h(x) - cf(x))) <= 1e-8
    eps = 1e-5
    for x0 in (0.0, 0.7, 3.0):
        fd = (cf(x0 + eps) - cf(x0 - eps)) / (2 * eps)
        assert float(cf.derivative(x0)) == pytest.approx(float(fd), abs=1e-6)


def test_regimes():
    assert one_shot_regime(OneShotParams(0.5, 1.0, 1.0, 1.0, 2.0, kappa=0.25)).tag == "monotone-unique"
    assert one_shot_regime(BISTABLE).tag == "bistable"
    ext = OneShotParams([1.0, 1.0], [0.1, 0.3], 1.0, 1.0, [5.0, 4.0], kappa=0.5)
    assert one_shot_regime(ext).tag == "extinction"
    assert one_shot_regime(OneShotParams(1.0, 0.3, 1.0, 1.0, 2.0, kappa=0.25)).tag == "nonmonotone-unique"


def test_bistable_two_roots():
    spec, cf = build_one_shot(BISTABLE)
    rep = find_equilibria(spec)
    assert len(rep.roots) == 2
    for r in rep.roots:
        assert abs(cf(r) - 1) <= 1e-9


def test_beta_zero():
    with pytest.raises(BetaZero):
        build_one_shot(OneShotParams(1.0, 0.0, 1.0, 1.0, 2.0, kappa=0.25))


def test_renewal_gamma_star_examples():
    jump = Step([1e-9], [0.0, 1.0])
    assert renewal_gamma_star(jump, [1.0, 3.0], [0.5, 0.5]) == pytest.approx(1.0, abs=1e-8)
    c = 2.0
    ramp = PiecewiseLinear([0.0, c], [0.0, 1.0])
    assert renewal_gamma_star(ramp, [c]) == pytest.approx(0.5)
    assert renewal_gamma_star(ramp, [1.0, 3.0], [0.5, 0.5]) == pytest.approx(0.5625)


def test_renewal_build_small():
    ramp = PiecewiseLinear([0.0, 2.0], [0.0, 1.0])
    params = RenewalParams(ramp, [0.5, 1.0], [1.0, 3.0], None, [0.5, 0.5], 3.0, paths=200, horizon=30.0,
                           seed=3, step=1 / 16)
    b = build_renewal(params)
    assert b.spec.n_atoms == 200
    assert abs(b.gamma_star_mc - b.gamma_star) / b.gamma_star <= 0.05
    assert b.threshold == pytest.approx(1 / 0.5625)
    assert b.endemic == (b.R0 > b.threshold)
    again = build_renewal(params)
    assert np.array_equal(again.cesaro, b.cesaro)
    for g in b.spec.gamma[:5]:
        assert g(0.0) == 0.0 and 0.0 <= float(np.max(g.knots()[1])) <= 1.0

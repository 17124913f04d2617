"""Small compiled helpers shared by the solvers.

phi(z) = (1 - exp(-z)) / z and psi1(z) = (1 - exp(-z)(1 + z)) / z**2 are the
integrals of exp(-z t) and t exp(-z t) over [0, 1]; both are evaluated with
a series near zero so that the z -> 0 limits are exact.
"""
import math

import numpy as np
from numba import njit

_t, _w = np.polynomial.legendre.leggauss(8)
GL_NODES = 0.5 * (_t + 1.0)
GL_WEIGHTS = 0.5 * _w

# beyond this exponent the integrand exp(-E) is negligible in double precision
_EXP_CUT = 45.0


@njit(cache=True)
def phi(z):
    if abs(z) < 1e-3:
        return 1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0 + z ** 4 / 120.0
    return -math.expm1(-z) / z


@njit(cache=True)
def phi_c(z):
    if abs(z) < 0.1:
        s = 0j
        term = 1.0 + 0j
        for n in range(14):
            s += term / (n + 1)
            term *= -z / (n + 1)
        return s
    return (1.0 - np.exp(-z)) / z


@njit(cache=True)
def psi1_c(z):
    if abs(z) < 0.1:
        s = 0j
        term = 1.0 + 0j
        for n in range(14):
            s += term / (n + 2)
            term *= -z / (n + 1)
        return s
    return (1.0 - np.exp(-z) * (1.0 + z)) / (z * z)


@njit(cache=True)
def expquad(b, c, h):
    """Integral of exp(-(b s + c s^2)) for s in [0, h].

    Assumes the exponent is non-decreasing on [0, h] (b >= 0, b + 2 c h >= 0),
    which holds whenever it is x times a running integral of a nonnegative
    curve.
    """
    if h <= 0.0:
        return 0.0
    if c == 0.0:
        return h * phi(b * h)
    top = b * h + c * h * h
    if top > _EXP_CUT:
        # cut where the exponent reaches _EXP_CUT (smallest root, stable form)
        disc = b * b + 4.0 * c * _EXP_CUT
        if disc > 0.0:
            h = min(h, 2.0 * _EXP_CUT / (b + math.sqrt(disc)))
        top = b * h + c * h * h
    nsub = int(top / 0.5) + 1
    step = h / nsub
    total = 0.0
    for k in range(nsub):
        s0 = k * step
        for q in range(GL_NODES.shape[0]):
            s = s0 + step * GL_NODES[q]
            total += GL_WEIGHTS[q] * math.exp(-(b * s + c * s * s))
    return total * step


@njit(cache=True)
def expquad_linear(b, c, h, l0, l1):
    """Integral of (l0 + l1 s) exp(-(b s + c s^2)) over [0, h]."""
    if h <= 0.0:
        return 0.0
    top = b * h + c * h * h
    nsub = int(abs(top) / 0.5) + 1
    step = h / nsub
    total = 0.0
    for k in range(nsub):
        s0 = k * step
        for q in range(GL_NODES.shape[0]):
            s = s0 + step * GL_NODES[q]
            total += GL_WEIGHTS[q] * (l0 + l1 * s) * math.exp(-(b * s + c * s * s))
    return total * step

"""Local stability of an endemic equilibrium for the memoryless kernel K == 1.

An eigenvalue alpha of the linearised dynamics must solve D(alpha) = 0 with

    D(alpha) = I1(alpha) - (F*/R0) I2(alpha) I3(alpha)
    I1 = E int u*(a) exp(-alpha a) da
    I2 = E int lambda(a) exp(-alpha a) da
    I3 = E int u*(a) int_0^a gamma(b) exp(-alpha (a - b)) db da

where E averages over the trait atoms and u* = F* S* exp(-F* Gamma). The
integrals are exact per knot piece when gamma is constant there, use
Gauss-Legendre with enough panels when gamma is linear, and close with an
analytic tail after the last knot. Roots in a rectangle of the right
half-plane are counted with the argument principle.
"""
import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._numeric import GL_NODES, GL_WEIGHTS, phi_c, psi1_c
from .equilibrium import find_equilibria, solve_S_star
from .errors import (BoundaryNearZero, ConfigError, MemoryKernelNotConstant, NonPositiveForce,
                     NonUniformSusceptibility, TailDivergent)
from .model import validate_model

_EXP_CUT = 45.0
ARG_STEP = math.pi / 8
ROOT_RESIDUAL = 1e-8
MARGIN_FACTOR = 10.0


# ------------------------------------------------------- compiled kernels

@njit(cache=True)
def _cut_length(b, c, h):
    """Length after which exp(-(b s + c s^2)) drops below exp(-_EXP_CUT)."""
    top = b * h + c * h * h
    if top <= _EXP_CUT:
        return h
    if c == 0.0:
        return _EXP_CUT / b
    disc = b * b + 4.0 * c * _EXP_CUT
    return min(h, 2.0 * _EXP_CUT / (b + math.sqrt(max(disc, 0.0))))


@njit(cache=True)
def _inner(g0, gs, alpha, s):
    """int_0^s (g0 + gs t) exp(-alpha (s - t)) dt."""
    z = alpha * s
    return (g0 + gs * s) * s * phi_c(z) - gs * s * s * psi1_c(z)


@njit(cache=True)
def _chi(beta, alpha, h):
    """int_0^h exp(-beta s) (1 - exp(-alpha s)) / alpha ds."""
    if abs(alpha * h) >= 0.1:
        return (h * phi_c(beta * h + 0j) - h * phi_c((alpha + beta) * h)) / alpha
    hq = _cut_length(beta, 0.0, h)
    n = int(beta * hq / 0.5) + 1
    step = hq / n
    tot = 0j
    for k in range(n):
        for q in range(GL_NODES.shape[0]):
            s = (k + GL_NODES[q]) * step
            tot += GL_WEIGHTS[q] * math.exp(-beta * s) * s * phi_c(alpha * s)
    return tot * step


@njit(cache=True)
def _atom_terms(alpha, F, ptr, cnt, c0, h, g0, gs, l0, ls, g_tail):
    """(int w e^{-alpha a}, int lambda e^{-alpha a}, int w g) for one atom, w = exp(-F Gamma)."""
    w = 1.0
    ea = 1.0 + 0j
    g = 0j
    i1 = 0j
    i2 = 0j
    i3 = 0j
    for k in range(ptr, ptr + cnt):
        hk = h[k]
        za = alpha * hk
        i2 += ea * (l0[k] * hk * phi_c(za) + ls[k] * hk * hk * psi1_c(za))
        beta = F * g0[k]
        c2 = 0.5 * F * gs[k]
        if w > 0.0:
            if gs[k] == 0.0:
                e = phi_c((alpha + beta) * hk)
                i1 += w * ea * hk * e
                i3 += w * (g * hk * e + g0[k] * _chi(beta, alpha, hk))
            else:
                hq = _cut_length(beta, c2, hk)
                n = int(max(abs(alpha) * hq, beta * hq + c2 * hq * hq) / 0.5) + 1
                step = hq / n
                for j in range(n):
                    for q in range(GL_NODES.shape[0]):
                        s = (j + GL_NODES[q]) * step
                        ws = GL_WEIGHTS[q] * step * w * math.exp(-(beta * s + c2 * s * s))
                        es = cmath.exp(-alpha * s)
                        i1 += ws * ea * es
                        i3 += ws * (g * es + _inner(g0[k], gs[k], alpha, s))
        eh = cmath.exp(-za)
        g = g * eh + _inner(g0[k], gs[k], alpha, hk)
        ea = ea * eh
        w = w * math.exp(-(beta * hk + c2 * hk * hk))
    beta = F * g_tail
    z = alpha + beta
    i1 += w * ea / z
    i3 += w * (g / z + g_tail / (beta * z))
    return i1, i2, i3


@njit(cache=True)
def _evaluate(alphas, F, R0, p, S, ptr, cnt, c0, h, g0, gs, l0, ls, g_tail, out):
    for n in range(alphas.shape[0]):
        a = alphas[n]
        I1 = 0j
        I2 = 0j
        I3 = 0j
        for i in range(p.shape[0]):
            t1, t2, t3 = _atom_terms(a, F, ptr[i], cnt[i], c0, h, g0, gs, l0, ls, g_tail[i])
            I1 += p[i] * F * S[i] * t1
            I2 += p[i] * t2
            I3 += p[i] * F * S[i] * t3
        out[n] = I1 - (F / R0) * I2 * I3


# ------------------------------------------------- characteristic function

def _pieces(spec):
    """Merged knot pieces of (lambda, gamma) per atom with linear coefficients."""
    lam, gam = spec.packed_lambda, spec.packed_gamma
    rows, ptr, cnt = [], [], []
    for i in range(spec.n_atoms):
        xs = np.concatenate([[0.0], lam.x[lam.off[i]:lam.off[i + 1]], gam.x[gam.off[i]:gam.off[i + 1]]])
        xs = np.unique(xs[xs >= 0])
        ptr.append(len(rows))
        for a, b in zip(xs[:-1], xs[1:]):
            hk = b - a
            mid = a + 0.5 * hk
            idx = np.full(2, i)
            gv = gam(np.array([a, mid]), idx)
            lv = lam(np.array([a, mid]), idx)
            rows.append((a, hk, gv[0], 2.0 * (gv[1] - gv[0]) / hk, lv[0], 2.0 * (lv[1] - lv[0]) / hk))
        cnt.append(len(rows) - ptr[-1])
    P = np.array(rows, dtype=float).reshape(-1, 6)
    return (np.array(ptr, dtype=np.int64), np.array(cnt, dtype=np.int64),
            *[np.ascontiguousarray(P[:, j]) for j in range(6)])


def _star_parts(u_star):
    """(F*, S*) from a StationaryDensity, a (F, S) pair or None."""
    if u_star is None:
        return None, None
    if hasattr(u_star, "S") and hasattr(u_star, "F"):
        return float(u_star.F), np.asarray(u_star.S, dtype=float)
    F, S = u_star
    return float(F), np.asarray(S, dtype=float)


class CharacteristicFunction:
    """D(alpha) for a memoryless spec at the equilibrium (F*, S*); accepts arrays."""

    def __init__(self, spec, F_star, S_star=None):
        if not spec.kernel.is_memoryless:
            raise MemoryKernelNotConstant("the characteristic equation needs K == 1")
        if not F_star > 0:
            raise NonPositiveForce(f"F* must be positive, got {F_star!r}")
        lam, gam = spec.packed_lambda, spec.packed_gamma
        if np.any(lam.terminal > 0):
            raise TailDivergent("infectivity does not vanish at large ages")
        if np.any(gam.terminal <= 0):
            raise TailDivergent("susceptibility vanishes at large ages; u* is not integrable")
        self.spec = spec
        self.F = float(F_star)
        self.S = solve_S_star(spec) if S_star is None else np.asarray(S_star, dtype=float)
        self.p = np.ascontiguousarray(spec.weights, dtype=float)
        self.R0 = spec.r0()
        self.g_tail = np.ascontiguousarray(gam.terminal, dtype=float)
        # exponential decay rate of u* at large ages bounds the admissible Re(alpha)
        self.min_rate = float(self.F * self.g_tail.min())
        self._arrays = _pieces(spec)

    def __call__(self, alpha):
        a = np.asarray(alpha, dtype=complex)
        if np.any(a.real <= -self.min_rate):
            raise TailDivergent(f"Re(alpha) must exceed {-self.min_rate:g} for the integrals to converge")
        flat = np.ascontiguousarray(a.ravel())
        out = np.empty(flat.shape, dtype=complex)
        _evaluate(flat, self.F, self.R0, self.p, self.S, *self._arrays, self.g_tail, out)
        return complex(out[0]) if a.ndim == 0 else out.reshape(a.shape)


def characteristic_fn(spec, u_star, F_star, alpha):
    """D(alpha); u_star is a StationaryDensity, a (F*, S*) pair or None (S* recomputed)."""
    F, S = _star_parts(u_star)
    return CharacteristicFunction(spec, F_star if F_star is not None else F, S)(alpha)


# ----------------------------------------------------------- contour scan

@dataclass
class WindingResult:
    winding: int
    points: np.ndarray
    values: np.ndarray
    min_abs: float
    error_estimate: float


def _as_vector_fn(fn):
    def call(z):
        z = np.asarray(z, dtype=complex)
        try:
            v = np.asarray(fn(z), dtype=complex)
            if v.shape == z.shape:
                return v
        except TypeError:
            pass
        return np.array([complex(fn(complex(x))) for x in z.ravel()]).reshape(z.shape)
    return call


def _mirrored(f):
    """Evaluate f on Im >= 0 only and use f(conj z) = conj f(z) below the axis."""
    def call(z):
        z = np.asarray(z, dtype=complex)
        out = np.empty(z.shape, dtype=complex)
        lo = z.imag < 0
        if np.any(~lo):
            out[~lo] = f(z[~lo])
        if np.any(lo):
            out[lo] = np.conj(f(np.conj(z[lo])))
        return out
    return call


def _defects(t, vals, corner):
    """Interpolation error estimate at each sample from its two neighbours.

    The defect of the chord through the neighbours is about four times the
    error of the finer chords actually used, hence the factor 1/4. Corners
    of the rectangle are kinks of the path and carry no estimate.
    """
    d = np.zeros(vals.size)
    t0, t1, t2 = t[:-2], t[1:-1], t[2:]
    w = (t1 - t0) / (t2 - t0)
    d[1:-1] = np.abs(vals[1:-1] - ((1 - w) * vals[:-2] + w * vals[2:])) / 4.0
    d[corner] = 0.0
    return d


def _refine(f, t, pts, vals, corner, max_points):
    """Insert midpoints where the argument jumps by more than ARG_STEP or
    where the interpolation defect is not small against min |f|."""
    while True:
        jump = np.abs(np.angle(vals[1:] / vals[:-1]))
        d = _defects(t, vals, corner)
        tol = np.abs(vals).min() / (2 * MARGIN_FACTOR)
        flag = jump > ARG_STEP
        big = d > tol
        flag[:-1] |= big[1:-1]
        flag[1:] |= big[1:-1]
        bad = np.nonzero(flag)[0]
        if bad.size == 0:
            return t, pts, vals, corner, True
        if pts.size + bad.size > max_points:
            return t, pts, vals, corner, False
        mids = 0.5 * (pts[bad] + pts[bad + 1])
        mv = f(mids)
        t = np.insert(t, bad + 1, 0.5 * (t[bad] + t[bad + 1]))
        pts = np.insert(pts, bad + 1, mids)
        vals = np.insert(vals, bad + 1, mv)
        corner = np.insert(corner, bad + 1, False)
        if np.any(mv == 0):
            return t, pts, vals, corner, False


def winding_number(fn, region, boundary_samples=1024, conjugate_symmetric=False, max_points=400_000):
    """Argument-principle zero count of fn inside [0, X] x [-Y, Y].

    With conjugate symmetry only points with Im >= 0 are evaluated and the
    lower half of the contour is mirrored.
    """
    X, Y = map(float, region)
    if boundary_samples < 512:
        raise ConfigError("boundary_samples must be at least 512")
    f = _as_vector_fn(fn)
    if conjugate_symmetric:
        f = _mirrored(f)
    # counter-clockwise: 0 -> -iY -> X - iY -> X + iY -> iY -> 0
    legs = [(0.0, -1j * Y), (-1j * Y, X - 1j * Y), (X - 1j * Y, X + 1j * Y),
            (X + 1j * Y, 1j * Y), (1j * Y, 0.0)]
    perim = 2 * X + 4 * Y
    chunks, marks = [], []
    for a, b in legs:
        k = max(int(round(boundary_samples * abs(b - a) / perim)), 8)
        chunks.append(a + (b - a) * np.arange(k) / k)
        m = np.zeros(k, dtype=bool)
        m[0] = True
        marks.append(m)
    chunks.append(np.array([0.0]))
    marks.append(np.array([True]))
    pts = np.concatenate(chunks).astype(complex)
    corner = np.concatenate(marks)
    t = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(pts)))])
    vals = f(pts)
    if np.any(np.abs(vals) == 0):
        raise BoundaryNearZero("a zero sits on the contour; enlarge the region")
    t, pts, vals, corner, ok = _refine(f, t, pts, vals, corner, max_points)
    absv = np.abs(vals)
    if not ok or np.any(absv == 0) or not np.all(np.isfinite(absv)):
        raise BoundaryNearZero("a zero sits on or too close to the contour; enlarge the region")
    turns = np.sum(np.angle(vals[1:] / vals[:-1])) / (2 * math.pi)
    err = float(_defects(t, vals, corner).max())
    return WindingResult(int(round(turns)), pts, vals, float(absv.min()), err)


# --------------------------------------------------------- root polishing

def newton_polish(f, z0, max_iter=60, tol=1e-14):
    """Newton iteration with a central finite-difference derivative."""
    z = complex(z0)
    for _ in range(max_iter):
        fz = f(z)
        h = 1e-6 * (1 + abs(z))
        d = (f(z + h) - f(z - h)) / (2 * h)
        if d == 0 or not np.isfinite(d):
            break
        dz = fz / d
        z -= dz
        if not np.isfinite(z) or abs(z) > 1e8:
            break
        if abs(dz) <= tol * (1 + abs(z)):
            break
    return z


def _local_winding(f, z, r, n=64):
    circ = z + r * np.exp(2j * math.pi * np.arange(n + 1) / n)
    v = f(circ)
    if np.any(v == 0):
        return 0
    return int(round(np.sum(np.angle(v[1:] / v[:-1])) / (2 * math.pi)))


def _polish(f, z, m):
    """Newton with the step scaled by the multiplicity m."""
    for _ in range(60):
        fz = f(z)
        h = 1e-6 * (1 + abs(z))
        d = (f(z + h) - f(z - h)) / (2 * h)
        if fz == 0 or d == 0 or not np.isfinite(d):
            break
        dz = m * fz / d
        z -= dz
        if abs(dz) <= 1e-15 * (1 + abs(z)):
            break
    return z


def find_roots(fn, region, expected, conjugate_symmetric=False, seeds_per_unit=1.0):
    """Newton from a grid of interior seeds until the multiplicities add up to ``expected``."""
    X, Y = map(float, region)
    f = _as_vector_fn(fn)

    def scalar(z):
        return complex(f(np.array([z]))[0])

    nx = max(8, int(math.ceil(X * seeds_per_unit)) + 1)
    ny = max(16, int(math.ceil(2 * Y * seeds_per_unit)) + 1)
    xs = (np.arange(nx) + 0.5) * X / nx
    ys = np.linspace(0.0 if conjugate_symmetric else -Y, Y, ny)
    seeds = (xs[None, :] + 1j * ys[:, None]).ravel()
    # start from the seeds with the smallest |f|
    seeds = seeds[np.argsort(np.abs(f(seeds)))]
    roots, mults = [], []
    for s in seeds:
        if sum(mults) >= expected:
            break
        z = newton_polish(scalar, s)
        if not (np.isfinite(z) and -1e-9 <= z.real <= X + 1e-9 and abs(z.imag) <= Y + 1e-9):
            continue
        m = max(_local_winding(f, z, 1e-3 * (1 + abs(z))), 1)
        if m > 1:
            z = _polish(scalar, z, m)
        res = abs(scalar(z))
        cands = [z]
        if conjugate_symmetric and abs(z.imag) > 1e-9:
            cands.append(z.conjugate())
        for c in cands:
            if any(abs(c - r) <= 1e-6 * (1 + abs(c)) for r in roots):
                continue
            if res > ROOT_RESIDUAL:
                continue
            roots.append(c)
            mults.append(m)
    order = sorted(range(len(roots)), key=lambda k: (roots[k].real, roots[k].imag))
    return [roots[k] for k in order], [mults[k] for k in order]


# ------------------------------------------------------------------ report

@dataclass
class StabilityReport:
    region: tuple
    winding_number: int
    roots: list
    residuals: list
    multiplicities: list
    w_ess_bound: float
    verdict: str
    min_boundary_abs: float
    error_estimate: float
    boundary_points: int
    F_star: float = None
    sigma: float = None
    info: dict = field(default_factory=dict)

    @property
    def stable(self):
        return self.verdict == "no-roots-in-region" and (self.w_ess_bound is None or self.w_ess_bound < 0)

    def as_dict(self):
        return {
            "region": {"X": self.region[0], "Y": self.region[1]},
            "winding_number": self.winding_number,
            "roots": [{"re": r.real, "im": r.imag, "abs_D": d, "multiplicity": m}
                      for r, d, m in zip(self.roots, self.residuals, self.multiplicities)],
            "w_ess_bound": self.w_ess_bound,
            "verdict": self.verdict,
            "min_boundary_abs": self.min_boundary_abs,
            "error_estimate": self.error_estimate,
            "boundary_points": self.boundary_points,
            "F_star": self.F_star,
            "sigma": self.sigma,
            **({"info": self.info} if self.info else {}),
        }


def w_ess_bound(F_star, sigma):
    """Upper bound -F* sigma on the essential growth bound."""
    if not sigma > 0:
        raise NonUniformSusceptibility(f"sigma = {sigma!r}: susceptibility is not uniformly positive")
    if sigma > 1:
        raise ConfigError(f"sigma must lie in (0, 1], got {sigma!r}")
    if not F_star > 0:
        raise NonPositiveForce(f"F* must be positive, got {F_star!r}")
    return -float(F_star) * float(sigma)


def scan_roots(target, region=(10.0, 50.0), boundary_samples=1024, F_star=None, root_index=-1):
    """Count and locate zeros of D (or of any analytic callable) in [0, X] x [-Y, Y].

    ``target`` is a ModelSpec, a CharacteristicFunction or a plain callable.
    For a spec the equilibrium is found first; ``root_index`` picks among
    several endemic roots unless ``F_star`` is given.
    """
    X, Y = map(float, region)
    if X <= 0 or Y <= 0:
        raise ConfigError("region extents must be positive")
    sigma = w_ess = None
    symmetric = False
    fn = target
    if hasattr(target, "traits"):
        spec = target
        if not spec.kernel.is_memoryless:
            raise MemoryKernelNotConstant("stability analysis needs K == 1")
        S = solve_S_star(spec)
        if F_star is None:
            eq = find_equilibria(spec, with_density=False)
            if not eq.roots:
                raise NonPositiveForce("no endemic equilibrium to analyse")
            F_star = eq.roots[root_index]
        fn = CharacteristicFunction(spec, F_star, S)
    if isinstance(fn, CharacteristicFunction):
        symmetric = True
        F_star = fn.F
        sigma = validate_model(fn.spec).sigma
        w_ess = w_ess_bound(F_star, sigma) if sigma else None
    wr = winding_number(fn, (X, Y), boundary_samples, conjugate_symmetric=symmetric)
    roots, mults = ([], [])
    if wr.winding > 0:
        roots, mults = find_roots(fn, (X, Y), wr.winding, conjugate_symmetric=symmetric)
    f = _as_vector_fn(fn)
    residuals = [float(abs(v)) for v in f(np.array(roots, dtype=complex))] if roots else []
    margin = MARGIN_FACTOR * wr.error_estimate
    if wr.min_abs < margin or wr.winding < 0:
        verdict = "inconclusive"
    elif wr.winding == 0:
        verdict = "no-roots-in-region"
    elif sum(mults) == wr.winding:
        verdict = "roots-found"
    else:
        verdict = "inconclusive"
    return StabilityReport((X, Y), wr.winding, roots, residuals, mults, w_ess, verdict, wr.min_abs,
                           wr.error_estimate, int(wr.points.size), F_star, sigma)


# ------------------------------------------------------------ SIS criteria

@dataclass
class SisCheck:
    ok: bool
    R0: float
    F_star: float
    mean_T: float
    bound_ok: bool

    def __bool__(self):
        return self.ok


def sis_parameter_check(lambda_star, rho, a_star):
    """Both conditions of the explicit SIS stability criterion: lambda* <= 2 rho e^{rho a*} and R0 > 1."""
    if min(lambda_star, rho, a_star) <= 0:
        raise ConfigError("SIS parameters must be positive")
    mean_T = -math.expm1(-rho * a_star) / rho
    R0 = lambda_star * mean_T
    bound_ok = lambda_star <= 2 * rho * math.exp(rho * a_star)
    F = (R0 - 1) / mean_T
    return SisCheck(bool(bound_ok and R0 > 1), R0, F, mean_T, bound_ok)


def sis_survival_transform(alpha, rho, a_star):
    """int_0^{a*} exp(-(alpha + rho) a) da for complex alpha."""
    z = np.asarray(alpha, dtype=complex) + rho
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.expm1(-z * a_star) / z
    return np.where(np.abs(z * a_star) < 1e-12, a_star, out)


def sis_reduced(alpha, lambda_star, rho, a_star):
    """Reduced characteristic function 1 + (R0 - 2)(lambda*/R0) L(alpha) of the SIS family."""
    c = sis_parameter_check(lambda_star, rho, a_star)
    return 1.0 + (c.R0 - 2.0) * lambda_star / c.R0 * sis_survival_transform(alpha, rho, a_star)


def sis_real_part(x, y, lambda_star, rho, a_star):
    """Real part of the reduced SIS equation at alpha = x + i y, written with cosines and sines."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = sis_parameter_check(lambda_star, rho, a_star)
    r = x + rho
    den = r * r + y * y
    e = np.exp(-r * a_star)
    cos_int = r / den + e / den * (y * np.sin(a_star * y) - r * np.cos(a_star * y))
    return 1.0 + (c.R0 - 2.0) * lambda_star / c.R0 * cos_int

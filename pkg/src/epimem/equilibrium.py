"""Endemic equilibria: the eigenvector S* of the kernel operator, the function
H whose roots are the equilibrium forces of infection, and u*.

    H(x) = x * sum_i p_i S*_i * int_0^inf exp(-x Gamma_i(a)) da

The integral is exact per knot segment (Gamma is quadratic there) plus an
exponential tail after the last knot, so there is no truncation bias.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._cells import CellTable
from ._numeric import expquad
from .errors import NoConvergence, NonPositiveForce, NonPositiveKernel, ZeroGammaStar
from .model import ENDEMIC_CHECKS, InitialDensity, validate_model

ROOT_TOL = 1e-9
SCAN_PER_DECADE = 64
SCAN_START = 1e-6


class OperatorT:
    """(T B)_i = sum_j K(theta_j, theta_i) B_j p_j."""

    def __init__(self, kernel, weights):
        self.kernel = kernel
        self.p = np.asarray(weights, dtype=float)

    @property
    def table(self):
        return self.kernel.table.T * self.p[None, :]

    def __call__(self, v):
        return self.kernel.transfer(np.asarray(v, dtype=float), self.p)


def power_iteration(op, n, tol=1e-12, max_iter=100_000):
    v = np.ones(n)
    for it in range(1, max_iter + 1):
        w = op(v)
        w = w / np.max(np.abs(w))
        if np.max(np.abs(w - v)) <= tol * np.max(np.abs(w)):
            return w, it
        v = w
    raise NoConvergence(f"power iteration did not settle in {max_iter} iterations")


def second_eigenvalue_modulus(spec, S_star, iterations=400):
    """Growth rate of the power iteration on T restricted to the complement of S*."""
    p = spec.weights
    op = OperatorT(spec.kernel, p)
    n = spec.n_atoms
    if n == 1 or spec.kernel.is_memoryless:
        # T has rank one
        return 0.0
    ps = float(p @ S_star)

    def deflate(v):
        return v - S_star * float(p @ v) / ps

    v = deflate(np.random.default_rng(12345).standard_normal(n))
    logs = []
    for _ in range(iterations):
        nv = np.linalg.norm(v)
        if nv < 1e-250:
            return 0.0
        v = v / nv
        v = deflate(op(v))
        logs.append(math.log(max(np.linalg.norm(v), 1e-300)))
    tail = logs[iterations // 2:]
    return float(math.exp(np.mean(tail)))


def solve_S_star(spec, tol=1e-12, max_iter=100_000):
    """Positive fixed point of T normalised by sum_i (int lambda_i) S*_i p_i = 1."""
    if np.any(spec.kernel.compact_table() <= 0):
        raise NonPositiveKernel("the memory kernel must be strictly positive")
    op = OperatorT(spec.kernel, spec.weights)
    v, _ = power_iteration(op, spec.n_atoms, tol, max_iter)
    scale = float(spec.lambda_integrals() @ (v * spec.weights))
    if not np.isfinite(scale) or scale <= 0:
        raise NonPositiveForce(f"total infectivity {scale!r} is not positive and finite")
    return v / scale


# ------------------------------------------------------------------- H(x)

@njit(cache=True)
def _exp_integrals(x, xs, ys, G, off, out):
    """out[i] = int_0^inf exp(-x Gamma_i(a)) da for piecewise-linear gamma_i."""
    for i in range(off.shape[0] - 1):
        lo, hi = off[i], off[i + 1]
        tot = 0.0
        for k in range(lo, hi - 1):
            h = xs[k + 1] - xs[k]
            if h <= 0.0:
                continue
            e0 = x * G[k]
            if e0 > 745.0:
                break
            slope = (ys[k + 1] - ys[k]) / h
            tot += math.exp(-e0) * expquad(x * ys[k], 0.5 * x * slope, h)
        g = ys[hi - 1]
        if g <= 0.0:
            out[i] = np.inf
        else:
            out[i] = tot + math.exp(-x * G[hi - 1]) / (x * g)


@njit(cache=True)
def _tail_integrals(x, A, xs, ys, G, off, out):
    """out[i] = int_A^inf exp(-x Gamma_i(a)) da."""
    for i in range(off.shape[0] - 1):
        lo, hi = off[i], off[i + 1]
        tot = 0.0
        for k in range(lo, hi - 1):
            h = xs[k + 1] - xs[k]
            if h <= 0.0 or xs[k + 1] <= A:
                continue
            slope = (ys[k + 1] - ys[k]) / h
            s0 = max(A - xs[k], 0.0)
            g0 = ys[k] + slope * s0
            G0 = G[k] + ys[k] * s0 + 0.5 * slope * s0 * s0
            if x * G0 > 745.0:
                break
            tot += math.exp(-x * G0) * expquad(x * g0, 0.5 * x * slope, h - s0)
        g = ys[hi - 1]
        a_last = max(xs[hi - 1], A)
        G_last = G[hi - 1] + g * (a_last - xs[hi - 1])
        if g <= 0.0:
            out[i] = np.inf
        else:
            out[i] = tot + math.exp(-x * G_last) / (x * g)


class HFunction:
    """H(x) for a spec and a fixed S*; H(0) is the closed-form limit sum p S*/gamma*."""

    def __init__(self, spec, S_star, gamma_star=None):
        self.spec = spec
        self.S = np.asarray(S_star, dtype=float)
        self.pk = spec.packed_gamma
        self.p = spec.weights
        if gamma_star is None:
            from .model import gamma_star as _gs
            gamma_star = [_gs(spec, i) for i in range(spec.n_atoms)]
        self.gamma_star = np.asarray(gamma_star, dtype=float)
        if np.any(self.gamma_star <= 0):
            raise ZeroGammaStar("H is infinite: some long-run susceptibility is zero")
        self.H0 = float(np.sum(self.p * self.S / self.gamma_star))

    def integrals(self, x):
        out = np.empty(self.spec.n_atoms)
        _exp_integrals(float(x), self.pk.x, self.pk.y, self.pk.G, self.pk.off, out)
        return out

    def __call__(self, x):
        if np.ndim(x):
            return np.array([self(v) for v in np.asarray(x, dtype=float).ravel()]).reshape(np.shape(x))
        x = float(x)
        if x <= 0.0:
            return self.H0
        I = self.integrals(x)
        if np.any(~np.isfinite(I)):
            raise ZeroGammaStar("H diverges: a susceptibility curve ends at zero")
        return float(x * np.sum(self.p * self.S * I))


def H(spec, S_star, x):
    return HFunction(spec, S_star)(x)


# -------------------------------------------------------------- root scan

def _bisect(f, lo, hi, flo, tol):
    """Bisect to |f| <= tol, then keep halving while it is cheap to pin the root down."""
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0 or hi - lo <= 4e-16 * hi:
            return mid, (lo, hi)
        if abs(fm) <= tol and hi - lo <= 1e-13 * hi:
            return mid, (lo, hi)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi), (lo, hi)


def scan_roots(h, per_decade=SCAN_PER_DECADE, start=SCAN_START, tol=ROOT_TOL):
    """All roots of h(x) = 1 found by a log-spaced scan on [start, x_hi] plus bisection.

    x_hi doubles from 1 until h(x_hi) > 1.5.
    """
    x_hi = 1.0
    while h(x_hi) <= 1.5:
        x_hi *= 2.0
        if x_hi > 1e12:
            raise NoConvergence("H stays below 1.5 up to x = 1e12")
    n = int(math.ceil(per_decade * math.log10(x_hi / start))) + 1
    xs = np.logspace(math.log10(start), math.log10(x_hi), n)
    vals = np.array([h(x) for x in xs]) - 1.0
    roots, brackets = [], []
    for k in range(n):
        if vals[k] == 0.0:
            roots.append(float(xs[k]))
            brackets.append((float(xs[k]), float(xs[k])))
        elif k + 1 < n and vals[k] * vals[k + 1] < 0:
            r, br = _bisect(lambda x: h(x) - 1.0, xs[k], xs[k + 1], vals[k], tol)
            roots.append(float(r))
            brackets.append(tuple(float(b) for b in br))
    keep = [0] + [k for k in range(1, len(roots)) if roots[k] - roots[k - 1] > 1e-6] if roots else []
    return [roots[k] for k in keep], [brackets[k] for k in keep], {"x_hi": x_hi, "points": n,
                                                                   "per_decade": per_decade, "start": start}


# ---------------------------------------------------------- uniqueness test

@dataclass
class UniquenessResult:
    ok: bool
    atom: int = None
    age: float = None

    def __bool__(self):
        return self.ok


def uniqueness_condition(spec):
    """gamma(a) >= Gamma(a) / a at every grid age and atom (relative slack 1e-12).

    Grid ages run up to max(max_age, last knot + step).  On failure the
    first violation in (atom, age) order is returned.
    """
    pk = spec.packed_gamma
    d = spec.grid.step
    top = max(spec.grid.max_age, float(pk.last.max()) + d)
    ages = np.arange(1, int(math.ceil(top / d)) + 1) * d
    for i in range(spec.n_atoms):
        g = pk(ages, i)
        avg = pk.integral(ages, i) / ages
        bad = np.nonzero(g < avg - 1e-12 * np.maximum(1.0, avg))[0]
        if bad.size:
            return UniquenessResult(False, i, float(ages[bad[0]]))
    return UniquenessResult(True)


# ----------------------------------------------------- stationary density

@dataclass
class StationaryDensity:
    """Stationary solution u*(a, theta) = F* S*(theta) exp(-F* Gamma(a, theta)).

    cells: cell averages on the age grid, overflow: exact mass beyond
    max_age, nodal: point values at the left end of each cell.
    """

    F: float
    S: np.ndarray
    cells: np.ndarray
    overflow: np.ndarray
    nodal: np.ndarray
    grid: object
    packed_gamma: object = None

    def mass(self, weights):
        return float(self.cells.sum(axis=0) @ weights * self.grid.step + self.overflow @ weights)

    def to_initial(self):
        return InitialDensity(self.cells, self.overflow)

    def __call__(self, age, atom):
        G = float(self.packed_gamma.integral([age], [atom])[0])
        return float(self.F * self.S[atom] * math.exp(-self.F * G))


def stationary_density(spec, F_star, S_star):
    if not F_star > 0:
        raise NonPositiveForce(f"stationary density needs F* > 0, got {F_star!r}")
    F = float(F_star)
    S = np.asarray(S_star, dtype=float)
    cells = CellTable(spec)
    M = cells.M
    J = cells.profile_integrals(F)[:M]
    scale = F * S[None, :] * np.exp(-F * cells.Gabs[:M])
    pk = spec.packed_gamma
    tail = np.empty(spec.n_atoms)
    _tail_integrals(F, spec.grid.max_age, pk.x, pk.y, pk.G, pk.off, tail)
    return StationaryDensity(F, S, scale * J / cells.step, F * S * tail, scale, spec.grid, pk)


# ------------------------------------------------------------------ report

@dataclass
class EquilibriumReport:
    S_star: np.ndarray
    kappa: float
    gamma_star: np.ndarray
    H0: float
    R0_star: float
    roots: list
    brackets: list
    unique_condition: UniquenessResult
    second_eigenvalue_modulus: float
    disease_free_certified: bool
    scan: dict
    u_star: list = field(default_factory=list)
    h: object = None

    def as_dict(self):
        return {
            "S_star": self.S_star.tolist(),
            "kappa": self.kappa,
            "gamma_star": self.gamma_star.tolist(),
            "H0": self.H0,
            "R0_star": self.R0_star,
            "roots": self.roots,
            "brackets": [list(b) for b in self.brackets],
            "H_at_roots": [self.h(r) for r in self.roots] if self.h else None,
            "unique_condition": self.unique_condition.ok,
            "uniqueness_witness": None if self.unique_condition.ok else {
                "atom": self.unique_condition.atom, "age": self.unique_condition.age},
            "second_eigenvalue_modulus": self.second_eigenvalue_modulus,
            "disease_free_certified": self.disease_free_certified,
            "scan": self.scan,
        }


def find_equilibria(spec, per_decade=SCAN_PER_DECADE, with_density=True):
    """Every endemic equilibrium visible at the scan resolution.

    An empty root list with H(0) > 1 and the uniqueness condition holding is
    reported as a certified disease-free outcome.
    """
    report = validate_model(spec)
    report.require(ENDEMIC_CHECKS, "equilibrium analysis")
    S = solve_S_star(spec)
    gs = np.asarray(report.gamma_star, dtype=float)
    h = HFunction(spec, S, gs)
    roots, brackets, scan = scan_roots(h, per_decade)
    uniq = uniqueness_condition(spec)
    kappa = float(np.sum(S * spec.weights))
    rep = EquilibriumReport(
        S_star=S, kappa=kappa, gamma_star=gs, H0=h.H0, R0_star=1.0 / kappa, roots=roots,
        brackets=brackets, unique_condition=uniq, second_eigenvalue_modulus=second_eigenvalue_modulus(spec, S),
        disease_free_certified=bool(h.H0 > 1.0 and uniq.ok and not roots), scan=scan, h=h)
    if with_density:
        rep.u_star = [stationary_density(spec, r, S) for r in roots]
    return rep

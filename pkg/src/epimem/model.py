"""Trait space, age grid, memory kernel, initial density and the model spec,
plus the assumption checks every analysis relies on.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .curves import Curve, PackedCurves
from .errors import ConfigError, InvalidModel, NonConvergent, ZeroLimit

SUPPORT_EPS = 1e-14
WEIGHT_TOL = 1e-12
ROW_TOL = 1e-10
MASS_TOL = 1e-8
GAMMA_STAR_RTOL = 1e-3


class TraitSpace:
    """Finite set of trait atoms with probability weights p_i."""

    def __init__(self, weights, atoms=None):
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.size == 0 or np.any(w <= 0):
            raise ConfigError("trait weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ConfigError(f"trait weights sum to {w.sum()!r}, not 1")
        if atoms is None:
            atoms = [str(i) for i in range(w.size)]
        atoms = list(atoms)
        if len(atoms) != w.size:
            raise ConfigError("one label per trait weight required")
        keys = [a if not isinstance(a, list) else tuple(a) for a in atoms]
        if len(set(keys)) != len(keys):
            raise ConfigError("trait atom identifiers must be unique")
        self.weights = w
        self.atoms = atoms

    @classmethod
    def uniform(cls, n, atoms=None):
        return cls(np.full(n, 1.0 / n), atoms)

    def __len__(self):
        return self.weights.size

    def index(self, atom):
        return self.atoms.index(atom)


class AgeGrid:
    """Uniform age cells [m*step, (m+1)*step), m < count, plus one overflow cell."""

    def __init__(self, step, max_age):
        step, max_age = float(step), float(max_age)
        if step <= 0:
            raise ConfigError("age step must be positive")
        if max_age < 10 * step * (1 - 1e-12):
            raise ConfigError("max_age must be at least 10 age steps")
        count = int(round(max_age / step))
        if abs(count * step - max_age) > 1e-9 * max_age:
            raise ConfigError(f"max_age {max_age} is not a multiple of the step {step}")
        self.step = step
        self.max_age = count * step
        self.count = count

    @property
    def edges(self):
        return np.arange(self.count + 1) * self.step

    @property
    def ages(self):
        """Left end of each cell."""
        return np.arange(self.count) * self.step

    @property
    def mids(self):
        return (np.arange(self.count) + 0.5) * self.step

    def __eq__(self, other):
        return isinstance(other, AgeGrid) and self.step == other.step and self.count == other.count

    def __repr__(self):
        return f"AgeGrid(step={self.step}, max_age={self.max_age})"


class MemoryKernel:
    """Table k[i, j] = K(theta_i, theta_j), density of the new trait j given old trait i.

    The memoryless kernel K == 1 is stored implicitly (``MemoryKernel.constant``)
    so that large trait sets never materialise an n x n table.
    """

    def __init__(self, table):
        k = np.array(table, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ConfigError("kernel table must be square")
        self._table = k
        self._n = k.shape[0]

    @classmethod
    def constant(cls, n):
        obj = cls.__new__(cls)
        obj._table = None
        obj._n = int(n)
        obj.__dict__["is_memoryless"] = True
        return obj

    @property
    def table(self):
        if self._table is None:
            return np.ones((self._n, self._n))
        return self._table

    @property
    def n(self):
        return self._n

    @cached_property
    def is_memoryless(self):
        """True for K == 1: the new trait ignores the old one."""
        return bool(np.all(np.abs(self._table - 1.0) <= 1e-12))

    def row_sums(self, weights):
        if self._table is None:
            return np.full(self._n, float(np.sum(weights)))
        return self._table @ weights

    def apply(self, v):
        """(K v)_i = sum_j K(theta_i, theta_j) v_j."""
        if self._table is None:
            return np.full(self._n, float(np.sum(v)))
        return self._table @ v

    def transfer(self, v, weights):
        """(T v)_i = sum_j K(theta_j, theta_i) v_j p_j."""
        if self.is_memoryless:
            return np.full(self._n, float(np.dot(v, weights)))
        return self._table.T @ (v * weights)

    def compact_table(self):
        """The table, or a 1 x 1 placeholder for the implicit constant kernel."""
        return np.ones((1, 1)) if self._table is None else self._table

    def __eq__(self, other):
        if not isinstance(other, MemoryKernel) or other.n != self.n:
            return False
        if self._table is None or other._table is None:
            return self.is_memoryless and other.is_memoryless
        return np.array_equal(self._table, other._table)


class InitialDensity:
    """Cell-averaged density u0[m, i] (per unit age, per unit of nu) and the
    mass above max_age per unit of nu.

    Total mass is sum_{m,i} u0[m,i] * step * p_i + sum_i overflow_i * p_i.
    """

    def __init__(self, values, overflow=None):
        v = np.array(values, dtype=float)
        if v.ndim != 2:
            raise ConfigError("initial density must be a (cells, atoms) table")
        if np.any(v < 0):
            raise ConfigError("initial density must be nonnegative")
        self.values = v
        self.overflow = np.zeros(v.shape[1]) if overflow is None else np.array(overflow, dtype=float)
        if self.overflow.shape != (v.shape[1],) or np.any(self.overflow < 0):
            raise ConfigError("overflow mass must be a nonnegative vector, one entry per atom")

    def mass(self, grid, traits):
        return float(self.values.sum(axis=0) @ traits.weights * grid.step + self.overflow @ traits.weights)

    @classmethod
    def from_function(cls, grid, traits, fn, normalise=True):
        """Cell averages of fn(age, atom_index) computed with 4-point Gauss rules."""
        t, w = np.polynomial.legendre.leggauss(4)
        nodes = grid.ages[:, None] + 0.5 * grid.step * (t[None, :] + 1.0)
        vals = np.empty((grid.count, len(traits)))
        for i in range(len(traits)):
            f = np.asarray(fn(nodes, i), dtype=float) * np.ones_like(nodes)
            vals[:, i] = 0.5 * (f * w[None, :]).sum(axis=1)
        out = cls(vals)
        if normalise:
            out = cls(vals / out.mass(grid, traits))
        return out

    @classmethod
    def uniform(cls, grid, traits, span):
        """Density 1/span on [0, span) for every atom."""
        edges = grid.edges
        cover = np.clip(np.minimum(edges[1:], span) - edges[:-1], 0.0, None) / grid.step
        if span > grid.max_age:
            raise ConfigError("uniform initial span exceeds max_age")
        vals = np.repeat((cover / span)[:, None], len(traits), axis=1)
        return cls(vals)

    def __eq__(self, other):
        return (isinstance(other, InitialDensity) and np.array_equal(self.values, other.values)
                and np.array_equal(self.overflow, other.overflow))


@dataclass
class ModelSpec:
    """Complete model data: curves per atom, kernel, bound lambda_star, u0, grid."""

    traits: TraitSpace
    lam: list
    gamma: list
    kernel: MemoryKernel
    lambda_star: float
    u0: InitialDensity
    grid: AgeGrid
    name: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.traits)
        self.lam = list(self.lam)
        self.gamma = list(self.gamma)
        if len(self.lam) != n or len(self.gamma) != n:
            raise ConfigError("need one infectivity and one susceptibility curve per atom")
        if not all(isinstance(c, Curve) for c in self.lam + self.gamma):
            raise ConfigError("curves must be Curve instances")
        if self.kernel.n != n:
            raise ConfigError("kernel size does not match the trait space")
        self.lambda_star = float(self.lambda_star)
        if self.lambda_star < 0:
            raise ConfigError("lambda_star must be nonnegative")
        if self.u0.values.shape != (self.grid.count, n):
            raise ConfigError(f"u0 has shape {self.u0.values.shape}, expected {(self.grid.count, n)}")

    @property
    def n_atoms(self):
        return len(self.traits)

    @property
    def weights(self):
        return self.traits.weights

    def tab_ages(self):
        """Tabulation ages for function curves: quarter cells up to max_age."""
        return np.linspace(0.0, self.grid.max_age, 4 * self.grid.count + 1)

    @cached_property
    def packed_lambda(self):
        return PackedCurves(self.lam, self.tab_ages())

    @cached_property
    def packed_gamma(self):
        return PackedCurves(self.gamma, self.tab_ages())

    def lambda_integrals(self):
        """Integral of lambda over all ages, per atom (infinite if the tail is positive)."""
        pk = self.packed_lambda
        out = pk.G[pk.off[1:] - 1].copy()
        out[pk.terminal > 0] = np.inf
        return out

    def r0(self):
        return float(self.lambda_integrals() @ self.weights)

    def with_u0(self, u0):
        return ModelSpec(self.traits, self.lam, self.gamma, self.kernel, self.lambda_star, u0,
                         self.grid, self.name, dict(self.info))


# ------------------------------------------------------------------ checks

@dataclass
class Check:
    ok: bool
    message: str = ""
    atom: int = None
    age: float = None
    value: float = None

    def as_dict(self):
        return {"ok": self.ok, "message": self.message, "atom": self.atom, "age": self.age,
                "value": self.value}


DYNAMICS_CHECKS = ("lambda_bounds", "gamma_bounds", "gamma_at_zero", "kernel_nonnegative",
                   "kernel_row_stochastic", "initial_mass")
ENDEMIC_CHECKS = DYNAMICS_CHECKS + ("support_order", "kernel_positive", "gamma_star_positive")
STABILITY_CHECKS = ENDEMIC_CHECKS + ("uniform_positivity",)


@dataclass
class AssumptionReport:
    checks: dict
    gamma_star: list
    sigma: float = None
    a_star: float = None

    @property
    def ok(self):
        return all(c.ok for c in self.checks.values())

    def passed(self, names):
        return all(self.checks[n].ok for n in names)

    def failures(self, names=None):
        names = self.checks if names is None else names
        return [n for n in names if not self.checks[n].ok]

    def require(self, names, what):
        bad = self.failures(names)
        if bad:
            detail = "; ".join(f"{n}: {self.checks[n].message}" for n in bad)
            raise InvalidModel(f"{what} refused, failed checks: {detail}", report=self)

    @property
    def dynamics_ok(self):
        return self.passed(DYNAMICS_CHECKS)

    @property
    def endemic_ok(self):
        return self.passed(ENDEMIC_CHECKS)

    def as_dict(self):
        return {
            "checks": {k: v.as_dict() for k, v in self.checks.items()},
            "gamma_star": self.gamma_star,
            "sigma": self.sigma,
            "a_star": self.a_star,
            "ok": self.ok,
        }


def _curve_values(curve, grid_ages):
    """Ages and values where extremes of the curve are attained."""
    if curve.is_piecewise():
        x, y = curve.knots()
        return x, y
    return grid_ages, curve(grid_ages)


def _support_bounds(curve, grid_ages, eps=SUPPORT_EPS):
    """(sup of support, inf of support) of {curve > eps}."""
    if not curve.is_piecewise():
        v = curve(grid_ages)
        pos = np.nonzero(v > eps)[0]
        if pos.size == 0:
            return 0.0, np.inf
        # the support of a tabulated function extends to the next grid age
        hi = grid_ages[min(pos[-1] + 1, grid_ages.size - 1)] if pos[-1] < grid_ages.size - 1 else np.inf
        return hi, grid_ages[pos[0]]
    x, y = curve.knots()
    sup, inf = 0.0, np.inf
    for k in range(x.size - 1):
        if x[k + 1] > x[k] and max(y[k], y[k + 1]) > eps:
            sup = max(sup, x[k + 1])
            inf = min(inf, x[k])
    if y[-1] > eps:
        sup = np.inf
        inf = min(inf, x[-1])
    return sup, inf


def gamma_star(spec, atom, rtol=GAMMA_STAR_RTOL, horizon=None):
    """Long-run Cesaro mean of the susceptibility curve of ``atom``.

    Piecewise curves are constant after their last knot, so the limit is the
    terminal level; curves carrying a declared mean level return it.  Other
    curves get a numerical Cesaro mean checked at horizon/4, horizon/2 and
    horizon.
    """
    i = atom if isinstance(atom, (int, np.integer)) else spec.traits.index(atom)
    c = spec.gamma[i]
    if c.mean_level is not None:
        val = c.mean_level
    elif c.is_piecewise():
        val = c.terminal
    else:
        A = spec.grid.max_age if horizon is None else float(horizon)
        est = [float(c.integral(h)) / h for h in (A / 4, A / 2, A)]
        for e0, e1 in zip(est[:-1], est[1:]):
            if abs(e1 - e0) > rtol * max(abs(e1), 1e-300):
                raise NonConvergent(f"Cesaro means {est} of atom {i} have not settled (rtol {rtol})")
        val = est[-1]
    if val <= 1e-12:
        raise ZeroLimit(f"long-run susceptibility of atom {i} is {val!r}")
    return float(val)


def _uniform_lower_bound(curve, grid_ages, eps=SUPPORT_EPS):
    """(sigma_i, a_i) with curve >= sigma_i on (a_i, inf), or None.

    a_i is the last age where the curve vanishes when the curve jumps away
    from zero there; if it climbs continuously instead, sigma_i is half the
    terminal level and a_i the last crossing of that level.
    """
    if curve.is_piecewise():
        x, y = curve.knots()
        linear = True
    else:
        x, y = grid_ages, curve(grid_ages)
        linear = False
    if y[-1] <= eps:
        return None
    zero = np.nonzero(y <= eps)[0]
    if zero.size and zero[-1] + 1 < y.size:
        k = zero[-1]
        rising = linear and x[k + 1] > x[k]
        inf = 0.0 if rising else float(y[k + 1:].min())
        if inf > eps:
            return inf, float(x[k])
    elif not zero.size:
        return float(y.min()), 0.0
    s = 0.5 * float(y[-1])
    k = np.nonzero(y < s)[0][-1]
    if linear and x[k + 1] > x[k]:
        cross = x[k] + (s - y[k]) * (x[k + 1] - x[k]) / (y[k + 1] - y[k])
    else:
        cross = x[k] if linear else x[min(k + 1, x.size - 1)]
    return s, float(cross)


def validate_model(spec):
    """Run every assumption check; never raises on violations."""
    grid_ages = np.arange(spec.grid.count + 1) * spec.grid.step
    p = spec.weights
    checks = {}
    lstar = spec.lambda_star

    def first_bad(curves, test):
        for i, c in enumerate(curves):
            x, y = _curve_values(c, grid_ages)
            bad = np.nonzero(~test(y))[0]
            if bad.size:
                return i, float(x[bad[0]]), float(y[bad[0]])
        return None

    bad = first_bad(spec.lam, lambda y: (y >= 0) & (y <= lstar * (1 + 1e-12)))
    checks["lambda_bounds"] = Check(True, "0 <= lambda <= lambda_star") if bad is None else Check(
        False, f"lambda = {bad[2]!r} outside [0, {lstar}]", *bad)
    bad = first_bad(spec.gamma, lambda y: (y >= 0) & (y <= 1 + 1e-12))
    checks["gamma_bounds"] = Check(True, "0 <= gamma <= 1") if bad is None else Check(
        False, f"gamma = {bad[2]!r} outside [0, 1]", *bad)

    g0 = [float(c(0.0)) for c in spec.gamma]
    nz = [i for i, v in enumerate(g0) if v != 0.0]
    checks["gamma_at_zero"] = Check(True, "gamma(0) = 0") if not nz else Check(
        False, f"gamma(0) = {g0[nz[0]]!r} for atom {nz[0]}", nz[0], 0.0, g0[nz[0]])

    order = Check(True, "sup supp lambda <= inf supp gamma")
    for i in range(spec.n_atoms):
        lsup, _ = _support_bounds(spec.lam[i], grid_ages)
        _, ginf = _support_bounds(spec.gamma[i], grid_ages)
        if lsup > ginf + 1e-12:
            order = Check(False, f"atom {i}: lambda positive up to {lsup}, gamma positive from {ginf}",
                          i, float(ginf), float(lsup))
            break
    checks["support_order"] = order

    kern = spec.kernel
    k = kern.compact_table()
    neg = np.argwhere(k < 0)
    checks["kernel_nonnegative"] = Check(True, "K >= 0") if neg.size == 0 else Check(
        False, f"negative kernel entry at {tuple(neg[0])}", int(neg[0][0]), None, float(k[tuple(neg[0])]))
    deficit = 1.0 - kern.row_sums(p)
    worst = int(np.argmax(np.abs(deficit)))
    checks["kernel_row_stochastic"] = Check(
        bool(abs(deficit[worst]) <= ROW_TOL),
        f"largest row deficit {deficit[worst]:.3g} at row {worst}", worst, None, float(deficit[worst]))
    nonpos = np.argwhere(k <= 0)
    checks["kernel_positive"] = Check(True, "K > 0") if nonpos.size == 0 else Check(
        False, f"non-positive kernel entry at {tuple(nonpos[0])}", int(nonpos[0][0]))

    mass = spec.u0.mass(spec.grid, spec.traits)
    checks["initial_mass"] = Check(bool(abs(mass - 1.0) <= MASS_TOL), f"initial mass {mass!r}", value=mass)

    gs = []
    first_fail = None
    for i in range(spec.n_atoms):
        try:
            gs.append(gamma_star(spec, i))
        except (NonConvergent, ZeroLimit) as exc:
            gs.append(None)
            if first_fail is None:
                first_fail = (i, str(exc))
    checks["gamma_star_positive"] = Check(True, "gamma_star > 0 for every atom") if first_fail is None else Check(
        False, first_fail[1], first_fail[0])

    bounds = [_uniform_lower_bound(c, grid_ages) for c in spec.gamma]
    if any(b is None for b in bounds):
        i = next(i for i, b in enumerate(bounds) if b is None)
        checks["uniform_positivity"] = Check(False, f"atom {i} has no positive lower bound at large ages", i)
        sigma = a_star = None
    else:
        sigma = float(min(b[0] for b in bounds))
        a_star = float(max(b[1] for b in bounds))
        checks["uniform_positivity"] = Check(True, f"gamma >= {sigma:g} after age {a_star:g}", value=sigma)
    return AssumptionReport(checks, gs, sigma, a_star)

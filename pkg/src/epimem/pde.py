"""Deterministic limit PDE on the characteristics lattice (time step = age step).

The state is the mass of each age cell (per unit of trait weight) plus one
overflow cell holding all ages beyond max_age.  Inside a cell the density
is assumed to follow the profile exp(-F (Gamma(a) - Gamma(a_m))); moving
that profile along characteristics for one step with F frozen is exact, so

* mass is conserved to rounding (every unit lost by decay is reborn),
* the stationary density is an exact fixed point of the march,
* with lambda == 0 the march is a pure index shift.

F(t_n) is computed from the state at t_n (a short Picard loop only resolves
the within-cell profile in cells where the curves are not constant).
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._cells import CellTable, special_J, special_weighted
from ._numeric import phi
from .errors import ConfigError, GridMismatch, MassDrift
from .model import DYNAMICS_CHECKS, InitialDensity, validate_model

MASS_DRIFT_TOL = 1e-6
SMALL_FD = 1e-7


@dataclass
class WeakFormTest:
    """Test function f(s, a, atom) with its partial derivatives.

    All three callables receive (s: float, ages: array, atoms: int array)
    broadcast to a common shape and must return arrays of that shape.
    """

    f: object
    df_da: object
    df_ds: object = None
    sup_norm: float = None
    name: str = "f"

    def ds(self, s, a, i):
        if self.df_ds is None:
            return np.zeros(np.broadcast(a, i).shape)
        return self.df_ds(s, a, i)


@dataclass
class PdeSolution:
    spec: object
    times: np.ndarray
    F: np.ndarray
    S: np.ndarray
    births: np.ndarray
    mass: np.ndarray
    snapshots: dict = field(default_factory=dict)
    weak_terms: dict = field(default_factory=dict)

    @property
    def step(self):
        return self.spec.grid.step

    def index(self, t):
        n = int(round(t / self.step))
        if abs(n * self.step - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= n < self.times.size:
            raise GridMismatch(f"time {t} is not a stored lattice time")
        return n

    def density(self, t):
        """(cell averages u[m, i], overflow mass per atom) at time t."""
        n = self.index(t)
        if n not in self.snapshots:
            raise GridMismatch(f"no density snapshot stored at t = {t}")
        mu, W = self.snapshots[n]
        return mu / self.step, W.copy()


# ------------------------------------------------------------ compiled core

@njit(cache=True)
def _transfer(v, K, memoryless, p, out):
    Q = v.shape[0]
    if memoryless:
        s = 0.0
        for j in range(Q):
            s += p[j] * v[j]
        for i in range(Q):
            out[i] = s
    else:
        for i in range(Q):
            s = 0.0
            for j in range(Q):
                s += K[j, i] * p[j] * v[j]
            out[i] = s


# The compiled kernels work on atom-major arrays x[i, m] (atom i, cell m) so
# that the march along ages reads contiguous memory.

@njit(cache=True)
def _cell_J(F, c, k0, cnt, tab, p_h, p_g0, p_gs, p_Gin):
    if c >= 0:
        return tab[c]
    return special_J(F, k0, cnt, p_h, p_g0, p_gs, p_Gin)


@njit(cache=True)
def _force(mu, W, F0, lam_top, lcell, special, l_frozen, pptr, pcnt, p_h, p_g0, p_gs, p_l0, p_ls, p_Gin, p):
    Q, M = mu.shape
    top = min(lam_top, M)
    base = 0.0
    any_special = False
    for i in range(Q):
        s = W[i] * l_frozen[i]
        for m in range(top):
            if special[i, m]:
                if mu[i, m] != 0.0:
                    any_special = True
            else:
                s += mu[i, m] * lcell[i, m]
        base += p[i] * s
    if not any_special:
        return base
    F = F0
    for _ in range(200):
        extra = 0.0
        for i in range(Q):
            for m in range(top):
                if special[i, m] and mu[i, m] != 0.0:
                    k0, c = pptr[i, m], pcnt[i, m]
                    extra += p[i] * mu[i, m] * special_weighted(F, k0, c, p_h, p_g0, p_gs, p_l0, p_ls, p_Gin) \
                        / special_J(F, k0, c, p_h, p_g0, p_gs, p_Gin)
        Fn = base + extra
        if abs(Fn - F) <= 1e-14 * max(1.0, abs(Fn)):
            return Fn
        F = Fn
    return F


@njit(cache=True)
def _susceptible(mu, W, F, gcell, special, g_frozen, pptr, pcnt, p_h, p_g0, p_gs, p_Gin, out):
    """out[j] = integral of gamma * u over ages for atom j."""
    Q, M = mu.shape
    for j in range(Q):
        s = W[j] * g_frozen[j]
        for m in range(M):
            x = mu[j, m]
            if x == 0.0:
                continue
            if special[j, m]:
                k0, c = pptr[j, m], pcnt[j, m]
                s += x * special_weighted(F, k0, c, p_h, p_g0, p_gs, p_g0, p_gs, p_Gin) \
                    / special_J(F, k0, c, p_h, p_g0, p_gs, p_Gin)
            else:
                s += x * gcell[j, m]
        out[j] = s


@njit(cache=True)
def _advance(mu, W, F, d, levels, code, Gcell, g_frozen, pptr, pcnt, p_h, p_g0, p_gs, p_Gin,
             K, memoryless, p, births):
    """One step of the march; returns the total mass after the step."""
    Q, M = mu.shape
    U = levels.shape[0]
    tab = np.empty(U)
    dec = np.empty(U)
    for u in range(U):
        tab[u] = d * phi(F * levels[u] * d)
        dec[u] = math.exp(-F * levels[u] * d)
    L = np.zeros(Q)
    J0 = np.empty(Q)
    for i in range(Q):
        w_old = W[i]
        wn = w_old * math.exp(-F * g_frozen[i] * d)
        loss = w_old - wn
        c1 = code[i, M]
        J1 = _cell_J(F, c1, pptr[i, M], pcnt[i, M], tab, p_h, p_g0, p_gs, p_Gin)
        for m in range(M - 1, -1, -1):
            c0 = code[i, m]
            x = mu[i, m]
            if c0 >= 0 and c0 == c1:
                Jm = J1
                out = x * dec[c0]
            else:
                Jm = _cell_J(F, c0, pptr[i, m], pcnt[i, m], tab, p_h, p_g0, p_gs, p_Gin)
                out = x * (math.exp(-F * Gcell[i, m]) * J1 / Jm)
            loss += x - out
            if m + 1 < M:
                mu[i, m + 1] = out
            else:
                wn += out
            c1 = c0
            J1 = Jm
        W[i] = wn
        L[i] = loss
        J0[i] = J1

    # newborns also decay during their first step; that loss is reborn too
    c = np.empty(Q)
    cmax = 0.0
    for i in range(Q):
        c[i] = 1.0 - J0[i] / d
        cmax = max(cmax, c[i])
    _transfer(L, K, memoryless, p, births)
    if cmax > 0.0:
        v = np.empty(Q)
        nb = np.empty(Q)
        for _ in range(500):
            for i in range(Q):
                v[i] = L[i] + births[i] * c[i]
            _transfer(v, K, memoryless, p, nb)
            diff = 0.0
            size = 0.0
            for i in range(Q):
                diff = max(diff, abs(nb[i] - births[i]))
                size = max(size, abs(nb[i]))
                births[i] = nb[i]
            if diff <= 1e-16 * size:
                break
    tot = 0.0
    for i in range(Q):
        mu[i, 0] = births[i] * J0[i] / d
        s = W[i]
        for m in range(M):
            s += mu[i, m]
        tot += p[i] * s
    return tot


class _Stepper:
    """Atom-major copies of the cell tables plus F, S and one march step."""

    def __init__(self, spec):
        self.spec = spec
        self.cells = c = CellTable(spec)
        self.p = np.ascontiguousarray(spec.weights)
        self.K = np.ascontiguousarray(spec.kernel.compact_table())
        self.memoryless = spec.kernel.is_memoryless
        T = lambda a: np.ascontiguousarray(a.T)
        self.code, self.Gcell, self.lcell, self.gcell = T(c.code), T(c.Gcell), T(c.lcell), T(c.gcell)
        self.special, self.pptr, self.pcnt = T(c.special), T(c.pptr), T(c.pcnt)
        self.lam_special = T(c.lam_special)
        self.lam_top = int(c.lam_rows.max()) + 1 if c.lam_rows.size else 0
        self.pieces = (c.p_h, c.p_g0, c.p_gs, c.p_l0, c.p_ls, c.p_Gin)

    def force(self, mu, W, F0=0.0):
        return _force(mu, W, F0, self.lam_top, self.lcell, self.lam_special, self.cells.l_frozen,
                      self.pptr, self.pcnt, *self.pieces, self.p)

    def susceptibility(self, mu, W, F):
        """S(theta_i) = sum_j p_j K(theta_j, theta_i) * integral of gamma u(., theta_j)."""
        c = self.cells
        g = np.empty(c.Q)
        _susceptible(mu, W, F, self.gcell, self.special, c.g_frozen, self.pptr, self.pcnt,
                     c.p_h, c.p_g0, c.p_gs, c.p_Gin, g)
        out = np.empty(c.Q)
        _transfer(g, self.K, self.memoryless, self.p, out)
        return out

    def advance(self, mu, W, F, births):
        c = self.cells
        return _advance(mu, W, F, c.step, c.levels, self.code, self.Gcell, c.g_frozen, self.pptr, self.pcnt,
                        c.p_h, c.p_g0, c.p_gs, c.p_Gin, self.K, self.memoryless, self.p, births)

    def mass(self, mu, W):
        return float(self.p @ (mu.sum(axis=1) + W))


def _weak_integrals(test, spec, s, mu, W, F, cells):
    """<mu_s, f>, <mu_s, df_da + df_ds> and <mu_s, R f> on the cell midpoints."""
    grid = spec.grid
    Q = spec.n_atoms
    ages = np.concatenate([grid.mids, [grid.max_age]])[:, None]
    atoms = np.arange(Q)[None, :]
    mass = np.vstack([mu, W[None, :]])
    p = spec.weights
    f = test.f(s, ages, atoms)
    drift = test.df_da(s, ages, atoms) + test.ds(s, ages, atoms)
    # cell-averaged gamma: exact increment of the running integral over the cell
    gam = np.vstack([cells.Gcell / grid.step, cells.g_frozen[None, :]])
    f0 = test.f(s, np.zeros((1, Q)), atoms)[0]
    # sum_j K(theta, theta_j) f(0, theta_j) p_j
    reborn = spec.kernel.apply(f0 * p)
    Rf = gam * (reborn[None, :] - f)
    return (float(((mass * f).sum(axis=0)) @ p), float(((mass * drift).sum(axis=0)) @ p),
            float(((mass * Rf).sum(axis=0)) @ p))


def solve_pde(spec, horizon, snapshot_times=None, tests=(), check=True):
    """March the PDE from u0 up to ``horizon`` with time step equal to the age step.

    snapshot_times: lattice times at which the density is stored (t = 0 and
    the final time are always stored).  tests: WeakFormTest objects whose
    pairings with u_t are recorded at every step for weak_form_residual.
    """
    if check:
        validate_model(spec).require(DYNAMICS_CHECKS, "solve_pde")
    d = spec.grid.step
    n_steps = int(math.ceil(horizon / d - 1e-9))
    if n_steps < 0:
        raise ConfigError("horizon must be nonnegative")
    keep = {0, n_steps}
    for t in snapshot_times or ():
        keep.add(min(n_steps, int(round(t / d))))

    st = _Stepper(spec)
    mu = np.ascontiguousarray((spec.u0.values * d).T)
    W = spec.u0.overflow.astype(float).copy()
    Q = spec.n_atoms
    F = np.empty(n_steps + 1)
    S = np.empty((n_steps + 1, Q))
    births = np.zeros((n_steps, Q))
    mass = np.empty(n_steps + 1)
    snaps = {}
    weak = {t.name: np.empty((n_steps + 1, 3)) for t in tests}

    Fn = st.force(mu, W)
    m0 = mass[0] = st.mass(mu, W)
    b = np.empty(Q)
    for n in range(n_steps + 1):
        F[n] = Fn
        if abs(mass[n] - m0) > MASS_DRIFT_TOL * max(n * d, 1.0):
            raise MassDrift(f"mass drifted to {mass[n]!r} at t = {n * d}")
        if n in keep:
            snaps[n] = (mu.T.copy(), W.copy())
        for t in tests:
            weak[t.name][n] = _weak_integrals(t, spec, n * d, mu.T, W, Fn, st.cells)
        if n == n_steps:
            S[n] = st.susceptibility(mu, W, Fn)
            break
        # births / (F d) loses all precision as F d -> 0; its limit is the plain integral
        exact = Fn * d <= SMALL_FD
        if exact:
            S[n] = st.susceptibility(mu, W, Fn)
        mass[n + 1] = st.advance(mu, W, Fn, b)
        births[n] = b
        if not exact:
            S[n] = b / (Fn * d)
        Fn = st.force(mu, W, Fn)
    return PdeSolution(spec, np.arange(n_steps + 1) * d, F, S, births, mass, snaps, weak)


def reconstruct_density(F, S, u0, spec, t):
    """Density at lattice time t rebuilt from (F, S) along characteristics.

    Cells older than t carry u0 decayed by the product of the per-step
    transfer factors along their characteristic; younger cells start from
    the boundary flux F(t_k) S(t_k) step at their birth step.  Returns
    (cell averages, overflow mass).
    """
    d = spec.grid.step
    n = int(round(t / d))
    if abs(n * d - t) > 1e-9 * max(1.0, t):
        raise GridMismatch(f"t = {t} is not a multiple of the age step {d}")
    F = np.asarray(F, dtype=float)
    S = np.asarray(S, dtype=float)
    if F.size < n or S.shape[0] < n or S.shape[1:] != (spec.n_atoms,):
        raise GridMismatch("F and S must cover every lattice time before t")
    if u0.values.shape != (spec.grid.count, spec.n_atoms):
        raise GridMismatch("u0 does not live on the model grid")
    cells = CellTable(spec)
    M, Q = cells.M, cells.Q
    # characteristic label j = cell - time, offset by n
    acc = np.zeros((n + M, Q))
    start = np.zeros((n + M, Q))
    start[n:] = u0.values * d
    W = u0.overflow.astype(float).copy()
    for k in range(n):
        J = cells.profile_integrals(F[k])
        with np.errstate(divide="ignore"):
            logr = -F[k] * cells.Gcell + np.log(J[1:]) - np.log(J[:-1])
        # mass leaving the last cell this step, from the characteristic at cell M-1
        j_exit = M - 1 - k + n
        exit_mass = start[j_exit] * np.exp(acc[j_exit] + logr[M - 1])
        W = W * np.exp(-F[k] * cells.g_frozen * d) + exit_mass
        acc[n - k:n - k + M] += logr
        start[n - k - 1] = F[k] * S[k] * J[0]
    # at time n the label of cell m sits at index m
    mu = start[:M] * np.exp(acc[:M])
    return mu / d, W


def mass_identity_residual(solution, t):
    """|term_1 + term_2 - 1| for the mass identity, by left Riemann sums in time.

    term_1: initial mass still uninfected at t; term_2: mass born in [0, t]
    and not reinfected since.  Both use only (F, S, u0) and the curves, so the
    residual measures the discretisation error of the march (first order).
    """
    spec = solution.spec
    d = spec.grid.step
    n = solution.index(t)
    F = solution.F[:n]
    S = solution.S[:n]
    p = spec.weights
    M, Q = spec.grid.count, spec.n_atoms
    gam = spec.packed_gamma
    ages = spec.grid.ages
    u0 = spec.u0
    tot = 0.0
    for i in range(Q):
        # term 1, grid cells and the overflow cell (represented at max_age)
        a0 = np.concatenate([ages, [spec.grid.max_age]])
        mass0 = np.concatenate([u0.values[:, i] * d, [u0.overflow[i]]])
        expo = np.zeros(a0.size)
        for k in range(n):
            expo += F[k] * gam(a0 + k * d, i) * d
        tot += p[i] * float(mass0 @ np.exp(-expo))
        # term 2: born at t_k with flux F_k S_k, decays with gamma(age) on later steps
        if n:
            g = gam(np.arange(n) * d, i)
            tot += p[i] * _born_survivors(F, S[:, i], g, d)
    return abs(tot - 1.0)


@njit(cache=True)
def _born_survivors(F, S, g, d):
    n = F.shape[0]
    tot = 0.0
    for k in range(n):
        e = 0.0
        for kk in range(k, n):
            e += F[kk] * g[kk - k] * d
        tot += F[k] * S[k] * d * math.exp(-e)
    return tot


def weak_form_residual(solution, test, horizon=None):
    """|<mu_T,f_T> - <mu_0,f_0> - int <mu_s, df_da + df_ds> ds - int F <mu_s, R f_s> ds|.

    ``solution`` is a PdeSolution solved with ``tests=[test]`` or a particle
    Trajectory that stored its states; time integrals use the trapezoid rule
    on the recorded times.
    """
    if isinstance(solution, PdeSolution):
        if test.name not in solution.weak_terms:
            raise ConfigError(f"solution was not solved with weak-form test {test.name!r}")
        terms = solution.weak_terms[test.name]
        times = solution.times
        F = solution.F
    else:
        times, F, terms = solution.weak_terms(test)
    if horizon is not None:
        keep = times <= horizon + 1e-9
        times, F, terms = times[keep], F[keep], terms[keep]
    pair, drift, jump = terms[:, 0], terms[:, 1], terms[:, 2]
    integrand = drift + F * jump
    integral = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(times)))
    return abs(pair[-1] - pair[0] - integral)


def initial_from_solution(solution, t):
    """InitialDensity equal to the stored density at time t."""
    u, W = solution.density(t)
    return InitialDensity(u, W)

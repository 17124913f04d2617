"""Exact event-driven simulation of the N-individual system by Poisson thinning.

Proposals arrive at the global rate N * lambda_star.  Each proposal names
an infectee k and an infector j uniformly at random and is accepted with
probability lambda(a_j, theta_j) gamma(a_k, theta_k) / lambda_star.  Given
k, the acceptance probability averaged over j is F^N gamma_k / lambda_star,
so the accepted proposals are exactly the reinfection events.

Every proposal consumes five uniforms [k, j, accept, new trait, gap to the
next proposal] (the very first gap uses one uniform of its own), drawn in
chunks from the generator.  Ages are stored as infection times, a = t - b.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .curves import eval_packed
from .errors import ConfigError, InsufficientReplicas, ZeroLambdaStarWarning
from .model import DYNAMICS_CHECKS, validate_model

CHUNK = 5 * 16384
_EVENT_DTYPE = np.dtype([("t", "f8"), ("k", "i8"), ("old", "i8"), ("new", "i8"), ("age", "f8")])


@dataclass
class PopulationState:
    ages: np.ndarray
    traits: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.ages = np.asarray(self.ages, dtype=float)
        self.traits = np.asarray(self.traits, dtype=np.int64)
        if self.ages.shape != self.traits.shape or self.ages.ndim != 1:
            raise ConfigError("ages and traits must be 1-d arrays of equal length")
        if np.any(self.ages < 0):
            raise ConfigError("ages must be nonnegative")

    @property
    def N(self):
        return self.ages.size


@dataclass
class SimConfig:
    """N individuals, horizon T, master seed.

    record_step: spacing of the F^N samples (default: the age step);
    snapshot_times: times at which the age-trait histogram is stored;
    store_states: keep (ages, traits) at every record time;
    initial: optional PopulationState or list of (age, atom) pairs used
    instead of sampling from u0.
    """

    N: int
    horizon: float
    seed: int = 0
    snapshot_times: tuple = ()
    replicas: int = 1
    record_step: float = None
    store_states: bool = False
    initial: object = None

    def __post_init__(self):
        if int(self.N) < 1:
            raise ConfigError("N must be at least 1")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if int(self.replicas) < 1:
            raise ConfigError("replica count must be at least 1")
        self.N = int(self.N)
        self.replicas = int(self.replicas)


@dataclass
class Trajectory:
    spec: object
    config: SimConfig
    times: np.ndarray
    F: np.ndarray
    events: np.ndarray
    proposals: int
    snapshots: dict = field(default_factory=dict)
    states: list = field(default_factory=list)
    final: PopulationState = None
    initial: PopulationState = None

    @property
    def accepted(self):
        return self.events.size

    def weak_terms(self, test):
        """(times, F^N, [<mu,f>, <mu, df_da + df_ds>, <mu, R f>]) on the stored states."""
        if not self.states:
            raise ConfigError("trajectory has no stored states; simulate with store_states=True")
        spec = self.spec
        p = spec.weights
        rows = []
        for t, ages, traits in self.states:
            f = test.f(t, ages, traits)
            drift = test.df_da(t, ages, traits) + test.ds(t, ages, traits)
            rows.append((f.mean(), drift.mean(), _jump_mean(spec, t, ages, traits, test.f, p)))
        return self.times.copy(), self.F.copy(), np.array(rows)


def _jump_mean(spec, t, ages, traits, f, p):
    """(1/N) sum_k gamma_k (sum_j K(theta_k, j) p_j f(0, j) - f(a_k, theta_k))."""
    Q = spec.n_atoms
    f0 = f(t, np.zeros(Q), np.arange(Q))
    reborn = spec.kernel.apply(f0 * p)
    g = spec.packed_gamma(ages, traits)
    return float(np.mean(g * (reborn[traits] - f(t, ages, traits))))


def empirical_force(state, spec):
    """F^N = mean of lambda(a_k, theta_k)."""
    return float(np.mean(spec.packed_lambda(state.ages, state.traits)))


def empirical_measure(state, grid, traits):
    """Mass per (age cell, atom); row ``grid.count`` is the overflow cell."""
    Q = len(traits) if not isinstance(traits, int) else traits
    cell = np.minimum(np.floor(state.ages / grid.step).astype(np.int64), grid.count)
    hist = np.zeros((grid.count + 1, Q))
    np.add.at(hist, (cell, state.traits), 1.0)
    return hist / state.N


def sample_initial(spec, N, rng):
    """i.i.d. draws from u0: inverse CDF over cells, age = cell midpoint.

    Overflow mass is placed at max_age + step / 2.
    """
    grid = spec.grid
    p = spec.weights
    mass = np.vstack([spec.u0.values * grid.step, spec.u0.overflow[None, :]]) * p[None, :]
    cdf = np.cumsum(mass.ravel())
    cdf /= cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, rng.random(N), side="right"), cdf.size - 1)
    cell, atom = np.divmod(idx, spec.n_atoms)
    ages = np.where(cell < grid.count, (cell + 0.5) * grid.step, grid.max_age + 0.5 * grid.step)
    return PopulationState(ages, atom, 0.0)


def _initial_state(spec, cfg, rng):
    init = cfg.initial
    if init is None:
        return sample_initial(spec, cfg.N, rng)
    if isinstance(init, PopulationState):
        st = PopulationState(init.ages.copy(), init.traits.copy(), 0.0)
    else:
        arr = list(init)
        st = PopulationState([a for a, _ in arr], [int(i) for _, i in arr], 0.0)
    if st.N != cfg.N:
        raise ConfigError(f"initial state has {st.N} individuals, config says N = {cfg.N}")
    if np.any(st.traits < 0) or np.any(st.traits >= spec.n_atoms):
        raise ConfigError("initial trait index out of range")
    return st


@njit(cache=True)
def _run(t, t_next, t_stop, born, traits, U, pos, lstar, lx, ly, loff, gx, gy, goff, cdf,
         ev_t, ev_k, ev_old, ev_new, ev_age, n_ev):
    """Process proposals up to t_stop or until the uniforms run out.

    Returns (t, t_next, pos, n_ev, proposals, status): status 0 reached
    t_stop, 1 needs uniforms, 2 event buffer full.
    """
    N = born.shape[0]
    Q = cdf.shape[1]
    nprop = 0
    cap = ev_t.shape[0]
    while True:
        if t_next > t_stop:
            return t_stop, t_next, pos, n_ev, nprop, 0
        if pos + 5 > U.shape[0]:
            return t, t_next, pos, n_ev, nprop, 1
        if n_ev >= cap:
            return t, t_next, pos, n_ev, nprop, 2
        t = t_next
        k = min(int(U[pos] * N), N - 1)
        j = min(int(U[pos + 1] * N), N - 1)
        ua = U[pos + 2]
        ut = U[pos + 3]
        t_next = t - math.log(1.0 - U[pos + 4]) / (N * lstar)
        pos += 5
        nprop += 1
        ak = t - born[k]
        g = eval_packed(gx, gy, goff, traits[k], ak)
        if g <= 0.0:
            continue
        lam = eval_packed(lx, ly, loff, traits[j], t - born[j])
        if ua * lstar < lam * g:
            old = traits[k]
            row = old if cdf.shape[0] > 1 else 0
            new = Q - 1
            for q in range(Q):
                if ut < cdf[row, q]:
                    new = q
                    break
            ev_t[n_ev] = t
            ev_k[n_ev] = k
            ev_old[n_ev] = old
            ev_new[n_ev] = new
            ev_age[n_ev] = ak
            n_ev += 1
            born[k] = t
            traits[k] = new


def _record_times(spec, cfg):
    step = cfg.record_step or spec.grid.step
    n = int(math.floor(cfg.horizon / step + 1e-9))
    times = np.arange(n + 1) * step
    if cfg.horizon - times[-1] > 1e-9 * cfg.horizon:
        times = np.append(times, cfg.horizon)
    return times


def simulate(spec, cfg, rng=None, check=True):
    """One replica.  ``rng`` defaults to numpy's Generator seeded with cfg.seed;
    any object with a ``random(size)`` method may be injected."""
    if check:
        validate_model(spec).require(DYNAMICS_CHECKS, "simulate")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    state = _initial_state(spec, cfg, rng)
    initial = PopulationState(state.ages.copy(), state.traits.copy(), 0.0)
    lstar = spec.lambda_star
    lam, gam = spec.packed_lambda, spec.packed_gamma
    p = spec.weights
    # one cdf row per old trait; a single shared row for the memoryless kernel
    cdf = np.cumsum(spec.kernel.compact_table() * p[None, :], axis=1)
    cdf /= cdf[:, -1:]

    born = -state.ages.copy()
    traits = state.traits.copy()
    times = _record_times(spec, cfg)
    snap_idx = {int(np.argmin(np.abs(times - s))) for s in cfg.snapshot_times}
    F = np.empty(times.size)
    snaps, states = {}, []

    cap = 1024
    ev = {k: np.empty(cap, dtype=_EVENT_DTYPE[k]) for k in _EVENT_DTYPE.names}
    n_ev = 0
    proposals = 0
    if lstar <= 0:
        warnings.warn("lambda_star is zero: no infection can ever be proposed", ZeroLambdaStarWarning)
        U = np.empty(0)
        t_next = math.inf
    else:
        U = np.asarray(rng.random(CHUNK + 1), dtype=float)
        t_next = -math.log(1.0 - U[0]) / (cfg.N * lstar)
    pos = 1
    t = 0.0
    for r, t_rec in enumerate(times):
        while True:
            t, t_next, pos, n_ev, nprop, status = _run(
                t, t_next, t_rec, born, traits, U, pos, max(lstar, 1e-300), lam.x, lam.y, lam.off,
                gam.x, gam.y, gam.off, cdf, ev["t"], ev["k"], ev["old"], ev["new"], ev["age"], n_ev)
            proposals += nprop
            if status == 0:
                break
            if status == 1:
                U = np.concatenate([U[pos:], np.asarray(rng.random(CHUNK), dtype=float)])
                pos = 0
            else:
                cap *= 2
                for k in ev:
                    grown = np.empty(cap, dtype=ev[k].dtype)
                    grown[:n_ev] = ev[k][:n_ev]
                    ev[k] = grown
        ages = t_rec - born
        F[r] = float(np.mean(lam(ages, traits)))
        if r in snap_idx:
            snaps[float(t_rec)] = empirical_measure(PopulationState(ages, traits, t_rec), spec.grid, spec.n_atoms)
        if cfg.store_states:
            states.append((float(t_rec), ages.copy(), traits.copy()))
    events = np.empty(n_ev, dtype=_EVENT_DTYPE)
    for k in ev:
        events[k] = ev[k][:n_ev]
    final = PopulationState(times[-1] - born, traits, float(times[-1]))
    return Trajectory(spec, cfg, times, F, events, proposals, snaps, states, final, initial)


def replica_seeds(seed, replicas):
    """Independent per-replica streams: SeedSequence(seed).spawn(replicas)."""
    return np.random.SeedSequence(int(seed)).spawn(int(replicas))


def simulate_ensemble(spec, cfg):
    """cfg.replicas independent runs, ordered by replica index."""
    validate_model(spec).require(DYNAMICS_CHECKS, "simulate")
    return [simulate(spec, cfg, np.random.default_rng(s), check=False) for s in replica_seeds(cfg.seed, cfg.replicas)]


def martingale_path(traj, f):
    """Z^N f on the record grid: jumps of f minus their compensator.

    jumps: (1/N) sum over events of f(0, new) - f(age_before, old);
    compensator: int_0^t F^N(s) <mu_s^N, R f_s> ds by the trapezoid rule on
    the stored states.
    """
    spec = traj.spec
    N = traj.config.N
    ev = traj.events
    jumps = (f(ev["t"], np.zeros(ev.size), ev["new"]) - f(ev["t"], ev["age"], ev["old"])) / N
    csum = np.concatenate([[0.0], np.cumsum(jumps)])
    upto = np.searchsorted(ev["t"], traj.times, side="right")
    jump_part = csum[upto]
    p = spec.weights
    g = np.array([_jump_mean(spec, t, a, th, f, p) for t, a, th in traj.states])
    integrand = traj.F * g
    comp = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(traj.times))])
    return jump_part - comp


@dataclass
class MartingaleResult:
    estimate: float
    stderr: float
    bound: float
    replicas: int

    @property
    def passed(self):
        return self.estimate - 3.0 * self.stderr <= self.bound

    def as_dict(self):
        return {"estimate": self.estimate, "stderr": self.stderr, "bound": self.bound,
                "replicas": self.replicas, "passed": self.passed}


def martingale_residual(spec, cfg, f, sup_norm, replicas=None, dt=0.01):
    """Monte Carlo estimate of E[sup_t (Z^N f(t))^2] against 16 |f|^2 T lambda_star / N.

    f(s, ages, atoms) must be vectorised.  The supremum is taken over a
    record grid of spacing ``dt``.
    """
    R = cfg.replicas if replicas is None else int(replicas)
    if R < 10:
        raise InsufficientReplicas(f"need at least 10 replicas, got {R}")
    validate_model(spec).require(DYNAMICS_CHECKS, "martingale_residual")
    run = SimConfig(cfg.N, cfg.horizon, cfg.seed, (), R, dt, True, cfg.initial)
    sups = []
    for s in replica_seeds(cfg.seed, R):
        tr = simulate(spec, run, np.random.default_rng(s), check=False)
        sups.append(float(np.max(martingale_path(tr, f) ** 2)))
    sups = np.array(sups)
    bound = 16.0 * sup_norm ** 2 * cfg.horizon * spec.lambda_star / cfg.N
    return MartingaleResult(float(sups.mean()), float(sups.std(ddof=1) / math.sqrt(R)), bound, R)

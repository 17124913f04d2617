"""Builders for the three worked model families and their closed forms.

* SIS-type model: infectious for T = min(E, a_star), E ~ Exp(rho), then fully
  susceptible.
* One-shot vaccination: susceptibility alpha between recovery and the
  vaccination time, beta afterwards.
* Renewal vaccination: after recovery the individual is vaccinated at the
  jumps of a renewal process and its susceptibility restarts from sigma(0)
  at each dose.
"""
import math
from dataclasses import dataclass

import numpy as np

from .curves import Curve, PiecewiseLinear, Step, one_shot_susceptibility, sis_infectivity, sis_susceptibility
from .equilibrium import solve_S_star
from .errors import BetaZero, ConfigError, PathTooShort
from .model import AgeGrid, InitialDensity, MemoryKernel, ModelSpec, TraitSpace

DEFAULT_STEP = 1.0 / 64


def _grid_for(span, step):
    return AgeGrid(step, math.ceil(span / step) * step)


def _uniform_u0(grid, traits, span=2.0):
    return InitialDensity.uniform(grid, traits, min(span, grid.max_age))


# -------------------------------------------------------------------- SIS

def truncated_exponential_atoms(rho, a_star, quantiles):
    """Equal-probability slices of T = min(E, a_star), each atom its conditional mean."""
    q = int(quantiles)
    u = np.linspace(0.0, 1.0, q + 1)
    u_cap = 1.0 - math.exp(-rho * a_star)  # P(T < a_star)

    def prim(v):
        # integral of the quantile function of T from 0 to v
        w = np.minimum(v, u_cap)
        one = 1.0 - w
        with np.errstate(divide="ignore", invalid="ignore"):
            log_part = np.where(one > 0, one * np.log(one), 0.0)
        return (log_part + w) / rho + a_star * np.maximum(v - u_cap, 0.0)

    means = (prim(u[1:]) - prim(u[:-1])) * q
    return means, np.full(q, 1.0 / q)


def sis_moments(rho, a_star):
    """(E[T], E[T^2]) for T = min(E, a_star)."""
    e = math.exp(-rho * a_star)
    m1 = (1.0 - e) / rho
    # E[T^2] = int_0^a* 2 t P(E > t) dt
    m2 = 2.0 * (1.0 - e * (1.0 + rho * a_star)) / rho ** 2
    return m1, m2


def build_sis(lambda_star, rho, a_star, quantiles=256, step=DEFAULT_STEP, max_age=None, u0=None):
    """SIS-type spec: lambda = lambda_star on [0, T), gamma = 1 on [T, inf).

    One atom per quantile slice of T.  The age grid reaches a_star + 10.
    """
    if min(lambda_star, rho, a_star) <= 0:
        raise ConfigError("lambda_star, rho and a_star must be positive")
    T, w = truncated_exponential_atoms(rho, a_star, quantiles)
    return sis_from_durations(lambda_star, T, w, step, max_age or a_star + 10.0, u0,
                              info={"family": "sis", "lambda_star": lambda_star, "rho": rho, "a_star": a_star,
                                    "quantiles": int(quantiles), "E_T": float(T @ w),
                                    "R0": float(lambda_star * (T @ w))})


def sis_from_durations(lambda_star, durations, weights=None, step=DEFAULT_STEP, max_age=None, u0=None, info=None):
    """SIS-type spec for explicit infectious durations (one atom each), K == 1."""
    T = np.atleast_1d(np.asarray(durations, dtype=float))
    w = np.full(T.size, 1.0 / T.size) if weights is None else np.asarray(weights, dtype=float)
    traits = TraitSpace(w, [f"T={t:.12g}" if T.size < 2 else str(k) for k, t in enumerate(T)])
    grid = _grid_for(max_age or float(T.max()) + 10.0, step)
    lam = [sis_infectivity(t, lambda_star) for t in T]
    gam = [sis_susceptibility(t) for t in T]
    if u0 is None:
        u0 = _uniform_u0(grid, traits)
    info = dict(info or {"family": "sis", "lambda_star": lambda_star, "E_T": float(T @ w),
                         "R0": float(lambda_star * (T @ w))})
    return ModelSpec(traits, lam, gam, MemoryKernel.constant(T.size), lambda_star, u0, grid, "sis", info)


# --------------------------------------------------------------- one shot

@dataclass
class OneShotParams:
    """Per-atom alpha, beta, T_I, T_R, T_V and the infectivity level on [0, T_I).

    Give either ``lam_level`` (scalar or per atom) or ``kappa``; with kappa
    and a constant kernel the level is 1 / (kappa * E[T_I]).
    """

    alpha: object
    beta: object
    t_i: object
    t_r: object
    t_v: object
    weights: object = None
    lam_level: object = None
    kappa: float = None

    def arrays(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        n = a.size
        out = {}
        for k in ("alpha", "beta", "t_i", "t_r", "t_v"):
            v = np.atleast_1d(np.asarray(getattr(self, k), dtype=float))
            out[k] = np.broadcast_to(v, (max(n, v.size),)).copy()
        n = out["alpha"].size
        out = {k: np.broadcast_to(v, (n,)).copy() for k, v in out.items()}
        w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
        out["weights"] = w
        return out


class OneShotClosedForm:
    """Closed-form H and H' for the one-shot family given S*."""

    def __init__(self, arrays, S_star, weights):
        self.a = arrays
        self.S = np.asarray(S_star, dtype=float)
        self.p = np.asarray(weights, dtype=float)
        self.gap = np.maximum(arrays["t_v"] - arrays["t_r"], 0.0)
        self.first = np.minimum(arrays["t_r"], arrays["t_v"])
        self.kappa = float(self.S @ self.p)

    def __call__(self, x):
        al, be = self.a["alpha"], self.a["beta"]
        x = np.asarray(x, dtype=float)
        e = np.exp(-np.multiply.outer(x, al * self.gap))
        vals = np.multiply.outer(x, self.first) + 1.0 / al - (1.0 / al - 1.0 / be) * e
        return (vals * self.S * self.p).sum(axis=-1)

    def derivative(self, x):
        al, be = self.a["alpha"], self.a["beta"]
        x = np.asarray(x, dtype=float)
        e = np.exp(-np.multiply.outer(x, al * self.gap))
        vals = self.first + (1.0 - al / be) * self.gap * e
        return (vals * self.S * self.p).sum(axis=-1)

    @property
    def H0(self):
        return float(np.sum(self.S * self.p / self.a["beta"]))


def build_one_shot(params, kernel=None, step=DEFAULT_STEP, max_age=None, u0=None):
    """Spec with step curves and the closed-form H handle (returned as a pair)."""
    a = params.arrays()
    n = a["alpha"].size
    if np.any(a["beta"] <= 0):
        raise BetaZero("beta must be bounded below by a positive constant")
    if np.any(a["alpha"] <= 0) or np.any(a["alpha"] > 1) or np.any(a["beta"] > 1):
        raise ConfigError("alpha and beta must lie in (0, 1]")
    if np.any(a["t_r"] < a["t_i"]) or np.any(a["t_v"] < a["t_i"]) or np.any(a["t_i"] <= 0):
        raise ConfigError("need 0 < T_I <= T_R and T_I <= T_V")
    traits = TraitSpace(a["weights"])
    K = MemoryKernel.constant(n) if kernel is None else (kernel if isinstance(kernel, MemoryKernel)
                                                        else MemoryKernel(kernel))
    if params.lam_level is not None:
        level = np.broadcast_to(np.asarray(params.lam_level, dtype=float), (n,)).copy()
    elif params.kappa is not None:
        if not K.is_memoryless:
            raise ConfigError("kappa only fixes the infectivity level for a constant kernel")
        level = np.full(n, 1.0 / (params.kappa * float(a["t_i"] @ a["weights"])))
    else:
        raise ConfigError("give lam_level or kappa")
    lam = [Step([t], [lv, 0.0], family="indicator") for t, lv in zip(a["t_i"], level)]
    gam = [one_shot_susceptibility(al, be, tr, tv) for al, be, tr, tv in zip(a["alpha"], a["beta"], a["t_r"], a["t_v"])]
    top = float(max(a["t_r"].max(), a["t_v"].max()))
    grid = _grid_for(max_age or top + 10.0, step)
    if u0 is None:
        u0 = _uniform_u0(grid, traits)
    info = {"family": "one_shot", **{k: v.tolist() for k, v in a.items()}, "lam_level": level.tolist()}
    spec = ModelSpec(traits, lam, gam, K, float(level.max()), u0, grid, "one_shot", info)
    return spec, OneShotClosedForm(a, solve_S_star(spec), a["weights"])


@dataclass
class Regime:
    tag: str
    H0: float
    kappa: float
    E_inv_beta: float
    H_prime0: float
    x_min: float = None
    H_min: float = None

    def as_dict(self):
        return dict(self.__dict__)


def one_shot_regime(params, kappa=None, kernel=None):
    """Classify the one-shot model by the shape of its closed-form H.

    monotone-unique: H increasing and H(0) < 1; nonmonotone-unique: H dips
    first but H(0) < 1; extinction: H(0) > 1 and min H > 1; bistable:
    H(0) > 1 and min H < 1 (two roots).
    """
    a = params.arrays()
    n = a["alpha"].size
    if kernel is not None and not isinstance(kernel, MemoryKernel):
        kernel = MemoryKernel(kernel)
    if kernel is None or kernel.is_memoryless:
        k = kappa
        if k is None:
            if params.lam_level is None:
                k = params.kappa
            else:
                level = np.broadcast_to(np.asarray(params.lam_level, dtype=float), (n,))
                k = 1.0 / float(np.sum(level * a["t_i"] * a["weights"]))
        S = np.full(n, float(k))
    else:
        _, cf = build_one_shot(params, kernel)
        S = cf.S
    cf = OneShotClosedForm(a, S, a["weights"])
    k = cf.kappa
    H0 = cf.H0
    Einvb = H0 / k
    d0 = float(cf.derivative(0.0))
    if d0 >= 0:
        tag = "monotone-unique" if H0 < 1 else "extinction"
        return Regime(tag, H0, k, Einvb, d0)
    # H' < 0 at 0: find where H' turns positive
    hi = 1.0
    while cf.derivative(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            break
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cf.derivative(mid) < 0:
            lo = mid
        else:
            hi = mid
    x_min = 0.5 * (lo + hi)
    H_min = float(cf(x_min))
    if H0 < 1:
        tag = "nonmonotone-unique"
    elif H_min > 1:
        tag = "extinction"
    else:
        tag = "bistable"
    return Regime(tag, H0, k, Einvb, d0, x_min, H_min)


# ---------------------------------------------------------------- renewal

@dataclass
class RenewalParams:
    """sigma: susceptibility between doses (non-decreasing Curve);
    t_i / t_i_weights: infection durations; t_v / t_v_weights: times between
    doses; paths: number of sampled paths (atoms); horizon: path length."""

    sigma: Curve
    t_i: object
    t_v: object
    t_i_weights: object = None
    t_v_weights: object = None
    lam_level: float = 1.0
    paths: int = 1000
    horizon: float = 50.0
    seed: int = 0
    step: float = DEFAULT_STEP
    max_segments: int = 1_000_000


def _weights(w, n):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def renewal_gamma_star(sigma, t_v, t_v_weights=None):
    """E[int_0^{T_V} sigma] / E[T_V]."""
    tv = np.atleast_1d(np.asarray(t_v, dtype=float))
    w = _weights(t_v_weights, tv.size)
    return float(np.sum(w * np.asarray(sigma.integral(tv))) / np.sum(w * tv))


def _sigma_segment(sx, sy, length):
    """Knots of sigma restricted to [0, length), ending with its left limit at length."""
    keep = sx < length
    x, y = sx[keep], sy[keep]
    k = x.size - 1
    if k + 1 < sx.size and sx[k + 1] > sx[k]:
        left = sy[k] + (sy[k + 1] - sy[k]) * (length - sx[k]) / (sx[k + 1] - sx[k])
    else:
        left = sy[k]
    return np.append(x, length), np.append(y, left)


def renewal_path(sigma, t_i, draws, horizon, gamma_tail, step, full_cycles=False):
    """Knots of one susceptibility path, truncated at ``horizon`` and constant after.

    With ``full_cycles`` also returns the dose times inside the horizon (the
    first entry is the first dose).
    """
    sx, sy = sigma.knots() if sigma.is_piecewise() else (None, None)
    if sx is None:
        raise ConfigError("renewal sigma must be a piecewise curve")
    tau = max(float(t_i), step)
    doses = [tau]
    xs, ys = [np.array([0.0, tau])], [np.array([0.0, 0.0])]
    cache = {}
    for tv in draws:
        if tau >= horizon:
            break
        seg = min(tv, horizon - tau)
        if seg not in cache:
            cache[seg] = _sigma_segment(sx, sy, seg)
        x, y = cache[seg]
        xs.append(tau + x)
        ys.append(y)
        tau += tv
        if tau <= horizon:
            doses.append(tau)
    else:
        if tau < horizon:
            raise PathTooShort(f"renewal path stops at {tau} before the horizon {horizon}")
    xs.append(np.array([horizon]))
    ys.append(np.array([gamma_tail]))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if full_cycles:
        return x, y, np.array(doses)
    return x, y


@dataclass
class RenewalBuild:
    spec: ModelSpec
    gamma_star: float
    gamma_star_mc: float
    cesaro: np.ndarray
    cycle_integral: np.ndarray
    cycle_length: np.ndarray
    R0: float
    threshold: float

    @property
    def endemic(self):
        """R0 > E[T_V] / E[int sigma]."""
        return self.R0 > self.threshold


def build_renewal(params):
    """One trait atom per sampled path (weight 1 / paths), K == 1.

    Each path draws T_I, then T_V increments until the horizon is covered.
    Per-path generators come from SeedSequence(seed).spawn(paths).

    ``cesaro`` holds each path's time average over [0, horizon]. It is biased by
    O(1/horizon) (the initial infectious period and the cut last cycle). The
    Monte Carlo gamma* instead pools the first n_c complete cycles of every
    path, n_c = floor((horizon - max T_I) / max T_V), which every path
    contains; a fixed count avoids favouring short cycles near the horizon.
    """
    P = int(params.paths)
    if P < 1:
        raise ConfigError("need at least one path")
    ti = np.atleast_1d(np.asarray(params.t_i, dtype=float))
    tv = np.atleast_1d(np.asarray(params.t_v, dtype=float))
    if np.any(tv <= 0) or np.any(ti <= 0):
        raise ConfigError("T_I and T_V must be positive")
    wi, wv = _weights(params.t_i_weights, ti.size), _weights(params.t_v_weights, tv.size)
    g_star = renewal_gamma_star(params.sigma, tv, wv)
    A = float(params.horizon)
    step = float(params.step)
    grid = _grid_for(A, step)
    A = grid.max_age
    if float(params.sigma(0.0)) < 0 or float(np.max(params.sigma.knots()[1])) > 1:
        raise ConfigError("sigma must take values in [0, 1]")
    # enough draws to cover the horizon with high probability; extended if needed
    mean_tv = float(tv @ wv)
    n_draw = int(2 * A / mean_tv + 20)
    if n_draw > params.max_segments:
        raise PathTooShort(f"{n_draw} vaccination intervals needed, cap is {params.max_segments}")
    lam, gam, ces, tis = [], [], np.empty(P), np.empty(P)
    cyc_int, cyc_len = np.zeros(P), np.zeros(P)
    n_c = max(0, int(np.floor((A - max(float(ti.max()), step)) / float(tv.max()))))
    for k, ss in enumerate(np.random.SeedSequence(int(params.seed)).spawn(P)):
        rng = np.random.default_rng(ss)
        t_inf = float(rng.choice(ti, p=wi))
        draws = rng.choice(tv, size=n_draw, p=wv)
        while t_inf + draws.sum() < A:
            if draws.size * 2 > params.max_segments:
                raise PathTooShort("renewal path cannot cover the horizon within the segment cap")
            draws = np.concatenate([draws, rng.choice(tv, size=draws.size, p=wv)])
        x, y, doses = renewal_path(params.sigma, t_inf, draws, A, g_star, step, full_cycles=True)
        c = PiecewiseLinear(x, y, mean_level=g_star, family="renewal")
        ces[k] = float(c.integral(A)) / A
        if n_c > 0:
            t0, t1 = doses[0], doses[n_c]
            cyc_int[k] = float(c.integral(t1)) - float(c.integral(t0))
            cyc_len[k] = t1 - t0
        tis[k] = max(t_inf, step)
        gam.append(c)
        lam.append(Step([tis[k]], [params.lam_level, 0.0], family="indicator"))
    traits = TraitSpace.uniform(P)
    u0 = _uniform_u0(grid, traits)
    R0 = float(params.lam_level * tis.mean())
    g_mc = float(cyc_int.sum() / cyc_len.sum()) if cyc_len.sum() > 0 else float(ces.mean())
    info = {"family": "renewal", "gamma_star": g_star, "gamma_star_mc": g_mc, "R0": R0,
            "threshold": 1.0 / g_star, "paths": P, "seed": int(params.seed)}
    spec = ModelSpec(traits, lam, gam, MemoryKernel.constant(P), params.lam_level, u0, grid, "renewal", info)
    return RenewalBuild(spec, g_star, g_mc, ces, cyc_int, cyc_len, R0, 1.0 / g_star)

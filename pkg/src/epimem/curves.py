"""Age profiles: step curves, piecewise-linear curves and plain callables.

Every piecewise curve is normalised to a list of knots (x_k, y_k) starting at
age 0, linear in between, constant after the last knot.  A repeated age
encodes a jump; the curve is right-continuous, so at a repeated age the later
value wins.  All solvers work on the packed form of these knots.
"""
import math

import numpy as np
from numba import njit

from .errors import ConfigError, NegativeAge


def _check_ages(age):
    a = np.asarray(age, dtype=float)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise NegativeAge(f"curve evaluated at negative age {np.min(a)!r}")
    return a


class Curve:
    """Base class.  Subclasses provide knots() or override __call__."""

    kind = "curve"
    family = None

    def __init__(self, mean_level=None):
        # declared long-run Cesaro mean; overrides the terminal level in gamma_star
        self.mean_level = None if mean_level is None else float(mean_level)

    def __call__(self, age):
        a = _check_ages(age)
        x, y = self.knots()
        return _eval_knots(x, y, a)

    def knots(self):
        raise NotImplementedError

    @property
    def terminal(self):
        return float(self.knots()[1][-1])

    @property
    def last_knot(self):
        return float(self.knots()[0][-1])

    def integral(self, age):
        """Running integral of the curve from 0 to ``age``."""
        a = _check_ages(age)
        x, y = self.knots()
        return _integral_knots(x, y, a)

    def is_piecewise(self):
        return True

    def __eq__(self, other):
        if not isinstance(other, Curve) or not self.is_piecewise() or not other.is_piecewise():
            return self is other
        x1, y1 = self.knots()
        x2, y2 = other.knots()
        return (x1.shape == x2.shape and np.array_equal(x1, x2) and np.array_equal(y1, y2)
                and self.mean_level == other.mean_level)

    __hash__ = object.__hash__


class Step(Curve):
    """levels[0] on [0, b_1), levels[k] on [b_k, b_{k+1}), levels[-1] after b_m."""

    kind = "step"

    def __init__(self, breakpoints, levels, mean_level=None, family=None):
        super().__init__(mean_level)
        self.breakpoints = np.asarray(breakpoints, dtype=float).reshape(-1)
        self.levels = np.asarray(levels, dtype=float).reshape(-1)
        if self.levels.size != self.breakpoints.size + 1:
            raise ConfigError("step curve needs len(levels) == len(breakpoints) + 1")
        if np.any(self.breakpoints < 0) or np.any(np.diff(self.breakpoints) <= 0):
            raise ConfigError("step breakpoints must be nonnegative and strictly increasing")
        self.family = family

    def __call__(self, age):
        a = _check_ages(age)
        return self.levels[np.searchsorted(self.breakpoints, a, side="right")]

    def knots(self):
        b, lv = self.breakpoints, self.levels
        x = np.empty(1 + 2 * b.size)
        y = np.empty(1 + 2 * b.size)
        x[0], y[0] = 0.0, lv[0]
        x[1::2], x[2::2] = b, b
        y[1::2], y[2::2] = lv[:-1], lv[1:]
        return x, y

    def to_dict(self):
        d = {"type": "step", "breakpoints": self.breakpoints.tolist(), "levels": self.levels.tolist()}
        if self.mean_level is not None:
            d["mean_level"] = self.mean_level
        return d

    def __repr__(self):
        return f"Step({self.breakpoints.tolist()}, {self.levels.tolist()})"


class PiecewiseLinear(Curve):
    """Linear interpolation between knots; repeated ages encode jumps."""

    kind = "linear"

    def __init__(self, ages, values, mean_level=None, family=None):
        super().__init__(mean_level)
        x = np.asarray(ages, dtype=float).reshape(-1)
        y = np.asarray(values, dtype=float).reshape(-1)
        if x.size == 0 or x.size != y.size:
            raise ConfigError("piecewise-linear curve needs matching, nonempty ages and values")
        if x[0] < 0 or np.any(np.diff(x) < 0):
            raise ConfigError("knot ages must be nonnegative and non-decreasing")
        if x[0] > 0:
            x = np.concatenate([[0.0], x])
            y = np.concatenate([[y[0]], y])
        self._x, self._y = x, y
        self.family = family

    def knots(self):
        return self._x, self._y

    def to_dict(self):
        d = {"type": "linear", "ages": self._x.tolist(), "values": self._y.tolist()}
        if self.mean_level is not None:
            d["mean_level"] = self.mean_level
        return d

    def __repr__(self):
        return f"PiecewiseLinear({len(self._x)} knots)"


class FunctionCurve(Curve):
    """Arbitrary callable of age.  Solvers tabulate it on a fine grid."""

    kind = "function"

    def __init__(self, fn, terminal=None, mean_level=None, name="function"):
        super().__init__(mean_level)
        self.fn = fn
        self._terminal = terminal
        self.name = name

    def __call__(self, age):
        # fn must accept numpy arrays
        a = _check_ages(age)
        return np.broadcast_to(np.asarray(self.fn(a), dtype=float), a.shape).copy()

    def is_piecewise(self):
        return False

    def knots(self):
        raise TypeError("function curves have no knots; use tabulate()")

    @property
    def terminal(self):
        if self._terminal is None:
            raise TypeError("function curve has no declared terminal level")
        return float(self._terminal)

    def tabulate(self, ages):
        ages = np.asarray(ages, dtype=float)
        return PiecewiseLinear(ages, self(ages), mean_level=self.mean_level)

    def integral(self, age):
        a = _check_ages(age)
        t, w = np.polynomial.legendre.leggauss(16)
        out = []
        for top in np.atleast_1d(a):
            n = max(1, int(math.ceil(top * 16)))
            edges = np.linspace(0.0, top, n + 1)
            mid = 0.5 * (edges[1:] + edges[:-1])
            half = 0.5 * (edges[1:] - edges[:-1])
            nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
            vals = self(nodes).reshape(n, -1)
            out.append(float(np.sum(vals * w[None, :] * half[:, None])))
        return out[0] if a.ndim == 0 else np.array(out)

    def to_dict(self):
        raise ConfigError(f"function curve {self.name!r} cannot be serialised; tabulate it first")

    def __repr__(self):
        return f"FunctionCurve({self.name})"


def eval_curve(curve, age):
    """Value of ``curve`` at ``age`` (scalar or array); raises NegativeAge."""
    v = curve(age)
    return float(v) if np.ndim(v) == 0 else v


# ---------------------------------------------------------------- builtins

def constant(level):
    return Step([], [level], family="constant")


def indicator(start, end, level=1.0):
    """level on [start, end), zero elsewhere."""
    if start <= 0:
        return Step([end], [level, 0.0], family="indicator")
    return Step([start, end], [0.0, level, 0.0], family="indicator")


def sis_infectivity(T, lambda_star):
    return Step([T], [lambda_star, 0.0], family="sis_step")


def sis_susceptibility(T):
    return Step([T], [0.0, 1.0], family="sis_step")


def one_shot_susceptibility(alpha, beta, t_r, t_v):
    """alpha on [T_R, T_V), beta after T_V; beta after T_V alone if T_V <= T_R."""
    if t_v > t_r:
        return Step([t_r, t_v], [0.0, alpha, beta], family="one_shot")
    return Step([t_v], [0.0, beta], family="one_shot")


def table(ages, values):
    return PiecewiseLinear(ages, values, family="table")


_CURVE_KEYS = {
    "step": {"breakpoints", "levels"},
    "linear": {"ages", "values"},
    "table": {"ages", "values"},
    "constant": {"level"},
    "indicator": {"start", "end", "level"},
    "sis_step": {"T", "level"},
    "one_shot": {"alpha", "beta", "t_r", "t_v"},
}


def curve_from_dict(d, role="gamma"):
    """Build a curve from its file representation.

    ``role`` only matters for the "sis_step" builtin, which is the infectivity
    level on [0, T) for lambda and the indicator of [T, inf) for gamma.
    """
    if not isinstance(d, dict) or "type" not in d:
        raise ConfigError(f"curve entry must be a table with a 'type' key, got {d!r}")
    kind = d["type"]
    if kind not in _CURVE_KEYS:
        raise ConfigError(f"unknown curve type {kind!r}")
    allowed = _CURVE_KEYS[kind] | {"type", "mean_level"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys for curve type {kind!r}: {sorted(extra)}")
    ml = d.get("mean_level")
    try:
        if kind == "step":
            c = Step(d["breakpoints"], d["levels"])
        elif kind in ("linear", "table"):
            c = PiecewiseLinear(d["ages"], d["values"])
        elif kind == "constant":
            c = constant(d["level"])
        elif kind == "indicator":
            c = indicator(d["start"], d["end"], d.get("level", 1.0))
        elif kind == "sis_step":
            c = sis_infectivity(d["T"], d["level"]) if role == "lambda" else sis_susceptibility(d["T"])
        else:
            c = one_shot_susceptibility(d["alpha"], d["beta"], d["t_r"], d["t_v"])
    except KeyError as exc:
        raise ConfigError(f"curve type {kind!r} is missing key {exc}") from None
    c.mean_level = None if ml is None else float(ml)
    return c


# ------------------------------------------------------------ knot algebra

def _eval_knots(x, y, a):
    n = x.size
    idx = np.searchsorted(x, a, side="right") - 1
    idx = np.clip(idx, 0, n - 1)
    nxt = np.minimum(idx + 1, n - 1)
    dx = x[nxt] - x[idx]
    inside = (idx < n - 1) & (dx > 0)
    frac = np.where(inside, (a - x[idx]) / np.where(dx > 0, dx, 1.0), 0.0)
    return np.where(inside, y[idx] + (y[nxt] - y[idx]) * frac, y[idx])


def cumulative(x, y):
    """Running integral at each knot."""
    return np.concatenate([[0.0], np.cumsum(np.diff(x) * 0.5 * (y[1:] + y[:-1]))])


def _integral_knots(x, y, a):
    G = cumulative(x, y)
    n = x.size
    idx = np.clip(np.searchsorted(x, a, side="right") - 1, 0, n - 1)
    nxt = np.minimum(idx + 1, n - 1)
    dx = x[nxt] - x[idx]
    slope = np.where((idx < n - 1) & (dx > 0), (y[nxt] - y[idx]) / np.where(dx > 0, dx, 1.0), 0.0)
    s = a - x[idx]
    return G[idx] + y[idx] * s + 0.5 * slope * s * s


class PackedCurves:
    """Knots of one curve per trait atom, concatenated for compiled kernels.

    Function curves are tabulated at ``tab_ages`` first.
    """

    def __init__(self, curves, tab_ages=None):
        xs, ys = [], []
        for c in curves:
            if not c.is_piecewise():
                if tab_ages is None:
                    raise TypeError("function curves need tabulation ages")
                c = c.tabulate(tab_ages)
            x, y = c.knots()
            xs.append(x)
            ys.append(y)
        self.off = np.zeros(len(xs) + 1, dtype=np.int64)
        self.off[1:] = np.cumsum([len(x) for x in xs])
        self.x = np.concatenate(xs)
        self.y = np.concatenate(ys)
        self.G = np.concatenate([cumulative(x, y) for x, y in zip(xs, ys)])
        self.terminal = np.array([y[-1] for y in ys])
        self.last = np.array([x[-1] for x in xs])
        self.n = len(xs)

    def __call__(self, ages, atoms):
        ages = np.asarray(ages, dtype=float)
        atoms = np.asarray(atoms, dtype=np.int64)
        a, t = np.broadcast_arrays(ages, atoms)
        out = np.empty(a.shape)
        eval_many(self.x, self.y, self.off, np.ascontiguousarray(t).ravel(),
                  np.ascontiguousarray(a).ravel(), out.reshape(-1))
        return out

    def integral(self, ages, atoms):
        a, t = np.broadcast_arrays(np.asarray(ages, dtype=float), np.asarray(atoms, dtype=np.int64))
        out = np.empty(a.shape)
        integral_many(self.x, self.y, self.G, self.off, np.ascontiguousarray(t).ravel(),
                      np.ascontiguousarray(a).ravel(), out.reshape(-1))
        return out


@njit(cache=True)
def _locate(x, lo, hi, a):
    """Index of the last knot in x[lo:hi] with x <= a (lo if a < x[lo])."""
    if a < x[lo]:
        return lo
    l, r = lo, hi - 1
    while l < r:
        m = (l + r + 1) // 2
        if x[m] <= a:
            l = m
        else:
            r = m - 1
    return l


@njit(cache=True)
def eval_packed(x, y, off, i, a):
    lo, hi = off[i], off[i + 1]
    k = _locate(x, lo, hi, a)
    if k == hi - 1:
        return y[k]
    dx = x[k + 1] - x[k]
    if dx <= 0.0:
        return y[k]
    return y[k] + (y[k + 1] - y[k]) * (a - x[k]) / dx


@njit(cache=True)
def integral_packed(x, y, G, off, i, a):
    lo, hi = off[i], off[i + 1]
    k = _locate(x, lo, hi, a)
    s = a - x[k]
    if k == hi - 1:
        return G[k] + y[k] * s
    dx = x[k + 1] - x[k]
    slope = (y[k + 1] - y[k]) / dx if dx > 0.0 else 0.0
    return G[k] + y[k] * s + 0.5 * slope * s * s


@njit(cache=True)
def eval_many(x, y, off, atoms, ages, out):
    for n in range(ages.shape[0]):
        out[n] = eval_packed(x, y, off, atoms[n], ages[n])


@njit(cache=True)
def integral_many(x, y, G, off, atoms, ages, out):
    for n in range(ages.shape[0]):
        out[n] = integral_packed(x, y, G, off, atoms[n], ages[n])

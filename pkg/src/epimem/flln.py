"""Empirical check of the large-population limit: particle ensembles against
the PDE reference at several N.

Two distances per replica:

* sup over the shared record times of |F^N(t) - F(t)|;
* bounded-Lipschitz distance between the final empirical (age cell, atom)
  histogram and the PDE cell masses. The trait metric is discrete (distance
  2 between different atoms), so the distance is the sum over atoms of a
  one-dimensional bounded-Lipschitz distance along the age axis.

The one-dimensional problem, max sum c_k f_k over |f_k| <= 1 and
|f_k - f_{k-1}| <= x_k - x_{k-1}, is solved exactly by dynamic programming
on concave piecewise-linear value functions.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigError, InsufficientReplicas
from .model import DYNAMICS_CHECKS, validate_model
from .particles import SimConfig, simulate
from .pde import solve_pde


@njit(cache=True)
def bl_line(x, c):
    """max sum_k c_k f_k over |f| <= 1 and f 1-Lipschitz on the sorted points x."""
    n = x.shape[0]
    cap = n + 4
    px = np.empty(cap)
    pv = np.empty(cap)
    qx = np.empty(cap)
    qv = np.empty(cap)
    # value function after the first point: V(f) = c_0 f on [-1, 1]
    px[0], pv[0] = -1.0, -c[0]
    px[1], pv[1] = 1.0, c[0]
    m = 2
    for k in range(1, n):
        h = x[k] - x[k - 1]
        j = 0
        for i in range(1, m):
            if pv[i] > pv[j]:
                j = i
        # shift the rising part left and the falling part right by h
        r = 0
        for i in range(j + 1):
            qx[r] = px[i] - h
            qv[r] = pv[i]
            r += 1
        for i in range(j, m):
            qx[r] = px[i] + h
            qv[r] = pv[i]
            r += 1
        # clip to [-1, 1]
        m = 0
        for i in range(r):
            if qx[i] < -1.0:
                if i + 1 < r and qx[i + 1] > -1.0:
                    w = (-1.0 - qx[i]) / (qx[i + 1] - qx[i])
                    px[m] = -1.0
                    pv[m] = qv[i] + w * (qv[i + 1] - qv[i])
                    m += 1
                continue
            if qx[i] > 1.0:
                if i > 0 and qx[i - 1] < 1.0:
                    w = (1.0 - qx[i - 1]) / (qx[i] - qx[i - 1])
                    px[m] = 1.0
                    pv[m] = qv[i - 1] + w * (qv[i] - qv[i - 1])
                    m += 1
                break
            if m > 0 and qx[i] == px[m - 1]:
                pv[m - 1] = max(pv[m - 1], qv[i])
                continue
            px[m] = qx[i]
            pv[m] = qv[i]
            m += 1
        for i in range(m):
            pv[i] += c[k] * px[i]
    best = pv[0]
    for i in range(1, m):
        best = max(best, pv[i])
    return best


def bounded_lipschitz(mass_a, mass_b, positions):
    """BL distance between two (cells, atoms) mass tables sharing cell positions."""
    diff = np.asarray(mass_a, dtype=float) - np.asarray(mass_b, dtype=float)
    x = np.ascontiguousarray(positions, dtype=float)
    return float(sum(bl_line(x, np.ascontiguousarray(diff[:, i])) for i in range(diff.shape[1])))


def pde_cell_masses(solution, t):
    """PDE masses per (cell, atom) with the overflow as the last row, weighted by p."""
    n = solution.index(t)
    mu, W = solution.snapshots[n]
    p = solution.spec.weights
    return np.vstack([mu, W[None, :]]) * p[None, :]


def cell_positions(grid):
    return np.append(grid.mids, grid.max_age + 0.5 * grid.step)


def _slope(n_list, d):
    """OLS slope of log d against log N with its standard error."""
    if len(n_list) < 2 or np.any(np.asarray(d) <= 0):
        return None, None
    x = np.log(np.asarray(n_list, dtype=float))
    y = np.log(np.asarray(d, dtype=float))
    xc = x - x.mean()
    b = float(xc @ (y - y.mean()) / (xc @ xc))
    if len(n_list) < 3:
        return b, None
    resid = y - y.mean() - b * xc
    se = math.sqrt(float(resid @ resid) / (len(x) - 2) / float(xc @ xc))
    return b, se


@dataclass
class FllnSweepResult:
    N: list
    replicas: int
    horizon: float
    d_F: list
    d_F_stderr: list
    d_BL: list
    d_BL_stderr: list
    slope: float
    slope_stderr: float
    slope_BL: float
    slope_BL_stderr: float
    per_replica: dict = field(default_factory=dict)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("N", "replicas", "horizon", "d_F", "d_F_stderr", "d_BL",
                                              "d_BL_stderr", "slope", "slope_stderr", "slope_BL",
                                              "slope_BL_stderr")} | {"per_replica": self.per_replica}


def flln_sweep(spec, n_list, horizon=10.0, replicas=20, seed=0, reference=None):
    """Mean distances between particle systems and the PDE for each N.

    Replica r at the k-th N uses SeedSequence(seed).spawn(len(n_list))[k].spawn(replicas)[r].
    """
    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])) or n_list[0] < 1:
        raise ConfigError("N list must be strictly increasing positive integers")
    if int(replicas) < 2:
        raise InsufficientReplicas("the sweep needs at least 2 replicas per N")
    R = int(replicas)
    validate_model(spec).require(DYNAMICS_CHECKS, "flln_sweep")
    ref = reference or solve_pde(spec, horizon, snapshot_times=[horizon])
    grid = spec.grid
    pos = cell_positions(grid)
    ref_mass = pde_cell_masses(ref, ref.times[-1])
    dF, dBL, sF, sBL, per = [], [], [], [], {}
    for N, ss in zip(n_list, np.random.SeedSequence(int(seed)).spawn(len(n_list))):
        cfg = SimConfig(N, horizon, snapshot_times=(horizon,), record_step=grid.step)
        f_d, b_d = [], []
        for child in ss.spawn(R):
            tr = simulate(spec, cfg, np.random.default_rng(child), check=False)
            k = min(tr.F.size, ref.F.size)
            f_d.append(float(np.max(np.abs(tr.F[:k] - ref.F[:k]))))
            emp = tr.snapshots[max(tr.snapshots)]
            b_d.append(bounded_lipschitz(emp, ref_mass, pos))
        f_d, b_d = np.array(f_d), np.array(b_d)
        dF.append(float(f_d.mean()))
        dBL.append(float(b_d.mean()))
        sF.append(float(f_d.std(ddof=1) / math.sqrt(R)))
        sBL.append(float(b_d.std(ddof=1) / math.sqrt(R)))
        per[str(N)] = {"d_F": f_d.tolist(), "d_BL": b_d.tolist()}
    b, se = _slope(n_list, dF)
    bb, sebb = _slope(n_list, dBL)
    return FllnSweepResult(n_list, R, float(horizon), dF, sF, dBL, sBL, b, se, bb, sebb, per)

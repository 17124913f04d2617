"""Per-cell integrals of the age profile exp(-F * Gamma) on the age grid.

Inside each cell the density is taken proportional to the profile
exp(-F (Gamma(a) - Gamma(a_m))), the exact shape of a stationary solution.
With that convention the stationary density of the continuous problem is a
fixed point of the discrete march, and all cell integrals can be done
exactly for piecewise curves.

Cells 0..M-1 are the grid cells; cell M is [A, A + step) with the curves
frozen at their value at A, used to feed the overflow cell.
"""
import math

import numpy as np
from numba import njit

from ._numeric import expquad, expquad_linear, phi


class CellTable:
    def __init__(self, spec):
        grid = spec.grid
        M, Q, d = grid.count, spec.n_atoms, grid.step
        self.M, self.Q, self.step = M, Q, d
        lam, gam = spec.packed_lambda, spec.packed_gamma
        A = grid.max_age
        lo = np.arange(M + 1) * d

        gcell = np.zeros((M + 1, Q))
        lcell = np.zeros((M + 1, Q))
        special = np.zeros((M + 1, Q), dtype=bool)
        Gabs = np.zeros((M + 2, Q))
        pieces = []  # (m, i, s0, h, g0, gs, l0, ls, Gin)
        for i in range(Q):
            atoms = np.full(M + 1, i)
            g_lo = gam(lo, atoms)
            l_lo = lam(lo, atoms)
            g_mid = gam(lo + 0.5 * d, atoms)
            l_mid = lam(lo + 0.5 * d, atoms)
            Gabs[:, i] = gam.integral(np.arange(M + 2) * d, np.full(M + 2, i))
            xs = np.concatenate([gam.x[gam.off[i]:gam.off[i + 1]], lam.x[lam.off[i]:lam.off[i + 1]]])
            xs = np.unique(xs[(xs > 0) & (xs < A)])
            cell_of = np.floor(xs / d).astype(np.int64)
            interior = xs > cell_of * d
            sp = np.zeros(M + 1, dtype=bool)
            sp[cell_of[interior]] = True
            sp[:M] |= (g_mid[:M] != g_lo[:M]) | (l_mid[:M] != l_lo[:M])
            # the feeding cell M uses values frozen at A
            sp[M] = False
            gcell[:, i] = g_lo
            lcell[:, i] = l_lo
            special[:, i] = sp
            for m in np.nonzero(sp)[0]:
                cuts = np.concatenate([[lo[m]], xs[(cell_of == m) & interior], [lo[m] + d]])
                Gm = Gabs[m, i]
                for c0, c1 in zip(cuts[:-1], cuts[1:]):
                    h = c1 - c0
                    if h <= 0:
                        continue
                    mid = c0 + 0.5 * h
                    g0 = float(gam([c0], [i])[0])
                    l0 = float(lam([c0], [i])[0])
                    gs = 2.0 * (float(gam([mid], [i])[0]) - g0) / h
                    ls = 2.0 * (float(lam([mid], [i])[0]) - l0) / h
                    Gin = float(gam.integral([c0], [i])[0]) - Gm
                    pieces.append((m, i, c0 - lo[m], h, g0, gs, l0, ls, Gin))
        self.Gabs = Gabs[:M + 1]
        self.Gcell = Gabs[1:M + 1] - Gabs[:M]
        self.gcell = gcell
        self.lcell = lcell
        self.special = special
        self.g_frozen = gcell[M].copy()
        self.l_frozen = lcell[M].copy()

        # unique levels of simple cells -> cheap per-step tables
        levels, code = np.unique(np.where(special, 0.0, gcell), return_inverse=True)
        code = code.reshape(M + 1, Q).astype(np.int64)
        code[special] = -1
        self.levels = levels
        self.code = code

        order = sorted(range(len(pieces)), key=lambda k: (pieces[k][0], pieces[k][1]))
        P = np.array([pieces[k] for k in order], dtype=float).reshape(-1, 9)
        self.pptr = np.full((M + 1, Q), -1, dtype=np.int64)
        self.pcnt = np.zeros((M + 1, Q), dtype=np.int64)
        for k in range(P.shape[0] - 1, -1, -1):
            m, i = int(P[k, 0]), int(P[k, 1])
            self.pptr[m, i] = k
            self.pcnt[m, i] += 1
        self.p_s0 = np.ascontiguousarray(P[:, 2])
        self.p_h = np.ascontiguousarray(P[:, 3])
        self.p_g0 = np.ascontiguousarray(P[:, 4])
        self.p_gs = np.ascontiguousarray(P[:, 5])
        self.p_l0 = np.ascontiguousarray(P[:, 6])
        self.p_ls = np.ascontiguousarray(P[:, 7])
        self.p_Gin = np.ascontiguousarray(P[:, 8])
        # special cells where lambda is not identically zero; the rest add nothing to F
        self.lam_special = np.zeros_like(special)
        live = (P[:, 6] != 0) | (P[:, 7] != 0)
        self.lam_special[P[live, 0].astype(np.int64), P[live, 1].astype(np.int64)] = True
        # rows that carry infectivity; used to skip work when computing F
        self.lam_rows = np.nonzero((lcell != 0).any(axis=1) | self.lam_special.any(axis=1))[0].astype(np.int64)

    def pieces(self):
        return (self.pptr, self.pcnt, self.p_h, self.p_g0, self.p_gs, self.p_l0, self.p_ls, self.p_Gin)

    def profile_integrals(self, F):
        """J[m, i] = integral over cell m of exp(-F (Gamma(a) - Gamma(a_m)))."""
        J = np.empty((self.M + 1, self.Q))
        fill_J(F, self.step, self.levels, self.code, *self.pieces(), J)
        return J

    def weighted_integrals(self, F, which="lambda"):
        """Integral over each cell of curve(a) * exp(-F (Gamma(a) - Gamma(a_m)))."""
        J = self.profile_integrals(F)
        out = np.empty_like(J)
        fill_weighted(F, J, self.lcell if which == "lambda" else self.gcell, which == "lambda",
                      self.special, *self.pieces(), out)
        return out


@njit(cache=True)
def special_J(F, k0, cnt, p_h, p_g0, p_gs, p_Gin):
    tot = 0.0
    for k in range(k0, k0 + cnt):
        tot += math.exp(-F * p_Gin[k]) * expquad(F * p_g0[k], 0.5 * F * p_gs[k], p_h[k])
    return tot


@njit(cache=True)
def special_weighted(F, k0, cnt, p_h, p_g0, p_gs, c0, cs, p_Gin):
    tot = 0.0
    for k in range(k0, k0 + cnt):
        tot += math.exp(-F * p_Gin[k]) * expquad_linear(F * p_g0[k], 0.5 * F * p_gs[k], p_h[k], c0[k], cs[k])
    return tot


@njit(cache=True)
def fill_J(F, d, levels, code, pptr, pcnt, p_h, p_g0, p_gs, p_l0, p_ls, p_Gin, J):
    tab = np.empty(levels.shape[0])
    for u in range(levels.shape[0]):
        tab[u] = d * phi(F * levels[u] * d)
    for m in range(J.shape[0]):
        for i in range(J.shape[1]):
            c = code[m, i]
            if c >= 0:
                J[m, i] = tab[c]
            else:
                J[m, i] = special_J(F, pptr[m, i], pcnt[m, i], p_h, p_g0, p_gs, p_Gin)


@njit(cache=True)
def fill_weighted(F, J, val, use_lambda, special, pptr, pcnt, p_h, p_g0, p_gs, p_l0, p_ls, p_Gin, out):
    for m in range(J.shape[0]):
        for i in range(J.shape[1]):
            if not special[m, i]:
                out[m, i] = val[m, i] * J[m, i]
            elif use_lambda:
                out[m, i] = special_weighted(F, pptr[m, i], pcnt[m, i], p_h, p_g0, p_gs, p_l0, p_ls, p_Gin)
            else:
                out[m, i] = special_weighted(F, pptr[m, i], pcnt[m, i], p_h, p_g0, p_gs, p_g0, p_gs, p_Gin)

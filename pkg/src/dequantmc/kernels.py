"""Hot inner loops: Ising Gibbs / single-site MH sweeps and the Geyer ESS truncation.

Each kernel has a loop form (compiled with numba when enabled) and a numpy
form vectorized across chains. Both consume the same pre-drawn randomness and
implement the same decision rules, so they agree draw-for-draw up to
floating-point rounding in ``exp``/``log``. Spin arrays are padded with one
trailing zero column so that missing lattice neighbours (index ``d``)
contribute nothing.
"""

import numpy as np

from . import _accel

__all__ = ["USE_NUMBA", "lattice_neighbours", "ising_gibbs", "ising_mh", "geyer_tau",
           "gibbs_numpy", "gibbs_loops", "mh_numpy", "mh_loops", "geyer_numpy", "geyer_loops"]

USE_NUMBA = _accel.USE_NUMBA


def lattice_neighbours(h, w):
    """(h*w, 4) int64 neighbour table; missing neighbours point at the pad index h*w."""
    d = h * w
    idx = np.arange(d)
    r, c = np.divmod(idx, w)
    nbr = np.full((d, 4), d, dtype=np.int64)
    nbr[:, 0] = np.where(r > 0, idx - w, d)
    nbr[:, 1] = np.where(r < h - 1, idx + w, d)
    nbr[:, 2] = np.where(c > 0, idx - 1, d)
    nbr[:, 3] = np.where(c < w - 1, idx + 1, d)
    return nbr


# -- Gibbs -----------------------------------------------------------------------------


def _gibbs_loops(spins, nbr, field, beta, orders, unif):
    n, S, d = orders.shape
    for c in range(n):
        for s in range(S):
            for t in range(d):
                i = orders[c, s, t]
                acc = 0.0
                for k in range(4):
                    acc += spins[c, nbr[i, k]]
                h = field[i] + beta * acc
                p0 = 1.0 / (1.0 + np.exp(2.0 * h))
                spins[c, i] = -1.0 if unif[c, s, t] < p0 else 1.0


def gibbs_numpy(spins, nbr, field, beta, orders, unif):
    n, S, d = orders.shape
    rows = np.arange(n)
    for s in range(S):
        for t in range(d):
            i = orders[:, s, t]
            h = field[i] + beta * spins[rows[:, None], nbr[i]].sum(axis=1)
            p0 = 1.0 / (1.0 + np.exp(2.0 * h))
            spins[rows, i] = np.where(unif[:, s, t] < p0, -1.0, 1.0)


# -- single-site Metropolis --------------------------------------------------------------


def _mh_loops(spins, nbr, field, beta, coords, levels, unif, accepts):
    n, S = coords.shape
    for c in range(n):
        for s in range(S):
            i = coords[c, s]
            new = 2.0 * levels[c, s] - 1.0
            if new == spins[c, i]:
                accepts[c] += 1
                continue
            acc = 0.0
            for k in range(4):
                acc += spins[c, nbr[i, k]]
            delta = 2.0 * new * (field[i] + beta * acc)
            if np.log(unif[c, s]) < delta:
                spins[c, i] = new
                accepts[c] += 1


def mh_numpy(spins, nbr, field, beta, coords, levels, unif, accepts):
    n, S = coords.shape
    rows = np.arange(n)
    with np.errstate(divide="ignore"):
        logu = np.log(unif)
    for s in range(S):
        i = coords[:, s]
        new = 2.0 * levels[:, s] - 1.0
        same = new == spins[rows, i]
        h = field[i] + beta * spins[rows[:, None], nbr[i]].sum(axis=1)
        ok = same | (logu[:, s] < 2.0 * new * h)
        spins[rows, i] = np.where(ok, new, spins[rows, i])
        accepts += ok


# -- Geyer initial monotone sequence ----------------------------------------------------


def _geyer_loops(rho):
    n, T = rho.shape
    out = np.empty(n)
    for r in range(n):
        total = 0.0
        prev = np.inf
        k = 0
        while 2 * k + 1 < T:
            g = rho[r, 2 * k] + rho[r, 2 * k + 1]
            if g <= 0.0:
                break
            if g > prev:
                g = prev
            total += g
            prev = g
            k += 1
        out[r] = -1.0 + 2.0 * total
    return out


def geyer_numpy(rho):
    """Integrated autocorrelation time from lag-0-normalized autocorrelations (rows)."""
    T = rho.shape[1] - rho.shape[1] % 2
    gam = rho[:, 0:T:2] + rho[:, 1:T:2]
    keep = np.cumprod(gam > 0.0, axis=1).astype(bool)
    mono = np.minimum.accumulate(np.where(keep, gam, np.inf), axis=1)
    return -1.0 + 2.0 * np.where(keep, mono, 0.0).sum(axis=1)


gibbs_loops = _accel.njit(cache=True)(_gibbs_loops) if USE_NUMBA else _gibbs_loops
mh_loops = _accel.njit(cache=True)(_mh_loops) if USE_NUMBA else _mh_loops
geyer_loops = _accel.njit(cache=True)(_geyer_loops) if USE_NUMBA else _geyer_loops

ising_gibbs = gibbs_loops if USE_NUMBA else gibbs_numpy
ising_mh = mh_loops if USE_NUMBA else mh_numpy
geyer_tau = geyer_loops if USE_NUMBA else geyer_numpy

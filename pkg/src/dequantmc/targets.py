"""Unnormalized discrete log-densities on the grid {0, ..., K-1}^d.

All targets evaluate batches: ``log_prob(theta)`` takes an integer array of
shape ``(n, d)`` (or a single ``(d,)`` vector) and returns ``(n,)`` (or a float).
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import log_ndtr, log_softmax, logsumexp

from .errors import DimensionError, NumericError

__all__ = [
    "DiscreteTarget",
    "UniformTarget",
    "TableTarget",
    "DiscretizedGMM",
    "IsingDenoise",
    "QuantizedLogReg",
    "BayesVarSelect",
    "make_gmm2d",
    "make_synthetic_bvs",
    "enumerate_grid",
    "exact_distribution",
]


class DiscreteTarget:
    """Base class. Subclasses set ``d`` and ``K`` and implement ``_log_prob``."""

    d: int
    K: int

    def log_prob(self, theta):
        theta = np.asarray(theta)
        single = theta.ndim == 1
        tb = theta[None, :] if single else theta
        if tb.ndim != 2 or tb.shape[1] != self.d:
            raise DimensionError(f"theta shape {theta.shape} does not match d={self.d}")
        out = self._log_prob(tb.astype(np.int64, copy=False))
        return float(out[0]) if single else out

    __call__ = log_prob

    def _log_prob(self, theta):
        raise NotImplementedError

    def conditional_logits(self, theta, idx):
        """log pi at every level of coordinate ``idx[c]`` for each row c.

        Returns ``(n, K)``; the default enumerates levels through ``log_prob``.
        """
        n = theta.shape[0]
        work = np.repeat(np.asarray(theta, dtype=np.int64)[:, None, :], self.K, axis=1)
        work[np.arange(n), :, idx] = np.arange(self.K)
        return self._log_prob(work.reshape(n * self.K, -1)).reshape(n, self.K)

    def grad_surrogate(self, theta):
        """Central-difference slope of log pi along each axis (one-sided at the edges)."""
        theta = np.asarray(theta, dtype=np.int64)
        out = np.zeros(theta.shape)
        if self.K == 1:
            return out
        for j in range(theta.shape[1]):
            up, dn = theta.copy(), theta.copy()
            up[:, j] = np.minimum(up[:, j] + 1, self.K - 1)
            dn[:, j] = np.maximum(dn[:, j] - 1, 0)
            out[:, j] = (self._log_prob(up) - self._log_prob(dn)) / (up[:, j] - dn[:, j])
        return out

    def metadata(self):
        return {"kind": type(self).__name__, "d": self.d, "K": self.K}


class UniformTarget(DiscreteTarget):
    def __init__(self, d, K):
        self.d, self.K = int(d), int(K)

    def _log_prob(self, theta):
        return np.zeros(theta.shape[0])


class TableTarget(DiscreteTarget):
    """Explicit log-probability table of shape (K,)*d; used for small oracles."""

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        self.table = table
        self.d = table.ndim
        self.K = table.shape[0]
        if any(s != self.K for s in table.shape):
            raise DimensionError("table must have equal extent on every axis")

    def _log_prob(self, theta):
        return self.table[tuple(theta.T)]


def enumerate_grid(d, K):
    return np.array(list(itertools.product(range(K), repeat=d)), dtype=np.int64).reshape(-1, d)


def exact_distribution(target, max_states=2 ** 22):
    """Normalized pmf over the full grid (row order of enumerate_grid) and log Z."""
    if target.K ** target.d > max_states:
        raise DimensionError("grid too large to enumerate")
    grid = enumerate_grid(target.d, target.K)
    lp = target.log_prob(grid)
    log_z = logsumexp(lp)
    return grid, np.exp(lp - log_z), float(log_z)


# -- discretized Gaussian mixture ---------------------------------------------------


def _log_interval_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo < hi, stable in both tails."""
    # reflect so that we always subtract in the lower tail
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb = log_ndtr(b)
    la = log_ndtr(a)
    return lb + np.log1p(-np.exp(la - lb))


class DiscretizedGMM(DiscreteTarget):
    """Diagonal Gaussian mixture integrated over the cells of a 2^bits grid.

    The bounding box spans mean +/- ``span`` std-devs of every component.
    Cell ``theta`` covers ``[lo + theta * w, lo + (theta + 1) * w)`` per axis.
    """

    def __init__(self, weights, means, stds, bits=6, span=6.0):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if self.means.shape != self.stds.shape or self.means.shape[0] != self.weights.size:
            raise DimensionError("means/stds must be (n_components, d)")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")
        self.bits = int(bits)
        self.K = 2 ** self.bits
        self.d = self.means.shape[1]
        self.span = float(span)
        self.lo = np.min(self.means - span * self.stds, axis=0)
        self.hi = np.max(self.means + span * self.stds, axis=0)
        self.width = (self.hi - self.lo) / self.K
        self._log_w = np.log(self.weights)
        # per-axis log cell masses, shape (d, K, n_components)
        edges = self.lo[:, None] + np.arange(self.K + 1)[None, :] * self.width[:, None]
        zs = (edges[:, :, None] - self.means.T[:, None, :]) / self.stds.T[:, None, :]
        self._cell = _log_interval_mass(zs[:, :-1], zs[:, 1:])

    def cell_bounds(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        lo = self.lo + theta * self.width
        return lo, lo + self.width

    def _per_component(self, theta):
        """(n, C) log of w_c times the component-c mass of each cell."""
        axes = np.arange(self.d)
        return self._cell[axes[None, :], theta].sum(axis=1) + self._log_w

    def _log_prob(self, theta):
        return logsumexp(self._per_component(theta), axis=1)

    def conditional_logits(self, theta, idx):
        theta = np.asarray(theta, dtype=np.int64)
        rows = np.arange(theta.shape[0])
        rest = self._per_component(theta) - self._cell[idx, theta[rows, idx]]  # (n, C)
        return logsumexp(rest[:, None, :] + self._cell[idx], axis=2)  # (n, K)

    def box_mass(self):
        """Exact mixture mass inside the bounding box."""
        zl = (self.lo - self.means) / self.stds
        zh = (self.hi - self.means) / self.stds
        return float(np.sum(self.weights * np.exp(_log_interval_mass(zl, zh).sum(axis=1))))

    def metadata(self):
        m = super().metadata()
        m.update(bits=self.bits, weights=self.weights.tolist(), means=self.means.tolist(),
                 stds=self.stds.tolist(), box_lo=self.lo.tolist(), box_hi=self.hi.tolist())
        return m


def make_gmm2d(seed=0, n_components=5, bits=6, radius=2.5, std=0.6):
    """Five-ish well-spread 2-d components on a jittered ring."""
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * (np.arange(n_components) / n_components) + rng.uniform(-0.3, 0.3, n_components)
    r = radius * rng.uniform(0.8, 1.2, n_components)
    means = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    stds = std * rng.uniform(0.7, 1.3, size=(n_components, 2))
    w = rng.uniform(0.5, 1.5, n_components)
    return DiscretizedGMM(w / w.sum(), means, stds, bits=bits)


# -- Ising denoising ---------------------------------------------------------------------


class IsingDenoise(DiscreteTarget):
    """log pi(theta) = beta * sum_<ij> s_i s_j + eta * sum_i s_i x_i with s = 2 theta - 1.

    4-neighbour lattice, every undirected edge counted once. ``observed`` holds
    the corrupted image as +/-1 spins.
    """

    K = 2

    def __init__(self, observed, beta=1.0, eta=1.0):
        obs = np.asarray(observed)
        if obs.ndim != 2:
            raise DimensionError("observed image must be 2-d")
        if not np.all(np.isin(obs, (-1, 1))):
            raise ValueError("observed spins must be -1/+1")
        if beta < 0 or eta < 0:
            raise ValueError("beta and eta must be non-negative")
        self.shape = obs.shape
        self.observed = obs.astype(np.float64)
        self.beta = float(beta)
        self.eta = float(eta)
        self.d = obs.size
        self._obs_flat = self.observed.ravel()

    def _log_prob(self, theta):
        s = (2.0 * theta - 1.0).reshape(-1, *self.shape)
        pair = np.sum(s[:, 1:, :] * s[:, :-1, :], axis=(1, 2)) + np.sum(s[:, :, 1:] * s[:, :, :-1], axis=(1, 2))
        field = s.reshape(s.shape[0], -1) @ self._obs_flat
        return self.beta * pair + self.eta * field

    def local_field(self, spins, i):
        """beta * (sum of neighbour spins) + eta * x_i for rows of a spin array."""
        h, w = self.shape
        r, c = divmod(int(i), w)
        tot = np.zeros(spins.shape[0])
        if r > 0:
            tot += spins[:, i - w]
        if r < h - 1:
            tot += spins[:, i + w]
        if c > 0:
            tot += spins[:, i - 1]
        if c < w - 1:
            tot += spins[:, i + 1]
        return self.beta * tot + self.eta * self._obs_flat[i]

    def conditional_logits(self, theta, idx):
        s = 2.0 * theta - 1.0
        h, w = self.shape
        n = theta.shape[0]
        rows = np.arange(n)
        r, c = np.divmod(idx, w)
        nb = np.zeros(n)
        for ok, off in ((r > 0, -w), (r < h - 1, w), (c > 0, -1), (c < w - 1, 1)):
            j = np.where(ok, idx + off, idx)
            nb += np.where(ok, s[rows, j], 0.0)
        field = self.beta * nb + self.eta * self._obs_flat[idx]
        # only the relative value matters: logit(level 1) - logit(level 0) = 2 * field
        return np.stack([-field, field], axis=1)

    def grad_surrogate(self, theta):
        s = 2.0 * np.asarray(theta, dtype=np.float64) - 1.0
        img = s.reshape(-1, *self.shape)
        nb = np.zeros_like(img)
        nb[:, 1:, :] += img[:, :-1, :]
        nb[:, :-1, :] += img[:, 1:, :]
        nb[:, :, 1:] += img[:, :, :-1]
        nb[:, :, :-1] += img[:, :, 1:]
        # log pi(theta_j = 1) - log pi(theta_j = 0)
        return 2.0 * (self.beta * nb.reshape(s.shape) + self.eta * self._obs_flat)

    def metadata(self):
        m = super().metadata()
        m.update(shape=list(self.shape), beta=self.beta, eta=self.eta)
        return m


# -- quantized logistic regression ------------------------------------------------------


class QuantizedLogReg(DiscreteTarget):
    """Multinomial logistic likelihood with weights on a uniform grid; flat prior.

    theta reshapes to ``(n_classes, n_features + 1)``: weights then bias.
    """

    def __init__(self, X, y, n_classes=None, bits=4, lo=-2.0, hi=2.0):
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.int64).ravel()
        n_feat = self.X.shape[1]
        if self.X.shape[0] != self.y.size:
            raise DimensionError("X and y disagree on the number of examples")
        if n_classes is None:
            n_classes = int(self.y.max()) + 1 if self.y.size else 2
        self.n_classes = max(int(n_classes), 2)
        self.n_features = n_feat
        self.bits = int(bits)
        self.K = 2 ** self.bits
        self.grid = np.linspace(lo, hi, self.K)
        self.d = self.n_classes * (n_feat + 1)
        self._Xb = np.concatenate([self.X, np.ones((self.X.shape[0], 1))], axis=1)

    def weights(self, theta):
        return self.grid[theta].reshape(-1, self.n_classes, self.n_features + 1)

    def _log_prob(self, theta):
        if self.y.size == 0:
            return np.zeros(theta.shape[0])
        W = self.weights(theta)  # (n, C, F+1)
        logits = np.einsum("ef,ncf->nec", self._Xb, W)
        lsm = log_softmax(logits, axis=2)
        return lsm[:, np.arange(self.y.size), self.y].sum(axis=1)

    def accuracy(self, theta, X=None, y=None):
        X = self.X if X is None else np.atleast_2d(X)
        y = self.y if y is None else np.asarray(y)
        Xb = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
        W = self.weights(np.atleast_2d(theta))
        pred = np.argmax(np.einsum("ef,ncf->nec", Xb, W), axis=2)
        return (pred == y[None]).mean(axis=1)

    def metadata(self):
        m = super().metadata()
        m.update(bits=self.bits, grid_lo=float(self.grid[0]), grid_hi=float(self.grid[-1]),
                 n_classes=self.n_classes, n_features=self.n_features, n_examples=int(self.y.size))
        return m


# -- Bayesian variable selection ---------------------------------------------------------


class BayesVarSelect(DiscreteTarget):
    """Log marginal likelihood of an inclusion vector under a g-prior with g = nu^2.

    beta | sigma^2, theta ~ N(0, nu^2 sigma^2 (X_t' X_t)^-1),
    sigma^2 ~ InvGamma(alpha / 2, alpha * w / 2), theta uniform on {0,1}^k.
    """

    K = 2
    JITTER = 1e-8

    def __init__(self, X, y, nu=10.0, w=1.0, alpha=1.0):
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.y = np.asarray(y, dtype=np.float64).ravel()
        self.n, self.d = self.X.shape
        if self.n == 0 or self.y.size != self.n:
            raise DimensionError("need n > 0 observations matching X")
        self.nu, self.w, self.alpha = float(nu), float(w), float(alpha)
        self._yty = float(self.y @ self.y)
        self._G = self.X.T @ self.X
        self._Xty = self.X.T @ self.y
        g = self.nu ** 2
        self._shrink = g / (1.0 + g)
        self._half_log1g = 0.5 * np.log1p(g)

    def _one(self, sel):
        k = sel.size
        if k == 0:
            fit = 0.0
        else:
            G = self._G[np.ix_(sel, sel)] + self.JITTER * np.eye(k)
            b = self._Xty[sel]
            try:
                L = np.linalg.cholesky(G)
            except np.linalg.LinAlgError as exc:
                raise NumericError("selected Gram matrix is singular") from exc
            v = np.linalg.solve(L, b)
            fit = float(v @ v)
        S = self._yty - self._shrink * fit
        return -k * self._half_log1g - 0.5 * (self.n + self.alpha) * np.log(self.alpha * self.w + S)

    def _log_prob(self, theta):
        return np.array([self._one(np.flatnonzero(row)) for row in theta])

    def metadata(self):
        m = super().metadata()
        m.update(n=self.n, nu=self.nu, w=self.w, alpha=self.alpha)
        return m


def make_synthetic_bvs(d, k_informative, n, noise_sigma=1.0, seed=0, **hyper):
    """Gaussian design, sparse true coefficients, y = X beta + noise.

    Returns ``(target, info)`` where info records the seed, support and beta.
    """
    if k_informative > d:
        raise ValueError("k_informative must not exceed d")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    support = np.sort(rng.choice(d, size=k_informative, replace=False))
    beta = np.zeros(d)
    beta[support] = rng.choice([-1.0, 1.0], size=k_informative) * rng.uniform(0.5, 2.0, k_informative)
    y = X @ beta + noise_sigma * rng.standard_normal(n)
    info = {"seed": int(seed), "d": int(d), "n": int(n), "noise_sigma": float(noise_sigma),
            "support": support.tolist(), "beta": beta.tolist()}
    return BayesVarSelect(X, y, **hyper), info

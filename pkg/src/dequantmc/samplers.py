"""Parallel MCMC chains: latent-space MH/HMC and the discrete Gibbs / MH baselines.

Every chain owns a ``numpy.random.Generator`` seeded with ``master_seed ^ chain_id``
and consumes a fixed number of draws per step, so a chain's trajectory depends
only on its own stream and on how many steps were run, never on the other
chains or on how the steps were batched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from . import kernels
from .errors import ConfigError, DimensionError
from .targets import IsingDenoise

__all__ = [
    "ChainSet",
    "DiscreteChainSet",
    "GaussianDensity",
    "init_latent_chains",
    "init_discrete_chains",
    "mh_latent_step",
    "hmc_latent_step",
    "run_chains",
    "push_samples",
    "gibbs_step",
    "discrete_mh_step",
    "run_discrete",
    "adapt_step_size",
]

BLOCK = 256


def chain_rngs(master_seed, n_chains):
    return [np.random.default_rng(int(master_seed) ^ c) for c in range(n_chains)]


def _draw(rngs, method, shape):
    """Stack one block of draws per chain: result has shape (n_chains, *shape)."""
    return np.stack([getattr(r, method)(shape) for r in rngs])


class GaussianDensity:
    """Isotropic normal log-density with gradient; handy as a known MCMC target."""

    def __init__(self, d, mean=0.0, scale=1.0):
        self.d = int(d)
        self.mean = mean
        self.scale = float(scale)

    def log_density(self, z):
        r = (np.atleast_2d(z) - self.mean) / self.scale
        return -0.5 * np.sum(r * r, axis=1)

    def log_density_and_grad(self, z):
        zb = np.atleast_2d(z)
        r = (zb - self.mean) / self.scale
        return -0.5 * np.sum(r * r, axis=1), -r / self.scale


# -- latent chains ----------------------------------------------------------------------


@dataclass
class ChainSet:
    z: np.ndarray
    logp: np.ndarray
    rngs: list
    step_size: float = 0.25
    thin: int = 10
    proposals: np.ndarray = None
    accepts: np.ndarray = None
    nonfinite: np.ndarray = None
    sampling_seconds: float = 0.0

    def __post_init__(self):
        n = self.z.shape[0]
        for name in ("proposals", "accepts", "nonfinite"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))

    @property
    def n_chains(self):
        return self.z.shape[0]

    @property
    def rejects(self):
        return self.proposals - self.accepts

    @property
    def acceptance_rate(self):
        return np.where(self.proposals > 0, self.accepts / np.maximum(self.proposals, 1), 1.0)


def init_latent_chains(density, n_chains, seed, step_size=0.25, thin=10, z0=None):
    """Start every chain at its own z0 ~ N(0, I) (first draw of its stream)."""
    rngs = chain_rngs(seed, n_chains)
    if z0 is None:
        z0 = np.stack([r.standard_normal(density.d) for r in rngs])
    z0 = np.asarray(z0, dtype=np.float64).reshape(n_chains, density.d)
    logp = density.log_density(z0)
    return ChainSet(z0.copy(), logp, rngs, step_size=step_size, thin=thin)


def _mh_block(chains, density, noise):
    """Apply len(block) MH steps; ``noise`` is (n_chains, S, d + 1)."""
    d = chains.z.shape[1]
    for s in range(noise.shape[1]):
        prop = chains.z + chains.step_size * noise[:, s, :d]
        with np.errstate(invalid="ignore"):
            lp = density.log_density(prop)
        finite = np.isfinite(lp)
        with np.errstate(invalid="ignore"):
            ok = finite & (log_ndtr(noise[:, s, d]) < lp - chains.logp)
        chains.z[ok] = prop[ok]
        chains.logp[ok] = lp[ok]
        chains.proposals += 1
        chains.accepts += ok
        chains.nonfinite += ~finite
        yield


def mh_latent_step(chains, density, step_size=None):
    """One random-walk Metropolis step for every chain (in place; returns chains)."""
    if step_size is not None:
        chains.step_size = float(step_size)
    noise = _draw(chains.rngs, "standard_normal", (1, density.d + 1))
    for _ in _mh_block(chains, density, noise):
        pass
    return chains


def _leapfrog(density, z, p, step, n_steps):
    """Leapfrog trajectory; a chain that leaves the support at any point gets lp = -inf."""
    lp, g = density.log_density_and_grad(z)
    p = p + 0.5 * step * g
    lost = np.zeros(z.shape[0], dtype=bool)
    for i in range(n_steps):
        z = z + step * p
        lp, g = density.log_density_and_grad(z)
        lost |= ~np.isfinite(lp)
        g = np.where(lost[:, None], 0.0, g)
        if i < n_steps - 1:
            p = p + step * g
    p = p + 0.5 * step * g
    return z, p, np.where(lost, -np.inf, lp)


def hmc_latent_step(chains, density, step_size, n_leapfrog):
    """Leapfrog HMC with unit-mass Gaussian momentum and a Metropolis correction.

    log pi(theta) is piecewise constant in z, so its jumps enter only through the
    accept step; gradients see only the continuous terms.
    """
    d = density.d
    draws = _draw(chains.rngs, "standard_normal", (d + 1,))
    p0 = draws[:, :d]
    if n_leapfrog == 0:
        z1, p1, lp1 = chains.z.copy(), p0, chains.logp.copy()
    else:
        with np.errstate(invalid="ignore", over="ignore"):
            z1, p1, lp1 = _leapfrog(density, chains.z, p0, step_size, n_leapfrog)
    with np.errstate(invalid="ignore", over="ignore"):
        h0 = -chains.logp + 0.5 * np.sum(p0 * p0, axis=1)
        h1 = -lp1 + 0.5 * np.sum(p1 * p1, axis=1)
        finite = np.isfinite(h1)
        ok = finite & (log_ndtr(draws[:, d]) < h0 - h1)
    chains.z[ok] = z1[ok]
    chains.logp[ok] = lp1[ok]
    chains.proposals += 1
    chains.accepts += ok
    chains.nonfinite += ~finite
    return chains


def adapt_step_size(chains, density, n_steps=500, target=0.3):
    """Robbins-Monro tuning of the shared proposal scale; these draws are discarded."""
    log_s = np.log(chains.step_size)
    for t in range(n_steps):
        before = chains.accepts.copy()
        mh_latent_step(chains, density)
        rate = float(np.mean(chains.accepts - before))
        log_s += (rate - target) / (t + 1) ** 0.6
        chains.step_size = float(np.exp(log_s))
    chains.proposals[:] = 0
    chains.accepts[:] = 0
    chains.nonfinite[:] = 0
    return chains.step_size


def run_chains(chains, density, n_steps, thin=None):
    """Run latent MH, keeping every ``thin``-th state: returns (n_chains, n_steps // thin, d)."""
    thin = chains.thin if thin is None else int(thin)
    if thin <= 0 or n_steps < 0:
        raise ConfigError("thin must be positive and n_steps non-negative")
    d = density.d
    kept = np.empty((chains.n_chains, n_steps // thin, d))
    k = 0
    step = 0
    t0 = time.perf_counter()
    while step < n_steps:
        S = min(BLOCK, n_steps - step)
        noise = _draw(chains.rngs, "standard_normal", (S, d + 1))
        for _ in _mh_block(chains, density, noise):
            step += 1
            if step % thin == 0:
                kept[:, k] = chains.z
                k += 1
    chains.sampling_seconds += time.perf_counter() - t0
    return kept


def push_samples(latent_density, z_samples):
    """Map latent samples of any leading shape to grid points theta = floor(T(z))."""
    z = np.asarray(z_samples, dtype=np.float64)
    flat = z.reshape(-1, z.shape[-1])
    theta, ood = latent_density.push(flat)
    return theta.reshape(z.shape[:-1] + (theta.shape[-1],)), ood.reshape(z.shape[:-1])


# -- discrete chains --------------------------------------------------------------------


@dataclass
class DiscreteChainSet:
    theta: np.ndarray
    logp: np.ndarray
    rngs: list
    proposals: np.ndarray = None
    accepts: np.ndarray = None
    sampling_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.theta.shape[0]
        if self.proposals is None:
            self.proposals = np.zeros(n, dtype=np.int64)
        if self.accepts is None:
            self.accepts = np.zeros(n, dtype=np.int64)

    @property
    def n_chains(self):
        return self.theta.shape[0]

    @property
    def acceptance_rate(self):
        return np.where(self.proposals > 0, self.accepts / np.maximum(self.proposals, 1), 1.0)


def init_discrete_chains(target, n_chains, seed, theta0=None):
    """Uniformly random grid starting points, one per chain stream."""
    rngs = chain_rngs(seed, n_chains)
    if theta0 is None:
        theta0 = np.stack([r.integers(0, target.K, size=target.d) for r in rngs])
    theta0 = np.asarray(theta0, dtype=np.int64).reshape(n_chains, target.d)
    if np.any(theta0 < 0) or np.any(theta0 >= target.K):
        raise DimensionError("initial states must lie in the grid")
    return DiscreteChainSet(theta0.copy(), target.log_prob(theta0), rngs)


def _ising_state(target, chains):
    spins = np.zeros((chains.n_chains, target.d + 1))
    spins[:, :-1] = 2.0 * chains.theta - 1.0
    nbr = kernels.lattice_neighbours(*target.shape)
    return spins, nbr, target.eta * target._obs_flat


def _gibbs_draws(chains, d, S):
    r = _draw(chains.rngs, "random", (S, 2 * d))
    return np.argsort(r[:, :, :d], axis=2, kind="stable"), r[:, :, d:]


def _gibbs_sweeps(chains, target, S):
    d = target.d
    orders, unif = _gibbs_draws(chains, d, S)
    if isinstance(target, IsingDenoise):
        spins, nbr, fld = _ising_state(target, chains)
        kernels.ising_gibbs(spins, nbr, fld, target.beta, orders, unif)
        chains.theta[:] = (spins[:, :-1] > 0).astype(np.int64)
    else:
        rows = np.arange(chains.n_chains)
        for s in range(S):
            for t in range(d):
                idx = orders[:, s, t]
                logits = target.conditional_logits(chains.theta, idx)
                p = np.exp(logits - logits.max(axis=1, keepdims=True))
                cdf = np.cumsum(p, axis=1)
                cdf /= cdf[:, -1:]
                level = np.minimum((unif[:, s, t, None] >= cdf).sum(axis=1), target.K - 1)
                chains.theta[rows, idx] = level
    chains.proposals += S * d
    chains.accepts += S * d
    chains.logp = target.log_prob(chains.theta)


def gibbs_step(chains, target):
    """One random-scan-order sweep of exact single-site conditional updates."""
    _gibbs_sweeps(chains, target, 1)
    return chains


def _mh_steps(chains, target, S):
    d, K = target.d, target.K
    r = _draw(chains.rngs, "random", (S, 3))
    coords = np.minimum((r[:, :, 0] * d).astype(np.int64), d - 1)
    levels = np.minimum((r[:, :, 1] * K).astype(np.int64), K - 1)
    unif = r[:, :, 2]
    if isinstance(target, IsingDenoise):
        spins, nbr, fld = _ising_state(target, chains)
        acc = np.zeros(chains.n_chains, dtype=np.int64)
        kernels.ising_mh(spins, nbr, fld, target.beta, coords, levels, unif, acc)
        chains.theta[:] = (spins[:, :-1] > 0).astype(np.int64)
        chains.accepts += acc
        chains.logp = target.log_prob(chains.theta)
    else:
        rows = np.arange(chains.n_chains)
        with np.errstate(divide="ignore"):
            logu = np.log(unif)
        for s in range(S):
            prop = chains.theta.copy()
            prop[rows, coords[:, s]] = levels[:, s]
            same = levels[:, s] == chains.theta[rows, coords[:, s]]
            lp = np.where(same, chains.logp, target.log_prob(prop))
            ok = same | (logu[:, s] < lp - chains.logp)
            chains.theta[ok] = prop[ok]
            chains.logp[ok] = lp[ok]
            chains.accepts += ok
    chains.proposals += S


def discrete_mh_step(chains, target):
    """Resample one uniformly chosen coordinate to a uniform level; accept by pi ratio."""
    _mh_steps(chains, target, 1)
    return chains


def run_discrete(chains, target, n_steps, thin=10, kind="gibbs", burn_in=0):
    """Burn in, then keep every ``thin``-th state. A Gibbs step is one full sweep."""
    if kind not in ("gibbs", "discrete-mh"):
        raise ConfigError(f"unknown baseline {kind!r}; expected 'gibbs' or 'discrete-mh'")
    if thin <= 0 or n_steps < 0 or burn_in < 0:
        raise ConfigError("thin must be positive; n_steps and burn_in non-negative")
    advance = _gibbs_sweeps if kind == "gibbs" else _mh_steps
    block = 16 if kind == "gibbs" else 1024
    t0 = time.perf_counter()
    done = 0
    while done < burn_in:
        S = min(block, burn_in - done)
        advance(chains, target, S)
        done += S
    kept = np.empty((chains.n_chains, n_steps // thin, target.d), dtype=np.int64)
    for k in range(n_steps // thin):
        done = 0
        while done < thin:
            S = min(block, thin - done)
            advance(chains, target, S)
            done += S
        kept[:, k] = chains.theta
    if n_steps % thin:
        advance(chains, target, n_steps % thin)
    chains.sampling_seconds += time.perf_counter() - t0
    return kept

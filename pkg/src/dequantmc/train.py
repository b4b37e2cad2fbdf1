"""Latent pullback density of a discrete target and its training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, TrainingError
from .flows import BOX_EPS, BoxSquash, std_normal_logpdf
from .numcore import adam_init, adam_step

log = logging.getLogger(__name__)

PUSH_CHUNK = 4096
U_MIN = np.finfo(np.float64).tiny
U_MAX = np.nextafter(1.0, 0.0)
GRAD_MODES = ("score", "pathwise", "straight-through")

__all__ = ["LatentDensity", "TrainConfig", "TrainTrace", "fit", "latent_logdensity",
           "objective_and_grads"]


class LatentDensity:
    """log p~(z) = log pi(theta) + log N(eps) - log|T_lam'(eps; theta)| + log|T_phi'(z)|

    with x = T_phi(z), theta = floor(x), u = x - theta and eps = T_lam^-1(u; theta).
    ``theta`` is clamped into the grid; rows that needed clamping are flagged
    out-of-domain.
    """

    def __init__(self, latent, dequant, target):
        if not (latent.d == dequant.d == target.d):
            raise DimensionError(f"dims disagree: flow {latent.d}, dequant {dequant.d}, target {target.d}")
        if dequant.K != target.K:
            raise DimensionError(f"dequantizer K={dequant.K} but target K={target.K}")
        self.latent = latent
        self.dequant = dequant
        self.target = target

    @property
    def d(self):
        return self.target.d

    def params(self):
        return self.latent.params() + self.dequant.params()

    def set_params(self, flat):
        n = len(self.latent.params())
        self.latent.set_params(flat[:n])
        self.dequant.set_params(flat[n:])

    def _pass(self, zb, exact=False):
        """Forward evaluation of log p~ for a batch.

        Training clamps the cell offset to [BOX_EPS, 1 - BOX_EPS], which keeps
        the 1/u slopes of log q bounded. ``exact=True`` evaluates q at the true
        offset instead, so p~ integrates exactly to Z (what MCMC needs); offsets
        that land exactly on a cell face are flagged with the out-of-domain rows.
        """
        bad = None
        if exact:
            # diverged proposals (HMC) are evaluated at a placeholder and rejected
            bad = ~np.all(np.isfinite(zb), axis=1)
            if bad.any():
                zb = np.where(bad[:, None], 0.0, zb)
        x, ld_phi, c_phi = self.latent._fwd(zb)
        raw = np.floor(x)
        theta = np.clip(raw, 0, self.target.K - 1)
        ood = np.any(raw != theta, axis=1)
        if bad is not None:
            ood |= bad
        theta = theta.astype(np.int64)
        u_raw = x - theta
        if exact:
            face = (u_raw <= 0.0) | (u_raw >= 1.0)
            ood |= np.any(face, axis=1)
            u = np.clip(u_raw, U_MIN, U_MAX)
        else:
            u = np.clip(u_raw, BOX_EPS, 1.0 - BOX_EPS)
        eps, ld_lam_inv, c_lam = self.dequant._inv(u, self.dequant.encode(theta))
        lp_pi = self.target.log_prob(theta)
        logp = lp_pi + std_normal_logpdf(eps) + ld_lam_inv + ld_phi
        parts = dict(z=zb, x=x, theta=theta, ood=ood, inside=(u_raw == u), eps=eps,
                     c_phi=c_phi, c_lam=c_lam, ld_phi=ld_phi)
        return logp, parts

    def _backward(self, parts, w, mode="pathwise", logp=None):
        """Gradient of sum_i w_i log p~(z_i) w.r.t. all params and each z_i.

        ``mode`` picks how the jumps of log pi(floor(x)) are handled:
        "pathwise" ignores them (zero derivative a.e.), "straight-through" adds a
        finite-difference slope of log pi, "score" replaces the pathwise latent-flow
        gradient of the discontinuous terms with a score-function estimate.
        """
        eps = parts["eps"]
        g_u, g_lam = self.dequant._inv_grad(parts["c_lam"], -eps * w[:, None], w)
        if mode == "score":
            return self._score_phi(parts, w, logp) + g_lam, None
        g_x = g_u * parts["inside"]
        if mode == "straight-through":
            g_x = g_x + w[:, None] * self.target.grad_surrogate(parts["theta"])
        elif mode != "pathwise":
            raise ValueError(f"unknown gradient mode {mode!r}")
        g_z, g_phi = self.latent._fwd_grad(parts["c_phi"], g_x, w)
        return g_phi + g_lam, g_z

    def _score_phi(self, parts, w, logp):
        """Score-function gradient of E_z[log p~(z)] in the latent-flow parameters.

        Writing the objective as E_{x~r}[f(x) - log r(x)] with f = log pi + log q,
        the whole integrand enters the score term: the reward is the log importance
        weight log p~(z) - log N(z), which has far lower variance than f alone. The
        baseline b is the leave-one-out batch mean of the reward.
        """
        x = parts["x"]
        g = logp - std_normal_logpdf(parts["z"])
        m = g.size
        b = (g.sum() - g) / max(m - 1, 1) if m > 1 else np.zeros_like(g)
        coef = w * (g - b)
        # a parameter-free squash tail does not depend on phi, so start the
        # inverse from its cached input (also avoids saturated x at the box edge)
        skip = 0
        if self.latent.layers and isinstance(self.latent.layers[-1], BoxSquash):
            x, skip = parts["c_phi"][-1][1], 1
        zi, _, c_inv = self.latent._inv(x, skip_last=skip)
        _, g_score = self.latent._inv_grad(c_inv, -zi * coef[:, None], coef, skip_last=skip)
        return g_score

    def evaluate(self, z):
        """(log p~, theta, out_of_domain) at the exact cell offset; batched if z is 2-d."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        logp, parts = self._pass(z[None, :] if single else z, exact=True)
        if single:
            return float(logp[0]), parts["theta"][0], bool(parts["ood"][0])
        return logp, parts["theta"], parts["ood"]

    def log_density(self, z):
        """MCMC target: log p~ with -inf outside the grid's image (zero density there)."""
        logp, _, ood = self.evaluate(np.atleast_2d(z))
        return np.where(ood, -np.inf, logp)

    def log_density_and_grad(self, z):
        """Per-row log p~ and its gradient in z; log pi enters as piecewise constant."""
        zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
        logp, parts = self._pass(zb, exact=True)
        _, g_z = self._backward(parts, np.ones(zb.shape[0]))
        logp = np.where(parts["ood"], -np.inf, logp)
        return logp, g_z

    def push(self, z):
        """theta = floor(T_phi(z)) clamped, plus the out-of-domain flags."""
        zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
        theta = np.empty(zb.shape, dtype=np.int64)
        ood = np.empty(zb.shape[0], dtype=bool)
        # chunked: the forward pass caches activations for every layer
        for i in range(0, zb.shape[0], PUSH_CHUNK):
            x, _, _ = self.latent._fwd(zb[i:i + PUSH_CHUNK])
            raw = np.floor(x)
            th = np.clip(raw, 0, self.target.K - 1)
            theta[i:i + PUSH_CHUNK] = th
            ood[i:i + PUSH_CHUNK] = np.any(raw != th, axis=1)
        return theta, ood

    def objective_and_grads(self, z_batch, mode="pathwise"):
        """Batch mean of log p~ and its gradient w.r.t. ``params()`` (ascent direction)."""
        zb = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
        logp, parts = self._pass(zb)
        if not np.all(np.isfinite(logp)):
            bad = zb[~np.isfinite(logp)]
            raise TrainingError("non-finite objective", offending=bad)
        m = zb.shape[0]
        grads, _ = self._backward(parts, np.full(m, 1.0 / m), mode, logp)
        return float(logp.mean()), grads, float(parts["ood"].mean())


def latent_logdensity(L, z):
    return L.evaluate(z)


def objective_and_grads(L, z_batch, mode="pathwise"):
    value, grads, _ = L.objective_and_grads(z_batch, mode)
    return value, grads


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1000
    grad_mode: str = "score"

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0 or self.lr < 0 or self.checkpoint_every <= 0:
            raise ValueError("TrainConfig values must be positive (iterations may be 0)")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    objective: list = field(default_factory=list)
    ood_rate: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["iteration", "objective", "ood_rate", "grad_norm"])
            for i, row in enumerate(zip(self.objective, self.ood_rate, self.grad_norm)):
                wr.writerow([i, *(repr(float(v)) for v in row)])


def fit(L, config, on_checkpoint=None):
    """Adam ascent on the batch-mean latent log-density.

    Returns ``(params, trace)``; ``L`` holds the final parameters on return.
    ``on_checkpoint(iteration, params)`` fires at the configured cadence.
    Raises TrainingError (carrying the last finite parameters) on divergence.
    """
    rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in L.params()]
    state = adam_init(params, lr=config.lr)
    trace = TrainTrace()
    last_good = [p.copy() for p in params]
    t0 = time.perf_counter()
    for it in range(config.iterations):
        z = rng.standard_normal((config.batch_size, L.d))
        try:
            value, grads, ood = L.objective_and_grads(z, config.grad_mode)
            descent = [-g for g in grads]
            params, state = adam_step(params, descent, state)
        except (TrainingError, FloatingPointError, ArithmeticError) as exc:
            L.set_params(last_good)
            raise TrainingError(f"diverged at iteration {it}: {exc}", last_good=last_good,
                                offending=getattr(exc, "offending", None)) from exc
        L.set_params(params)
        trace.objective.append(value)
        trace.ood_rate.append(ood)
        trace.grad_norm.append(float(np.sqrt(sum(float(np.sum(g * g)) for g in grads))))
        if (it + 1) % config.checkpoint_every == 0:
            last_good = [p.copy() for p in params]
            if on_checkpoint is not None:
                on_checkpoint(it + 1, last_good)
            log.info("iter %d objective %.4f", it + 1, value)
    trace.seconds = time.perf_counter() - t0
    return params, trace


def sample_direct(L, n, rng):
    """Flow-only samples (no MCMC): theta = floor(T_phi(z)), z ~ N(0, I)."""
    z = rng.standard_normal((n, L.d))
    theta, _ = L.push(z)
    return theta

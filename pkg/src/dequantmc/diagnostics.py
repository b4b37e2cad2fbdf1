"""Effective sample size and the grouped reporting used in the result tables."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError

__all__ = ["ess_1d", "ess_multichain", "grouped_ess", "EssReport", "ess_per_minute",
           "mean_logprob", "tv_distance", "RESULT_COLUMNS", "append_result_row"]

PER = 10_000
RESULT_COLUMNS = ["sampler", "target", "ess_mean", "ess_stderr", "ess_per_min",
                  "logpi_mean", "logpi_stderr", "wall_clock_s"]


def _autocorr(x):
    """Autocorrelation around the pooled mean, averaged over chains.

    x: (m, n, k) -> (rho of shape (k, n), variance (k,)).
    """
    m, n, _ = x.shape
    xc = x - x.mean(axis=(0, 1), keepdims=True)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].mean(axis=0) / n  # (n, k)
    var = acov[0].copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (acov / var).T
    return rho, var


def ess_multichain(x):
    """ESS per column of x with shape (m chains, n draws, k dims).

    Returns (ess (k,), degenerate (k,) bool). Constant columns get ess = m*n.
    """
    x = np.asarray(x, dtype=np.float64)
    m, n, k = x.shape
    if m * n < 2:
        raise ConfigError("need at least two draws")
    rho, var = _autocorr(x)
    scale = np.maximum(np.abs(x).max(axis=(0, 1)), 1.0)
    degenerate = var <= (1e-14 * scale) ** 2
    ess = np.full(k, float(m * n))
    live = ~degenerate
    if np.any(live):
        tau = kernels.geyer_tau(np.ascontiguousarray(rho[live]))
        ess[live] = np.clip(m * n / np.maximum(tau, 1e-12), np.finfo(float).tiny, m * n)
    return ess, degenerate


def ess_1d(series, return_flag=False):
    """Geyer initial-monotone-sequence ESS of a single chain, clipped to (0, N]."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size < 10:
        raise ConfigError("ess_1d needs at least 10 draws")
    ess, deg = ess_multichain(x[None, :, None])
    return (float(ess[0]), bool(deg[0])) if return_flag else float(ess[0])


@dataclass
class EssReport:
    """ESS is per 10^4 kept samples; stderr is across chain groups."""

    ess_mean: float
    ess_stderr: float
    group_ess: list
    n_samples: int
    ess_per_min: float = float("nan")
    logpi_mean: float = float("nan")
    logpi_stderr: float = float("nan")
    wall_clock_s: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def row(self, sampler, target):
        return {"sampler": sampler, "target": target, "ess_mean": self.ess_mean,
                "ess_stderr": self.ess_stderr, "ess_per_min": self.ess_per_min,
                "logpi_mean": self.logpi_mean, "logpi_stderr": self.logpi_stderr,
                "wall_clock_s": self.wall_clock_s}


def grouped_ess(samples, group_size=16):
    """Mean-over-dimensions ESS for each block of ``group_size`` chains.

    samples: (n_chains, n_draws, d). Each group's chains are pooled around the
    group mean; the mean ESS over dimensions is scaled to 10^4 samples.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, :, None]
    n_chains, n_draws, _ = s.shape
    if group_size <= 0 or n_chains % group_size:
        raise ConfigError(f"{n_chains} chains are not divisible into groups of {group_size}")
    groups = []
    n_group = group_size * n_draws
    for g in range(n_chains // group_size):
        ess, _ = ess_multichain(s[g * group_size:(g + 1) * group_size])
        groups.append(float(ess.mean()) * PER / n_group)
    groups_a = np.array(groups)
    se = float(groups_a.std(ddof=1) / np.sqrt(groups_a.size)) if groups_a.size > 1 else 0.0
    return EssReport(float(groups_a.mean()), se, groups, int(n_chains * n_draws))


def ess_per_minute(report, sampling_seconds, training_seconds=0.0):
    """Total effective samples divided by wall-clock minutes (training included)."""
    total = sampling_seconds + training_seconds
    if sampling_seconds <= 0 or training_seconds < 0:
        raise ConfigError("times must be positive")
    return report.ess_mean * report.n_samples / PER / (total / 60.0)


def mean_logprob(samples, target=None, values=None):
    """Mean of log pi over kept samples with a standard error.

    ``samples`` is (n_chains, n_draws, d). With several chains the error is the
    spread of per-chain means over sqrt(n_chains), which stays honest under
    autocorrelation; a single chain falls back to std / sqrt(n).
    """
    if values is None:
        s = np.asarray(samples)
        if s.ndim == 2:
            s = s[None]
        values = target.log_prob(s.reshape(-1, s.shape[-1])).reshape(s.shape[:2])
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ConfigError("no samples")
    mean = float(values.mean())
    if values.size == 1:
        return mean, 0.0
    if values.shape[0] > 1:
        cm = values.mean(axis=1)
        return mean, float(cm.std(ddof=1) / np.sqrt(cm.size))
    v = values.ravel()
    return mean, float(v.std(ddof=1) / np.sqrt(v.size))


def tv_distance(p, q):
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def append_result_row(path, row):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        if new:
            wr.writeheader()
        wr.writerow({k: row[k] for k in RESULT_COLUMNS})

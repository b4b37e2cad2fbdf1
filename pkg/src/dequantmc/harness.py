"""Experiment commands: train, sample, baseline, compare, render-ising, eval-gmm.

Every command writes into a run directory. Sample, trace and checkpoint files
depend only on the config and seed; wall-clock timings go to the metadata JSON
and the results rows, never into the deterministic artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash
from .data import (binarize, corrupt, load_labeled_csv, load_mnist_idx, read_pgm,
                   read_samples_bin, read_samples_csv, standardize, synthetic_glyph, to_spins,
                   write_pgm, write_samples_bin, write_samples_csv)
from .diagnostics import (RESULT_COLUMNS, ess_per_minute, grouped_ess, mean_logprob,
                          tv_distance)
from .errors import ConfigError, DimensionError, FormatError
from .flows import build_dequant_flow, build_latent_flow, load_checkpoint, save_checkpoint
from .samplers import (adapt_step_size, hmc_latent_step, init_discrete_chains,
                       init_latent_chains, push_samples, run_chains, run_discrete)
from .targets import (BayesVarSelect, IsingDenoise, QuantizedLogReg, exact_distribution,
                      make_gmm2d, make_synthetic_bvs)
from .train import LatentDensity, fit, sample_direct

log = logging.getLogger(__name__)

__all__ = ["build_target", "build_flows", "derive_seed", "cmd_train", "cmd_sample",
           "cmd_baseline", "cmd_compare", "cmd_render_ising", "cmd_eval_gmm",
           "CHECKPOINT", "TRACE"]

CHECKPOINT = "checkpoint.dqfl"
TRACE = "trace.csv"
COMPARE_CSV = "comparison.csv"
COMPARE_JSON = "comparison.json"

# seed streams derived from the run seed
STREAM_INIT, STREAM_FLOW_CHAINS, STREAM_GIBBS, STREAM_DMH, STREAM_DIRECT = 1, 2, 3, 4, 5


def derive_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


# -- construction -----------------------------------------------------------------------


def build_target(cfg):
    """(target, info) for the config's [target] table; info holds images or data facts."""
    t = cfg.target
    kind = t["kind"]
    if kind == "gmm2d":
        target = make_gmm2d(seed=t["seed"], n_components=t["n_components"], bits=t["bits"],
                            radius=t["radius"], std=t["std"])
        return target, {}
    if kind == "ising":
        if t["source"] == "mnist":
            images = load_mnist_idx(t["idx_path"])
            if images.ndim != 3:
                raise FormatError(f"{t['idx_path']}: expected an IDX image file")
            if not 0 <= t["index"] < images.shape[0]:
                raise ConfigError(f"image index {t['index']} out of range")
            truth = binarize(images[t["index"]], t["tau"])
        else:
            truth = synthetic_glyph(t["size"])
        observed = corrupt(truth, t["corrupt_p"], seed=t["corrupt_seed"])
        target = IsingDenoise(to_spins(observed), beta=t["beta"], eta=t["eta"])
        return target, {"truth": truth, "corrupted": observed}
    if kind == "qlogreg":
        X, y, names = load_labeled_csv(t["csv_path"], t["label"])
        if t["standardize"]:
            X = standardize(X)
        target = QuantizedLogReg(X, y, bits=t["bits"], lo=t["lo"], hi=t["hi"])
        return target, {"features": names}
    if kind == "bvs":
        hyper = {"nu": t["nu"], "w": t["w"], "alpha": t["alpha"]}
        if t["csv_path"]:
            X, y, _ = load_labeled_csv(t["csv_path"], t["label"])
            return BayesVarSelect(X, y.astype(np.float64), **hyper), {}
        return make_synthetic_bvs(t["d"], t["k_informative"], t["n"], t["noise_sigma"],
                                  seed=t["seed"], **hyper)
    raise ConfigError(f"unknown target kind {kind!r}")


def build_flows(cfg, target, seed):
    rng = np.random.default_rng(derive_seed(seed, STREAM_INIT))
    hidden = tuple(int(h) for h in cfg.flow.hidden)
    latent = build_latent_flow(target.d, target.K, depth=cfg.flow.latent_depth, hidden=hidden,
                               rng=rng)
    dequant = build_dequant_flow(target.d, target.K, depth=cfg.flow.dequant_depth,
                                 hidden=hidden, rng=rng)
    return latent, dequant


# -- small I/O helpers ------------------------------------------------------------------


def _out(cfg, out=None):
    path = Path(out or cfg.run.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_meta(path, cfg, command, timing, outputs, extra=None):
    meta = {
        "command": command,
        "version": f"v{__version__}",
        "config_hash": config_hash(cfg),
        "seed": cfg.run.seed,
        "config": cfg.to_dict(),
        "timing": timing,
        "outputs": sorted(outputs),
    }
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def _write_results(path, row):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerow({k: row[k] for k in RESULT_COLUMNS})


def _write_samples(outdir, prefix, theta, write_csv):
    files = [f"{prefix}_samples.bin"]
    write_samples_bin(outdir / files[0], theta)
    if write_csv:
        files.append(f"{prefix}_samples.csv")
        write_samples_csv(outdir / files[1], theta)
    return files


def read_samples(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return read_samples_csv(path) if path.suffix == ".csv" else read_samples_bin(path)


def _training_seconds(outdir):
    meta = Path(outdir) / "train_meta.json"
    if meta.exists():
        return float(json.loads(meta.read_text())["timing"]["train_seconds"])
    return 0.0


def _report(samples, target, sampler, cfg, seconds, train_seconds, ess_input=None):
    rep = grouped_ess(samples if ess_input is None else ess_input, cfg.sampler.group_size)
    rep.logpi_mean, rep.logpi_stderr = mean_logprob(samples, target)
    rep.wall_clock_s = seconds + train_seconds
    rep.ess_per_min = ess_per_minute(rep, max(seconds, 1e-9), train_seconds)
    row = rep.row(sampler, cfg.name)
    return rep, row


# -- commands ---------------------------------------------------------------------------


def cmd_train(cfg, out=None):
    """Fit both flows; writes the checkpoint, trace CSV and train_meta.json."""
    cfg = cfg.scaled()
    outdir = _out(cfg, out)
    target, info = build_target(cfg)
    latent, dequant = build_flows(cfg, target, cfg.run.seed)
    L = LatentDensity(latent, dequant, target)
    train_cfg = type(cfg.train)(**{**cfg.train.to_dict(), "seed": cfg.run.seed})
    ckpt_meta = {"config_hash": config_hash(cfg), "seed": cfg.run.seed, "target": cfg.kind}

    def on_checkpoint(iteration, params):
        save_checkpoint(outdir / CHECKPOINT, latent, dequant, {**ckpt_meta, "iteration": iteration})

    t0 = time.perf_counter()
    _, trace = fit(L, train_cfg, on_checkpoint=None if train_cfg.iterations == 0 else on_checkpoint)
    seconds = time.perf_counter() - t0
    save_checkpoint(outdir / CHECKPOINT, latent, dequant,
                    {**ckpt_meta, "iteration": train_cfg.iterations})
    trace.to_csv(outdir / TRACE)
    outputs = [CHECKPOINT, TRACE, "train_meta.json"]
    if "truth" in info:
        write_pgm(outdir / "truth.pgm", info["truth"])
        write_pgm(outdir / "corrupted.pgm", info["corrupted"])
        outputs += ["truth.pgm", "corrupted.pgm"]
    final = float(np.mean(trace.objective[-100:])) if len(trace) else float("nan")
    _write_meta(outdir / "train_meta.json", cfg, "train", {"train_seconds": seconds}, outputs,
                {"final_objective": final, "iterations": train_cfg.iterations})
    log.info("trained %d iterations in %.1fs", train_cfg.iterations, seconds)
    return {"outdir": outdir, "trace": trace, "seconds": seconds, "L": L}


def load_density(cfg, checkpoint):
    target, _ = build_target(cfg)
    latent, dequant, header = load_checkpoint(checkpoint)
    if header["d"] != target.d or header["K"] != target.K:
        raise DimensionError(f"checkpoint has d={header['d']}, K={header['K']} but the target "
                             f"has d={target.d}, K={target.K}")
    return LatentDensity(latent, dequant, target)


def cmd_sample(cfg, checkpoint=None, out=None):
    """Latent-space chains from a trained checkpoint; writes samples, report and results row."""
    cfg = cfg.scaled()
    outdir = _out(cfg, out)
    checkpoint = Path(checkpoint) if checkpoint else outdir / CHECKPOINT
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    L = load_density(cfg, checkpoint)
    s = cfg.sampler
    chains = init_latent_chains(L, s.chains, derive_seed(cfg.run.seed, STREAM_FLOW_CHAINS),
                                step_size=s.step_size, thin=s.thin)
    t0 = time.perf_counter()
    if s.adapt_steps:
        adapt_step_size(chains, L, s.adapt_steps, s.adapt_target)
    if s.kind == "flow-mh":
        z = run_chains(chains, L, s.steps, s.thin)
    else:
        z = np.empty((s.chains, s.steps // s.thin, L.d))
        for step in range(1, s.steps + 1):
            hmc_latent_step(chains, L, s.step_size, s.leapfrog)
            if step % s.thin == 0:
                z[:, step // s.thin - 1] = chains.z
    theta, ood = push_samples(L, z)
    seconds = time.perf_counter() - t0
    ess_input = z if s.ess_space == "z" else None
    rep, row = _report(theta, L.target, s.kind, cfg, seconds, _training_seconds(outdir), ess_input)
    rep.extra = {"acceptance_rate": float(chains.acceptance_rate.mean()),
                 "step_size": float(chains.step_size), "ood_rate": float(ood.mean()),
                 "kept_per_chain": int(theta.shape[1]), "ess_space": s.ess_space}
    files = _write_samples(outdir, s.kind, theta, s.write_csv)
    _write_results(outdir / f"results_{s.kind}.csv", row)
    (outdir / f"{s.kind}_report.json").write_text(rep.to_json() + "\n")
    files += [f"results_{s.kind}.csv", f"{s.kind}_report.json", f"{s.kind}_meta.json"]
    _write_meta(outdir / f"{s.kind}_meta.json", cfg, "sample",
                {"sampling_seconds": seconds, "train_seconds": _training_seconds(outdir)}, files)
    return {"outdir": outdir, "theta": theta, "report": rep, "chains": chains}


def cmd_baseline(cfg, kind=None, out=None):
    """Gibbs or single-site MH on the discrete target, with burn-in discarded."""
    cfg = cfg.scaled()
    kind = kind or cfg.sampler.baseline
    if kind not in ("gibbs", "discrete-mh"):
        raise ConfigError(f"unknown baseline {kind!r}; expected 'gibbs' or 'discrete-mh'")
    outdir = _out(cfg, out)
    target, _ = build_target(cfg)
    s = cfg.sampler
    stream = STREAM_GIBBS if kind == "gibbs" else STREAM_DMH
    chains = init_discrete_chains(target, s.chains, derive_seed(cfg.run.seed, stream))
    t0 = time.perf_counter()
    theta = run_discrete(chains, target, s.steps, s.thin, kind=kind, burn_in=s.baseline_burn_in)
    seconds = time.perf_counter() - t0
    rep, row = _report(theta, target, kind, cfg, seconds, 0.0)
    rep.extra = {"acceptance_rate": float(chains.acceptance_rate.mean()),
                 "burn_in": int(s.baseline_burn_in), "kept_per_chain": int(theta.shape[1])}
    files = _write_samples(outdir, kind, theta, s.write_csv)
    _write_results(outdir / f"results_{kind}.csv", row)
    (outdir / f"{kind}_report.json").write_text(rep.to_json() + "\n")
    files += [f"results_{kind}.csv", f"{kind}_report.json", f"{kind}_meta.json"]
    _write_meta(outdir / f"{kind}_meta.json", cfg, "baseline", {"sampling_seconds": seconds}, files)
    return {"outdir": outdir, "theta": theta, "report": rep, "chains": chains}


def cmd_compare(results_dir, out=None):
    """Merge every results CSV under ``results_dir`` into one table.

    One row per (sampler, target); a later file (in path order) replaces an
    earlier row for the same pair. Rows are sorted by target, then sampler.
    """
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    rows = {}
    for path in sorted(root.rglob("*.csv")):
        if path.name == COMPARE_CSV:
            continue
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RESULT_COLUMNS:
                continue
            for r in reader:
                rows[(r["sampler"], r["target"])] = r
    if not rows:
        raise ConfigError(f"no results rows under {root}")
    table = sorted(rows.values(), key=lambda r: (r["target"], r["sampler"]))
    outdir = Path(out) if out else root
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / COMPARE_CSV, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(table)
    typed = [{k: (r[k] if k in ("sampler", "target") else float(r[k])) for k in RESULT_COLUMNS}
             for r in table]
    (outdir / COMPARE_JSON).write_text(json.dumps({"columns": RESULT_COLUMNS, "rows": typed},
                                                  indent=2) + "\n")
    return table


def cmd_render_ising(samples, truth, corrupted, out, n_chains=8):
    """P5 images: truth, corrupted and the final sample of the first ``n_chains`` chains."""
    theta = read_samples(samples) if not isinstance(samples, np.ndarray) else samples
    truth_img = read_pgm(truth) if not isinstance(truth, np.ndarray) else truth
    corr_img = read_pgm(corrupted) if not isinstance(corrupted, np.ndarray) else corrupted
    truth_img = (np.asarray(truth_img) > 0).astype(np.int64)
    corr_img = (np.asarray(corr_img) > 0).astype(np.int64)
    h, w = truth_img.shape
    if corr_img.shape != (h, w):
        raise DimensionError("truth and corrupted images differ in shape")
    if theta.ndim != 3 or theta.shape[2] != h * w:
        raise DimensionError(f"samples have {theta.shape[-1]} sites, the image has {h * w}")
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pgm(outdir / "truth.pgm", truth_img)
    write_pgm(outdir / "corrupted.pgm", corr_img)
    written = ["truth.pgm", "corrupted.pgm"]
    for c in range(min(n_chains, theta.shape[0])):
        name = f"chain_{c:03d}.pgm"
        write_pgm(outdir / name, theta[c, -1].reshape(h, w))
        written.append(name)
    return written


def cmd_eval_gmm(cfg, samples, out=None):
    """TV distance between the sample histogram and the enumerated 2-d target."""
    target, _ = build_target(cfg)
    if target.d != 2:
        raise DimensionError("eval-gmm needs a 2-d grid target")
    theta = read_samples(samples) if not isinstance(samples, np.ndarray) else samples
    flat = np.asarray(theta).reshape(-1, theta.shape[-1])
    if flat.shape[0] == 0:
        raise ConfigError("no samples to evaluate")
    tv = gmm_tv(target, flat)
    result = {"tv": tv, "n_samples": int(flat.shape[0]), "K": int(target.K)}
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "eval_gmm.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def gmm_tv(target, flat):
    """TV between the empirical histogram of (n, 2) grid points and the exact target."""
    flat = np.asarray(flat, dtype=np.int64)
    if flat.size == 0:
        raise ConfigError("no samples to evaluate")
    if flat.ndim != 2 or flat.shape[1] != target.d:
        raise DimensionError("samples do not match the target dimension")
    grid, pmf, _ = exact_distribution(target)
    K = target.K
    idx = np.ravel_multi_index(tuple(flat.T), (K,) * target.d)
    gidx = np.ravel_multi_index(tuple(grid.T), (K,) * target.d)
    hist = np.bincount(idx, minlength=K ** target.d) / flat.shape[0]
    return tv_distance(hist[gidx], pmf)


def direct_samples(cfg, checkpoint, n):
    """Flow-only draws from a checkpoint (no MCMC), using a dedicated seed stream."""
    L = load_density(cfg, checkpoint)
    return sample_direct(L, n, np.random.default_rng(derive_seed(cfg.run.seed, STREAM_DIRECT)))

"""Experiment configuration: TOML files, shipped presets and desk scaling.

A config has five tables. ``[target]`` carries ``kind`` plus kind-specific keys,
``[flow]`` the architecture, ``[train]`` the optimizer settings, ``[sampler]``
the chain protocol and ``[run]`` the seed, output directory and desk-scale
factor. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .train import TrainConfig

__all__ = ["ExperimentConfig", "PRESETS", "TARGET_KINDS", "SAMPLER_KINDS", "load_config",
           "from_dict", "preset", "config_hash"]

TARGET_KINDS = ("gmm2d", "ising", "qlogreg", "bvs")
SAMPLER_KINDS = ("flow-mh", "flow-hmc")
BASELINE_KINDS = ("gibbs", "discrete-mh")

TARGET_DEFAULTS = {
    "gmm2d": {"n_components": 5, "bits": 6, "radius": 2.5, "std": 0.6, "seed": 0},
    "ising": {"source": "glyph", "size": 16, "idx_path": "", "index": 0, "tau": 0.5,
              "corrupt_p": 0.1, "corrupt_seed": 0, "beta": 1.0, "eta": 1.0},
    "qlogreg": {"csv_path": "", "label": "label", "bits": 4, "lo": -2.0, "hi": 2.0,
                "standardize": True},
    "bvs": {"csv_path": "", "label": "y", "d": 100, "k_informative": 10, "n": 1000,
            "noise_sigma": 1.0, "seed": 0, "nu": 10.0, "w": 1.0, "alpha": 1.0},
}


@dataclass
class FlowSpec:
    latent_depth: int = 8
    dequant_depth: int = 4
    hidden: list = field(default_factory=lambda: [64, 64])


@dataclass
class SamplerSpec:
    kind: str = "flow-mh"
    baseline: str = "gibbs"
    chains: int = 128
    steps: int = 100_000
    thin: int = 10
    baseline_burn_in: int = 100_000
    step_size: float = 0.25
    adapt_steps: int = 0
    adapt_target: float = 0.3
    leapfrog: int = 10
    group_size: int = 16
    ess_space: str = "theta"
    write_csv: bool = False


@dataclass
class RunSpec:
    seed: int = 0
    out: str = "runs/default"
    desk_scale: float = 1.0


@dataclass
class ExperimentConfig:
    """Resolved experiment; ``scaled()`` applies the desk-scale factor."""

    target: dict
    flow: FlowSpec = field(default_factory=FlowSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    run: RunSpec = field(default_factory=RunSpec)
    name: str = "custom"

    @property
    def kind(self):
        return self.target["kind"]

    def to_dict(self):
        return {"name": self.name, "target": dict(self.target), "flow": asdict(self.flow),
                "train": self.train.to_dict(), "sampler": asdict(self.sampler),
                "run": asdict(self.run)}

    def scaled(self):
        """Copy with iterations, steps and burn-in multiplied by ``run.desk_scale``.

        Steps stay a multiple of ``thin`` and at least one kept draw; the factor
        is reset to 1 so scaling is applied exactly once.
        """
        f = self.run.desk_scale
        cfg = copy.deepcopy(self)
        if f == 1.0:
            return cfg
        thin = cfg.sampler.thin
        iters = int(round(cfg.train.iterations * f))
        cfg.train = TrainConfig(**{**cfg.train.to_dict(), "iterations": iters,
                                   "checkpoint_every": max(1, min(cfg.train.checkpoint_every,
                                                                  iters or 1))})
        cfg.sampler.steps = max(thin, int(round(cfg.sampler.steps * f / thin)) * thin)
        cfg.sampler.baseline_burn_in = int(round(cfg.sampler.baseline_burn_in * f))
        cfg.run.desk_scale = 1.0
        return cfg

    def validate(self):
        kind = self.target.get("kind")
        if kind not in TARGET_KINDS:
            raise ConfigError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
        unknown = set(self.target) - set(TARGET_DEFAULTS[kind]) - {"kind"}
        if unknown:
            raise ConfigError(f"unknown [target] keys for {kind}: {sorted(unknown)}")
        for key in ("idx_path", "csv_path"):
            path = self.target.get(key, "")
            if path and not Path(path).exists():
                raise ConfigError(f"dataset path does not exist: {path}")
        if kind == "ising" and self.target["source"] not in ("glyph", "mnist"):
            raise ConfigError("ising source must be 'glyph' or 'mnist'")
        if kind == "ising" and self.target["source"] == "mnist" and not self.target["idx_path"]:
            raise ConfigError("ising source 'mnist' needs target.idx_path")
        if kind == "qlogreg" and not self.target["csv_path"]:
            raise ConfigError("qlogreg needs target.csv_path")
        s = self.sampler
        if s.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler {s.kind!r}; expected one of {SAMPLER_KINDS}")
        if s.baseline not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline {s.baseline!r}; expected one of {BASELINE_KINDS}")
        if s.ess_space not in ("theta", "z"):
            raise ConfigError("ess_space must be 'theta' or 'z'")
        if s.chains <= 0 or s.steps < 0 or s.thin <= 0 or s.baseline_burn_in < 0:
            raise ConfigError("chains and thin must be positive; steps and burn-in non-negative")
        if s.steps < s.thin:
            raise ConfigError("steps must cover at least one thinning interval")
        if s.step_size < 0 or s.leapfrog <= 0 or s.adapt_steps < 0:
            raise ConfigError("step_size >= 0, leapfrog > 0, adapt_steps >= 0 required")
        if s.group_size <= 0 or s.chains % s.group_size:
            raise ConfigError(f"{s.chains} chains do not split into groups of {s.group_size}")
        f = self.flow
        if f.latent_depth < 0 or f.dequant_depth < 0 or any(int(h) <= 0 for h in f.hidden):
            raise ConfigError("flow depths must be >= 0 and hidden widths positive")
        if not (self.run.desk_scale > 0 and math.isfinite(self.run.desk_scale)):
            raise ConfigError("desk_scale must be a positive number")
        return self


def _section(cls, values, name):
    values = dict(values or {})
    names = set(cls.__dataclass_fields__)
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown [{name}] keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def from_dict(raw, name="custom"):
    raw = dict(raw)
    unknown = set(raw) - {"target", "flow", "train", "sampler", "run", "name"}
    if unknown:
        raise ConfigError(f"unknown config tables: {sorted(unknown)}")
    target = dict(raw.get("target") or {})
    kind = target.get("kind")
    if kind not in TARGET_KINDS:
        raise ConfigError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    target = {"kind": kind, **TARGET_DEFAULTS[kind], **target}
    cfg = ExperimentConfig(
        target=target,
        flow=_section(FlowSpec, raw.get("flow"), "flow"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        sampler=_section(SamplerSpec, raw.get("sampler"), "sampler"),
        run=_section(RunSpec, raw.get("run"), "run"),
        name=str(raw.get("name", name)),
    )
    return cfg.validate()


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _bvs(d, k):
    return {"target": {"kind": "bvs", "d": d, "k_informative": k},
            "sampler": {"baseline": "gibbs"}, "run": {"out": f"runs/bvs-synth-{d}"}}


PRESETS = {
    "gmm2d": {"target": {"kind": "gmm2d"}, "sampler": {"step_size": 1.0},
              "run": {"out": "runs/gmm2d"}},
    "ising-mnist": {"target": {"kind": "ising", "source": "mnist"},
                    "sampler": {"step_size": 0.05}, "run": {"out": "runs/ising-mnist"}},
    "ising-small": {"target": {"kind": "ising", "source": "glyph", "size": 16},
                    "sampler": {"step_size": 0.05, "baseline": "discrete-mh"},
                    "run": {"out": "runs/ising-small"}},
    "qlogreg-csv": {"target": {"kind": "qlogreg"}, "sampler": {"baseline": "discrete-mh"},
                    "run": {"out": "runs/qlogreg"}},
    "bvs-synth-100": _bvs(100, 10),
    "bvs-synth-200": _bvs(200, 20),
    "bvs-synth-400": _bvs(400, 40),
}


def preset(name, overrides=None):
    """A shipped preset, optionally deep-merged with an override mapping."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(_merge(PRESETS[name], overrides or {}), name=name)


def load_config(path=None, preset_name=None):
    """Load a TOML config; a ``preset = "..."`` key (or ``preset_name``) supplies defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
    base = raw.pop("preset", None) or preset_name
    if base is not None:
        return preset(base, raw)
    if not raw:
        raise ConfigError("give a config file or a preset")
    return from_dict(raw, name=Path(path).stem)


def config_hash(cfg):
    """sha256 of the canonical JSON of a config, ignoring the output directory."""
    d = cfg.to_dict()
    d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

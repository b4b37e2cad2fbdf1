"""Command-line entry point: ``dequantmc <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
4 input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import PRESETS, load_config
from .errors import ConfigError, DimensionError, FormatError, NumericError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="shipped preset to start from")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--desk-scale", type=float, dest="desk_scale",
                   help="multiply iterations, steps and burn-in by this factor")
    p.add_argument("--out", help="output directory (default: run.out)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dequantmc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the latent and dequantization flows")
    _common(p)

    p = sub.add_parser("sample", help="run latent-space chains from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.dqfl)")

    p = sub.add_parser("baseline", help="run a discrete baseline sampler")
    _common(p)
    p.add_argument("--sampler", help="gibbs or discrete-mh (default: sampler.baseline)")

    p = sub.add_parser("compare", help="merge results rows into one table")
    p.add_argument("results_dir")
    p.add_argument("--out")

    p = sub.add_parser("render-ising", help="write PGM images of Ising samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--corrupted", required=True)
    p.add_argument("--chains", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-gmm", help="TV distance of samples against the exact 2-d target")
    _common(p)
    p.add_argument("--samples", required=True)
    return parser


def _config(args):
    if not args.config and not args.preset:
        raise ConfigError("give --config or --preset")
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.desk_scale is not None:
        cfg.run.desk_scale = args.desk_scale
    return cfg.validate()


def run(args):
    if args.command == "compare":
        table = harness.cmd_compare(args.results_dir, args.out)
        print(f"{len(table)} rows")
        return
    if args.command == "render-ising":
        files = harness.cmd_render_ising(args.samples, args.truth, args.corrupted, args.out,
                                         args.chains)
        print(f"wrote {len(files)} images to {args.out}")
        return
    cfg = _config(args)
    if args.command == "train":
        res = harness.cmd_train(cfg, args.out)
        print(f"trained in {res['seconds']:.1f}s -> {res['outdir']}")
    elif args.command == "sample":
        res = harness.cmd_sample(cfg, args.checkpoint, args.out)
        print(json.dumps(res["report"].row(cfg.sampler.kind, cfg.name)))
    elif args.command == "baseline":
        res = harness.cmd_baseline(cfg, args.sampler, args.out)
        print(json.dumps(res["report"].row(args.sampler or cfg.sampler.baseline, cfg.name)))
    elif args.command == "eval-gmm":
        print(json.dumps(harness.cmd_eval_gmm(cfg, args.samples, args.out)))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

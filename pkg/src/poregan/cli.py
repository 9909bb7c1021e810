"""Command-line entry point: ``poregan <stage> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 training
divergence, 3 missing prerequisite artifact. ``POREGAN_DEVICE`` selects
the compute device (cpu, cuda, cuda:N, auto).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, validate_config
from .core import DivergenceError, StateError, ValidationError
from .pipeline import ALIASES, DEFAULT_SEQUENCE, STAGES, MissingPrerequisite, expand_stages, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_MISSING = 0, 1, 2, 3

STAGE_HELP = {
    "prep-synth": "write the source corpus (synthetic, or an index of data.image_dir)",
    "prep-rev": "porosity std vs window size; picks the patch size",
    "prep-extract": "cut and porosity-label patches, assign porosity classes",
    "prep-balance": "balance (depth, class) cells by downsampling and augmentation",
    "seg-train": "train the attention U-Net porosity labeler",
    "seg-apply": "segment a directory of images",
    "seg-eval": "re-evaluate the labeler on its held-out tiles",
    "gan-train": "train the conditional GAN",
    "gan-generate": "generate images at a porosity and depth",
    "morph-analyze": "pore morphology of real vs generated patches, with statistics",
    "petro-score": "dual-constraint error of a directory of images",
    "petro-select": "pick minimum-error generated images and compare with real sub-images",
    "petro-report": "porosity-control report (R2, MAE) and run summary",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", help="YAML configuration file")
    p.add_argument("--toy", action="store_true", default=None,
                   help="desk-scale profile: 2 synthetic depths, 96 px images, reduced networks")
    p.add_argument("--seed", type=int, help="seed for every randomized step")
    p.add_argument("--root", help="run directory (overrides paths.root)")
    p.add_argument("-v", "--verbose", action="store_true")


def _gan_opts(p: argparse.ArgumentParser):
    p.add_argument("--arch", choices=["original", "modelA", "modelB"])
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poregan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("config", help="validate a config file and print it with defaults")
    _common(p)
    for name, text in STAGE_HELP.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("gan-train",):
            _gan_opts(p)
        if name == "gan-generate":
            p.add_argument("--phi", type=float, required=True, help="target porosity (0-1)")
            p.add_argument("--depth", type=int, required=True, help="depth index")
            p.add_argument("--n", type=int, default=1, help="number of images")
        if name in ("seg-apply", "morph-analyze", "petro-score"):
            p.add_argument("--input", required=name != "morph-analyze", help="directory of PNGs")
        if name == "seg-apply":
            p.add_argument("--output", help="mask directory (default: <root>/masks)")
        if name == "petro-score":
            p.add_argument("--depth", type=int, required=True, help="depth index of the targets")
    p = sub.add_parser("run", help="run several stages in order")
    _common(p)
    _gan_opts(p)
    p.add_argument("stages", nargs="*",
                   help=f"stages or aliases {sorted(ALIASES)} (default: {' '.join(DEFAULT_SEQUENCE)})")
    return parser


def _load(args):
    cfg = validate_config(args.config, toy=bool(args.toy))
    overrides = {"run.seed": args.seed, "paths.root": args.root,
                 "gan.arch": getattr(args, "arch", None), "gan.epochs": getattr(args, "epochs", None)}
    if args.toy:
        overrides["gan.toy"] = True
    return cfg.with_overrides(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "config":
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        if args.command == "run":
            stages = expand_stages(args.stages)
            results = {}
            for name in stages:
                results[name] = run_stage(name, cfg)
                print(json.dumps({"stage": name, "config_hash": cfg.hash,
                                  "summary": results[name]}, default=str), flush=True)
            return EXIT_OK
        opts = {}
        for key in ("phi", "depth", "n", "input", "output"):
            if getattr(args, key, None) is not None:
                opts[key] = getattr(args, key)
        if args.command == "gan-generate":
            opts["seed"] = cfg.seed
        summary = run_stage(args.command, cfg, **opts)
        print(json.dumps({"stage": args.command, "config_hash": cfg.hash, "summary": summary},
                         default=str))
        return EXIT_OK
    except MissingPrerequisite as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except StateError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())

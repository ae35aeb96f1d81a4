"""Command-line entry point: ``evcomplete <verb> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as pl

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--steps", type=int, help="fast sampler steps")
    p.add_argument("--ball-query", action="store_true", help="ablation: Euclidean ball grouping")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
    p.add_argument("--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evcomplete", description="Sparse-to-dense event completion.")
    sub = ap.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("gen-data", help="simulate synthetic dense/sparse pairs")
    _common(p)
    p = sub.add_parser("slice", help="cut a recording into dense/sparse pairs")
    p.add_argument("input")
    _common(p)
    p = sub.add_parser("train-edn", help="train the diffusion network")
    p.add_argument("--data", required=True)
    _common(p)
    p = sub.add_parser("cache-coarse", help="sample and store coarse completions")
    p.add_argument("--data", required=True)
    p.add_argument("--edn", required=True)
    _common(p)
    p = sub.add_parser("train-ern", help="train the refinement network")
    p.add_argument("--data", required=True)
    p.add_argument("--coarse", required=True)
    _common(p)
    p = sub.add_parser("complete", help="complete a sparse event file")
    p.add_argument("input")
    p.add_argument("--edn", required=True)
    p.add_argument("--ern", required=True)
    _common(p)
    p = sub.add_parser("eval", help="score completions on held-out pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--edn", required=True)
    p.add_argument("--ern", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    _common(p)
    p = sub.add_parser("render", help="accumulation image of an event file")
    p.add_argument("input")
    _common(p)
    return ap


def resolve_config(args) -> pl.RunConfig:
    cfg = pl.toy_preset() if args.toy else pl.RunConfig()
    if args.config:
        cfg = pl.load_config(args.config, cfg)
    if args.set:
        cfg = pl.parse_config("\n".join(args.set), cfg)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        kw["threads"] = args.threads
    if args.steps is not None:
        kw["fast_steps"] = args.steps
    if args.ball_query:
        kw["use_ball_query"] = True
    return pl.override(cfg, **kw)


def _ern_subset(pairs, cfg):
    return pairs[:cfg.ern_pairs] if cfg.ern_pairs else pairs


def run(args) -> None:
    cfg = resolve_config(args)
    with threadpool_limits(cfg.threads):
        _dispatch(args, cfg, Path(args.out))


def _dispatch(args, cfg, out) -> None:
    if args.verb == "gen-data":
        pl.save_pairs(pl.generate_pairs(cfg), out)
    elif args.verb == "slice":
        pl.save_pairs(pl.slice_pairs(args.input, cfg), out)
    elif args.verb == "train-edn":
        pl.train_edn(pl.split_pairs(pl.load_pairs(args.data), cfg, "train"), cfg, out)
    elif args.verb == "cache-coarse":
        pairs = _ern_subset(pl.split_pairs(pl.load_pairs(args.data), cfg, "train"), cfg)
        pl.cache_coarse(pl.load_model(args.edn), cfg, pairs, out)
    elif args.verb == "train-ern":
        pairs = _ern_subset(pl.split_pairs(pl.load_pairs(args.data), cfg, "train"), cfg)
        pl.train_ern(pairs, pl.load_coarse(args.coarse, pairs), cfg, out)
    elif args.verb == "complete":
        pl.complete_file(args.input, pl.load_model(args.edn), pl.load_model(args.ern), cfg, out)
    elif args.verb == "eval":
        pairs = pl.split_pairs(pl.load_pairs(args.data), cfg, args.split)
        report = pl.evaluate(pl.load_model(args.edn), pl.load_model(args.ern), cfg, pairs)
        pl.write_report(report, out)
        print(report.summary())
    elif args.verb == "render":
        pl.render(args.input, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        run(args)
    except pl.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.DataError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except pl.Divergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

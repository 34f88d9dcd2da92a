"""Command line: ``histocluster <stage> --manifest M --out DIR [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig


def _tuple(s):
    return tuple(int(v) for v in s.split(","))


def _bool(s):
    return s.lower() in ("1", "true", "yes", "on")


# flag -> (path in RunConfig, parser)
FLAGS = {
    "tile-size": (("tile_size",), int),
    "scale": (("scale",), int),
    "min-component": (("min_component",), int),
    "qc-threshold": (("qc_threshold",), float),
    "qc-train-cap": (("qc_train_cap",), int),
    "qc-epochs": (("qc", "epochs"), int),
    "qc-lr": (("qc", "lr"), float),
    "qc-widths": (("qc", "widths"), _tuple),
    "k": (("train", "k"), int),
    "lam": (("train", "lam"), float),
    "epochs": (("train", "epochs"), int),
    "lr": (("train", "base_lr"), float),
    "weight-decay": (("train", "weight_decay"), float),
    "lr-decay": (("train", "lr_decay"), float),
    "lr-period": (("train", "lr_period"), int),
    "batch-size": (("train", "batch_size"), int),
    "sample-cap": (("train", "sample_cap"), int),
    "widths": (("train", "widths"), _tuple),
    "blocks-per-stage": (("train", "blocks_per_stage"), int),
    "normalize-cluster-term": (("train", "normalize_cluster_term"), _bool),
    "sample-per-cluster": (("sample_per_cluster",), int),
    "alpha": (("alpha",), float),
    "ties": (("ties",), str),
    "stars": (("stars",), str),
    "annotations": (("annotations",), str),
    "seed": (("seed",), int),
}


def build_parser():
    p = argparse.ArgumentParser(prog="histocluster", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES + ["run"]:
        sp = sub.add_parser(name, help="all stages" if name == "run" else f"{name} stage")
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
        sp.add_argument("--force", action="store_true", help="rerun even if outputs are current")
        sp.add_argument("-v", "--verbose", action="store_true")
        for flag, (_, typ) in FLAGS.items():
            sp.add_argument(f"--{flag}", type=typ if typ is not _bool else str, default=None)
    return p


def config_from_args(args):
    d = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            d = json.load(fh)
    base = RunConfig.from_dict(d).to_dict()
    if d.get("scale") is None:
        base["scale"] = None
    for flag, (path, typ) in FLAGS.items():
        val = getattr(args, flag.replace("-", "_"))
        if val is None:
            continue
        if typ is _bool:
            val = _bool(val)
        node = base
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = val
    return RunConfig.from_dict(base)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        stages = None if args.command == "run" else [args.command]
        run = pipeline.run_pipeline(args.manifest, cfg, args.out, stages, args.force)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    ran = ", ".join(run.executed) or "nothing (all stages current)"
    print(f"{args.out}: ran {ran}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

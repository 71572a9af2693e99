"""Command line interface.

Exit codes: 0 success, 1 usage, 2 data error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import BinningConfig
from .dynamics import DynamicsConfig
from .errors import DataError
from .pipeline import (
    PipelineConfig,
    cmd_pipeline,
    cmd_recalibrate,
    cmd_render,
    cmd_stats,
    cmd_update,
    pipeline_plan,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shared(p):
    g = p.add_argument_group("shared")
    g.add_argument("--config", help="JSON config file; flags override its values")
    g.add_argument("--seed", type=int, help="top-level RNG seed (unsigned 64-bit)")
    g.add_argument("--workers", type=int, help="worker processes for recalibrate/render")
    g.add_argument("--out", help="output directory")
    g.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
    g.add_argument("-v", "--verbose", action="store_true")


def _stats_opts(p):
    g = p.add_argument_group("stats")
    g.add_argument("--annotations", help="COCO annotation JSON")
    g.add_argument("--embeddings", help="JSON Lines of {instance_id, embedding}")
    g.add_argument("--images", help="image directory for the crop-descriptor fallback")
    g.add_argument("--beta", type=float)
    g.add_argument("--size-thresholds", type=float, nargs="+", metavar="AREA")
    g.add_argument("--u-bins", type=int)
    g.add_argument("--lowest", type=int, dest="report_lowest", help="groups listed in the report")
    g.add_argument("--plots", action="store_true", default=None, help="also write histogram PNGs")


def _recalib_opts(p):
    g = p.add_argument_group("recalibration")
    g.add_argument("--tau", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--kappa", type=float)
    g.add_argument("--sigma-y", type=float, help="vertical jitter std in pixels (default 5%% of height)")
    g.add_argument("--max-new-instances", type=int)
    g.add_argument("--recalib-fraction", type=float)
    g.add_argument("--seeds", help="seed layouts (JSON Lines); default: every annotated image")


def _render_opts(p):
    g = p.add_argument_group("blueprint")
    g.add_argument("--fill-alpha", type=float)
    g.add_argument("--value-step", type=float, help="HSV value decrement per extra instance")
    g.add_argument("--v-min", type=float)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--variant", help="file name suffix, {image_id}_{variant}.png")


def _update_opts(p):
    g = p.add_argument_group("dynamics")
    g.add_argument("--errors", help="error stream (JSON Lines)")
    g.add_argument("--mu", type=float)
    g.add_argument("--loss-divisor", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsdebias", description="Representation-score dataset debiasing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="score data groups and write a bias report")
    _shared(p)
    _stats_opts(p)

    p = sub.add_parser("recalibrate", help="debias seed layouts with an RS table")
    _shared(p)
    p.add_argument("--annotations")
    p.add_argument("--table", help="RS table JSON")
    _recalib_opts(p)

    p = sub.add_parser("render", help="render layouts as blueprint PNGs")
    _shared(p)
    p.add_argument("--layouts", help="layouts JSON Lines")
    p.add_argument("--table", help="RS table (sizes the palette)")
    p.add_argument("--annotations", help="annotations (sizes the palette)")
    _render_opts(p)

    p = sub.add_parser("update", help="refine an RS table from an error stream")
    _shared(p)
    p.add_argument("--table", help="RS table JSON")
    _update_opts(p)

    p = sub.add_parser("pipeline", help="stats, recalibrate, render and optional update")
    _shared(p)
    _stats_opts(p)
    _recalib_opts(p)
    _render_opts(p)
    _update_opts(p)
    return parser


RECALIB_FLAGS = ("tau", "epsilon", "kappa", "sigma_y", "max_new_instances", "recalib_fraction")


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    opts = vars(args)
    changes = {}
    for name in ("annotations", "embeddings", "images", "errors", "seeds", "table", "layouts",
                 "out", "beta", "workers", "fill_alpha", "value_step", "v_min", "num_classes",
                 "variant", "report_lowest", "plots"):
        if opts.get(name) is not None:
            changes[name] = opts[name]
    if opts.get("size_thresholds") is not None or opts.get("u_bins") is not None:
        thresholds = opts.get("size_thresholds") or cfg.binning.size_thresholds
        changes["binning"] = BinningConfig(
            s_bins=len(thresholds) + 1,
            size_thresholds=tuple(thresholds),
            u_bins=opts.get("u_bins") or cfg.binning.u_bins,
        )
    recalib = {k: opts[k] for k in RECALIB_FLAGS if opts.get(k) is not None}
    if opts.get("seed") is not None:
        recalib["rng_seed"] = opts["seed"]
    if recalib:
        changes["recalib"] = replace(cfg.recalib, **recalib)
    dyn = {k: opts[k] for k in ("mu", "loss_divisor") if opts.get(k) is not None}
    if dyn:
        changes["dynamics"] = DynamicsConfig(**{**vars(cfg.dynamics), **dyn})
    return replace(cfg, **changes) if changes else cfg


def _plan(args, cfg) -> list[str]:
    out = Path(cfg.out)
    lines = [f"config digest {cfg.digest()}"]
    if args.command == "pipeline":
        for name, path in pipeline_plan(cfg):
            lines.append(f"{name}: -> {path}")
        lines.append(f"manifest: -> {out / 'manifest.json'}")
    else:
        lines.append(f"{args.command}: -> {out}")
    return lines


def run(args) -> int:
    cfg = config_from_args(args)
    if args.dry_run:
        print("\n".join(_plan(args, cfg)))
        return EXIT_OK
    if args.command == "stats":
        outputs = cmd_stats(cfg)
    elif args.command == "recalibrate":
        outputs = cmd_recalibrate(cfg)
    elif args.command == "render":
        outputs = cmd_render(cfg)
    elif args.command == "update":
        outputs = cmd_update(cfg)
    else:
        outputs = [cmd_pipeline(cfg)]
    summary = {"command": args.command, "config_digest": cfg.digest(),
               "outputs": [str(p) for p in outputs[:20]], "num_outputs": len(outputs)}
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

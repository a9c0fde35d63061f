"""Command-line entry point: ``rangesr <subcommand> ...``.

Exit codes: 0 success, 1 domain error (printed as ``error: <ErrorName>: ...``),
2 usage error (bad arguments, unknown or malformed config keys).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as config_mod
from .errors import InvalidConfig, RangeSRError

log = logging.getLogger("rangesr")


class UsageError(Exception):
    pass


def _config_epilog():
    lines = ["config keys (set in --config files as `key = value`, or with --set key=value):"]
    for k, v in config_mod.all_keys().items():
        lines.append(f"  {k} = {config_mod._fmt(v)}")
    return "\n".join(lines)


def load_config(args):
    """Config file (defaults if absent) plus --set overrides; errors are usage errors."""
    try:
        overrides = config_mod.parse_overrides(getattr(args, "set", None) or [])
        if getattr(args, "regime", None):
            overrides["train.regime"] = args.regime
        if getattr(args, "seed_override", None) is not None:
            overrides["train.seed"] = str(args.seed_override)
        if not args.config:
            return config_mod.loads("", overrides)
        cfg = config_mod.load(args.config, overrides)
        cmap = cfg.data.class_map
        if cmap and not os.path.isabs(cmap) and not os.path.exists(cmap):
            # relative class-map paths are read next to the config file
            cfg = cfg.replace(**{"data.class_map": os.path.join(os.path.dirname(args.config), cmap)})
        return cfg
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc


def _class_map(cfg):
    from .rangeview import read_class_map

    return read_class_map(cfg.data.class_map) if cfg.data.class_map else None


def _corpus(cfg, directory, with_labels=True):
    from .rangeview import ingest_corpus

    return ingest_corpus(directory, cfg.data.scan_format, with_labels, _class_map(cfg))


def _sibling(path, suffix):
    stem, _ = os.path.splitext(str(path))
    return stem + suffix


# -- subcommands ----------------------------------------------------------------


def cmd_project(args, cfg):
    from .plotting import plot_range_image
    from .rangeview import ingest_scan, project, save_range_image

    cloud = ingest_scan(args.scan, cfg.data.scan_format, args.labels, _class_map(cfg))
    img, labels = project(cloud, cfg.geometry)
    save_range_image(args.out, img, labels if args.labels else None)
    fig = args.figure or _sibling(args.out, ".png")
    plot_range_image(img, fig, labels if args.labels else None)
    print(f"{args.out}\t{img.valid.sum()} valid pixels\t{fig}")


def cmd_degrade(args, cfg):
    from .plotting import plot_range_image
    from .rangeview import degrade, degrade_labels, load_range_image, save_range_image

    img, labels = load_range_image(args.image)
    if img.geometry != cfg.geometry:
        raise UsageError(f"{args.image} was projected with {img.geometry}, config says {cfg.geometry}")
    lo = degrade(img, cfg.spec)
    lo_labels = degrade_labels(labels, cfg.spec) if labels is not None else None
    save_range_image(args.out, lo, lo_labels)
    fig = args.figure or _sibling(args.out, ".png")
    plot_range_image(lo, fig, lo_labels)
    print(f"{args.out}\trows {list(cfg.spec.selected_rows)}\t{fig}")


def cmd_synth(args, cfg):
    from .rangeview import write_scan
    from .synthetic import SceneConfig, desk_scene_config, generate_synthetic

    scene = SceneConfig.from_file(args.scene_config) if args.scene_config else desk_scene_config()
    scene.geometry = cfg.geometry
    clouds = generate_synthetic(args.seed, scene, args.scenes)
    os.makedirs(args.out, exist_ok=True)
    for i, c in enumerate(clouds):
        write_scan(c, os.path.join(args.out, f"{i:06d}.bin"), os.path.join(args.out, f"{i:06d}.label"))
    print(f"{args.out}\t{len(clouds)} scans")


def cmd_stats(args, cfg):
    from .losses import class_weights
    from .rangeview import project

    clouds = _corpus(cfg, args.corpus)
    labels = [project(c, cfg.geometry)[1] for c in clouds]
    cw = class_weights(labels, cfg.seg.num_classes)
    text = cw.to_table()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_train(args, cfg):
    from .losses import ClassWeights
    from .pipeline import train
    from .plotting import plot_training_curves

    clouds = _corpus(cfg, args.corpus)
    val = _corpus(cfg, args.val) if args.val else None
    weights = None
    if args.class_freq:
        with open(args.class_freq) as fh:
            weights = ClassWeights.from_table(fh.read())
    log_path = args.log or _sibling(args.out, ".jsonl")
    ckpt = train(cfg, clouds, val_corpus=val, log_path=log_path, out_path=args.out, weights=weights)
    fig = _sibling(args.out, "_curves.png")
    if ckpt.history:
        plot_training_curves(ckpt.history, fig)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"{args.out}\tepoch {last.get('epoch')}\tloss {last.get('losses', {}).get('total')}"
          f"\tval_miou {last.get('val_miou')}\t{log_path}\t{fig}")


def cmd_eval(args, cfg):
    from .evalkit import emit_report, render_report
    from .pipeline import build_model, evaluate
    from .plotting import plot_class_iou

    model, mcfg = build_model(args.checkpoint)
    clouds = _corpus(mcfg, args.corpus)
    result = evaluate(model, clouds, mode=args.mode, name=args.name, cfg=mcfg)
    if args.out:
        emit_report(result, args.format, args.out)
        plot_class_iou([result], args.figure or _sibling(args.out, ".png"))
    else:
        sys.stdout.write(render_report(result, args.format))
        if args.figure:
            plot_class_iou([result], args.figure)


def cmd_infer(args, cfg):
    from .pipeline import build_model, infer_with_model
    from .rangeview import ingest_scan, write_scan

    model, mcfg = build_model(args.checkpoint)
    cloud = ingest_scan(args.scan, mcfg.data.scan_format, False)
    out = infer_with_model(model, mcfg, cloud)
    label_path = args.labels_out or _sibling(args.out, ".label")
    write_scan(out, args.out, label_path)
    print(f"{args.out}\t{len(out.points)} points\t{label_path}")


def cmd_bench(args, cfg):
    from .evalkit import bench_fps
    from .pipeline import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    clouds = _corpus(ckpt.config, args.corpus, with_labels=False)
    out = bench_fps(ckpt, clouds, args.warmup, args.iters)
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_report(args, cfg):
    from .evalkit import load_results, render_report
    from .plotting import plot_class_iou

    results = []
    for path in args.results:
        results.extend(load_results(path))
    if args.bench:
        for r, path in zip(results, args.bench):
            with open(path) as fh:
                b = json.load(fh)
            r.fps = b["fps"]
            r.params = b.get("params", r.params)
    # one result keeps the per-class layout; several give one row per config
    text = render_report(results[0] if len(results) == 1 else results, args.format)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
        fig = args.figure or _sibling(args.out, ".png")
    else:
        sys.stdout.write(text)
        fig = args.figure
    if fig:
        plot_class_iou(results, fig)


# -- parser -------------------------------------------------------------------


def build_parser():
    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="rangesr", formatter_class=fmt, epilog=epilog,
        description="Segmentation-guided range-image super-resolution and segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=fmt)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override one config key (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("project", cmd_project, "project a scan into a range image (.npz + .png)")
    p.add_argument("scan")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", action="store_true", help="also read and project the .label file")
    p.add_argument("--figure")

    p = add("degrade", cmd_degrade, "keep the configured low-res rows of a projected image")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--figure")

    p = add("synth", cmd_synth, "write a labeled synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--scene-config", help="JSON scene description")

    p = add("stats", cmd_stats, "class-frequency table of a labeled corpus")
    p.add_argument("corpus")
    p.add_argument("--out")

    p = add("train", cmd_train, "train one regime; writes checkpoint, metrics log and curves")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--val", help="validation corpus (default: split from train)")
    p.add_argument("--log", help="metrics log (default: <out>.jsonl)")
    p.add_argument("--regime", choices=config_mod.REGIMES)
    p.add_argument("--seed", type=int, dest="seed_override")
    p.add_argument("--class-freq", help="table written by `stats`")

    p = add("eval", cmd_eval, "score a checkpoint on a labeled corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--mode", choices=("pixel", "point"), default="pixel")
    p.add_argument("--format", default="csv")
    p.add_argument("--name", default="model")
    p.add_argument("--out")
    p.add_argument("--figure")

    p = add("infer", cmd_infer, "label the points of one scan")
    p.add_argument("checkpoint")
    p.add_argument("scan")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")

    p = add("bench", cmd_bench, "inference throughput")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out")

    p = add("report", cmd_report, "combine eval results into csv/json/markdown plus a figure")
    p.add_argument("results", nargs="+", help="json files written by `eval --format json`")
    p.add_argument("--bench", nargs="*", help="bench json per result, in order")
    p.add_argument("--format", default="markdown_table")
    p.add_argument("--out")
    p.add_argument("--figure")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except RangeSRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

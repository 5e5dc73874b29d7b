"""Command-line entry points.

Subcommands cover the full loop: ``gen-data`` renders train and eval
splits, ``train`` runs the backbone or block stage, ``sample`` generates
view sets from a checkpoint, ``eval`` scores generated views against
ground truth, and ``pipeline`` chains all of them (``pipeline --smoke``
finishes in minutes on a 4-object, 16x16-latent configuration).

No environment variables are consulted; behavior is fully determined by
flags and the config file. Exit codes by failure class:

* 0 success
* 2 configuration errors, including config-hash mismatches between artifacts
* 3 missing or malformed data (datasets, checkpoints, generated dirs)
* 4 non-finite values encountered during training or sampling
* 1 anything else
"""

import argparse
import math
import os
import sys

import numpy as np

from .config import ConfigError, load_config, smoke_config
from .engine import NonFiniteError
from .metrics import MetricReport, write_reports
from .synthdata import load_dataset, make_dataset
from .tensorio import FormatError, save_ppm
from .train import (
    DataError,
    evaluate_generated,
    generate_views,
    load_model,
    pretrain_backbone,
    read_generation_manifest,
    train_blocks,
    write_generated,
    write_generation_manifest,
)

__all__ = ["main"]


def _resolve_config(args, need_seed_override=True):
    if getattr(args, "smoke", False):
        return smoke_config(seed=args.seed if args.seed is not None else 0)
    if not args.config:
        raise ConfigError("either --config PATH or --smoke is required")
    if need_seed_override and args.seed is not None:
        return load_config(args.config, seed=args.seed)
    return load_config(args.config)


def _open_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc


def cmd_gen_data(args):
    cfg = _resolve_config(args)
    train_dir = os.path.join(args.out, "train")
    eval_dir = os.path.join(args.out, "eval")
    common = dict(
        n_views=cfg.views,
        seed=cfg.seed,
        image_size=cfg.image_size,
        radius=cfg.radius,
        focal_scale=cfg.focal_scale,
        config_hash=cfg.content_hash(),
    )
    train = make_dataset(
        train_dir,
        cfg.train_objects,
        elevation=f"random:{cfg.elevation_max}",
        **common,
    )
    evald = make_dataset(
        eval_dir,
        cfg.eval_objects,
        elevation=tuple(cfg.eval_elevations),
        first_object=cfg.train_objects,
        **common,
    )
    for name, reader in (("train", train), ("eval", evald)):
        print(
            f"{name}: {reader.n_objects} objects x {reader.n_views} views "
            f"at {reader.image_size}px under {reader.root}"
        )
    print(f"config_hash {cfg.content_hash()}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    reader = _open_dataset(args.data)
    if args.stage == "backbone":
        history = pretrain_backbone(cfg, reader, args.out, log=print)
    else:
        if not args.checkpoint:
            raise ConfigError("--stage blocks requires --checkpoint BACKBONE_DIR")
        history = train_blocks(cfg, reader, args.checkpoint, args.out, log=print)
    print(f"{args.stage}: {len(history)} steps, final loss {history[-1][1]:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _image_grid(imgs):
    """Tile (3, H, W) images into a near-square grid, padding with black."""
    n = len(imgs)
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    _, h, w = imgs[0].shape
    grid = np.zeros((3, rows * h, cols * w), dtype=np.float32)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[:, r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return grid


def cmd_sample(args):
    cfg = _resolve_config(args, need_seed_override=False)
    reader = _open_dataset(args.data)
    params, ctx = load_model(args.checkpoint, cfg, with_blocks=False if args.no_blocks else None)
    seed = args.seed if args.seed is not None else cfg.seed
    if args.object is not None:
        if not 0 <= args.object < reader.n_objects:
            raise DataError(f"--object {args.object} outside [0, {reader.n_objects})")
        positions = [args.object]
    else:
        positions = list(range(reader.n_objects))
    lines = []
    for pos in positions:
        obj = reader.load_object(pos)
        lats, imgs = generate_views(cfg, params, ctx, obj, seed)
        lines.append(write_generated(args.out, cfg, obj, lats, imgs, seed, ctx is not None))
        base = os.path.join(args.out, f"obj_{obj.index:04d}")
        for v, img in enumerate(imgs):
            save_ppm(os.path.join(base, f"gen_{v:02d}.ppm"), img)
        save_ppm(os.path.join(base, "grid.ppm"), _image_grid(imgs))
        print(f"object {obj.index}: {len(imgs)} views -> {base}")
    write_generation_manifest(args.out, cfg, lines, seed, blocks=ctx is not None)
    print(f"manifest written to {os.path.join(args.out, 'manifest.txt')}")
    return 0


def _pooled_by_elevation(reports, elevations):
    pools = {}
    for rep in reports:
        pools.setdefault(elevations[rep.object_id], []).append(rep)
    lines = []
    for elev in sorted(pools):
        group = pools[elev]
        lines.append(
            f"elevation {elev:g} objects {len(group)} "
            f"psnr {MetricReport._finite_mean([r.mean_psnr for r in group]):.4f} "
            f"ssim {MetricReport._finite_mean([r.mean_ssim for r in group]):.4f} "
            f"ms_ssim {MetricReport._finite_mean([r.mean_ms_ssim for r in group]):.4f} "
            f"reproj_rmse {MetricReport._finite_mean([r.reproj_rmse for r in group]):.4f}"
        )
    return lines


def _paired_deltas(reports, base_reports):
    base = {r.object_id: r for r in base_reports}
    missing = [r.object_id for r in reports if r.object_id not in base]
    if missing:
        raise DataError(f"baseline lacks objects {missing}")
    lines = []
    d_psnr = []
    d_reproj = []
    for rep in reports:
        b = base[rep.object_id]
        dp = rep.mean_psnr - b.mean_psnr
        dr = rep.reproj_rmse - b.reproj_rmse
        d_psnr.append(dp)
        d_reproj.append(dr)
        lines.append(f"delta object {rep.object_id} psnr {dp:+.4f} reproj_rmse {dr:+.4f}")
    lines.append(
        f"delta mean psnr {sum(d_psnr) / len(d_psnr):+.4f} "
        f"reproj_rmse {sum(d_reproj) / len(d_reproj):+.4f}"
    )
    return lines


def cmd_eval(args):
    cfg = _resolve_config(args, need_seed_override=False)
    reader = _open_dataset(args.data)
    reports, meta = evaluate_generated(cfg, reader, args.generated)
    _, entries = read_generation_manifest(args.generated)
    elevations = {e["index"]: e["elevation"] for e in entries}
    os.makedirs(args.out, exist_ok=True)
    text_path = os.path.join(args.out, "report.txt")
    records_path = os.path.join(args.out, "records.jsonl")
    summary = write_reports(reports, text_path, records_path)
    extra = _pooled_by_elevation(reports, elevations)
    if args.baseline:
        base_reports, base_meta = evaluate_generated(cfg, reader, args.baseline)
        if base_meta.get("blocks") == meta.get("blocks"):
            print("note: baseline and main runs have the same blocks flag", file=sys.stderr)
        extra.extend(_paired_deltas(reports, base_reports))
    with open(text_path, "a", encoding="utf-8") as fh:
        fh.write("\n".join(extra) + "\n")
    with open(text_path, "r", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    print(f"rows {sum(len(r.psnr_values) for r in reports)} report {text_path}")
    return 0


def cmd_pipeline(args):
    cfg = _resolve_config(args)
    root = args.out
    data = os.path.join(root, "data")
    backbone = os.path.join(root, "ckpt", "backbone")
    blocks = os.path.join(root, "ckpt", "blocks")
    gen_main = os.path.join(root, "gen", "blocks")
    gen_base = os.path.join(root, "gen", "baseline")
    report = os.path.join(root, "report")

    ns = argparse.Namespace(**vars(args))
    ns.out = data
    cmd_gen_data(ns)

    for stage, out, ckpt in (("backbone", backbone, None), ("blocks", blocks, backbone)):
        ns = argparse.Namespace(**vars(args))
        ns.stage, ns.data, ns.out, ns.checkpoint = stage, os.path.join(data, "train"), out, ckpt
        cmd_train(ns)

    for ckpt_dir, out, no_blocks in ((blocks, gen_main, False), (backbone, gen_base, True)):
        ns = argparse.Namespace(**vars(args))
        ns.checkpoint, ns.data, ns.out = ckpt_dir, os.path.join(data, "eval"), out
        ns.object, ns.no_blocks, ns.seed = None, no_blocks, args.seed
        cmd_sample(ns)

    ns = argparse.Namespace(**vars(args))
    ns.data, ns.generated, ns.baseline, ns.out = (
        os.path.join(data, "eval"),
        gen_main,
        gen_base,
        report,
    )
    return cmd_eval(ns)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossview",
        description="Multi-view consistent diffusion sampling on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="run config file (key value lines)")
        p.add_argument("--smoke", action="store_true", help="use the minutes-scale preset")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="render train and eval datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", choices=("backbone", "blocks"), required=True)
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--checkpoint", help="backbone checkpoint (blocks stage)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate view sets from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset split with reference views")
    p.add_argument("--object", type=int, default=None, help="sample one dataset position")
    p.add_argument("--no-blocks", action="store_true", help="ignore block tensors")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated views against ground truth")
    common(p)
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--generated", required=True, help="generated directory to score")
    p.add_argument("--baseline", help="second generated directory for paired deltas")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="gen-data, both train stages, sample, eval")
    common(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

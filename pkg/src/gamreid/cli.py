"""Command-line entry points.

Every command exits 0 on success. Invalid inputs produce a single
``error:<category>: <detail>`` line on stderr and a nonzero exit code.
"""

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .acl import merge_step, save_assignments, MemoryBank
from .attention import export_attention_map
from .backbone import count_parameters
from .dataio import generate_synthetic, load_image, load_split, scan_dataset
from .diagnostics import run_battery, total_cases, worst
from .errors import GamreidError, UsageError
from .evaluation import EvalItem, evaluate, render_metrics, write_metrics
from .idl import embed_all
from .trainer import load_run_checkpoint, model_from_run_checkpoint, run
from .backbone import Backbone


def _config_epilog():
    return "config keys:\n" + cfgmod.describe_keys()


def _add_spec(parser, required=False):
    parser.add_argument("--spec", required=required, metavar="FILE",
                        help="configuration file of 'key = value' lines")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gamreid",
        description="Unsupervised person re-identification: grouped attention "
                    "backbone, instance discrimination, and bottom-up clustering.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic dataset",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_spec(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--overwrite", action="store_true",
                   help="replace an existing non-empty directory")

    p = sub.add_parser("train", help="train on a dataset directory",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_spec(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    p.add_argument("--resume", metavar="CKPT", help="continue from a saved checkpoint")

    p = sub.add_parser("eval", help="score a checkpoint on query/gallery splits",
                       epilog=_config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_spec(p)
    p.add_argument("--checkpoint", required=True, help="training checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="directory to write metrics.txt into")

    p = sub.add_parser("count-params", help="report parameter counts for a preset")
    p.add_argument("--preset", default="resnet50-gam",
                   help="tiny, resnet50-baseline, or resnet50-gam")
    p.add_argument("--groups", type=int, default=0,
                   help="override the preset's filter group count")
    p.add_argument("--embedding-dim", type=int, default=0,
                   help="override the preset's embedding width")

    p = sub.add_parser("cluster", help="run merge rounds on a checkpoint's clusters")
    p.add_argument("--checkpoint", required=True, help="training checkpoint file")
    p.add_argument("--merges", type=int, required=True, help="number of pair merges")
    p.add_argument("--lam", type=float, default=0.0,
                   help="size-balance weight in the merge distance")
    p.add_argument("--out", required=True, help="directory for assignments and merge log")

    p = sub.add_parser("grad-check", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")

    p = sub.add_parser("export-attn", help="write one spatial attention map as PGM")
    _add_spec(p)
    p.add_argument("--checkpoint", required=True, help="training checkpoint file")
    p.add_argument("--image", required=True, help="input image file")
    p.add_argument("--layer", required=True, help="block name, e.g. stage0.block1")
    p.add_argument("--out", required=True, help="output PGM path")
    return parser


def _load_dataset(args, resolved):
    entries = scan_dataset(args.data)
    size = cfgmod.image_size_from(resolved)
    return entries, size


def _eval_items(model, root, entries, split, size, batch_size):
    images, ids, cams = load_split(root, entries, split, size)
    emb = embed_all(model, images, batch_size)
    return [EvalItem(emb[i], int(ids[i]), int(cams[i])) for i in range(len(ids))]


def cmd_synth_data(args):
    resolved = cfgmod.load_config(args.spec)
    spec = cfgmod.synth_spec_from(resolved)
    entries = generate_synthetic(spec, args.out, overwrite=args.overwrite)
    counts = {s: sum(1 for e in entries if e.split == s) for s in ("train", "query", "gallery")}
    print(f"wrote {len(entries)} images to {args.out} "
          f"(train={counts['train']} query={counts['query']} gallery={counts['gallery']})")
    return 0


def cmd_train(args):
    resolved = cfgmod.load_config(args.spec)
    train_cfg = cfgmod.train_config_from(resolved)
    aug_spec = cfgmod.aug_spec_from(resolved)
    schedule = cfgmod.merge_schedule_from(resolved)
    backbone_cfg = cfgmod.backbone_config_from(resolved)
    entries, size = _load_dataset(args, resolved)
    images, _, _ = load_split(args.data, entries, "train", size)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.render_config(resolved))

    model = Backbone(backbone_cfg, seed=train_cfg.seed)
    result = run(model, images, train_cfg, aug_spec, schedule,
                 out_dir=args.out, resume=args.resume)
    print(f"trained {len(result.rows)} epochs; {len(result.mbank)} clusters remain")

    has_eval = (any(e.split == "query" for e in entries)
                and any(e.split == "gallery" for e in entries))
    if has_eval:
        queries = _eval_items(model, args.data, entries, "query", size, train_cfg.batch_size)
        gallery = _eval_items(model, args.data, entries, "gallery", size, train_cfg.batch_size)
        metrics = evaluate(queries, gallery)
        write_metrics(os.path.join(args.out, "metrics.txt"), metrics)
        print(render_metrics(metrics), end="")
    return 0


def cmd_eval(args):
    resolved = cfgmod.load_config(args.spec)
    model = model_from_run_checkpoint(args.checkpoint)
    entries = scan_dataset(args.data)
    size = cfgmod.image_size_from(resolved)
    batch = resolved["train.batch_size"]
    queries = _eval_items(model, args.data, entries, "query", size, batch)
    gallery = _eval_items(model, args.data, entries, "gallery", size, batch)
    metrics = evaluate(queries, gallery)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(os.path.join(args.out, "metrics.txt"), metrics)
    print(render_metrics(metrics), end="")
    return 0


def cmd_count_params(args):
    from .backbone import preset
    cfg = preset(args.preset,
                 groups=args.groups or None,
                 embedding_dim=args.embedding_dim or None)
    counts = count_parameters(cfg)
    for key in ("conv", "bn", "linear", "attention", "total"):
        print(f"{key} = {counts[key]}")
    return 0


def cmd_cluster(args):
    block, arrays = load_run_checkpoint(args.checkpoint)
    bank = MemoryBank(arrays["mbank.centroids"],
                      arrays["mbank.sizes"].astype(np.int64),
                      arrays["mbank.assignment"].astype(np.int64))
    merged, pairs = merge_step(bank, args.merges, args.lam)
    os.makedirs(args.out, exist_ok=True)
    save_assignments(os.path.join(args.out, "assignments.tsv"), merged.assignment)
    with open(os.path.join(args.out, "merges.tsv"), "w", encoding="utf-8") as fh:
        for i, j in pairs:
            fh.write(f"{i}\t{j}\n")
    print(f"merged {len(pairs)} pairs; {len(merged)} clusters remain")
    return 0


def cmd_grad_check(args):
    results = run_battery(args.seed, args.eps)
    for r in sorted(results, key=lambda r: r.name):
        print(f"{r.name}: cases={r.cases} max_rel_err={r.max_err:.3e}")
    bad = worst(results)
    print(f"total cases = {total_cases(results)}; worst relative error = {bad:.3e}")
    if bad > args.tol:
        print(f"error:numeric: gradient check exceeded tolerance {args.tol}", file=sys.stderr)
        return 1
    return 0


def cmd_export_attn(args):
    resolved = cfgmod.load_config(args.spec)
    model = model_from_run_checkpoint(args.checkpoint)
    size = cfgmod.image_size_from(resolved)
    img = load_image(args.image, size)
    sink = {}
    with T.no_grad():
        model.embed(T.Tensor(img[None]), training=False, sink=sink)
    if not sink:
        raise UsageError("this model has no attention modules to export")
    if args.layer not in sink:
        available = ", ".join(sorted(sink))
        raise UsageError(f"unknown layer {args.layer!r}; attention layers: {available}")
    export_attention_map(sink[args.layer]["spatial"], 0, args.out)
    print(f"wrote attention map for {args.layer} to {args.out}")
    return 0


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "cluster": cmd_cluster,
    "grad-check": cmd_grad_check,
    "export-attn": cmd_export_attn,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GamreidError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error:usage: missing file: {e.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

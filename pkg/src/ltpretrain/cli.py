"""Command-line entry point: ``ltpretrain <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import LTPretrainError

log = logging.getLogger("ltpretrain")


def _resolve_manifest(path: str) -> Path:
    """Accept a manifest file or a directory holding one."""
    p = Path(path)
    if p.is_dir():
        for name in ("manifest.jsonl", "annotations.json", "instances.json"):
            if (p / name).exists():
                return p / name
        hits = sorted(p.glob("*.jsonl")) + sorted(p.glob("*.json"))
        if len(hits) == 1:
            return hits[0]
        raise LTPretrainError(f"{p}: cannot find a manifest file in this directory")
    return p


def _load(path: str, **kw):
    from .data import load_manifest

    return load_manifest(_resolve_manifest(path), **kw)


def cmd_generate(args) -> int:
    from .data import SyntheticConfig, generate_synthetic, save_coco, save_manifest

    m = generate_synthetic(
        SyntheticConfig(args.num_images, args.num_classes, args.zipf, image_size=args.image_size, seed=args.seed)
    )
    if args.coco:
        save_coco(m, args.out)
    else:
        save_manifest(m, args.out, embed_pixels=not args.external_pixels)
    log.info("wrote %d images to %s", len(m), args.out)
    return 0


def cmd_schedule(args) -> int:
    from .data import compute_class_stats
    from .sampler import ScheduleConfig, build_epoch_schedule, build_table

    m = _load(args.manifest, load_pixels=False)
    table = build_table(compute_class_stats(m), args.epoch, ScheduleConfig(args.t_threshold, args.t_max, args.seed))
    sched = build_epoch_schedule(m, table, args.seed)
    ids = "\n".join(str(i) for i in sched.image_ids) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "repeat_factors.csv").write_text(table.to_csv())
        (out / "schedule.txt").write_text(ids)
    else:
        sys.stdout.write(table.to_csv())
        sys.stdout.write("\n")
        sys.stdout.write(ids)
    return 0


def cmd_preview_views(args) -> int:
    from PIL import Image, ImageDraw

    from .views import AugmentConfig, make_view_pair

    m = _load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = args.image_ids or m.image_ids[: args.count]
    cfg = AugmentConfig(output_size=m.images[0].width)
    for image_id in ids:
        pair = make_view_pair(m.get(image_id), args.proposals, args.seed + image_id, cfg, allow_empty=True)
        for tag, view in (("q", pair.view_q), ("k", pair.view_k)):
            arr = (view.pixels.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            im = Image.fromarray(arr).resize((arr.shape[1] * args.zoom, arr.shape[0] * args.zoom), Image.NEAREST)
            draw = ImageDraw.Draw(im)
            for k, match in enumerate(pair.proposals):
                b = match.box_q if tag == "q" else match.box_k
                draw.rectangle([v * args.zoom for v in b.as_tuple()], outline=(255, 0, 0))
                draw.text((b.x_min * args.zoom + 2, b.y_min * args.zoom + 1), str(k), fill=(255, 255, 0))
            im.save(out / f"{image_id}_{tag}.png")
    log.info("wrote %d view pairs to %s", len(ids), out)
    return 0


def cmd_pretrain(args) -> int:
    from .train import TrainConfig, load_config, resume, train

    if args.resume:
        state = resume(args.resume)
        config = state.config
    else:
        state = None
        config = load_config(args.config) if args.config else TrainConfig()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.deterministic:
            overrides["deterministic"] = True
        if args.max_steps is not None:
            overrides["max_steps"] = args.max_steps
        if overrides:
            config = dataclasses.replace(config, **overrides)
    m = _load(args.manifest)
    state = train(config, m, out_dir=args.out, state=state, max_steps=args.max_steps)
    log.info("finished at step %d; outputs in %s", state.step, args.out)
    return 0


def cmd_probe(args) -> int:
    from .data import compute_class_stats
    from .diagnostics import ProbeConfig, probe_eval, save_probe
    from .models import Backbone, ModelConfig
    from .train import resume

    if args.ckpt:
        encoder = resume(_checkpoint_dir(args.ckpt)).model.online.backbone
    else:
        import torch

        torch.manual_seed(args.seed)
        encoder = Backbone(ModelConfig())
        log.warning("no --ckpt given: probing a randomly initialised encoder")
    train_m, test_m = _load(args.train), _load(args.test)
    counts_src = _load(args.counts_manifest, load_pixels=False) if args.counts_manifest else train_m
    counts = compute_class_stats(counts_src).instance_counts
    cfg = ProbeConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, rare_max=args.rare_max, common_max=args.common_max)
    res = probe_eval(encoder, train_m, test_m, cfg, counts)
    out = Path(args.out)
    save_probe(res, counts, out)
    (out / "probe.json").write_text(json.dumps(res.to_dict(), indent=1))
    print(json.dumps({"group_accuracy": res.group_accuracy, "overall_accuracy": res.overall_accuracy}))
    return 0


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "checkpoint" / "manifest.json").exists():
        return p / "checkpoint"
    raise LTPretrainError(f"{p}: not a checkpoint directory")


def cmd_analyze_errors(args) -> int:
    from .data import compute_class_stats
    from .diagnostics import Prediction, analyze_errors, frequency_groups

    m = _load(args.gt, load_pixels=False)
    lines = Path(args.pred).read_text(encoding="utf-8").splitlines()
    preds = [Prediction.from_json(line) for line in lines if line.strip()]
    counts_src = _load(args.counts_manifest, load_pixels=False) if args.counts_manifest else m
    groups = frequency_groups(compute_class_stats(counts_src).instance_counts, args.rare_max, args.common_max)
    report = analyze_errors(preds, m, groups, args.top_n).to_dict()
    Path(args.out).write_text(json.dumps(report, indent=1))
    return 0


def cmd_report_norms(args) -> int:
    from .checkpoint import load_checkpoint
    from .diagnostics import frequency_groups, weight_norm_report

    p = Path(args.ckpt)
    candidates = [p, p / "probe"]
    for c in candidates:
        if (c / "manifest.json").exists():
            tensors, doc = load_checkpoint(c)
            if "classifier.weight" in tensors:
                break
    else:
        raise LTPretrainError(f"{p}: no checkpoint with a classifier.weight tensor")
    counts = doc["meta"].get("class_counts")
    if counts is None:
        raise LTPretrainError(f"{c}: checkpoint meta lacks class_counts")
    groups = frequency_groups(counts, args.rare_max, args.common_max)
    rep = weight_norm_report(tensors["classifier.weight"], counts, groups)
    Path(args.out).write_text(rep.to_csv())
    print(json.dumps({"group_means": rep.group_means}))
    return 0


def cmd_compare(args) -> int:
    from .experiment import ComparisonProtocol, compare, medians

    results = compare(args.seeds, ComparisonProtocol(), args.out)
    print(json.dumps(medians(results), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltpretrain", description="Long-tailed contrastive pre-training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic Zipf-distributed manifest")
    g.add_argument("--num-images", type=int, default=2000)
    g.add_argument("--num-classes", type=int, default=20)
    g.add_argument("--zipf", type=float, default=1.2)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--coco", action="store_true", help="write COCO JSON plus PNG files")
    g.add_argument("--external-pixels", action="store_true", help="store PNG files next to the manifest")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("schedule", help="print the repeat-factor table and epoch schedule")
    s.add_argument("--manifest", required=True)
    s.add_argument("--epoch", type=int, required=True)
    s.add_argument("--t-max", type=int, default=12)
    s.add_argument("--t-threshold", type=float, default=0.001)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="directory for repeat_factors.csv and schedule.txt (default: stdout)")
    s.set_defaults(func=cmd_schedule)

    v = sub.add_parser("preview-views", help="render view pairs with proposal overlays")
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--image-ids", type=int, nargs="*")
    v.add_argument("--count", type=int, default=4)
    v.add_argument("--proposals", default="ground-truth", choices=["ground-truth", "jittered-gt", "random-boxes"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--zoom", type=int, default=4)
    v.set_defaults(func=cmd_preview_views)

    t = sub.add_parser("pretrain", help="run pre-training")
    t.add_argument("--config", help="flat TOML file with TrainConfig keys")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_pretrain)

    pr = sub.add_parser("probe", help="linear probe on frozen ground-truth box features")
    pr.add_argument("--ckpt", help="pre-training run or checkpoint directory")
    pr.add_argument("--train", required=True, help="probe training manifest")
    pr.add_argument("--test", required=True, help="probe evaluation manifest")
    pr.add_argument("--counts-manifest", help="manifest whose instance counts define frequency groups")
    pr.add_argument("--out", required=True)
    pr.add_argument("--epochs", type=int, default=300)
    pr.add_argument("--lr", type=float, default=0.01)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--rare-max", type=int, default=10)
    pr.add_argument("--common-max", type=int, default=100)
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze-errors", help="five-way error breakdown per frequency group")
    a.add_argument("--pred", required=True, help="JSONL of {image_id, box, class_id, score}")
    a.add_argument("--gt", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--top-n", type=int, default=100)
    a.add_argument("--counts-manifest")
    a.add_argument("--rare-max", type=int, default=10)
    a.add_argument("--common-max", type=int, default=100)
    a.set_defaults(func=cmd_analyze_errors)

    n = sub.add_parser("report-norms", help="per-class classifier weight norms")
    n.add_argument("--ckpt", required=True, help="probe checkpoint or a directory containing probe/")
    n.add_argument("--out", required=True)
    n.add_argument("--rare-max", type=int, default=10)
    n.add_argument("--common-max", type=int, default=100)
    n.set_defaults(func=cmd_report_norms)

    c = sub.add_parser("compare", help="paired baseline vs full pre-training on the synthetic benchmark")
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except LTPretrainError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

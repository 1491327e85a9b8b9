"""Command-line pipeline: ingest, split, train, eval, infer, synth, render.

Every command reads one optional flat config document (``--config``) whose
values the global flags override; relative paths resolve against the
``PLUME_DATA_DIR`` environment variable when set.  Exit status is 0 only
when no per-item errors occurred.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import catalog, metrics, raster_io, synth, training, viz
from .config import RunConfig, apply_overrides, load_config
from .errors import EmptyEvaluation, SmokePlumeError, TrainingDiverged
from .models import extract_activation_map, load_checkpoint
from .raster_io import format_timestamp, load_scene, read_mask, write_mask

# Each smoke pixel covers 10 m x 10 m of ground.
AREA_PER_PIXEL_M2 = 100.0


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _records_for(cfg: RunConfig, manifest: str, split: str | None,
                 subset: str | None):
    records = catalog.build_catalog(cfg.resolve(manifest), validate="exists")
    if split:
        records = catalog.apply_split(records, catalog.read_split_manifest(cfg.resolve(split)))
    if subset:
        records = [r for r in records if r.split == subset]
    return records


def cmd_ingest(cfg: RunConfig, args) -> int:
    """Convert raw per-band scenes listed in a manifest into canonical files."""
    records = catalog.build_catalog(cfg.resolve(args.manifest), validate="none")
    out_dir = cfg.resolve(args.out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for rec in records:
        stamp = rec.timestamp.strftime("%Y%m%dT%H%M%SZ")
        stem = f"{rec.site_id}_{stamp}"
        try:
            scene = load_scene(rec.scene_path)
            scene_rel = f"scenes/{stem}.tif"
            raster_io.write_scene(scene, out_dir / scene_rel)
            mask_rel = ""
            if rec.mask_path is not None:
                mask = read_mask(rec.mask_path)
                (out_dir / "masks").mkdir(exist_ok=True)
                mask_rel = f"masks/{stem}.tif"
                write_mask(mask, out_dir / mask_rel)
        except (SmokePlumeError, OSError) as exc:
            failures += 1
            print(f"error: {rec.scene_path}: {exc}", file=sys.stderr)
            continue
        rows.append({"site_id": rec.site_id, "lat": rec.lat, "lon": rec.lon,
                     "timestamp": format_timestamp(rec.timestamp),
                     "scene_path": scene_rel, "label": rec.label,
                     "mask_path": mask_rel})
    catalog.write_manifest(rows, out_dir / "manifest.csv")
    print(f"ingested {len(rows)} scenes to {out_dir} ({failures} failed)")
    return 1 if failures else 0


def cmd_split(cfg: RunConfig, args) -> int:
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must be three non-negative values summing to 1, got {args.ratios!r}")
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    records = catalog.build_catalog(cfg.resolve(args.manifest), validate="none")
    manifest = catalog.assign_splits(records, ratios=ratios, seed=cfg.seed)
    catalog.write_split_manifest(manifest, cfg.resolve(args.out))
    records = catalog.apply_split(records, manifest)
    fractions = catalog.split_fractions(records)
    print(" ".join(f"{name}={fractions.get(name, 0.0):.3f}" for name in catalog.SPLITS))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    records = _records_for(cfg, args.manifest, args.split, None)
    out_dir = cfg.resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train_config(args.task)
    policy = cfg.train_policy()
    log_path = out_dir / f"{args.task}.log"
    try:
        if args.task == "classify":
            ckpt, log = training.train_classifier(
                records, train_cfg, cfg.classifier_config(), policy)
        else:
            ckpt, log = training.train_segmenter(
                records, train_cfg, cfg.segmenter_config(), policy)
    except TrainingDiverged as exc:
        training.write_training_log(exc.log, log_path)
        return _fail(f"{exc} (log retained at {log_path})")
    training.write_training_log(log, log_path)
    ckpt_path = out_dir / f"{args.task}.ckpt"
    ckpt.save(ckpt_path)
    best = ckpt.manifest["metrics"]
    print(f"checkpoint {ckpt_path} best_epoch={best['epoch']} "
          f"{best['selection_metric']}={best['value']:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(cfg.resolve(args.checkpoint))
    records = _records_for(cfg, args.manifest, args.split, args.subset)
    if not records:
        raise EmptyEvaluation(f"no records in subset {args.subset!r}")
    policy = cfg.eval_policy()
    if args.task == "classify":
        report = metrics.evaluate_classification(model, records, policy, cfg.batch_size)
        if args.attribution:
            importance = metrics.channel_gradient_importance(model, records)
            report.channel_importance = [float(v) for v in importance]
    else:
        report = metrics.evaluate_segmentation(model, records, policy, cfg.batch_size)
    print(report.to_json())
    c = report.confusion
    print(f"confusion tp={c.tp} tn={c.tn} fp={c.fp} fn={c.fn} "
          f"accuracy={report.accuracy:.4f}", file=sys.stderr)
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    model, manifest = load_checkpoint(cfg.resolve(args.checkpoint))
    if manifest.get("kind") != "segmenter":
        return _fail("infer requires a segmenter checkpoint")
    out_dir = cfg.resolve(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    failures = 0
    for scene_arg in args.scenes:
        try:
            scene = load_scene(cfg.resolve(scene_arg))
            with torch.no_grad():
                logits = model(torch.from_numpy(scene.bands[None].copy()))
            pred = (logits[0, 0] > 0).numpy().astype(np.uint8)
            mask = raster_io.MaskRaster(site_id=scene.site_id, timestamp=scene.timestamp,
                                        values=pred, origin=scene.origin)
            stem = Path(scene_arg).stem
            write_mask(mask, out_dir / f"{stem}_pred.tif")
            pixels = int(pred.sum())
            print(f"{scene_arg} smoke_pixels={pixels} "
                  f"smoke_area_m2={pixels * AREA_PER_PIXEL_M2:.0f}")
            if args.overlay:
                rgb = viz.overlay_masks(viz.false_color(scene), None, pred)
                viz.save_png(rgb, out_dir / f"{stem}_overlay.png")
        except (SmokePlumeError, OSError) as exc:
            failures += 1
            print(f"error: {scene_arg}: {exc}", file=sys.stderr)
    return 1 if failures else 0


def cmd_synth(cfg: RunConfig, args) -> int:
    manifest = synth.generate_dataset(
        cfg.resolve(args.out_dir), n_positive=args.positives,
        n_negative=args.negatives, n_sites=args.sites, seed=cfg.seed,
        masked_fraction=args.masked_fraction, amplitude=args.amplitude)
    print(str(manifest))
    return 0


def cmd_render(cfg: RunConfig, args) -> int:
    scene = load_scene(cfg.resolve(args.scene))
    spec = viz.RenderSpec(mode=args.mode)
    gt = read_mask(cfg.resolve(args.gt_mask)).values if args.gt_mask else None
    pred = read_mask(cfg.resolve(args.pred_mask)).values if args.pred_mask else None
    amap = None
    if args.mode == "activation_overlay":
        if not args.checkpoint:
            return _fail("activation_overlay requires --checkpoint")
        model, manifest = load_checkpoint(cfg.resolve(args.checkpoint))
        if manifest.get("kind") != "classifier":
            return _fail("activation_overlay requires a classifier checkpoint")
        amap, _ = extract_activation_map(model, scene.bands)
    image = viz.render_scene(scene, spec, gt_mask=gt, pred_mask=pred,
                             activation_map=amap)
    out = cfg.resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    viz.save_png(image, out)
    print(str(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smokeplume",
        description="Satellite smoke-plume detection pipeline")
    parser.add_argument("--config", help="flat key = value config document")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="compute thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert raw per-band scenes to canonical files")
    p.add_argument("manifest", help="manifest whose scene paths point at raw scenes")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign location-disjoint train/val/test splits")
    p.add_argument("manifest")
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.add_argument("--out", required=True, help="split manifest output path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("task", choices=("classify", "segment"))
    p.add_argument("manifest")
    p.add_argument("--split", required=True, help="split manifest path")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split subset")
    p.add_argument("task", choices=("classify", "segment"))
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--subset", default="test", choices=catalog.SPLITS)
    p.add_argument("--attribution", action="store_true",
                   help="also compute per-band gradient importance (classify)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict smoke masks for scene files")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--overlay", action="store_true", help="also write overlay PNGs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("out_dir")
    p.add_argument("--positives", type=int, default=16)
    p.add_argument("--negatives", type=int, default=16)
    p.add_argument("--sites", type=int, default=8)
    p.add_argument("--masked-fraction", type=float, default=1.0)
    p.add_argument("--amplitude", type=float, default=synth.PlumeParams().amplitude)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render a scene to PNG")
    p.add_argument("scene")
    p.add_argument("--mode", default="false_color", choices=viz.RENDER_MODES)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-mask")
    p.add_argument("--pred-mask")
    p.add_argument("--checkpoint", help="classifier checkpoint for activation maps")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, seed=args.seed, threads=args.threads)
        if cfg.threads > 0:
            torch.set_num_threads(cfg.threads)
        return args.func(cfg, args)
    except (SmokePlumeError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())

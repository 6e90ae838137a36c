"""Command-line entry point.

Subcommands: synth | train | detect | eval | gradcheck | pool-dump | score-sweep.
Every command is a deterministic function of (config file, seed, input files);
the effective configuration is echoed into each output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, resolve_config, write_effective_config
from .dataio import (
    load_ground_truth,
    load_labels,
    load_manifest,
    load_proposals,
    read_image,
    synth_generate,
)
from .evaluation import (
    Detection,
    average_precision,
    averaged_roi_scores,
    corloc_from_top_boxes,
    detections_from_scores,
    mean_ap,
    score_sweep,
    top_box_per_class,
)
from .features import load_feature_map
from .geometry import Box, context_outer, filter_proposals, frame_inner, project_to_feature
from .gradcheck import run_all
from .model import TwoStreamModel, load_checkpoint
from .pooling import frame_region_pool, roi_pool
from .training import train

FLOAT = "{:.17g}"


def _load_input(path, cfg, model: TwoStreamModel):
    """Return (image, fmap) for a manifest image entry (.cltf = features)."""
    if str(path).endswith(".cltf"):
        return None, load_feature_map(path, stride=model.cfg.feature_stride)
    return read_image(path), None


def _detection_row(det: Detection) -> str:
    coords = ",".join(FLOAT.format(v) for v in det.box.as_tuple())
    return f"{det.image_id},{det.class_id},{coords}," + FLOAT.format(det.score)


def _parse_detection_rows(path) -> list[Detection]:
    dets = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("image_id,"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 columns")
            dets.append(
                Detection(
                    parts[0],
                    int(parts[1]),
                    Box(*(float(v) for v in parts[2:6])),
                    float(parts[6]),
                )
            )
    return dets


def cmd_synth(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    out = Path(args.out)
    write_effective_config(cfg, out)
    train_manifest, test_manifest = synth_generate(cfgmod.synth_config_from(cfg), out)
    print(f"wrote {train_manifest}")
    print(f"wrote {test_manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    manifest = args.manifest or cfg["train_manifest"]
    if not manifest:
        raise ConfigError("no manifest: pass --manifest or set train_manifest")
    samples = load_manifest(manifest)
    out = Path(args.out)
    write_effective_config(cfg, out)
    result = train(samples, cfgmod.model_config_from(cfg), cfgmod.train_config_from(cfg), out)
    print(f"trained {cfg['epochs']} epochs; final epoch mean loss {result.epoch_means[-1]:.6f}")
    if result.skipped:
        print(f"skipped {result.skipped} image(s) with no surviving proposal")
    print(f"wrote {result.checkpoint_path}")
    print(f"wrote {result.loss_log_path}")
    return 0


def cmd_detect(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    model = load_checkpoint(args.checkpoint)
    samples = load_manifest(args.manifest)
    scales = cfgmod.eval_scales_from(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)

    det_lines = ["image_id,class,x1,y1,x2,y2,score"]
    top_lines = ["image_id,class,x1,y1,x2,y2,score"]
    for sample in samples:
        boxes = filter_proposals(
            load_proposals(sample.proposals_path), cfg["min_proposal_side"]
        )
        if not boxes:
            continue
        image, fmap = _load_input(sample.image_path, cfg, model)
        scores = averaged_roi_scores(
            model, boxes, image=image, fmap=fmap, scales=scales, use_flips=cfg["eval_flips"]
        )
        for det in detections_from_scores(
            sample.image_id, boxes, scores, cfg["score_min"], cfg["nms_iou"]
        ):
            det_lines.append(_detection_row(det))
        for cls, box, score in top_box_per_class(boxes, scores):
            top_lines.append(_detection_row(Detection(sample.image_id, cls, box, score)))

    det_path = out / "detections.csv"
    det_path.write_text("\n".join(det_lines) + "\n", encoding="utf-8")
    top_path = out / "top_boxes.csv"
    top_path.write_text("\n".join(top_lines) + "\n", encoding="utf-8")
    print(f"wrote {det_path}")
    print(f"wrote {top_path}")
    return 0


def _table(per_class: list[float | None], mean: float) -> str:
    header = ",".join(f"class_{c}" for c in range(len(per_class))) + ",mean"
    cells = ["" if v is None else f"{v:.4f}" for v in per_class] + [f"{mean:.4f}"]
    return header + "\n" + ",".join(cells) + "\n"


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    samples = load_manifest(args.manifest)
    num_classes = cfg["classes"]
    gt: dict[str, dict[int, list[Box]]] = {}
    positives: dict[int, set[str]] = {c: set() for c in range(num_classes)}
    for sample in samples:
        if sample.gt_path is None:
            raise ValueError(f"{sample.image_id}: manifest has no ground-truth column")
        gt[sample.image_id] = load_ground_truth(sample.gt_path)
        labels = load_labels(sample.labels_path, num_classes)
        for c in range(num_classes):
            if labels[c] > 0:
                positives[c].add(sample.image_id)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, out)

    if args.detections:
        dets = _parse_detection_rows(args.detections)
        aps: list[float | None] = []
        for c in range(num_classes):
            class_dets = [d for d in dets if d.class_id == c]
            class_gts = {
                image_id: boxes[c]
                for image_id, boxes in gt.items()
                if c in boxes and boxes[c]
            }
            ap = average_precision(class_dets, class_gts, cfg["ap_iou"], cfg["ap_mode"])
            aps.append(None if ap is None else 100.0 * ap)
        overall = mean_ap(aps)
        (out / "ap_table.csv").write_text(_table(aps, overall), encoding="utf-8")
        print(f"mAP {overall:.2f} ({cfg['ap_mode']})")

    if args.top_boxes:
        tops = _parse_detection_rows(args.top_boxes)
        corlocs: list[float | None] = []
        for c in range(num_classes):
            top_per_image = {
                t.image_id: t.box
                for t in tops
                if t.class_id == c and t.image_id in positives[c]
            }
            gt_c = {image_id: boxes.get(c, []) for image_id, boxes in gt.items()}
            corlocs.append(corloc_from_top_boxes(top_per_image, gt_c, cfg["corloc_iou"]))
        defined = [v for v in corlocs if v is not None]
        if not defined:
            raise ValueError("no class has a positive image; CorLoc undefined")
        mean_corloc = float(np.mean(defined))
        (out / "corloc_table.csv").write_text(_table(corlocs, mean_corloc), encoding="utf-8")
        print(f"CorLoc {mean_corloc:.2f}")

    if not args.detections and not args.top_boxes:
        raise ValueError("nothing to evaluate: pass --detections and/or --top-boxes")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    results = run_all(cfg["seed"])
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name}: max rel err {r.max_rel_err:.3e}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(report, encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def cmd_pool_dump(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = TwoStreamModel(
            cfgmod.model_config_from(cfg), rng=np.random.default_rng(cfg["seed"])
        )
    image, fmap = _load_input(args.image, cfg, model)
    if fmap is None:
        fmap, _ = model.extract_features(image)
    box = Box(*(float(v) for v in args.box.split(",")))
    n, ratio = model.cfg.grid_n, model.cfg.context_ratio
    geom = fmap.geometry
    roi_rect = project_to_feature(box, geom)
    pooled = {
        "roi": roi_pool(fmap, roi_rect, n),
        "context": frame_region_pool(
            fmap,
            project_to_feature(context_outer(box, ratio), geom),
            roi_rect,
            n,
            pooling_type="context",
        ),
        "frame": frame_region_pool(
            fmap, roi_rect, project_to_feature(frame_inner(box, ratio), geom), n
        ),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["pool_type,channel,row,col,value"]
    for kind, p in pooled.items():
        c, nn, _ = p.values.shape
        for ch in range(c):
            for i in range(nn):
                for j in range(nn):
                    lines.append(f"{kind},{ch},{i},{j}," + FLOAT.format(p.values[ch, i, j]))
    path = out / "pooled.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def cmd_score_sweep(args) -> int:
    cfg = resolve_config(args.config, _seed_override(args))
    model = load_checkpoint(args.checkpoint)
    image, fmap = _load_input(args.image, cfg, model)
    cx, cy = (float(v) for v in args.center.split(","))
    sizes = [float(v) for v in args.sizes.split(",")]
    rows = score_sweep(model, image, (cx, cy), args.class_id, sizes, fmap=fmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["size,branch_roi,branch_context,loc_score"]
    for row in rows:
        lines.append(",".join(FLOAT.format(v) for v in row))
    path = out / "score_sweep.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _seed_override(args) -> dict:
    return {"seed": args.seed} if args.seed is not None else {}


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsloc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shapes corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="training manifest (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections / top boxes against ground truth")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", default=None, help="detections.csv from `detect`")
    p.add_argument("--top-boxes", dest="top_boxes", default=None, help="top_boxes.csv from `detect`")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all backward passes")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pool-dump", help="dump roi/context/frame pooled grids for one box")
    _add_common(p)
    p.add_argument("--image", required=True, help="raster image or .cltf feature map")
    p.add_argument("--box", required=True, help="x1,y1,x2,y2")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_pool_dump)

    p = sub.add_parser("score-sweep", help="branch scores for growing boxes at one point")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--center", required=True, help="cx,cy in pixels")
    p.add_argument("--class-id", dest="class_id", type=int, required=True)
    p.add_argument("--sizes", required=True, help="comma-separated box sides")
    p.set_defaults(func=cmd_score_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``aafkit <command> [options]``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import aaf, augmentation, episodes, evaluation, support_extraction, xqsa
from .charts import grouped_bar_svg


class CliError(Exception):
    pass


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for evaluation")
    p.add_argument("--out", default=None, help="output directory")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="aafkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-forward", parents=[common], help="run an attention module on synthetic pyramids")
    p.add_argument("--preset", default=None, help=f"one of {', '.join(aaf.PRESET_NAMES)} or 'xqsa'")
    p.add_argument("--config", default=None, help="AAF config JSON, or XQSA JSON with a 'config' key")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--levels", default="8x8,4x4,2x2", help="query level sizes, HxW comma-separated")
    p.add_argument("--support-levels", default=None, help="support level sizes (default: same as query)")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--shots", type=int, default=1)

    p = sub.add_parser("eval", parents=[common], help="compute mAP reports")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--dataset", default=None, help="canonical split for base/novel aggregates")
    p.add_argument("--coco", action="store_true", help="average over IoU 0.50:0.95")
    p.add_argument("--buckets", action="store_true", help="add S/M/L size buckets")
    p.add_argument("--interpolation", choices=("all", "101", "11"), default="all")

    p = sub.add_parser("rmap", parents=[common], help="relative mAP of a few-shot report against a baseline")
    p.add_argument("--fsod", required=True, help="report JSON of the few-shot method")
    p.add_argument("--baseline", required=True, help="report JSON of the regular detector")
    p.add_argument("--metric", default="map50_All")

    p = sub.add_parser("sample-episodes", parents=[common], help="sample training or evaluation episodes")
    p.add_argument("--gt", required=True)
    p.add_argument("--dataset", default=None, help="canonical split name")
    p.add_argument("--novel-count", type=int, default=None, help="random split with this many novel classes")
    p.add_argument("--phase", choices=("base", "finetune", "eval"), default="base")
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--classes-per-episode", type=int, default=3)
    p.add_argument("--query-per-class", type=int, default=100)
    p.add_argument("--eval-examples", type=int, default=500)
    p.add_argument("--flip-supports", action="store_true", help="record a random flip per support example")

    p = sub.add_parser("augment", parents=[common], help="object-preserving augmentation of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--annotations", required=True, help="JSON list of {bbox: [x,y,w,h], category_id}")
    p.add_argument("--config", default=None, help="augmentation config JSON")
    p.add_argument("--count", type=int, default=4)

    p = sub.add_parser("extract-support", parents=[common], help="support patches for every box of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--strategy", choices=support_extraction.STRATEGIES, default="same_size")
    p.add_argument("--patch-size", type=int, default=128)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the attention backward pass")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _need_file(path):
    if not os.path.isfile(path):
        raise CliError(f"file not found: {path}")
    return path


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _parse_sizes(text):
    sizes = []
    for part in text.split(","):
        try:
            h, w = part.lower().split("x")
            sizes.append((int(h), int(w)))
        except ValueError:
            raise CliError(f"bad level size {part!r}; expected HxW") from None
    return sizes


def _load_json(path):
    try:
        return evaluation.load_json(path)
    except evaluation.AnnotationFormatError as exc:
        raise CliError(str(exc)) from None


# commands


def cmd_demo_forward(args):
    rng = np.random.default_rng(args.seed)
    d = args.channels
    q_sizes = _parse_sizes(args.levels)
    s_sizes = _parse_sizes(args.support_levels) if args.support_levels else q_sizes
    query = [rng.normal(size=(d, h, w)) for h, w in q_sizes]
    supports = {
        f"class_{c}": [[rng.normal(size=(d, h, w)) for h, w in s_sizes] for _ in range(args.shots)]
        for c in range(args.classes)
    }

    use_xqsa = (args.preset or "").lower() == "xqsa"
    config_data = _load_json(_need_file(args.config)) if args.config else None
    if config_data is not None and "weights" in config_data and "w_q" in (config_data["weights"] or {}):
        use_xqsa = True
    if use_xqsa:
        if config_data:
            cfg = xqsa.XqsaConfig.from_dict(config_data.get("config", {}))
            weights = xqsa.XqsaWeights.from_dict(config_data["weights"]) if config_data.get("weights") else None
        else:
            cfg, weights = xqsa.XqsaConfig(seed=args.seed), None
        weights = weights or xqsa.XqsaWeights.initialize(d, cfg.seed, cfg.mlp_hidden)
        outputs = xqsa.xqsa_forward(query, supports, weights, cfg)
        name = "xqsa"
    else:
        if config_data is not None:
            config = aaf.AafConfig.from_dict(config_data, d=d, seed=args.seed)
            name = args.config
        else:
            try:
                config = aaf.make_preset(args.preset or "identity", d=d, seed=args.seed)
            except ValueError as exc:
                raise CliError(str(exc)) from None
            name = args.preset or "identity"
        outputs = aaf.run_pipeline(query, supports, config)

    summary = {"method": name, "query_shapes": [list(lv.shape) for lv in query], "classes": {}}
    print(f"method: {name}")
    for i, lv in enumerate(query):
        print(f"query level {i}: shape {tuple(lv.shape)}")
    for cls, levels in outputs.items():
        entry = []
        for i, lv in enumerate(levels):
            stats = {"shape": list(lv.shape), "min": float(lv.min()), "max": float(lv.max()), "mean": float(lv.mean())}
            entry.append(stats)
            print(
                f"{cls} level {i}: shape {tuple(lv.shape)} "
                f"min {stats['min']:.6f} max {stats['max']:.6f} mean {stats['mean']:.6f}"
            )
        summary["classes"][cls] = entry
    if args.out:
        _write(os.path.join(_out_dir(args), "demo_forward.json"), json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_eval(args):
    gt_data = _load_json(_need_file(args.gt))
    det_data = _load_json(_need_file(args.det))
    try:
        _, gts, _ = evaluation.parse_ground_truth(gt_data, args.gt)
        dets = evaluation.parse_detections(det_data, args.det)
    except evaluation.AnnotationFormatError as exc:
        raise CliError(str(exc)) from None
    split = episodes.make_split(args.dataset) if args.dataset else None
    thresholds = evaluation.IOU_050_095 if args.coco else evaluation.IOU_050
    report = evaluation.compute_map_report(
        gts, dets, split, thresholds, args.buckets, args.interpolation, jobs=max(args.jobs, 1)
    )
    out = _out_dir(args)
    _write(os.path.join(out, "report.json"), report.to_json(indent=2, sort_keys=True) + "\n")
    _write(os.path.join(out, "report.csv"), report.to_csv())
    for split_name, entry in report.summary().items():
        for key, val in entry.items():
            print(f"{split_name} {key}: {val:.6f}")
    return 0


def _summary_of(data, path):
    if not isinstance(data, dict) or "summary" not in data:
        raise CliError(f"{path}: missing key 'summary'")
    return data["summary"]


def cmd_rmap(args):
    fsod = _summary_of(_load_json(_need_file(args.fsod)), args.fsod)
    base = _summary_of(_load_json(_need_file(args.baseline)), args.baseline)
    try:
        report = evaluation.rmap_report(fsod, base, args.metric)
    except evaluation.UndefinedMetricError as exc:
        raise CliError(str(exc)) from None
    if not report.rows:
        raise CliError(f"no split carries {args.metric!r} in both reports")
    out = _out_dir(args)
    _write(os.path.join(out, "rmap.json"), json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(os.path.join(out, "rmap.csv"), report.to_csv())
    splits = list(report.rows)
    svg = grouped_bar_svg(
        splits,
        {
            "baseline": [report.rows[s][1] for s in splits],
            "few-shot": [report.rows[s][0] for s in splits],
        },
        labels={"few-shot": [f"{100 * report.rows[s][2]:.1f}%" for s in splits]},
        title="mAP and RmAP",
    )
    _write(os.path.join(out, "rmap.svg"), svg)
    for s, (f, b, r) in report.rows.items():
        print(f"{s}: fsod {f:.4f} baseline {b:.4f} rmap {100 * r:.2f}%")
    return 0


def cmd_sample_episodes(args):
    data = _load_json(_need_file(args.gt))
    try:
        index = episodes.DatasetIndex.from_ground_truth(data, args.gt)
    except evaluation.AnnotationFormatError as exc:
        raise CliError(str(exc)) from None
    if args.dataset:
        split = episodes.make_split(args.dataset)
    else:
        split = episodes.make_split(
            "custom", mode="random", seed=args.seed, novel_count=args.novel_count or 1, classes=sorted(index.by_class)
        )
    index.check_split(split)
    if args.phase == "eval":
        eps = episodes.sample_eval_suite(index, split, args.shots, args.episodes, args.seed, args.eval_examples)
    else:
        phase = episodes.BASE_TRAINING if args.phase == "base" else episodes.FINE_TUNING
        spec = episodes.EpisodeSpec(
            phase=phase,
            classes_per_episode=args.classes_per_episode,
            shots=args.shots,
            query_images_per_class=args.query_per_class,
            flip_supports=args.flip_supports,
        )
        eps = episodes.sample_episodes(index, split, spec, args.episodes, args.seed)
    out = _out_dir(args)
    _write(os.path.join(out, "split.json"), json.dumps(split.to_dict(), indent=2) + "\n")
    for i, ep in enumerate(eps):
        _write(os.path.join(out, f"episode_{i:04d}.json"), ep.to_json(indent=2) + "\n")
    print(f"wrote {len(eps)} episodes to {out}")
    return 0


def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, image):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read_boxes(path):
    data = _load_json(_need_file(path))
    if isinstance(data, dict) and "annotations" in data:
        data = data["annotations"]
    if not isinstance(data, list):
        raise CliError(f"{path}: expected a list of annotations")
    boxes = []
    for i, ann in enumerate(data):
        try:
            bbox = evaluation._bbox(ann["bbox"], f"{path}: [{i}].bbox")
        except KeyError:
            raise CliError(f"{path}: [{i}]: missing key 'bbox'") from None
        except evaluation.AnnotationFormatError as exc:
            raise CliError(str(exc)) from None
        boxes.append(augmentation.BoundingBox.from_xywh(bbox, int(ann.get("category_id", 0))))
    return boxes


def _box_json(b):
    return {"bbox": [b.x_min, b.y_min, b.width, b.height], "category_id": b.category}


def cmd_augment(args):
    _need_file(args.image)
    boxes = _read_boxes(args.annotations)
    cfg = augmentation.AugmentConfig()
    if args.config:
        cfg = augmentation.AugmentConfig.from_dict(_load_json(_need_file(args.config)))
    try:
        source = augmentation.AnnotatedImage(read_image(args.image), boxes)
    except ValueError as exc:
        raise CliError(f"{args.annotations}: {exc}") from None
    rng = np.random.default_rng(args.seed)
    out = _out_dir(args)
    manifest = []
    for i in range(args.count):
        result = augmentation.augment(source, cfg, rng)
        name = f"aug_{i:04d}.png"
        write_image(os.path.join(out, name), result.image)
        manifest.append(
            {
                "file": name,
                "boxes": [_box_json(b) for b in result.boxes],
                "transforms": json.loads(json.dumps(result.transforms)),
            }
        )
    _write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} augmented images to {out}")
    return 0


def cmd_extract_support(args):
    image = read_image(_need_file(args.image))
    boxes = _read_boxes(args.annotations)
    strategy = support_extraction.ExtractionStrategy(args.strategy, args.patch_size)
    out = _out_dir(args)
    manifest = []
    n = 0
    for bi, box in enumerate(boxes):
        try:
            patches = support_extraction.extract_support(image, box, strategy)
        except ValueError as exc:
            raise CliError(f"{args.annotations}: [{bi}]: {exc}") from None
        for patch in patches:
            name = f"patch_{n:04d}.png"
            write_image(os.path.join(out, name), patch.image)
            manifest.append({"file": name, "box_index": bi, **patch.to_dict()})
            n += 1
    _write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {n} patches to {out}")
    return 0


def cmd_grad_check(args):
    errors = xqsa.gradient_check(args.instances, eps=args.eps, seed=args.seed)
    worst = max(errors)
    print(f"instances: {len(errors)}")
    print(f"max relative error: {worst:.3e} (tolerance {args.tolerance:.1e})")
    if args.out:
        _write(
            os.path.join(_out_dir(args), "grad_check.json"),
            json.dumps({"errors": errors, "max": worst, "tolerance": args.tolerance}, indent=2) + "\n",
        )
    return 0 if worst <= args.tolerance else 1


COMMANDS = {
    "demo-forward": cmd_demo_forward,
    "eval": cmd_eval,
    "rmap": cmd_rmap,
    "sample-episodes": cmd_sample_episodes,
    "augment": cmd_augment,
    "extract-support": cmd_extract_support,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

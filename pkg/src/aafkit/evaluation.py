"""Detection metrics: IoU, greedy matching, AP, mAP, size buckets and RmAP.

Boxes are ``(x, y, width, height)`` in pixels. AP uses the all-point
precision envelope unless ``interpolation="101"`` (COCO) or ``"11"``
(VOC 2007) is requested.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

IOU_050 = (0.5,)
IOU_050_095 = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

SMALL_MAX = 32.0
MEDIUM_MAX = 96.0
BUCKETS = ("All", "S", "M", "L")


class UndefinedMetricError(ValueError):
    """Raised when a relative metric has a non-positive baseline."""


class AnnotationFormatError(ValueError):
    """Malformed ground-truth or detection file; message names the JSON path."""


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: object
    category_id: int
    bbox: tuple

    def __post_init__(self):
        _check_box(self.bbox)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: object
    category_id: int
    bbox: tuple
    score: float

    def __post_init__(self):
        _check_box(self.bbox)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def _check_box(bbox):
    if len(bbox) != 4:
        raise ValueError(f"bbox must be (x, y, w, h), got {bbox!r}")
    if not (bbox[2] > 0 and bbox[3] > 0):
        raise ValueError(f"bbox needs positive width and height, got {bbox!r}")


def iou(a, b):
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax1, ay1 = a[0] + a[2], a[1] + a[3]
    bx1, by1 = b[0] + b[2], b[1] + b[3]
    iw = min(ax1, bx1) - max(a[0], b[0])
    ih = min(ay1, by1) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def box_size(bbox):
    return math.sqrt(bbox[2] * bbox[3])


def size_bucket(bbox):
    """``"S"`` below 32 px, ``"M"`` below 96 px, else ``"L"`` (on sqrt(w*h))."""
    s = box_size(bbox)
    if s < SMALL_MAX:
        return "S"
    if s < MEDIUM_MAX:
        return "M"
    return "L"


def score_order(dets):
    """Indices of ``dets`` by descending score, ties kept in input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets, gts, threshold):
    """Greedy one-to-one matching of one category's detections.

    Detections are visited by descending score; each takes the still
    unmatched ground truth of its image with the highest IoU, provided the
    IoU is at least ``threshold``.

    Returns
    -------
    order : list of int
        Detection indices in visiting order.
    matched_gt : list
        For each visited detection, the index into ``gts`` it matched, or None.
    """
    by_image = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    taken = set()
    order = score_order(dets)
    matched = []
    for di in order:
        det = dets[di]
        best, best_iou = None, threshold
        for gi in by_image.get(det.image_id, ()):
            if gi in taken:
                continue
            ov = iou(det.bbox, gts[gi].bbox)
            if ov >= best_iou and (best is None or ov > best_iou):
                best, best_iou = gi, ov
        if best is not None:
            taken.add(best)
        matched.append(best)
    return order, matched


def average_precision(labels, total_gt, interpolation="all"):
    """Area under the precision envelope of a score-ordered TP/FP sequence.

    ``labels`` holds booleans (True = TP). With no ground truth the AP is 0
    if anything was detected and 1 otherwise.
    """
    labels = np.asarray(labels, dtype=bool)
    if total_gt == 0:
        return 0.0 if labels.size else 1.0
    if labels.size == 0:
        return 0.0
    tp = np.cumsum(labels)
    precision = tp / np.arange(1, labels.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all":
        return math.fsum(envelope[labels]) / total_gt
    if interpolation in ("101", "11"):
        recall = tp / total_gt
        points = np.linspace(0.0, 1.0, int(interpolation))
        idx = np.searchsorted(recall, points, side="left")
        vals = np.where(idx < labels.size, envelope[np.minimum(idx, labels.size - 1)], 0.0)
        return float(vals.mean())
    raise ValueError(f"unknown interpolation {interpolation!r}")


def _labels_for_bucket(dets, gts, order, matched, bucket):
    """TP/FP labels and GT count after restricting to one size bucket."""
    if bucket == "All":
        return [m is not None for m in matched], len(gts)
    labels = []
    for di, gi in zip(order, matched):
        if gi is not None:
            if size_bucket(gts[gi].bbox) == bucket:
                labels.append(True)
        elif size_bucket(dets[di].bbox) == bucket:
            labels.append(False)
    return labels, sum(1 for g in gts if size_bucket(g.bbox) == bucket)


@dataclass
class ClassResult:
    """AP of one category at every (threshold, bucket), plus raw counts."""

    category_id: int
    ap: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)
    n_det: dict = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def included(self, threshold, bucket):
        return self.n_gt[(threshold, bucket)] > 0 or self.n_det[(threshold, bucket)] > 0


def evaluate_class(category_id, dets, gts, thresholds, buckets, interpolation="all"):
    res = ClassResult(category_id)
    for t in thresholds:
        order, matched = match_detections(dets, gts, t)
        for b in buckets:
            labels, n_gt = _labels_for_bucket(dets, gts, order, matched, b)
            res.ap[(t, b)] = average_precision(labels, n_gt, interpolation)
            res.n_gt[(t, b)] = n_gt
            res.n_det[(t, b)] = len(labels)
            if b == "All" and t == thresholds[0]:
                res.tp = sum(labels)
                res.fp = len(labels) - res.tp
                res.fn = n_gt - res.tp
    return res


def _mean(values):
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class MetricReport:
    thresholds: tuple
    buckets: tuple
    classes: dict
    splits: dict
    interpolation: str = "all"
    tie_break: str = "input_order"

    def class_map(self, class_ids, threshold, bucket="All"):
        """Mean AP over ``class_ids``, skipping classes with no GT and no detections."""
        aps = [
            self.classes[c].ap[(threshold, bucket)]
            for c in sorted(class_ids)
            if c in self.classes and self.classes[c].included(threshold, bucket)
        ]
        return _mean(aps)

    def map(self, split="all", bucket="All", thresholds=None):
        """mAP over ``thresholds`` (mean of the per-threshold mAPs)."""
        ids = self.splits[split]
        ts = self.thresholds if thresholds is None else thresholds
        return _mean([self.class_map(ids, t, bucket) for t in ts])

    @property
    def map50(self):
        return self.map(thresholds=(0.5,))

    @property
    def map50_95(self):
        return self.map(thresholds=IOU_050_095) if self.thresholds == IOU_050_095 else float("nan")

    def summary(self):
        out = {}
        for split in self.splits:
            entry = {}
            for b in self.buckets:
                if 0.5 in self.thresholds:
                    entry[f"map50_{b}"] = self.map(split, b, (0.5,))
                if self.thresholds == IOU_050_095:
                    entry[f"map50_95_{b}"] = self.map(split, b)
            out[split] = entry
        return out

    def to_dict(self):
        classes = {}
        for c, r in self.classes.items():
            classes[str(c)] = {
                "split": self._split_of(c),
                "ap": {f"{t}|{b}": _json_float(r.ap[(t, b)]) for t in self.thresholds for b in self.buckets},
                "included": {
                    f"{t}|{b}": r.included(t, b) for t in self.thresholds for b in self.buckets
                },
                "tp": r.tp,
                "fp": r.fp,
                "fn": r.fn,
            }
        return {
            "thresholds": list(self.thresholds),
            "buckets": list(self.buckets),
            "interpolation": self.interpolation,
            "tie_break": self.tie_break,
            "splits": {k: sorted(v) for k, v in self.splits.items()},
            "summary": _json_floats(self.summary()),
            "classes": classes,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "split", "threshold", "bucket", "ap"])
        for c, r in self.classes.items():
            for t in self.thresholds:
                for b in self.buckets:
                    if r.included(t, b):
                        w.writerow([c, self._split_of(c), t, b, f"{r.ap[(t, b)]:.6f}"])
        for split, entry in self.summary().items():
            for key, val in entry.items():
                metric, bucket = key.rsplit("_", 1)
                threshold = "0.5" if metric == "map50" else "0.5:0.95"
                w.writerow([f"mAP[{split}]", split, threshold, bucket, _fmt(val)])
        return buf.getvalue()

    def _split_of(self, c):
        for name in ("base", "novel"):
            if c in self.splits.get(name, ()):
                return name
        return "all"


def _fmt(val):
    return "nan" if math.isnan(val) else f"{val:.6f}"


def _json_float(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def _json_floats(d):
    return {k: {kk: _json_float(vv) for kk, vv in v.items()} for k, v in d.items()}


def compute_map_report(
    gts,
    dets,
    split=None,
    thresholds=IOU_050,
    buckets=False,
    interpolation="all",
    jobs=1,
):
    """Evaluate detections against ground truth.

    Parameters
    ----------
    gts, dets : sequences of GroundTruthRecord / DetectionRecord
    split : ClassSplit, optional
        Adds ``base`` and ``novel`` aggregates. Every category must belong
        to it.
    thresholds : tuple of float
        ``IOU_050`` or ``IOU_050_095``.
    buckets : bool
        Also evaluate the S/M/L size buckets.
    jobs : int
        Worker threads for the per-class evaluation; results do not depend
        on it.
    """
    thresholds = tuple(thresholds)
    bucket_names = BUCKETS if buckets else ("All",)
    if split is not None:
        known = set(split.base) | set(split.novel)
        categories = sorted(known)
    else:
        known = None
        categories = sorted({g.category_id for g in gts} | {d.category_id for d in dets})
    if known is not None:
        for rec in list(gts) + list(dets):
            if rec.category_id not in known:
                raise ValueError(f"category {rec.category_id} is not part of split {split.dataset!r}")

    gts_by = {c: [] for c in categories}
    dets_by = {c: [] for c in categories}
    for g in gts:
        gts_by[g.category_id].append(g)
    for d in dets:
        dets_by[d.category_id].append(d)

    def work(c):
        return evaluate_class(c, dets_by[c], gts_by[c], thresholds, bucket_names, interpolation)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, categories))
    else:
        results = [work(c) for c in categories]

    splits = {"all": set(categories)}
    if split is not None:
        splits["base"] = set(split.base)
        splits["novel"] = set(split.novel)
    return MetricReport(
        thresholds,
        bucket_names,
        {r.category_id: r for r in results},
        splits,
        interpolation,
    )


def rmap(map_fsod, map_baseline):
    """Relative mAP ``(fsod - baseline) / baseline`` as a fraction."""
    if not map_baseline > 0:
        raise UndefinedMetricError(f"RmAP is undefined for baseline mAP {map_baseline}")
    return (map_fsod - map_baseline) / map_baseline


@dataclass
class RmapReport:
    rows: dict  # split -> (map_fsod, map_baseline, rmap)

    def to_dict(self):
        return {
            split: {"map_fsod": f, "map_baseline": b, "rmap": r, "rmap_percent": 100 * r}
            for split, (f, b, r) in self.rows.items()
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "map_fsod", "map_baseline", "rmap_percent"])
        for split, (f, b, r) in self.rows.items():
            w.writerow([split, f"{f:.4f}", f"{b:.4f}", f"{100 * r:.2f}%"])
        return buf.getvalue()


def rmap_report(fsod_summary, baseline_summary, key="map50_All"):
    """Pair two report summaries split by split."""
    rows = {}
    for split, entry in fsod_summary.items():
        if split not in baseline_summary:
            continue
        f, b = entry.get(key), baseline_summary[split].get(key)
        if f is None or b is None:
            continue
        rows[split] = (f, b, rmap(f, b))
    return RmapReport(rows)


# file formats


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise AnnotationFormatError(f"{path}: missing key {key!r}")
    return obj[key]


def _bbox(value, path):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise AnnotationFormatError(f"{path}: bbox must be a list of 4 numbers")
    try:
        box = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise AnnotationFormatError(f"{path}: bbox must be numeric") from None
    if not (box[2] > 0 and box[3] > 0):
        raise AnnotationFormatError(f"{path}: bbox needs positive width and height")
    return box


def parse_ground_truth(data, source="ground truth"):
    """Parse the ground-truth JSON document.

    Returns ``(images, records, categories)`` where ``images`` maps id ->
    ``(width, height)`` and ``categories`` maps id -> name.
    """
    images = {}
    for i, img in enumerate(_require(data, "images", f"{source}")):
        p = f"{source}: images[{i}]"
        images[_require(img, "id", p)] = (_require(img, "width", p), _require(img, "height", p))
    categories = {}
    for i, cat in enumerate(data.get("categories", [])):
        p = f"{source}: categories[{i}]"
        categories[int(_require(cat, "id", p))] = cat.get("name", str(cat["id"]))
    records = []
    for i, ann in enumerate(_require(data, "annotations", f"{source}")):
        p = f"{source}: annotations[{i}]"
        image_id = _require(ann, "image_id", p)
        if image_id not in images:
            raise AnnotationFormatError(f"{p}.image_id: unknown image {image_id!r}")
        records.append(
            GroundTruthRecord(image_id, int(_require(ann, "category_id", p)), _bbox(_require(ann, "bbox", p), f"{p}.bbox"))
        )
    return images, records, categories


def parse_detections(data, source="detections"):
    if not isinstance(data, list):
        raise AnnotationFormatError(f"{source}: top level must be a list")
    out = []
    for i, d in enumerate(data):
        p = f"{source}: [{i}]"
        score = _require(d, "score", p)
        if not isinstance(score, (int, float)) or not 0 <= score <= 1:
            raise AnnotationFormatError(f"{p}.score: must be a number in [0, 1]")
        out.append(
            DetectionRecord(
                _require(d, "image_id", p),
                int(_require(d, "category_id", p)),
                _bbox(_require(d, "bbox", p), f"{p}.bbox"),
                float(score),
            )
        )
    return out


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"{path}: invalid JSON ({exc})") from None


class DetectionEvaluator(BaseEstimator):
    """Estimator-style wrapper: ``fit`` on ground truth, ``evaluate`` detections."""

    def __init__(self, thresholds=IOU_050, buckets=False, interpolation="all", split=None, jobs=1):
        self.thresholds = thresholds
        self.buckets = buckets
        self.interpolation = interpolation
        self.split = split
        self.jobs = jobs

    def fit(self, ground_truth, y=None):
        self.ground_truth_ = list(ground_truth)
        return self

    def evaluate(self, detections):
        check_is_fitted(self, "ground_truth_")
        return compute_map_report(
            self.ground_truth_,
            list(detections),
            self.split,
            self.thresholds,
            self.buckets,
            self.interpolation,
            self.jobs,
        )

    def score(self, detections, y=None):
        """mAP at the first configured threshold."""
        return self.evaluate(detections).map(thresholds=(self.thresholds[0],))

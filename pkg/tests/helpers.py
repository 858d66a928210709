"""Random instance builders shared by unit and acceptance tests."""

import numpy as np

from aafkit import aaf
from aafkit.feature_ops import LayerNormParams, MlpWeights
from aafkit.xqsa import XqsaConfig, XqsaWeights


def _mlp_tuple(w):
    return (w.w1.tolist(), w.b1.tolist(), w.w2.tolist(), w.b2.tolist())


def random_aaf_config(rng, d):
    """An AafConfig and the equivalent plain-dict description for the oracle."""
    alignment = ["identity", "qks"][rng.integers(2)]
    normalize = bool(rng.integers(2))
    attention = ["none", "crw", "bga"][rng.integers(3)]
    fusion = ["none", "concat", "addsub", "learned"][rng.integers(4)]
    order = [aaf.ALIGN_THEN_ATTEND, aaf.ATTEND_THEN_ALIGN][rng.integers(2)]

    align_kind = aaf.Identity() if alignment == "identity" else aaf.QueryKeySupport(normalize)
    bga = aaf.BackgroundAttenuation.random(d, rng)
    attn_kind = {"none": aaf.NoAttention(), "crw": aaf.CrwGlobalPool("max"), "bga": bga}[attention]
    learned = aaf.LearnedPointwiseConcat.random(d, rng, d_hidden=int(rng.integers(1, 4)), d_out=int(rng.integers(1, 4)))
    fusion_kind = {
        "none": aaf.NoFusion(),
        "concat": aaf.Concat(),
        "addsub": aaf.AddSubConcat(),
        "learned": learned,
    }[fusion]
    config = aaf.AafConfig(align_kind, attn_kind, fusion_kind, order)
    plain = {
        "alignment": alignment,
        "normalize": normalize,
        "attention": attention,
        "bga_weight": bga.weight.tolist(),
        "fusion": fusion,
        "psi": [_mlp_tuple(learned.psi_dot), _mlp_tuple(learned.psi_sub), _mlp_tuple(learned.psi_cat)],
        "order": order,
    }
    return config, plain


def random_aaf_instance(rng):
    """Small query pyramid, supports and config; fusions get matching shapes."""
    d = int(rng.integers(1, 4))
    n_levels = int(rng.integers(1, 3))
    config, plain = random_aaf_config(rng, d)
    q_sizes = [tuple(int(v) for v in rng.integers(1, 4, size=2)) for _ in range(n_levels)]
    needs_same = plain["alignment"] == "identity" and plain["fusion"] != "none"
    s_sizes = q_sizes if needs_same else [tuple(int(v) for v in rng.integers(1, 4, size=2)) for _ in range(n_levels)]
    query = [rng.normal(size=(d, h, w)) for h, w in q_sizes]
    supports = {
        c: [[rng.normal(size=(d, h, w)) for h, w in s_sizes] for _ in range(int(rng.integers(1, 3)))]
        for c in range(int(rng.integers(1, 3)))
    }
    return query, supports, config, plain


def random_xqsa_instance(rng, flags=None):
    d = int(rng.integers(1, 5))
    n_levels = int(rng.integers(1, 4))
    if flags is None:
        flags = {k: bool(rng.integers(2)) for k in
                 ("multiscale_alignment", "mlp_fusion", "skip_connections", "background_attenuation")}
    q_sizes = [tuple(int(v) for v in rng.integers(1, 4, size=2)) for _ in range(n_levels)]
    s_levels = n_levels if not flags["multiscale_alignment"] else int(rng.integers(1, 4))
    s_sizes = [tuple(int(v) for v in rng.integers(1, 4, size=2)) for _ in range(s_levels)]
    query = [rng.normal(size=(d, h, w)) for h, w in q_sizes]
    supports = {
        c: [[rng.normal(size=(d, h, w)) for h, w in s_sizes] for _ in range(int(rng.integers(1, 3)))]
        for c in range(int(rng.integers(1, 3)))
    }
    hidden = int(rng.integers(1, 5))
    weights = XqsaWeights.initialize(d, seed=int(rng.integers(2**31)), mlp_hidden=hidden)
    weights = XqsaWeights(
        weights.w_q, weights.w_k, weights.w_v, weights.mlp,
        LayerNormParams(rng.normal(size=d), rng.normal(size=d), 1e-5),
        LayerNormParams(rng.normal(size=d), rng.normal(size=d), 1e-5),
        weights.bga,
    )
    config = XqsaConfig(**flags)
    return query, supports, weights, config, flags


def xqsa_weights_plain(w):
    return {
        "w_q": w.w_q.tolist(),
        "w_k": w.w_k.tolist(),
        "w_v": w.w_v.tolist(),
        "mlp": _mlp_tuple(w.mlp),
        "ln_align": (w.ln_pre_align.gamma.tolist(), w.ln_pre_align.beta.tolist(), w.ln_pre_align.epsilon),
        "ln_mlp": (w.ln_pre_mlp.gamma.tolist(), w.ln_pre_mlp.beta.tolist(), w.ln_pre_mlp.epsilon),
        "bga": None if w.bga is None else w.bga.tolist(),
    }


def random_detection_instance(rng, max_gt=4, max_det=5, n_images=2, n_classes=2):
    """Tiny integer-grid detection problem with score ties and exact-threshold IoUs."""
    from aafkit.evaluation import DetectionRecord, GroundTruthRecord

    def box():
        x, y = (int(v) for v in rng.integers(0, 6, size=2))
        w, h = (int(v) for v in rng.integers(2, 9, size=2))
        return (x, y, w, h)

    gts, dets = [], []
    for _ in range(int(rng.integers(0, max_gt + 1))):
        gts.append((int(rng.integers(n_images)), int(rng.integers(n_classes)), box()))
    for _ in range(int(rng.integers(0, max_det + 1))):
        if gts and rng.random() < 0.8:
            # jitter a ground-truth box so true positives are common
            img, cls, (x, y, w, h) = gts[int(rng.integers(len(gts)))]
            b = (x + int(rng.integers(-1, 2)), y + int(rng.integers(-1, 2)), w + int(rng.integers(0, 2)), h)
            b = (max(b[0], 0), max(b[1], 0), b[2], b[3])
            if rng.random() < 0.15:
                cls = int(rng.integers(n_classes))
        else:
            img, cls, b = int(rng.integers(n_images)), int(rng.integers(n_classes)), box()
        dets.append((img, cls, b, float(rng.choice([0.2, 0.5, 0.5, 0.9]))))
    gt_records = [GroundTruthRecord(i, c, b) for i, c, b in gts]
    det_records = [DetectionRecord(i, c, b, s) for i, c, b, s in dets]
    return gts, dets, gt_records, det_records


def random_annotated_image(rng, max_boxes=4, max_side=40):
    from aafkit.augmentation import AnnotatedImage, BoundingBox

    w, h = (int(v) for v in rng.integers(8, max_side + 1, size=2))
    boxes = []
    for _ in range(int(rng.integers(1, max_boxes + 1))):
        x0, x1 = sorted(rng.uniform(0, w, size=2))
        y0, y1 = sorted(rng.uniform(0, h, size=2))
        if rng.random() < 0.5:
            x0, y0, x1, y1 = (float(np.floor(x0)), float(np.floor(y0)), float(np.ceil(x1)), float(np.ceil(y1)))
        if x1 - x0 < 0.5 or y1 - y0 < 0.5:
            x0, y0, x1, y1 = 0.0, 0.0, float(w), float(h)
        boxes.append(BoundingBox(x0, y0, x1, y1, int(rng.integers(3))))
    return AnnotatedImage(rng.random((3, h, w)), boxes)


def crop_violations(a, crop, subset, out):
    """Count subset boxes that are not fully inside the crop or not carried over exactly."""
    x0, y0, x1, y1 = crop
    sx, sy = a.width / (x1 - x0), a.height / (y1 - y0)
    bad = 0
    for i in subset:
        b = a.boxes[i]
        if b.x_min < x0 or b.y_min < y0 or b.x_max > x1 or b.y_max > y1:
            bad += 1
            continue
        want = ((b.x_min - x0) * sx, (b.y_min - y0) * sy, (b.x_max - x0) * sx, (b.y_max - y0) * sy)
        if not any(
            o.category == b.category and np.allclose((o.x_min, o.y_min, o.x_max, o.y_max), want, atol=1e-9)
            for o in out.boxes
        ):
            bad += 1
    return bad


def cutout_violations(a, out, max_fraction):
    """Boxes whose center-pixel set lost more than ``max_fraction`` to the cut-out."""
    from aafkit.augmentation import box_pixel_ranges

    rects = out.transforms[-1][1]
    erased = np.zeros((a.height, a.width), dtype=bool)
    for rx0, ry0, rx1, ry1 in rects:
        erased[ry0:ry1, rx0:rx1] = True
    bad = 0
    for b in a.boxes:
        c0, c1, r0, r1 = box_pixel_ranges(b)
        n = (c1 - c0) * (r1 - r0)
        if erased[r0:r1, c0:c1].sum() > max_fraction * n + 1e-9:
            bad += 1
    # the erased mask must be exactly what changed in the image
    changed = np.any(out.image != a.image, axis=0)
    if np.any(changed & ~erased):
        bad += 1
    return bad


def synthetic_index(classes, n_images=1200, seed=0):
    """Random images holding one to three annotated objects each."""
    from aafkit.episodes import Annotation, DatasetIndex

    rng = np.random.default_rng(seed)
    classes = sorted(classes)
    images, anns = {}, []
    for i in range(n_images):
        images[i] = (200, 200)
        for _ in range(int(rng.integers(1, 4))):
            x, y = (float(v) for v in rng.integers(0, 150, size=2))
            w, h = (float(v) for v in rng.integers(4, 50, size=2))
            anns.append(Annotation(i, int(classes[rng.integers(len(classes))]), (x, y, w, h)))
    return DatasetIndex(images, anns)


def episode_violations(ep, split, spec, novel_pool=None):
    """List of protocol rules the episode breaks (empty when valid)."""
    from aafkit.episodes import BASE_TRAINING

    bad = []
    classes = set(ep.classes)
    if len(ep.classes) != spec.classes_per_episode or len(classes) != len(ep.classes):
        bad.append("class count")
    if spec.phase == BASE_TRAINING and not classes <= split.base:
        bad.append("non-base class in base phase")
    if spec.phase != BASE_TRAINING:
        novel = classes & split.novel
        if not novel:
            bad.append("no novel class")
        for c in novel:
            if list(ep.support[c]) != list(novel_pool[c]):
                bad.append("novel support not from frozen pool")
    for c in ep.classes:
        if len(ep.support[c]) != spec.shots or any(a.category_id != c for a in ep.support[c]):
            bad.append("support shots")
        if ep.query_requested[c] != spec.query_images_per_class:
            bad.append("query request")
    if ep.support_images() & set(ep.query):
        bad.append("support/query overlap")
    return bad

"""Augmentations that never remove an object from the image.

Crop-resize keeps a random non-empty subset of objects fully inside the
crop, and cut-out erases a patch inside individual boxes while leaving most
of every box visible. Flips and color jitter are applied as usual.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .imaging import sample_window

CUTOUT_FILL = 0.5


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    category: int = 0

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"box needs positive area: {self}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def to_xywh(self):
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, bbox, category=0):
        x, y, w, h = bbox
        return cls(x, y, x + w, y + h, category)


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    """A ``(c, h, w)`` image in ``[0, 1]`` with its boxes.

    ``transforms`` logs the augmentations applied so far, e.g.
    ``("hflip",)`` or ``("crop_resize", (x0, y0, x1, y1), subset)``.
    """

    image: np.ndarray
    boxes: tuple = ()
    transforms: tuple = field(default=())

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3:
            raise ValueError(f"image must be (c, h, w), got shape {img.shape}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        h, w = img.shape[1:]
        for b in self.boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(f"box {b} outside a {w}x{h} image")

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_jitter: float = 0.5
    p_crop: float = 0.5
    p_cutout: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    cutout_max_box_fraction: float = 0.5
    min_visible_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_jitter", "p_crop", "p_cutout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} jitter range must lie in [0, 1]")
        if not 0.0 < self.cutout_max_box_fraction <= 1.0:
            raise ValueError("cutout_max_box_fraction must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation options: {sorted(unknown)}")
        return cls(**data)


def union_box(boxes):
    return (
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def sample_object_crop(a, rng):
    """Pick a non-empty subset of boxes and a crop containing all of them.

    Every non-empty subset is equally likely. Each crop edge is drawn
    uniformly (integer pixels) between the subset's union box and the
    image border. Returns ``(crop, subset_indices)``.
    """
    if not a.boxes:
        raise ValueError("object-preserving crop needs at least one box")
    n = len(a.boxes)
    while True:
        keep = rng.random(n) < 0.5
        if keep.any():
            break
    subset = tuple(np.flatnonzero(keep).tolist())
    ux0, uy0, ux1, uy1 = union_box([a.boxes[i] for i in subset])
    x0 = int(rng.integers(0, math.floor(ux0) + 1))
    y0 = int(rng.integers(0, math.floor(uy0) + 1))
    x1 = int(rng.integers(math.ceil(ux1), a.width + 1))
    y1 = int(rng.integers(math.ceil(uy1), a.height + 1))
    return (x0, y0, x1, y1), subset


def crop_resize(a, crop, min_visible_fraction=0.2):
    """Crop to ``(x0, y0, x1, y1)`` and resize back to the original size.

    Boxes are clipped to the crop; a box keeping less than
    ``min_visible_fraction`` of its area is dropped.
    """
    x0, y0, x1, y1 = crop
    cw, ch = x1 - x0, y1 - y0
    if cw <= 0 or ch <= 0:
        raise ValueError(f"empty crop {crop}")
    w, h = a.width, a.height
    image = sample_window(a.image, x0, y0, cw, ch, w, h)
    boxes = []
    for b in a.boxes:
        bx0, by0 = max(b.x_min, x0), max(b.y_min, y0)
        bx1, by1 = min(b.x_max, x1), min(b.y_max, y1)
        if bx1 <= bx0 or by1 <= by0:
            continue
        if (bx1 - bx0) * (by1 - by0) < min_visible_fraction * b.area:
            continue
        nx0 = min(max((bx0 - x0) * w / cw, 0.0), w)
        nx1 = min(max((bx1 - x0) * w / cw, 0.0), w)
        ny0 = min(max((by0 - y0) * h / ch, 0.0), h)
        ny1 = min(max((by1 - y0) * h / ch, 0.0), h)
        if nx1 > nx0 and ny1 > ny0:
            boxes.append(BoundingBox(nx0, ny0, nx1, ny1, b.category))
    return AnnotatedImage(np.clip(image, 0.0, 1.0), boxes, a.transforms)


def object_preserving_crop_resize(a, rng, min_visible_fraction=0.2):
    crop, subset = sample_object_crop(a, rng)
    out = crop_resize(a, crop, min_visible_fraction)
    return replace(out, transforms=a.transforms + (("crop_resize", crop, subset),))


def box_pixel_ranges(box):
    """Pixel index ranges ``(c0, c1, r0, r1)`` whose centers lie in the box."""
    c0 = math.ceil(box.x_min - 0.5)
    c1 = math.ceil(box.x_max - 0.5)
    r0 = math.ceil(box.y_min - 0.5)
    r1 = math.ceil(box.y_max - 0.5)
    if c1 <= c0:
        c0 = min(int(math.floor((box.x_min + box.x_max) / 2)), math.ceil(box.x_max) - 1)
        c1 = c0 + 1
    if r1 <= r0:
        r0 = min(int(math.floor((box.y_min + box.y_max) / 2)), math.ceil(box.y_max) - 1)
        r1 = r0 + 1
    return c0, c1, r0, r1


def _erase_budget(box, max_fraction):
    c0, c1, r0, r1 = box_pixel_ranges(box)
    n_pixels = (c1 - c0) * (r1 - r0)
    return math.floor(max_fraction * n_pixels + 1e-9), (c0, c1, r0, r1)


def object_preserving_cutout(a, rng, p_cutout=0.5, max_fraction=0.5):
    """Erase one gray rectangle inside each selected box.

    A box is selected with probability ``p_cutout``. The rectangle covers
    whole pixels inside the box, with area at most ``max_fraction`` of the
    box. A rectangle is skipped if it would leave any box (including
    overlapping neighbours) with less than ``1 - max_fraction`` of its
    pixels untouched.
    """
    if not a.boxes:
        raise ValueError("object-preserving cut-out needs at least one box")
    h, w = a.height, a.width
    erased = np.zeros((h, w), dtype=bool)
    budgets = [_erase_budget(b, max_fraction) for b in a.boxes]
    rects = []
    for box in a.boxes:
        if not rng.random() < p_cutout:
            continue
        fx0, fx1 = math.ceil(box.x_min), math.floor(box.x_max)
        fy0, fy1 = math.ceil(box.y_min), math.floor(box.y_max)
        pw, ph = fx1 - fx0, fy1 - fy0
        limit = math.floor(max_fraction * box.area + 1e-9)
        if pw < 1 or ph < 1 or limit < 1:
            continue
        rw = int(rng.integers(1, min(pw, limit) + 1))
        rh = int(rng.integers(1, min(ph, limit // rw) + 1))
        rx = fx0 + int(rng.integers(0, pw - rw + 1))
        ry = fy0 + int(rng.integers(0, ph - rh + 1))
        trial = erased.copy()
        trial[ry : ry + rh, rx : rx + rw] = True
        if all(trial[r0:r1, c0:c1].sum() <= budget for budget, (c0, c1, r0, r1) in budgets):
            erased = trial
            rects.append((rx, ry, rx + rw, ry + rh))
    if not rects:
        return replace(a, transforms=a.transforms + (("cutout", ()),))
    image = a.image.copy()
    image[:, erased] = CUTOUT_FILL
    return AnnotatedImage(image, a.boxes, a.transforms + (("cutout", tuple(rects)),))


def hflip(a):
    w = a.width
    boxes = [BoundingBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max, b.category) for b in a.boxes]
    return AnnotatedImage(a.image[:, :, ::-1].copy(), boxes, a.transforms + (("hflip",),))


def vflip(a):
    h = a.height
    boxes = [BoundingBox(b.x_min, h - b.y_max, b.x_max, h - b.y_min, b.category) for b in a.boxes]
    return AnnotatedImage(a.image[:, ::-1].copy(), boxes, a.transforms + (("vflip",),))


def _gray(image):
    if image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return image.mean(axis=0)


def color_jitter(image, brightness=1.0, contrast=1.0, saturation=1.0):
    """Scale brightness, contrast and saturation; factors of 1 are no-ops."""
    out = image
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        m = _gray(out).mean()
        out = np.clip((out - m) * contrast + m, 0.0, 1.0)
    if saturation != 1.0 and out.shape[0] == 3:
        g = _gray(out)[None]
        out = np.clip((out - g) * saturation + g, 0.0, 1.0)
    return out


def flip_and_jitter(a, cfg, rng):
    if rng.random() < cfg.p_hflip:
        a = hflip(a)
    if rng.random() < cfg.p_vflip:
        a = vflip(a)
    if rng.random() < cfg.p_jitter:
        factors = [
            1.0 + rng.uniform(-delta, delta) if delta > 0 else 1.0
            for delta in (cfg.brightness, cfg.contrast, cfg.saturation)
        ]
        a = AnnotatedImage(color_jitter(a.image, *factors), a.boxes, a.transforms + (("jitter", tuple(factors)),))
    return a


def augment(a, cfg, rng):
    """Flip/jitter, then object-preserving crop-resize, then cut-out."""
    a = flip_and_jitter(a, cfg, rng)
    if a.boxes and rng.random() < cfg.p_crop:
        a = object_preserving_crop_resize(a, rng, cfg.min_visible_fraction)
    if a.boxes and cfg.p_cutout > 0:
        a = object_preserving_cutout(a, rng, cfg.p_cutout, cfg.cutout_max_box_fraction)
    return a


class ObjectPreservingAugmenter(TransformerMixin, BaseEstimator):
    """Apply :func:`augment` to a list of :class:`AnnotatedImage`.

    ``fit`` seeds the random stream; successive ``transform`` calls continue it.
    """

    def __init__(
        self,
        p_hflip=0.5,
        p_vflip=0.5,
        p_jitter=0.5,
        p_crop=0.5,
        p_cutout=0.5,
        brightness=0.2,
        contrast=0.2,
        saturation=0.2,
        cutout_max_box_fraction=0.5,
        min_visible_fraction=0.2,
        random_state=0,
    ):
        self.p_hflip = p_hflip
        self.p_vflip = p_vflip
        self.p_jitter = p_jitter
        self.p_crop = p_crop
        self.p_cutout = p_cutout
        self.brightness = brightness
        self.contrast = contrast
        self.saturation = saturation
        self.cutout_max_box_fraction = cutout_max_box_fraction
        self.min_visible_fraction = min_visible_fraction
        self.random_state = random_state

    def _config(self):
        params = self.get_params()
        seed = params.pop("random_state")
        return AugmentConfig(seed=seed if isinstance(seed, int) else 0, **params)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "rng_")
        if isinstance(X, AnnotatedImage):
            return augment(X, self.config_, self.rng_)
        return [augment(a, self.config_, self.rng_) for a in X]

"""Turn a support image and one of its boxes into fixed-size patches.

Strategies: ``default`` (fixed-size crop around the object, shrunk if the
object is larger), ``context_padding`` (default with the context zeroed),
``reflection`` (default with the context replaced by mirrored object
content), ``same_size`` (object scaled so its longer side fills the patch),
``multiscale`` (three patches with the object's longer side at 32, 64 and
128 px) and ``mixed`` (default for small objects, same-size otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imaging import sample_window

STRATEGIES = ("default", "context_padding", "reflection", "same_size", "multiscale", "mixed")
SMALL_OBJECT_SIZE = 32.0
MULTISCALE_TARGETS = (32, 64, 128)


@dataclass(frozen=True)
class ExtractionStrategy:
    kind: str = "same_size"
    patch_size: int = 128
    multiscale_targets: tuple = MULTISCALE_TARGETS

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGIES)}")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")


@dataclass(frozen=True, eq=False)
class SupportPatch:
    image: np.ndarray
    box: object
    strategy: str
    scale_index: int = 0
    # object extent inside the patch, (x0, y0, x1, y1)
    object_region: tuple = (0.0, 0.0, 0.0, 0.0)

    def to_dict(self):
        return {
            "box": [self.box.x_min, self.box.y_min, self.box.x_max, self.box.y_max],
            "category": self.box.category,
            "strategy": self.strategy,
            "scale_index": self.scale_index,
            "object_region": list(self.object_region),
        }


def _check_box(image, box):
    _, h, w = image.shape
    if not (box.x_max > box.x_min and box.y_max > box.y_min):
        raise ValueError(f"degenerate box {box}")
    if box.x_min < 0 or box.y_min < 0 or box.x_max > w or box.y_max > h:
        raise ValueError(f"box {box} lies outside the {w}x{h} image")


def _pixel_span(lo, hi, n):
    """Indices of pixels whose centers fall in ``[lo, hi)``, at least one."""
    a = max(math.ceil(lo - 0.5), 0)
    b = min(math.ceil(hi - 0.5), n)
    if b <= a:
        a = min(max(int(math.floor((lo + hi) / 2)), 0), n - 1)
        b = a + 1
    return a, b


def default_patch(image, box, patch_size):
    """Crop centered on the box; scale down to fit when the box is larger."""
    side = max(float(patch_size), box.width, box.height)
    cx = (box.x_min + box.x_max) / 2
    cy = (box.y_min + box.y_max) / 2
    if side == patch_size:
        x0, y0 = float(round(cx - side / 2)), float(round(cy - side / 2))
    else:
        x0, y0 = cx - side / 2, cy - side / 2
    patch = sample_window(image, x0, y0, side, side, patch_size, patch_size)
    s = patch_size / side
    region = ((box.x_min - x0) * s, (box.y_min - y0) * s, (box.x_max - x0) * s, (box.y_max - y0) * s)
    return patch, region


def context_mask(patch_size, region):
    c0, c1 = _pixel_span(region[0], region[2], patch_size)
    r0, r1 = _pixel_span(region[1], region[3], patch_size)
    mask = np.zeros((patch_size, patch_size), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def context_padding_patch(image, box, patch_size):
    patch, region = default_patch(image, box, patch_size)
    return np.where(context_mask(patch_size, region)[None], patch, 0.0), region


def reflection_patch(image, box, patch_size):
    """Default geometry with the context tiled by mirrored object content."""
    patch, region = default_patch(image, box, patch_size)
    c0, c1 = _pixel_span(region[0], region[2], patch_size)
    r0, r1 = _pixel_span(region[1], region[3], patch_size)
    core = patch[:, r0:r1, c0:c1]
    pad = ((0, 0), (r0, patch_size - r1), (c0, patch_size - c1))
    return np.pad(core, pad, mode="symmetric"), region


def _scaled_object_patch(image, box, patch_size, target):
    """Object scaled so its longer side spans ``target`` px, centered, zero-padded."""
    s = target / max(box.width, box.height)
    rw = min(max(int(round(box.width * s)), 1), patch_size)
    rh = min(max(int(round(box.height * s)), 1), patch_size)
    obj = sample_window(image, box.x_min, box.y_min, box.width, box.height, rw, rh)
    patch = np.zeros((image.shape[0], patch_size, patch_size))
    ox, oy = (patch_size - rw) // 2, (patch_size - rh) // 2
    patch[:, oy : oy + rh, ox : ox + rw] = obj
    return patch, (float(ox), float(oy), float(ox + rw), float(oy + rh))


def same_size_patch(image, box, patch_size):
    return _scaled_object_patch(image, box, patch_size, patch_size)


def multiscale_patches(image, box, patch_size, targets=MULTISCALE_TARGETS):
    """One patch per target size; each keeps the surrounding context.

    The window is centered on the box and scaled so the object's longer
    side measures ``target`` pixels in the patch. Out-of-image context is 0.
    """
    cx = (box.x_min + box.x_max) / 2
    cy = (box.y_min + box.y_max) / 2
    longest = max(box.width, box.height)
    out = []
    for t in targets:
        side = patch_size * longest / t
        x0, y0 = cx - side / 2, cy - side / 2
        patch = sample_window(image, x0, y0, side, side, patch_size, patch_size)
        s = patch_size / side
        region = ((box.x_min - x0) * s, (box.y_min - y0) * s, (box.x_max - x0) * s, (box.y_max - y0) * s)
        out.append((patch, region))
    return out


def is_small(box):
    return math.sqrt(box.width * box.height) < SMALL_OBJECT_SIZE


def extract_support(image, box, strategy=ExtractionStrategy()):
    """Extract support patches for ``box`` from a ``(c, h, w)`` image.

    Returns a list of :class:`SupportPatch`: three for ``multiscale``, one
    otherwise.
    """
    if isinstance(strategy, str):
        strategy = ExtractionStrategy(strategy)
    image = np.asarray(getattr(image, "image", image), dtype=np.float64)
    _check_box(image, box)
    p = strategy.patch_size
    kind = strategy.kind
    if kind == "multiscale":
        return [
            SupportPatch(patch, box, kind, i, region)
            for i, (patch, region) in enumerate(multiscale_patches(image, box, p, strategy.multiscale_targets))
        ]
    if kind == "mixed":
        fn = default_patch if is_small(box) else same_size_patch
    else:
        fn = {
            "default": default_patch,
            "context_padding": context_padding_patch,
            "reflection": reflection_patch,
            "same_size": same_size_patch,
        }[kind]
    patch, region = fn(image, box, p)
    return [SupportPatch(patch, box, kind, 0, region)]


class SupportExtractor(TransformerMixin, BaseEstimator):
    """Map ``(image, box)`` pairs to support patches.

    ``transform`` returns an array ``(n_patches, c, patch_size, patch_size)``;
    ``extract`` keeps the :class:`SupportPatch` metadata.
    """

    def __init__(self, strategy="same_size", patch_size=128):
        self.strategy = strategy
        self.patch_size = patch_size

    def fit(self, X=None, y=None):
        self.strategy_ = ExtractionStrategy(self.strategy, self.patch_size)
        return self

    def extract(self, X):
        strategy = getattr(self, "strategy_", None) or ExtractionStrategy(self.strategy, self.patch_size)
        return [patch for image, box in X for patch in extract_support(image, box, strategy)]

    def transform(self, X):
        return np.stack([patch.image for patch in self.extract(X)])

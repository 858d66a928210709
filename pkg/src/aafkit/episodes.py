"""Base/novel class splits and seeded episode sampling.

Per-episode generators come from ``numpy.random.SeedSequence([seed, index])``
so a suite can be rebuilt, or produced in parallel, from one master seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .evaluation import parse_ground_truth

BASE_TRAINING = "base_training"
FINE_TUNING = "fine_tuning"

_NOVEL = {
    "pascal_voc": (3, 6, 10, 14, 18),
    "coco": (1, 2, 3, 4, 5, 6, 7, 9, 15, 16, 17, 18, 19, 20, 40, 57, 58, 59, 61, 63),
    "dota": (3, 5, 15),
    "dior": (1, 3, 17, 18, 20),
}
_N_CLASSES = {"pascal_voc": 20, "coco": 80, "dota": 16, "dior": 20}
_ALIASES = {"voc": "pascal_voc", "pascalvoc": "pascal_voc", "ms_coco": "coco", "mscoco": "coco"}


class InsufficientDataError(ValueError):
    pass


def _dataset_key(name):
    key = name.lower().replace(" ", "_").replace("-", "_")
    return _ALIASES.get(key, key)


@dataclass(frozen=True)
class ClassSplit:
    dataset: str
    base: frozenset
    novel: frozenset

    def __post_init__(self):
        object.__setattr__(self, "base", frozenset(self.base))
        object.__setattr__(self, "novel", frozenset(self.novel))
        if self.base & self.novel:
            raise ValueError(f"base and novel overlap on {sorted(self.base & self.novel)}")

    @property
    def classes(self):
        return self.base | self.novel

    def to_dict(self):
        return {"dataset": self.dataset, "base": sorted(self.base), "novel": sorted(self.novel)}


def make_split(dataset, mode="canonical", seed=None, novel_count=None, classes=None):
    """Return the base/novel partition of a dataset's categories.

    ``mode="canonical"`` gives the published split for pascal_voc, coco,
    dota or dior. ``mode="random"`` draws ``novel_count`` novel classes
    uniformly from ``classes`` (or the dataset's ids 1..N) with ``seed``.
    """
    key = _dataset_key(dataset)
    if mode == "canonical":
        if key not in _NOVEL:
            raise ValueError(f"no canonical split for dataset {dataset!r}")
        all_ids = set(range(1, _N_CLASSES[key] + 1))
        novel = set(_NOVEL[key])
        return ClassSplit(key, all_ids - novel, novel)
    if mode == "random":
        if classes is None:
            if key not in _N_CLASSES:
                raise ValueError(f"unknown dataset {dataset!r}; pass its class ids")
            classes = range(1, _N_CLASSES[key] + 1)
        classes = sorted(classes)
        if novel_count is None:
            novel_count = len(_NOVEL.get(key, ())) or 1
        if not 0 < novel_count < len(classes):
            raise ValueError("novel_count must leave at least one base class")
        rng = np.random.default_rng(seed)
        novel = set(rng.choice(classes, size=novel_count, replace=False).tolist())
        return ClassSplit(key, set(classes) - novel, novel)
    raise ValueError(f"unknown split mode {mode!r}")


@dataclass(frozen=True)
class Annotation:
    image_id: object
    category_id: int
    bbox: tuple


@dataclass
class DatasetIndex:
    """Image sizes and boxes, with a per-class inverted index."""

    images: dict  # image id -> (width, height)
    annotations: list
    by_class: dict = field(init=False)
    images_by_class: dict = field(init=False)
    by_image: dict = field(init=False)

    def __post_init__(self):
        self.by_class = {}
        self.images_by_class = {}
        self.by_image = {}
        for ann in self.annotations:
            if ann.image_id not in self.images:
                raise ValueError(f"annotation refers to unknown image {ann.image_id!r}")
            self.by_class.setdefault(ann.category_id, []).append(ann)
            self.by_image.setdefault(ann.image_id, []).append(ann)
        for c, anns in self.by_class.items():
            self.images_by_class[c] = list(dict.fromkeys(a.image_id for a in anns))

    @classmethod
    def from_ground_truth(cls, data, source="ground truth"):
        images, records, _ = parse_ground_truth(data, source)
        return cls(images, [Annotation(r.image_id, r.category_id, r.bbox) for r in records])

    def check_split(self, split):
        unknown = set(self.by_class) - split.classes
        if unknown:
            raise ValueError(f"annotations use classes outside split {split.dataset!r}: {sorted(unknown)}")


@dataclass(frozen=True)
class EpisodeSpec:
    phase: str = BASE_TRAINING
    classes_per_episode: int = 3
    shots: int = 1
    query_images_per_class: int = 100
    # documentation only: no optimizer exists here
    learning_rate: float = 1e-3
    episodes: int = 1000
    # policy flag for the trainer: draw a horizontal flip per support example
    flip_supports: bool = False

    def __post_init__(self):
        if self.phase not in (BASE_TRAINING, FINE_TUNING):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.classes_per_episode < 1 or self.shots < 1 or self.query_images_per_class < 1:
            raise ValueError("classes_per_episode, shots and query_images_per_class must be >= 1")

    @classmethod
    def fine_tuning(cls, shots, **kwargs):
        return cls(phase=FINE_TUNING, shots=shots, learning_rate=1e-4, **kwargs)


@dataclass
class Episode:
    classes: list
    support: dict  # class -> list of Annotation
    query: list  # image ids, de-duplicated
    query_requested: dict  # class -> requested count
    query_counts: dict  # class -> effective count
    phase: str = BASE_TRAINING
    support_flips: dict = None  # class -> list of bool, when flipping is enabled

    @property
    def shortfall(self):
        return {c: self.query_requested[c] - self.query_counts[c] for c in self.classes
                if self.query_counts[c] < self.query_requested[c]}

    def support_images(self):
        return {a.image_id for anns in self.support.values() for a in anns}

    def targets(self, index):
        """Query annotations restricted to the episode classes."""
        keep = set(self.classes)
        return [a for img in self.query for a in index.by_image.get(img, ()) if a.category_id in keep]

    def to_dict(self):
        return {
            "phase": self.phase,
            "classes": list(self.classes),
            "support": {
                str(c): [{"image_id": a.image_id, "bbox": list(a.bbox)} for a in anns]
                for c, anns in self.support.items()
            },
            "query": list(self.query),
            "query_requested": {str(c): n for c, n in self.query_requested.items()},
            "query_counts": {str(c): n for c, n in self.query_counts.items()},
            "shortfall": {str(c): n for c, n in self.shortfall.items()},
            "support_flips": None if self.support_flips is None
            else {str(c): list(f) for c, f in self.support_flips.items()},
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def episode_rng(seed, index):
    """Generator for episode ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _choose(rng, items, k):
    idx = rng.choice(len(items), size=k, replace=False)
    return [items[i] for i in sorted(idx.tolist())]


def make_frozen_pool(index, split, shots, rng):
    """Draw the K novel-class examples once, before fine-tuning."""
    pool = {}
    for c in sorted(split.novel):
        anns = index.by_class.get(c, [])
        if len(anns) < shots:
            raise InsufficientDataError(f"novel class {c} has {len(anns)} annotations, need {shots}")
        pool[c] = _choose(rng, anns, shots)
    return pool


def _sample_classes(split, spec, available, novel_pool, rng):
    n = spec.classes_per_episode
    if spec.phase == BASE_TRAINING:
        candidates = sorted(c for c in split.base if c in available)
        if len(candidates) < n:
            raise InsufficientDataError(f"only {len(candidates)} base classes have data, need {n}")
        return _choose(rng, candidates, n)
    novel = sorted(c for c in split.novel if c in (novel_pool or {}))
    if not novel:
        raise InsufficientDataError("fine-tuning needs at least one novel class in the frozen pool")
    first = novel[rng.integers(len(novel))]
    rest = sorted(c for c in (set(split.base) & available) | set(novel) if c != first)
    if len(rest) < n - 1:
        raise InsufficientDataError(f"only {len(rest) + 1} classes available, need {n}")
    return sorted([first] + _choose(rng, rest, n - 1))


def sample_episode(index, split, spec, novel_pool=None, rng=None):
    """Sample one training episode.

    Supports of base classes are drawn uniformly among the class's
    annotations; novel classes reuse ``novel_pool`` verbatim. Query images
    are drawn per class among images that hold no support example, then
    de-duplicated.
    """
    rng = np.random.default_rng(rng)
    available = set(index.by_class)
    classes = _sample_classes(split, spec, available, novel_pool, rng)

    support = {}
    for c in classes:
        if c in split.novel:
            if spec.phase == BASE_TRAINING:
                raise ValueError(f"novel class {c} sampled during base training")
            support[c] = list(novel_pool[c])
        else:
            anns = index.by_class[c]
            if len(anns) < spec.shots:
                raise InsufficientDataError(f"class {c} has {len(anns)} annotations, need {spec.shots}")
            support[c] = _choose(rng, anns, spec.shots)
    support_imgs = {a.image_id for anns in support.values() for a in anns}

    query = []
    requested, counts = {}, {}
    for c in classes:
        pool = [img for img in index.images_by_class[c] if img not in support_imgs]
        k = spec.query_images_per_class
        if len(pool) < k:
            raise InsufficientDataError(
                f"class {c} has {len(pool)} query images outside the support set, need {k}"
            )
        chosen = _choose(rng, pool, k)
        requested[c] = k
        counts[c] = k
        query.extend(chosen)
    query = list(dict.fromkeys(query))
    flips = None
    if spec.flip_supports:
        flips = {c: [bool(f) for f in rng.random(len(support[c])) < 0.5] for c in classes}
    return Episode(classes, support, query, requested, counts, spec.phase, flips)


def sample_eval_suite(index, split, shots, episodes, seed=0, examples_per_class=500, exclude=()):
    """Evaluation episodes over every class of the split.

    Each episode re-samples K supports per class from ``index`` (the test
    side) and requests ``examples_per_class`` object instances per class
    from the remaining images, taking all that exist when fewer are
    available. Shortfalls are recorded on the episode. Annotations in
    ``exclude`` (e.g. the fine-tuning pool) are never used as supports.
    """
    exclude = set(exclude)
    suite = []
    for e in range(episodes):
        rng = episode_rng(seed, e)
        candidates = {c: [a for a in index.by_class.get(c, ()) if a not in exclude] for c in split.classes}
        classes = sorted(c for c in split.classes if len(candidates[c]) > shots)
        support = {c: _choose(rng, candidates[c], shots) for c in classes}
        support_imgs = {a.image_id for anns in support.values() for a in anns}
        query, requested, counts = [], {}, {}
        for c in classes:
            pool = [a for a in index.by_class[c] if a.image_id not in support_imgs]
            k = min(examples_per_class, len(pool))
            chosen = _choose(rng, pool, k) if k else []
            requested[c] = examples_per_class
            counts[c] = k
            query.extend(a.image_id for a in chosen)
        suite.append(Episode(classes, support, list(dict.fromkeys(query)), requested, counts, "evaluation"))
    return suite


def sample_episodes(index, split, spec, count, seed=0, novel_pool=None):
    """``count`` training episodes, episode ``i`` drawn from ``episode_rng(seed, i)``."""
    if spec.phase == FINE_TUNING and novel_pool is None:
        novel_pool = make_frozen_pool(index, split, spec.shots, np.random.default_rng(seed))
    return [sample_episode(index, split, spec, novel_pool, episode_rng(seed, i)) for i in range(count)]

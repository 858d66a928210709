"""Query-support attention operators and evaluation tools for few-shot detection."""

from .aaf import AafAttention, AafConfig, make_preset, run_pipeline
from .augmentation import AnnotatedImage, AugmentConfig, BoundingBox, ObjectPreservingAugmenter
from .episodes import ClassSplit, DatasetIndex, Episode, EpisodeSpec, make_split, sample_episode
from .evaluation import DetectionEvaluator, MetricReport, compute_map_report, rmap
from .support_extraction import ExtractionStrategy, SupportExtractor, extract_support
from .xqsa import XqsaAttention, XqsaConfig, XqsaWeights, xqsa_forward

__version__ = "0.1.0"

__all__ = [
    "AafAttention",
    "AafConfig",
    "AnnotatedImage",
    "AugmentConfig",
    "BoundingBox",
    "ClassSplit",
    "DatasetIndex",
    "DetectionEvaluator",
    "Episode",
    "EpisodeSpec",
    "ExtractionStrategy",
    "MetricReport",
    "ObjectPreservingAugmenter",
    "SupportExtractor",
    "XqsaAttention",
    "XqsaConfig",
    "XqsaWeights",
    "compute_map_report",
    "extract_support",
    "make_preset",
    "make_split",
    "rmap",
    "run_pipeline",
    "sample_episode",
    "xqsa_forward",
]

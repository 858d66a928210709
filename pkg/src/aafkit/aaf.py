"""Alignment, global attention and fusion stages for query-support attention.

Each stage is a pure function over flattened ``(positions, channels)``
matrices. :func:`run_pipeline` applies them level by level on feature
pyramids and returns one conditioned query pyramid per support class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .feature_ops import (
    MlpWeights,
    check_flat,
    check_pyramid,
    flatten_spatial,
    global_avg_pool,
    global_max_pool,
    mlp_forward,
    row_softmax,
    unflatten_spatial,
)

ALIGN_THEN_ATTEND = "align_then_attend"
ATTEND_THEN_ALIGN = "attend_then_align"
ORDERS = (ALIGN_THEN_ATTEND, ATTEND_THEN_ALIGN)


# alignment kinds


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class QueryKeySupport:
    """Support re-expressed in query geometry through ``f_q @ f_s.T``."""

    normalize_rows: bool = True


# global attention kinds


@dataclass(frozen=True)
class NoAttention:
    pass


@dataclass(frozen=True)
class CrwGlobalPool:
    """Reweight query channels by the pooled support vector."""

    pooling: str = "max"

    def __post_init__(self):
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")


@dataclass(frozen=True, eq=False)
class BackgroundAttenuation:
    """Self-attention refinement of the support: ``s + softmax(s W s^T / sqrt(d)) s``."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("background attenuation weight must be a square matrix")
        object.__setattr__(self, "weight", w)

    @classmethod
    def random(cls, d, rng):
        a = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-a, a, (d, d)))


# fusion kinds


@dataclass(frozen=True)
class NoFusion:
    pass


@dataclass(frozen=True)
class Concat:
    pass


@dataclass(frozen=True)
class AddSubConcat:
    pass


@dataclass(frozen=True, eq=False)
class LearnedPointwiseConcat:
    psi_dot: MlpWeights
    psi_sub: MlpWeights
    psi_cat: MlpWeights

    def __post_init__(self):
        d = self.psi_dot.d_in
        if self.psi_sub.d_in != d or self.psi_cat.d_in != 2 * d:
            raise ValueError("psi_cat must take twice the channels of psi_dot/psi_sub")
        if not self.psi_dot.d_out == self.psi_sub.d_out == self.psi_cat.d_out:
            raise ValueError("all fusion MLPs must share one output width")

    @classmethod
    def random(cls, d, rng, d_hidden=None, d_out=None):
        d_hidden = d_hidden or d
        d_out = d_out or d
        return cls(
            MlpWeights.random(d, d_hidden, d_out, rng),
            MlpWeights.random(d, d_hidden, d_out, rng),
            MlpWeights.random(2 * d, d_hidden, d_out, rng),
        )


AlignmentKind = Union[Identity, QueryKeySupport]
GlobalAttentionKind = Union[NoAttention, CrwGlobalPool, BackgroundAttenuation]
FusionKind = Union[NoFusion, Concat, AddSubConcat, LearnedPointwiseConcat]


@dataclass(frozen=True)
class AafConfig:
    alignment: AlignmentKind = Identity()
    attention: GlobalAttentionKind = NoAttention()
    fusion: FusionKind = NoFusion()
    order: str = ALIGN_THEN_ATTEND

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if not isinstance(self.alignment, (Identity, QueryKeySupport)):
            raise TypeError(f"not an alignment kind: {self.alignment!r}")
        if not isinstance(self.attention, (NoAttention, CrwGlobalPool, BackgroundAttenuation)):
            raise TypeError(f"not a global attention kind: {self.attention!r}")
        if not isinstance(self.fusion, (NoFusion, Concat, AddSubConcat, LearnedPointwiseConcat)):
            raise TypeError(f"not a fusion kind: {self.fusion!r}")

    def to_dict(self):
        out = {
            "alignment": _ALIGN_NAMES[type(self.alignment)],
            "normalize_rows": getattr(self.alignment, "normalize_rows", False),
            "attention": _ATTN_NAMES[type(self.attention)],
            "fusion": _FUSION_NAMES[type(self.fusion)],
            "order": self.order,
        }
        if isinstance(self.attention, CrwGlobalPool):
            out["pooling"] = self.attention.pooling
        weights = {}
        if isinstance(self.attention, BackgroundAttenuation):
            weights["background_attenuation"] = self.attention.weight.tolist()
        if isinstance(self.fusion, LearnedPointwiseConcat):
            weights["psi_dot"] = self.fusion.psi_dot.to_dict()
            weights["psi_sub"] = self.fusion.psi_sub.to_dict()
            weights["psi_cat"] = self.fusion.psi_cat.to_dict()
        if weights:
            out["weights"] = weights
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data, d=None, seed=0):
        """Build a config from its JSON form.

        Learned stages without stored ``weights`` are initialized from
        ``seed``; that requires the channel count ``d``.
        """
        weights = data.get("weights", {})
        rng = np.random.default_rng(seed)

        align_name = data.get("alignment", "identity")
        if align_name == "identity":
            alignment = Identity()
        elif align_name == "query_key_support":
            alignment = QueryKeySupport(bool(data.get("normalize_rows", True)))
        else:
            raise ValueError(f"unknown alignment {align_name!r}")

        attn_name = data.get("attention", "none")
        if attn_name == "none":
            attention = NoAttention()
        elif attn_name == "crw_global_pool":
            attention = CrwGlobalPool(data.get("pooling", "max"))
        elif attn_name == "background_attenuation":
            if "background_attenuation" in weights:
                attention = BackgroundAttenuation(np.asarray(weights["background_attenuation"]))
            else:
                attention = BackgroundAttenuation.random(_need_d(d, attn_name), rng)
        else:
            raise ValueError(f"unknown attention {attn_name!r}")

        fusion_name = data.get("fusion", "none")
        if fusion_name == "none":
            fusion = NoFusion()
        elif fusion_name == "concat":
            fusion = Concat()
        elif fusion_name == "add_sub_concat":
            fusion = AddSubConcat()
        elif fusion_name == "learned_pointwise_concat":
            if "psi_dot" in weights:
                fusion = LearnedPointwiseConcat(
                    MlpWeights.from_dict(weights["psi_dot"]),
                    MlpWeights.from_dict(weights["psi_sub"]),
                    MlpWeights.from_dict(weights["psi_cat"]),
                )
            else:
                fusion = LearnedPointwiseConcat.random(_need_d(d, fusion_name), rng)
        else:
            raise ValueError(f"unknown fusion {fusion_name!r}")

        return cls(alignment, attention, fusion, data.get("order", ALIGN_THEN_ATTEND))

    @classmethod
    def from_json(cls, text, d=None, seed=0):
        return cls.from_dict(json.loads(text), d=d, seed=seed)


def _need_d(d, what):
    if d is None:
        raise ValueError(f"{what} needs stored weights or a channel count to initialize them")
    return d


_ALIGN_NAMES = {Identity: "identity", QueryKeySupport: "query_key_support"}
_ATTN_NAMES = {
    NoAttention: "none",
    CrwGlobalPool: "crw_global_pool",
    BackgroundAttenuation: "background_attenuation",
}
_FUSION_NAMES = {
    NoFusion: "none",
    Concat: "concat",
    AddSubConcat: "add_sub_concat",
    LearnedPointwiseConcat: "learned_pointwise_concat",
}

PRESET_NAMES = ("identity", "FRW", "DANA_LIKE", "DRL", "MFRCN_FUSION")


def make_preset(name, d=None, seed=0):
    """Return the :class:`AafConfig` for a named method.

    ``DANA_LIKE`` and ``MFRCN_FUSION`` carry learned weights and need the
    channel count ``d``; they are drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    key = name.upper()
    if key == "IDENTITY":
        return AafConfig()
    if key == "FRW":
        return AafConfig(Identity(), CrwGlobalPool("max"), NoFusion())
    if key == "DANA_LIKE":
        return AafConfig(
            QueryKeySupport(normalize_rows=True),
            BackgroundAttenuation.random(_need_d(d, name), rng),
            Concat(),
            ATTEND_THEN_ALIGN,
        )
    if key == "DRL":
        return AafConfig(Identity(), NoAttention(), AddSubConcat())
    if key == "MFRCN_FUSION":
        return AafConfig(
            QueryKeySupport(normalize_rows=True),
            NoAttention(),
            LearnedPointwiseConcat.random(_need_d(d, name), rng),
        )
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def _check_channels(x, y):
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"channel mismatch: {x.shape[1]} vs {y.shape[1]}")


def affinity(f_q, f_s, normalize_rows=True):
    """Query-to-support affinity ``f_q @ f_s.T``, optionally row-softmaxed."""
    lam = f_q @ f_s.T
    return row_softmax(lam) if normalize_rows else lam


def align(f_q, f_s, kind):
    """Spatially align support features with the query.

    Returns ``(a_q, a_s)``. With :class:`QueryKeySupport` the support output
    has one row per query position.
    """
    f_q = check_flat(f_q, "query features")
    f_s = check_flat(f_s, "support features")
    _check_channels(f_q, f_s)
    if isinstance(kind, Identity):
        return f_q, f_s
    if isinstance(kind, QueryKeySupport):
        lam = affinity(f_q, f_s, kind.normalize_rows)
        return f_q, lam @ f_s
    raise TypeError(f"not an alignment kind: {kind!r}")


def background_attenuation(x, weight):
    x = check_flat(x)
    if weight.shape[0] != x.shape[1]:
        raise ValueError(f"attenuation weight is {weight.shape}, features have {x.shape[1]} channels")
    logits = (x @ weight @ x.T) / np.sqrt(x.shape[1])
    return x + row_softmax(logits) @ x


def global_attend(a_q, a_s, kind):
    """Highlight class-specific channels; returns ``(h_q, h_s)``."""
    a_q = check_flat(a_q, "query features")
    a_s = check_flat(a_s, "support features")
    _check_channels(a_q, a_s)
    if isinstance(kind, NoAttention):
        return a_q, a_s
    if isinstance(kind, CrwGlobalPool):
        pooled = global_max_pool(a_s) if kind.pooling == "max" else global_avg_pool(a_s)
        return a_q * pooled, a_s
    if isinstance(kind, BackgroundAttenuation):
        return a_q, background_attenuation(a_s, kind.weight)
    raise TypeError(f"not a global attention kind: {kind!r}")


def fuse(h_q, h_s, kind):
    """Merge highlighted query and support features position by position."""
    h_q = check_flat(h_q, "query features")
    if isinstance(kind, NoFusion):
        return h_q
    h_s = check_flat(h_s, "support features")
    if h_q.shape != h_s.shape:
        raise ValueError(f"fusion needs equal shapes, got {h_q.shape} and {h_s.shape}")
    if isinstance(kind, Concat):
        return np.concatenate([h_q, h_s], axis=1)
    if isinstance(kind, AddSubConcat):
        return np.concatenate([h_q + h_s, h_q - h_s], axis=1)
    if isinstance(kind, LearnedPointwiseConcat):
        return np.concatenate(
            [
                mlp_forward(h_q * h_s, kind.psi_dot),
                mlp_forward(h_q - h_s, kind.psi_sub),
                mlp_forward(np.concatenate([h_q, h_s], axis=1), kind.psi_cat),
            ],
            axis=1,
        )
    raise TypeError(f"not a fusion kind: {kind!r}")


def run_level(f_q, f_s, config):
    """Apply the configured stages to one pair of flattened levels."""
    if config.order == ALIGN_THEN_ATTEND:
        a_q, a_s = align(f_q, f_s, config.alignment)
        h_q, h_s = global_attend(a_q, a_s, config.attention)
    else:
        g_q, g_s = global_attend(f_q, f_s, config.attention)
        h_q, h_s = align(g_q, g_s, config.alignment)
    return fuse(h_q, h_s, config.fusion)


def average_shots(shots):
    """Element-wise mean of K support pyramids of one class."""
    if isinstance(shots, np.ndarray) or (shots and isinstance(shots[0], np.ndarray)):
        shots = [shots]
    shots = [check_pyramid(p, "support") for p in shots]
    if not shots:
        raise ValueError("a class needs at least one support example")
    ref = [lv.shape for lv in shots[0]]
    for p in shots[1:]:
        if [lv.shape for lv in p] != ref:
            raise ValueError("support shots of one class must share pyramid shapes")
    if len(shots) == 1:
        return shots[0]
    return [np.mean([p[i] for p in shots], axis=0) for i in range(len(ref))]


def run_pipeline(query, supports, config):
    """Condition a query pyramid on every class.

    Parameters
    ----------
    query : list of ndarray
        Query pyramid, each level ``(d, h, w)``.
    supports : dict
        ``class -> pyramid`` or ``class -> list of pyramids`` (K shots,
        averaged before use).
    config : AafConfig

    Returns
    -------
    dict
        ``class -> pyramid`` with the query's spatial sizes and the fusion's
        channel count.
    """
    query = check_pyramid(query, "query")
    if not supports:
        raise ValueError("no support classes given")
    out = {}
    for cls, shots in supports.items():
        support = average_shots(shots)
        if len(support) != len(query):
            raise ValueError(f"class {cls!r}: support has {len(support)} levels, query has {len(query)}")
        levels = []
        for q_lv, s_lv in zip(query, support):
            if q_lv.shape[0] != s_lv.shape[0]:
                raise ValueError(f"class {cls!r}: channel mismatch {q_lv.shape[0]} vs {s_lv.shape[0]}")
            fused = run_level(flatten_spatial(q_lv), flatten_spatial(s_lv), config)
            levels.append(unflatten_spatial(fused, q_lv.shape[1], q_lv.shape[2]))
        out[cls] = levels
    return out


class AafAttention(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_pipeline`.

    ``fit`` takes the support set (class -> pyramid or list of K pyramids)
    and stores one averaged pyramid per class. ``transform`` conditions a
    query pyramid on every fitted class.

    Parameters
    ----------
    preset : str or None
        One of :data:`PRESET_NAMES`. Ignored when ``config`` is given.
    config : AafConfig, dict or None
        Explicit configuration (dicts use the JSON form).
    random_state : int
        Seed for learned weights that are not supplied.
    """

    def __init__(self, preset="FRW", config=None, random_state=0):
        self.preset = preset
        self.config = config
        self.random_state = random_state

    def fit(self, X, y=None):
        if not X:
            raise ValueError("no support classes given")
        self.prototypes_ = {c: average_shots(shots) for c, shots in X.items()}
        self.classes_ = list(self.prototypes_)
        d = next(iter(self.prototypes_.values()))[0].shape[0]
        if isinstance(self.config, AafConfig):
            self.config_ = self.config
        elif self.config is not None:
            self.config_ = AafConfig.from_dict(self.config, d=d, seed=self.random_state)
        else:
            self.config_ = make_preset(self.preset, d=d, seed=self.random_state)
        self.n_channels_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "prototypes_")
        return run_pipeline(X, self.prototypes_, self.config_)

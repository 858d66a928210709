"""Cross-scale query-support alignment.

All pyramid levels of the query and of each support are flattened and
stacked, so every query position can attend to every support position
regardless of level. The attention core ``softmax(q k^T / sqrt(d)) v`` has a
hand-written backward pass used by the gradient checks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .aaf import average_shots, background_attenuation
from .feature_ops import (
    LayerNormParams,
    MlpWeights,
    check_flat,
    check_pyramid,
    flatten_spatial,
    layer_norm,
    mlp_forward,
    row_softmax,
    unflatten_spatial,
)


@dataclass(frozen=True)
class XqsaConfig:
    multiscale_alignment: bool = True
    mlp_fusion: bool = True
    skip_connections: bool = True
    background_attenuation: bool = True
    normalize_values: bool = False
    mlp_hidden: int | None = None
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class XqsaWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    mlp: MlpWeights
    ln_pre_align: LayerNormParams
    ln_pre_mlp: LayerNormParams
    bga: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.w_q).shape[0]
        for name in ("w_q", "w_k", "w_v"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {m.shape}")
            object.__setattr__(self, name, m)
        if self.mlp.d_in != d or self.mlp.d_out != d:
            raise ValueError("MLP must map d channels to d channels")
        for ln in (self.ln_pre_align, self.ln_pre_mlp):
            if ln.gamma.shape[0] != d:
                raise ValueError("layer norm width must equal d")
        if self.bga is not None:
            bga = np.asarray(self.bga, dtype=np.float64)
            if bga.shape != (d, d):
                raise ValueError(f"bga must be {d}x{d}")
            object.__setattr__(self, "bga", bga)

    @property
    def d(self):
        return self.w_q.shape[0]

    @classmethod
    def initialize(cls, d, seed=0, mlp_hidden=None):
        """Draw every matrix uniformly from ``[-1/sqrt(d), 1/sqrt(d)]``."""
        rng = np.random.default_rng(seed)
        a = 1.0 / np.sqrt(d)
        w_q, w_k, w_v = (rng.uniform(-a, a, (d, d)) for _ in range(3))
        mlp = MlpWeights.random(d, mlp_hidden or d, d, rng)
        bga = rng.uniform(-a, a, (d, d))
        return cls(w_q, w_k, w_v, mlp, LayerNormParams.identity(d), LayerNormParams.identity(d), bga)

    def to_dict(self):
        return {
            "w_q": self.w_q.tolist(),
            "w_k": self.w_k.tolist(),
            "w_v": self.w_v.tolist(),
            "mlp": self.mlp.to_dict(),
            "ln_pre_align": self.ln_pre_align.to_dict(),
            "ln_pre_mlp": self.ln_pre_mlp.to_dict(),
            "bga": None if self.bga is None else self.bga.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.asarray(data["w_q"]),
            np.asarray(data["w_k"]),
            np.asarray(data["w_v"]),
            MlpWeights.from_dict(data["mlp"]),
            LayerNormParams.from_dict(data["ln_pre_align"]),
            LayerNormParams.from_dict(data["ln_pre_mlp"]),
            None if data.get("bga") is None else np.asarray(data["bga"]),
        )


def save_xqsa(path, config, weights):
    with open(path, "w") as fh:
        json.dump({"config": config.to_dict(), "weights": weights.to_dict()}, fh)


def load_xqsa(path):
    with open(path) as fh:
        data = json.load(fh)
    config = XqsaConfig.from_dict(data.get("config", {}))
    weights = XqsaWeights.from_dict(data["weights"]) if data.get("weights") else None
    return config, weights


def concat_levels(pyramid):
    """Stack flattened levels; returns ``(rows, offsets, shapes)``.

    ``offsets[l]`` is the first row of level ``l``; ``shapes`` keeps each
    level's ``(h, w)`` for :func:`split_levels`.
    """
    pyramid = check_pyramid(pyramid)
    flats = [flatten_spatial(lv) for lv in pyramid]
    offsets = np.cumsum([0] + [f.shape[0] for f in flats[:-1]]).tolist()
    shapes = [lv.shape[1:] for lv in pyramid]
    return np.concatenate(flats, axis=0), offsets, shapes


def split_levels(rows, offsets, shapes):
    rows = check_flat(rows)
    levels = []
    for start, (h, w) in zip(offsets, shapes):
        levels.append(unflatten_spatial(rows[start : start + h * w], h, w))
    return levels


def cross_scale_affinity(q, k):
    """``softmax(q k^T / sqrt(d))`` row by row."""
    q = check_flat(q, "queries")
    k = check_flat(k, "keys")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query/key channel mismatch: {q.shape[1]} vs {k.shape[1]}")
    return row_softmax(q @ k.T / np.sqrt(q.shape[1]))


def attention_core(q, k, v):
    return cross_scale_affinity(q, k) @ check_flat(v, "values")


def attention_core_backward(q, k, v, upstream):
    """Gradients of ``<upstream, softmax(q k^T / sqrt(d)) v>`` w.r.t. q, k, v."""
    q = check_flat(q, "queries")
    k = check_flat(k, "keys")
    v = check_flat(v, "values")
    g = check_flat(upstream, "upstream")
    if k.shape[0] != v.shape[0] or g.shape != (q.shape[0], v.shape[1]) or q.shape[1] != k.shape[1]:
        raise ValueError(
            f"inconsistent shapes q{q.shape} k{k.shape} v{v.shape} upstream{g.shape}"
        )
    scale = 1.0 / np.sqrt(q.shape[1])
    p = cross_scale_affinity(q, k)
    grad_v = p.T @ g
    dp = g @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    grad_q = ds @ k * scale
    grad_k = ds.T @ q * scale
    return grad_q, grad_k, grad_v


def finite_difference_grads(q, k, v, upstream, eps=1e-5):
    """Central differences of ``<upstream, attention_core(q, k, v)>``."""
    args = [np.array(check_flat(a), dtype=np.float64) for a in (q, k, v)]
    g = np.asarray(upstream, dtype=np.float64)
    grads = []
    for idx in range(3):
        x = args[idx]
        grad = np.zeros_like(x)
        for pos in np.ndindex(*x.shape):
            orig = x[pos]
            x[pos] = orig + eps
            plus = np.sum(g * attention_core(*args))
            x[pos] = orig - eps
            minus = np.sum(g * attention_core(*args))
            x[pos] = orig
            grad[pos] = (plus - minus) / (2 * eps)
        grads.append(grad)
    return tuple(grads)


def relative_error(analytic, numeric, floor=1e-8):
    """Largest entrywise ``|a - f| / max(|a|, |f|)``.

    Entries where both values are below ``floor`` are compared absolutely.
    """
    a = np.asarray(analytic)
    f = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def gradient_check(n_instances=20, max_n=6, max_m=6, max_d=4, eps=1e-5, seed=0):
    """Compare analytic and finite-difference gradients on random instances.

    Returns a list with the max relative error of each instance.
    """
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        n, m = rng.integers(1, max_n + 1), rng.integers(1, max_m + 1)
        d, d_v = rng.integers(1, max_d + 1), rng.integers(1, max_d + 1)
        q = rng.normal(size=(n, d))
        k = rng.normal(size=(m, d))
        v = rng.normal(size=(m, d_v))
        g = rng.normal(size=(n, d_v))
        analytic = attention_core_backward(q, k, v, g)
        numeric = finite_difference_grads(q, k, v, g, eps)
        errors.append(max(relative_error(a, f) for a, f in zip(analytic, numeric)))
    return errors


def _align_rows(x_q, x_s, weights, config):
    ln = weights.ln_pre_align
    q = layer_norm(x_q, ln) @ weights.w_q
    k = layer_norm(x_s, ln) @ weights.w_k
    v = (layer_norm(x_s, ln) if config.normalize_values else x_s) @ weights.w_v
    return attention_core(q, k, v)


def xqsa_forward(query, supports, weights, config=XqsaConfig()):
    """Condition the query pyramid on each class with cross-scale attention.

    ``supports`` maps class -> pyramid (or list of K pyramids, averaged).
    Returns class -> pyramid with the query's level shapes.
    """
    query = check_pyramid(query, "query")
    if not supports:
        raise ValueError("no support classes given")
    d = weights.d
    if query[0].shape[0] != d:
        raise ValueError(f"query has {query[0].shape[0]} channels, weights expect {d}")
    if config.background_attenuation and weights.bga is None:
        raise ValueError("background attenuation enabled but weights carry no bga matrix")
    x_q, q_offsets, q_shapes = concat_levels(query)

    out = {}
    for cls, shots in supports.items():
        support = average_shots(shots)
        if support[0].shape[0] != d:
            raise ValueError(f"class {cls!r}: support has {support[0].shape[0]} channels, expected {d}")
        x_s, s_offsets, s_shapes = concat_levels(support)
        if config.background_attenuation:
            x_s = background_attenuation(x_s, weights.bga)

        if config.multiscale_alignment:
            aligned = _align_rows(x_q, x_s, weights, config)
        else:
            if len(support) != len(query):
                raise ValueError("per-level alignment needs equal level counts")
            blocks = []
            for (qo, (qh, qw)), (so, (sh, sw)) in zip(zip(q_offsets, q_shapes), zip(s_offsets, s_shapes)):
                blocks.append(
                    _align_rows(x_q[qo : qo + qh * qw], x_s[so : so + sh * sw], weights, config)
                )
            aligned = np.concatenate(blocks, axis=0)

        if config.skip_connections:
            aligned = aligned + x_q
        if config.mlp_fusion:
            mixed = mlp_forward(layer_norm(aligned, weights.ln_pre_mlp), weights.mlp)
            y = aligned + mixed if config.skip_connections else mixed
        else:
            y = aligned
        out[cls] = split_levels(y, q_offsets, q_shapes)
    return out


class XqsaAttention(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`xqsa_forward`.

    ``fit`` stores the averaged support pyramid of each class and, unless
    ``weights`` is given, initializes the weights from ``random_state``.
    """

    def __init__(
        self,
        multiscale_alignment=True,
        mlp_fusion=True,
        skip_connections=True,
        background_attenuation=True,
        normalize_values=False,
        mlp_hidden=None,
        weights=None,
        random_state=0,
    ):
        self.multiscale_alignment = multiscale_alignment
        self.mlp_fusion = mlp_fusion
        self.skip_connections = skip_connections
        self.background_attenuation = background_attenuation
        self.normalize_values = normalize_values
        self.mlp_hidden = mlp_hidden
        self.weights = weights
        self.random_state = random_state

    def fit(self, X, y=None):
        if not X:
            raise ValueError("no support classes given")
        self.prototypes_ = {c: average_shots(shots) for c, shots in X.items()}
        self.classes_ = list(self.prototypes_)
        d = next(iter(self.prototypes_.values()))[0].shape[0]
        self.config_ = XqsaConfig(
            self.multiscale_alignment,
            self.mlp_fusion,
            self.skip_connections,
            self.background_attenuation,
            self.normalize_values,
            self.mlp_hidden,
            self.random_state,
        )
        self.weights_ = self.weights or XqsaWeights.initialize(d, self.random_state, self.mlp_hidden)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return xqsa_forward(X, self.prototypes_, self.weights_, self.config_)

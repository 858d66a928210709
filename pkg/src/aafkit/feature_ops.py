"""Dense feature kernels shared by every attention module.

A feature map is a float64 array shaped ``(d, h, w)`` (channel, row, column).
Attention code works on flattened ``(n, d)`` matrices where row
``p = row * w + column`` holds the channel vector at that position.
A pyramid is a plain list of feature maps, finest level first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LayerNormParams",
    "MlpWeights",
    "check_feature_map",
    "check_flat",
    "check_pyramid",
    "flatten_spatial",
    "unflatten_spatial",
    "row_softmax",
    "global_max_pool",
    "global_avg_pool",
    "layer_norm",
    "mlp_forward",
    "relu",
]


def _as_float(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_feature_map(x, name="feature map"):
    """Validate a ``(d, h, w)`` map and return it as a float64 array."""
    arr = _as_float(x, name)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (d, h, w) with positive sizes, got {arr.shape}")
    return arr


def check_flat(x, name="features"):
    """Validate an ``(n, d)`` feature matrix and return it as a float64 array."""
    arr = _as_float(x, name)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (positions, channels), got shape {arr.shape}")
    return arr


def check_pyramid(levels, name="pyramid"):
    """Validate a list of feature maps that share one channel count."""
    if isinstance(levels, np.ndarray) and levels.ndim == 3:
        levels = [levels]
    levels = [check_feature_map(lv, f"{name}[{i}]") for i, lv in enumerate(levels)]
    if not levels:
        raise ValueError(f"{name} has no levels")
    d = levels[0].shape[0]
    for i, lv in enumerate(levels):
        if lv.shape[0] != d:
            raise ValueError(f"{name}[{i}] has {lv.shape[0]} channels, expected {d}")
    return levels


def flatten_spatial(fmap):
    """Reshape a ``(d, h, w)`` map into an ``(h*w, d)`` matrix."""
    fmap = check_feature_map(fmap)
    d, h, w = fmap.shape
    return np.ascontiguousarray(fmap.reshape(d, h * w).T)


def unflatten_spatial(flat, h, w):
    """Inverse of :func:`flatten_spatial`."""
    flat = check_flat(flat)
    if flat.shape[0] != h * w:
        raise ValueError(f"cannot unflatten {flat.shape[0]} rows into a {h}x{w} grid")
    return np.ascontiguousarray(flat.T.reshape(flat.shape[1], h, w))


def row_softmax(m, temperature=1.0):
    """Softmax over each row of ``m / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    m = check_flat(m, "logits")
    z = m / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def global_max_pool(fmap):
    """Per-channel maximum over all positions.

    Accepts either a ``(d, h, w)`` map or a flattened ``(n, d)`` matrix.
    """
    arr = np.asarray(fmap, dtype=np.float64)
    if arr.ndim == 3:
        return check_feature_map(arr).max(axis=(1, 2))
    return check_flat(arr).max(axis=0)


def global_avg_pool(fmap):
    arr = np.asarray(fmap, dtype=np.float64)
    if arr.ndim == 3:
        return check_feature_map(arr).mean(axis=(1, 2))
    return check_flat(arr).mean(axis=0)


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        gamma = _as_float(self.gamma, "gamma").ravel()
        beta = _as_float(self.beta, "beta").ravel()
        if gamma.shape != beta.shape:
            raise ValueError("gamma and beta must have the same length")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def identity(cls, d, epsilon=1e-5):
        return cls(np.ones(d), np.zeros(d), epsilon)

    def to_dict(self):
        return {"gamma": self.gamma.tolist(), "beta": self.beta.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["gamma"]), np.asarray(data["beta"]), float(data.get("epsilon", 1e-5)))


def layer_norm(x, params):
    """Normalize each row over channels (population variance), then scale and shift."""
    x = check_flat(x)
    if params.gamma.shape[0] != x.shape[1]:
        raise ValueError(f"layer norm has {params.gamma.shape[0]} channels, input has {x.shape[1]}")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return params.gamma * ((x - mu) / np.sqrt(var + params.epsilon)) + params.beta


def relu(x):
    return np.maximum(x, 0.0)


ACTIVATIONS = {
    "relu": relu,
    "identity": lambda x: x,
    "tanh": np.tanh,
}


@dataclass(frozen=True)
class MlpWeights:
    """Two-layer perceptron ``act(x @ w1 + b1) @ w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"
    _act: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w1 = _as_float(self.w1, "w1")
        b1 = _as_float(self.b1, "b1").ravel()
        w2 = _as_float(self.w2, "w2")
        b2 = _as_float(self.b2, "b2").ravel()
        if w1.ndim != 2 or w2.ndim != 2:
            raise ValueError("w1 and w2 must be matrices")
        if b1.shape[0] != w1.shape[1] or w2.shape[0] != w1.shape[1] or b2.shape[0] != w2.shape[1]:
            raise ValueError(
                f"inconsistent MLP shapes: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}, b2 {b2.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for name, val in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "_act", ACTIVATIONS[self.activation])

    @property
    def d_in(self):
        return self.w1.shape[0]

    @property
    def d_hidden(self):
        return self.w1.shape[1]

    @property
    def d_out(self):
        return self.w2.shape[1]

    @classmethod
    def random(cls, d_in, d_hidden, d_out, rng, activation="relu"):
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        a1 = 1.0 / np.sqrt(d_in)
        a2 = 1.0 / np.sqrt(d_hidden)
        return cls(
            rng.uniform(-a1, a1, (d_in, d_hidden)),
            rng.uniform(-a1, a1, d_hidden),
            rng.uniform(-a2, a2, (d_hidden, d_out)),
            rng.uniform(-a2, a2, d_out),
            activation,
        )

    def to_dict(self):
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.asarray(data["w1"]),
            np.asarray(data["b1"]),
            np.asarray(data["w2"]),
            np.asarray(data["b2"]),
            data.get("activation", "relu"),
        )


def mlp_forward(x, w):
    x = check_flat(x)
    if x.shape[1] != w.d_in:
        raise ValueError(f"MLP expects {w.d_in} input channels, got {x.shape[1]}")
    return w._act(x @ w.w1 + w.b1) @ w.w2 + w.b2

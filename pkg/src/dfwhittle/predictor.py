"""Feature-to-kernel predictor: one hidden ReLU layer, softmax heads, manual backprop.

The output layer emits ``M * 2 * M`` logits per arm, read as ``M * 2``
independent softmax heads of width ``M`` (one per (state, action) row).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_rng, stack_trajectories, transition_counts

CHECKPOINT_FORMAT = "dfwhittle-predictor"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2", "b2")


class PredictorError(ValueError):
    pass


class PredictorModel:
    """Two-layer network mapping features ``(N, F)`` to kernels ``(N, M, 2, M)``."""

    def __init__(self, input_dim: int = 16, num_states: int = 2, hidden_dim: int = 64,
                 dropout: float = 0.2, seed: int = 0):
        if not 0.0 <= dropout < 1.0:
            raise PredictorError("dropout rate must lie in [0, 1)")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_states = num_states
        self.dropout = dropout
        out_dim = num_states * 2 * num_states
        rng = make_rng(seed)
        b_in = 1.0 / np.sqrt(input_dim)
        b_hid = 1.0 / np.sqrt(hidden_dim)
        self.params = {
            "w1": rng.uniform(-b_in, b_in, (input_dim, hidden_dim)),
            "b1": rng.uniform(-b_in, b_in, hidden_dim),
            "w2": rng.uniform(-b_hid, b_hid, (hidden_dim, out_dim)),
            "b2": rng.uniform(-b_hid, b_hid, out_dim),
        }

    @property
    def output_dim(self) -> int:
        return self.num_states * 2 * self.num_states

    def copy(self) -> "PredictorModel":
        other = PredictorModel.__new__(PredictorModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def step(self, grads: "GradientSet", learning_rate: float) -> None:
        """In-place update ``w <- w + learning_rate * g`` (pass a negative rate to descend)."""
        for name in PARAM_NAMES:
            self.params[name] = self.params[name] + learning_rate * grads.grads[name]

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_states": self.num_states,
            "dropout": self.dropout,
            "layers": [{"name": k, "shape": list(self.params[k].shape),
                        "data": self.params[k].ravel().tolist()} for k in PARAM_NAMES],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PredictorModel":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise PredictorError("not a predictor checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise PredictorError(f"unsupported checkpoint version {data.get('version')}")
        model = cls(data["input_dim"], data["num_states"], data["hidden_dim"], data["dropout"])
        for layer in data["layers"]:
            arr = np.asarray(layer["data"], dtype=float).reshape(layer["shape"])
            if arr.shape != model.params[layer["name"]].shape:
                raise PredictorError(f"layer {layer['name']} has shape {arr.shape}")
            model.params[layer["name"]] = arr
        return model


@dataclass
class GradientSet:
    grads: dict

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet({k: self.grads[k] + other.grads[k] for k in self.grads})

    def scale(self, c: float) -> "GradientSet":
        return GradientSet({k: c * v for k, v in self.grads.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.grads[k].ravel() for k in PARAM_NAMES])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.grads.values())


@dataclass
class ForwardCache:
    features: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray  # after ReLU and dropout
    mask: np.ndarray | None
    kernels: np.ndarray


def _check_features(model, features):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.shape[-1] != model.input_dim:
        raise PredictorError(f"feature length {features.shape[-1]} != input_dim {model.input_dim}")
    return features


def forward(model: PredictorModel, features, rng=None):
    """Kernels and a cache for ``backprop``; dropout is applied only when ``rng`` is given."""
    features = _check_features(model, features)
    p = model.params
    pre = features @ p["w1"] + p["b1"]
    hidden = np.maximum(pre, 0.0)
    mask = None
    if rng is not None and model.dropout > 0:
        mask = (rng.random(hidden.shape) >= model.dropout) / (1.0 - model.dropout)
        hidden = hidden * mask
    logits = hidden @ p["w2"] + p["b2"]
    m = model.num_states
    logits = logits.reshape(-1, m, 2, m)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    kernels = e / e.sum(axis=-1, keepdims=True)
    return kernels, ForwardCache(features, pre, hidden, mask, kernels)


def predict(model: PredictorModel, features) -> np.ndarray:
    return forward(model, features)[0]


def backprop(model: PredictorModel, features, upstream, cache: ForwardCache | None = None) -> GradientSet:
    """Gradient of ``sum(upstream * kernels)`` with respect to every weight."""
    if cache is None:
        _, cache = forward(model, features)
    kernels = cache.kernels
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != kernels.shape:
        raise PredictorError(f"upstream shape {upstream.shape} != kernel shape {kernels.shape}")
    g_logits = kernels * (upstream - (kernels * upstream).sum(axis=-1, keepdims=True))
    g_logits = g_logits.reshape(kernels.shape[0], -1)
    p = model.params
    g_hidden = g_logits @ p["w2"].T
    if cache.mask is not None:
        g_hidden = g_hidden * cache.mask
    g_pre = g_hidden * (cache.pre > 0)
    return GradientSet({
        "w1": cache.features.T @ g_pre,
        "b1": g_pre.sum(axis=0),
        "w2": cache.hidden.T @ g_logits,
        "b2": g_logits.sum(axis=0),
    })


def nll_loss(kernels, trajectories):
    """Average over trajectories of the summed negative log-likelihood of all
    observed transitions; returns ``(loss, dloss/dkernels)``."""
    kernels = np.asarray(kernels, dtype=float)
    logs = trajectories if isinstance(trajectories, dict) else stack_trajectories(list(trajectories))
    num_traj = logs["states"].shape[0]
    counts = transition_counts(logs, kernels.shape[1])
    seen = counts > 0
    with np.errstate(divide="ignore"):
        log_p = np.where(seen, np.log(np.where(seen, kernels, 1.0)), 0.0)
    loss = -float((counts * log_p).sum()) / num_traj
    grad = np.where(seen, -counts / (num_traj * np.where(seen, kernels, 1.0)), 0.0)
    return loss, grad

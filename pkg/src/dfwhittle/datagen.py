"""Synthetic RMAB datasets: random dominant kernels, features, behavior rollouts.

Dataset directory layout::

    spec.json
    instance_<k>.json       RmabInstance
    features_<k>.json       {"features": N x feature_dim}
    trajectories_<k>.json   list of Trajectory records

Collapsing datasets (2 states only) additionally carry
``observations_<k>.json`` with the belief-chain index an observer holds at
every logged step.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .belief import belief_labels
from .core import (RmabError, RmabInstance, Trajectory, ladder_reward, make_rng, read_json,
                   trajectories_from_json, trajectories_to_json, validate_instance, write_json)

DOMINANCE_MARGIN = 1e-3
MAX_REJECTIONS = 10_000
FEATURE_HIDDEN = 64

# sub-stream keys under the dataset seed
_FEATURE_NET, _KERNELS, _ROLLOUTS = 0, 1, 2


@dataclass(frozen=True)
class DatasetSpec:
    num_instances: int = 20
    arms: int = 100
    states: int = 2
    budget: int = 20
    horizon: int = 10
    gamma: float = 0.99
    trajectories: int = 10
    feature_dim: int = 16
    seed: int = 0
    observability: str = "full"

    def __post_init__(self):
        for name in ("num_instances", "arms", "states", "budget", "horizon", "trajectories", "feature_dim"):
            if getattr(self, name) < 1:
                raise RmabError(f"{name} must be positive")
        if self.states < 2:
            raise RmabError("need at least 2 states")
        if self.budget > self.arms:
            raise RmabError("budget exceeds arms")
        if not 0.0 < self.gamma < 1.0:
            raise RmabError("gamma must lie strictly inside (0, 1)")
        if self.observability not in ("full", "collapsing"):
            raise RmabError(f"unknown observability {self.observability!r}")
        if self.observability == "collapsing" and self.states != 2:
            raise RmabError("collapsing bandits implemented for 2 states only")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DatasetSpec":
        return cls(**data)


@dataclass(frozen=True)
class InstanceData:
    instance: RmabInstance
    features: np.ndarray  # (N, feature_dim)
    trajectories: list
    observations: np.ndarray | None = None  # (J, T, N) belief-chain indices


def simplex_rows(rng, shape, m: int) -> np.ndarray:
    """Uniform draws on the (m-1)-simplex via gaps of sorted uniforms."""
    cuts = np.sort(rng.random(tuple(shape) + (m - 1,)), axis=-1)
    pad_shape = tuple(shape) + (1,)
    edges = np.concatenate([np.zeros(pad_shape), cuts, np.ones(pad_shape)], axis=-1)
    return np.diff(edges, axis=-1)


def generate_kernels(spec: DatasetSpec, rng, reward=None) -> np.ndarray:
    """``(N, M, 2, M)`` kernels where pulling raises expected next reward by the margin.

    Each (arm, state) pair of rows is redrawn until
    ``P(s, 1) . R > P(s, 0) . R + margin``.
    """
    n, m = spec.arms, spec.states
    reward = ladder_reward(m) if reward is None else np.asarray(reward, dtype=float)
    kernels = simplex_rows(rng, (n, m, 2), m)
    todo = np.ones((n, m), dtype=bool)
    tries = 0
    while True:
        gain = (kernels[:, :, 1] - kernels[:, :, 0]) @ reward
        todo = gain <= DOMINANCE_MARGIN
        if not todo.any():
            return kernels
        tries += 1
        if tries > MAX_REJECTIONS:
            i, s = np.argwhere(todo)[0]
            raise RmabError(f"dominance rejection exhausted at arm {i} state {s}")
        kernels[todo] = simplex_rows(rng, (int(todo.sum()), 2), m)


def dominance_holds(kernels, reward) -> np.ndarray:
    kernels = np.asarray(kernels, dtype=float)
    return (kernels[..., 1, :] - kernels[..., 0, :]) @ reward > DOMINANCE_MARGIN


class FeatureNetwork:
    """Frozen random map from a flattened kernel to a feature vector:
    two ReLU layers of width 64 and a linear output layer."""

    def __init__(self, in_dim: int, feature_dim: int, rng, hidden: int = FEATURE_HIDDEN):
        dims = [in_dim, hidden, hidden, feature_dim]
        self.layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(a)
            self.layers.append((rng.uniform(-bound, bound, (a, b)), rng.uniform(-bound, bound, b)))

    def __call__(self, kernels) -> np.ndarray:
        x = np.asarray(kernels, dtype=float).reshape(np.shape(kernels)[0], -1)
        for j, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if j < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x


def generate_features(kernels, feature_dim: int, rng) -> np.ndarray:
    kernels = np.asarray(kernels, dtype=float)
    net = FeatureNetwork(kernels[0].size, feature_dim, rng)
    return net(kernels)


def rollout_behavior(inst: RmabInstance, num_trajectories: int, rng) -> list[Trajectory]:
    """Logging policy: a uniformly random subset of exactly K arms each step.

    Initial states are uniform; recorded behavior probabilities are the
    per-arm marginals ``K/N`` (pulled) and ``1 - K/N`` (not pulled).
    """
    n, m = inst.num_arms, inst.num_states
    k, horizon = inst.budget, inst.horizon
    arms = np.arange(n)
    frac = k / n
    out = []
    for _ in range(num_trajectories):
        states = np.empty((horizon, n), dtype=np.int64)
        actions = np.zeros((horizon, n), dtype=np.int64)
        s = rng.integers(0, m, size=n)
        for t in range(horizon):
            states[t] = s
            actions[t, rng.permutation(n)[:k]] = 1
            cdf = np.cumsum(inst.arms[arms, s, actions[t]], axis=-1)
            u = rng.random(n)[:, None] * cdf[:, -1:]
            s = np.minimum((cdf <= u).sum(axis=-1), m - 1)
        behavior = np.where(actions == 1, frac, 1.0 - frac)
        out.append(Trajectory(states, actions, inst.reward[states], behavior))
    return out


def generate_dataset(spec: DatasetSpec) -> list[InstanceData]:
    reward = ladder_reward(spec.states)
    net = FeatureNetwork(spec.states * 2 * spec.states, spec.feature_dim, make_rng(spec.seed, _FEATURE_NET))
    data = []
    for idx in range(spec.num_instances):
        kernels = generate_kernels(spec, make_rng(spec.seed, _KERNELS, idx), reward)
        inst = RmabInstance(kernels, reward, spec.budget, spec.horizon, spec.gamma)
        problems = validate_instance(inst)
        if problems:
            raise RmabError("; ".join(problems))
        trajs = rollout_behavior(inst, spec.trajectories, make_rng(spec.seed, _ROLLOUTS, idx))
        obs = None
        if spec.observability == "collapsing":
            obs = np.stack([belief_labels(t.states, t.actions, spec.horizon) for t in trajs])
        data.append(InstanceData(inst, net(kernels), trajs, obs))
    return data


def write_dataset(path, spec: DatasetSpec, data: list[InstanceData]) -> str:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_json(path / "spec.json", spec.to_json())
    for k, item in enumerate(data):
        write_json(path / f"instance_{k}.json", item.instance.to_json())
        write_json(path / f"features_{k}.json", {"features": item.features.tolist()})
        write_json(path / f"trajectories_{k}.json", trajectories_to_json(item.trajectories))
        if item.observations is not None:
            write_json(path / f"observations_{k}.json", {"observations": item.observations.tolist()})
    return dataset_hash(path)


def read_dataset(path) -> tuple[DatasetSpec, list[InstanceData]]:
    path = Path(path)
    spec = DatasetSpec.from_json(read_json(path / "spec.json"))
    data = []
    for k in range(spec.num_instances):
        inst = RmabInstance.from_json(read_json(path / f"instance_{k}.json"))
        feats = np.asarray(read_json(path / f"features_{k}.json")["features"], dtype=float)
        trajs = trajectories_from_json(read_json(path / f"trajectories_{k}.json"))
        obs_path = path / f"observations_{k}.json"
        obs = np.asarray(read_json(obs_path)["observations"]) if obs_path.exists() else None
        data.append(InstanceData(inst, feats, trajs, obs))
    return spec, data


def dataset_hash(path) -> str:
    """SHA-256 over the names and bytes of every JSON file in the directory."""
    h = hashlib.sha256()
    for f in sorted(Path(path).glob("*.json")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()

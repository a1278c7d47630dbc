"""Shared RMAB data types, validation, JSON I/O and seeded randomness.

Array conventions used throughout the package:

* a kernel for one arm has shape ``(M, 2, M)`` indexed ``[s, a, s']``
  with ``a = 0`` passive and ``a = 1`` active;
* a stack of kernels has shape ``(N, M, 2, M)``;
* trajectory arrays are time-major, shape ``(T, N)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PASSIVE = 0
ACTIVE = 1

ROW_SUM_TOL = 1e-9
RENORMALIZE_TOL = 1e-6


class RmabError(ValueError):
    """Raised when RMAB inputs are malformed."""


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64, fixed round constants).

    ``keys`` derive independent sub-streams, e.g. ``make_rng(seed, episode)``.
    The same ``(seed, *keys)`` always yields the same stream.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def ladder_reward(num_states: int) -> np.ndarray:
    if num_states < 2:
        raise RmabError("need at least 2 states")
    return np.arange(num_states, dtype=float) / (num_states - 1)


@dataclass(frozen=True)
class RmabInstance:
    """N arms sharing a reward vector, with budget, horizon and discount."""

    arms: np.ndarray  # (N, M, 2, M)
    reward: np.ndarray  # (M,)
    budget: int
    horizon: int
    discount: float

    def __post_init__(self):
        object.__setattr__(self, "arms", np.asarray(self.arms, dtype=float))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=float))

    @property
    def num_arms(self) -> int:
        return self.arms.shape[0]

    @property
    def num_states(self) -> int:
        return self.arms.shape[1]

    def to_json(self) -> dict:
        return {
            "num_states": int(self.num_states),
            "budget": int(self.budget),
            "horizon": int(self.horizon),
            "discount": float(self.discount),
            "reward": self.reward.tolist(),
            "arms": self.arms.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RmabInstance":
        arms = np.asarray(data["arms"], dtype=float)
        reward = np.asarray(data["reward"], dtype=float)
        if arms.ndim != 4 or arms.shape[2] != 2:
            raise RmabError(f"arms must be [arm][state][action][next], got shape {arms.shape}")
        if arms.shape[1] != data["num_states"] or arms.shape[3] != data["num_states"]:
            raise RmabError("arms do not match num_states")
        if reward.ndim != 1 or reward.shape[0] != data["num_states"]:
            raise RmabError("per-arm rewards are not supported; reward must be a vector of num_states")
        arms = normalize_rows(arms)
        inst = cls(arms, reward, int(data["budget"]), int(data["horizon"]), float(data["discount"]))
        problems = validate_instance(inst)
        if problems:
            raise RmabError("; ".join(problems))
        return inst


@dataclass(frozen=True)
class Trajectory:
    """One logged rollout: ``states``, ``actions``, ``rewards`` and
    ``behavior_probs`` are all ``(T, N)``; ``behavior_probs[t, i]`` is the
    behavior probability of the action actually taken."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "behavior_probs", np.asarray(self.behavior_probs, dtype=float))

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def num_arms(self) -> int:
        return self.states.shape[1]

    def to_json(self) -> dict:
        return {
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "behavior_probs": self.behavior_probs.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Trajectory":
        return cls(data["states"], data["actions"], data["rewards"], data["behavior_probs"])


def stack_trajectories(trajs: Sequence[Trajectory]) -> dict[str, np.ndarray]:
    """Stack a list of trajectories into ``(J, T, N)`` arrays."""
    return {
        "states": np.stack([t.states for t in trajs]),
        "actions": np.stack([t.actions for t in trajs]),
        "rewards": np.stack([t.rewards for t in trajs]),
        "behavior_probs": np.stack([t.behavior_probs for t in trajs]),
    }


def transition_counts(trajectories, num_states: int) -> np.ndarray:
    """Per-arm ``(s, a, s')`` counts ``(N, M, 2, M)`` summed over trajectories."""
    logs = trajectories if isinstance(trajectories, dict) else stack_trajectories(list(trajectories))
    states, actions = logs["states"], logs["actions"]
    j, t, n = states.shape
    counts = np.zeros((n, num_states, 2, num_states))
    arm = np.broadcast_to(np.arange(n), (j, t - 1, n))
    np.add.at(counts, (arm, states[:, :-1], actions[:, :-1], states[:, 1:]), 1.0)
    return counts


def normalize_rows(kernels: np.ndarray, tol: float = RENORMALIZE_TOL) -> np.ndarray:
    """Re-normalize next-state rows that are within ``tol`` of stochastic.

    Rows further off are left untouched so validation reports them.
    """
    kernels = np.array(kernels, dtype=float)
    sums = kernels.sum(axis=-1, keepdims=True)
    close = np.abs(sums - 1.0) <= tol
    return np.where(close, kernels / np.where(close, sums, 1.0), kernels)


def kernel_violations(kernel: np.ndarray, prefix: str = "") -> list[str]:
    out = []
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 3 or kernel.shape[1] != 2 or kernel.shape[0] != kernel.shape[2]:
        return [f"{prefix}kernel shape {kernel.shape} is not (M, 2, M)"]
    if kernel.shape[0] < 2:
        out.append(f"{prefix}needs at least 2 states")
    if not np.all(np.isfinite(kernel)):
        out.append(f"{prefix}non-finite transition probability")
        return out
    for s, a, sp in zip(*np.nonzero((kernel < 0) | (kernel > 1))):
        out.append(f"{prefix}[{s}][{a}][{sp}] probability {kernel[s, a, sp]:.6g} outside [0, 1]")
    sums = kernel.sum(axis=-1)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)):
        out.append(f"{prefix}[{s}][{a}] row sums to {sums[s, a]:.12g}, expected 1")
    return out


def validate_instance(inst: RmabInstance) -> list[str]:
    """Return every invariant violation of ``inst``; empty means valid."""
    problems = []
    arms = np.asarray(inst.arms)
    if arms.ndim != 4:
        return [f"arms must be (N, M, 2, M), got shape {arms.shape}"]
    n = arms.shape[0]
    if n == 0:
        problems.append("no arms")
    for i in range(n):
        problems += kernel_violations(arms[i], prefix=f"arm[{i}]")
    reward = np.asarray(inst.reward)
    if reward.shape != (arms.shape[1],):
        problems.append(f"reward shape {reward.shape} does not match {arms.shape[1]} states")
    elif not np.all(np.isfinite(reward)):
        problems.append("reward has non-finite entries")
    if inst.budget < 1:
        problems.append("budget must be at least 1")
    if inst.budget > n:
        problems.append("budget exceeds arms")
    if inst.horizon < 1:
        problems.append("horizon must be at least 1")
    if not 0.0 < inst.discount < 1.0:
        problems.append(f"discount {inst.discount} must lie strictly inside (0, 1)")
    return problems


def validate_trajectory(traj: Trajectory, inst: RmabInstance) -> list[str]:
    problems = []
    shape = traj.states.shape
    for name in ("actions", "rewards", "behavior_probs"):
        if getattr(traj, name).shape != shape:
            problems.append(f"{name} shape {getattr(traj, name).shape} != states shape {shape}")
    if problems:
        return problems
    if shape[1] != inst.num_arms:
        problems.append(f"trajectory has {shape[1]} arms, instance has {inst.num_arms}")
        return problems
    if np.any((traj.states < 0) | (traj.states >= inst.num_states)):
        problems.append("state index out of range")
        return problems
    if np.any((traj.actions != 0) & (traj.actions != 1)):
        problems.append("actions must be binary")
    for t in np.nonzero(traj.actions.sum(axis=1) > inst.budget)[0]:
        problems.append(f"step {t} pulls more than {inst.budget} arms")
    if not np.allclose(traj.rewards, inst.reward[traj.states]):
        problems.append("rewards do not match reward[state]")
    if np.any((traj.behavior_probs <= 0) | (traj.behavior_probs > 1)):
        problems.append("behavior_probs must lie in (0, 1]")
    return problems


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """Sum over steps and arms of ``gamma**t * reward`` (t counted from 0)."""
    rewards = np.asarray(traj.rewards, dtype=float)
    disc = gamma ** np.arange(rewards.shape[0])
    return float(disc @ rewards.sum(axis=1))


def read_json(path: str | Path):
    with open(path) as fh:
        return json.load(fh)


def write_json(path: str | Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def trajectories_to_json(trajs: Iterable[Trajectory]) -> list[dict]:
    return [t.to_json() for t in trajs]


def trajectories_from_json(data: list[dict]) -> list[Trajectory]:
    return [Trajectory.from_json(d) for d in data]

"""Whittle index policies and off-policy / simulation-based evaluation.

Importance-sampling estimators take the target policy as pull
probabilities at the logged states, shaped ``(J, T, N)`` for ``J``
trajectories, and return the gradient of the estimate with respect to
those probabilities alongside the value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ACTIVE, RmabError, Trajectory, make_rng, stack_trajectories, transition_counts
from .softtopk import SoftTopKConfig, soft_topk_forward


class EvaluationError(RmabError):
    pass


@dataclass(frozen=True)
class PolicyOutput:
    pull_probs: np.ndarray  # (N,)


@dataclass(frozen=True)
class EvalReport:
    value: float
    variant: str  # cwpdis | single-trajectory | simulation
    weights: np.ndarray | None = None
    std_error: float | None = None
    gradient: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"variant": self.variant, "value": float(self.value),
                "std_error": None if self.std_error is None else float(self.std_error)}


def _indices(table):
    return np.asarray(getattr(table, "indices", table), dtype=float)


def gather_scores(indices, states) -> np.ndarray:
    """``W[i, states[..., i]]`` for joint states of shape ``(..., N)``."""
    indices = np.asarray(indices, dtype=float)
    states = np.asarray(states)
    return indices[np.arange(indices.shape[0]), states]


def strict_pulls(scores, k: int) -> np.ndarray:
    """Top-k indicator along the last axis; ties go to the lower arm index."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    out = np.zeros(scores.shape)
    np.put_along_axis(out, order, 1.0, axis=-1)
    return out


def strict_policy(table, joint_state, k: int) -> PolicyOutput:
    return PolicyOutput(strict_pulls(gather_scores(_indices(table), joint_state), k))


def soft_policy(table, joint_state, k: int, cfg: SoftTopKConfig = SoftTopKConfig()) -> PolicyOutput:
    probs, _ = soft_topk_forward(gather_scores(_indices(table), joint_state), k, cfg)
    return PolicyOutput(probs)


def _logged(trajectories):
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if isinstance(trajectories, dict):
        logs = trajectories
    else:
        logs = stack_trajectories(list(trajectories))
    if np.any(logs["behavior_probs"] <= 0):
        raise EvaluationError("unsupported behavior action: behavior probability must be positive")
    return logs


def _taken_probs(pull_probs, actions):
    """Target probability of the logged action and d(that)/d(pull_prob)."""
    pulled = actions == ACTIVE
    return np.where(pulled, pull_probs, 1.0 - pull_probs), np.where(pulled, 1.0, -1.0)


def cwpdis_eval(pull_probs, trajectories, gamma: float) -> EvalReport:
    """Consistent weighted per-decision importance sampling over ``J >= 2`` trajectories.

    Per (t, i) the estimate is the ``rho``-weighted mean reward across
    trajectories, where ``rho`` is the running product of target/behavior
    ratios for arm i up to step t.  Cells where every trajectory has zero
    weight contribute nothing.
    """
    logs = _logged(trajectories)
    if logs["states"].shape[0] < 2:
        raise EvaluationError("cwpdis needs at least 2 trajectories; use cwpdis_eval_single for one")
    pull_probs = np.asarray(pull_probs, dtype=float)
    rewards = logs["rewards"]
    if pull_probs.shape != rewards.shape:
        raise EvaluationError(f"pull_probs shape {pull_probs.shape} != trajectories {rewards.shape}")
    taken, sign = _taken_probs(pull_probs, logs["actions"])
    with np.errstate(divide="ignore"):
        log_rho = np.cumsum(np.log(taken) - np.log(logs["behavior_probs"]), axis=1)
    # normalize per (t, i) across trajectories before exponentiating
    top = log_rho.max(axis=0)
    shift = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(log_rho - shift)
    total = w.sum(axis=0)
    live = total > 0
    share = np.divide(w, total, out=np.zeros_like(w), where=live)
    cell = (share * rewards).sum(axis=0)
    disc = gamma ** np.arange(rewards.shape[1])
    value = float(disc @ cell.sum(axis=1))

    # d value / d rho_{j,t,i} * rho_{j,t,i}, accumulated backwards over t
    contrib = disc[None, :, None] * share * (rewards - cell[None])
    tail = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
    grad = np.divide(sign * tail, taken, out=np.zeros_like(tail), where=taken > 0)
    return EvalReport(value, "cwpdis", weights=np.exp(log_rho), gradient=grad)


def cwpdis_eval_single(pull_probs, trajectory, gamma: float) -> EvalReport:
    """Single-trajectory estimator with per-step (non-cumulative) ratios.

    Each arm's ratio ``rho'`` is normalized by its mean over the horizon:
    ``sum_t gamma^t r_ti rho'_ti / mean_t rho'_ti``.
    """
    logs = _logged(trajectory)
    if logs["states"].shape[0] != 1:
        raise EvaluationError("cwpdis_eval_single takes exactly one trajectory")
    rewards = logs["rewards"][0]
    pull_probs = np.asarray(pull_probs, dtype=float).reshape(rewards.shape)
    taken, sign = _taken_probs(pull_probs, logs["actions"][0])
    behavior = logs["behavior_probs"][0]
    rho = taken / behavior
    horizon = rewards.shape[0]
    disc = gamma ** np.arange(horizon)
    mean = rho.mean(axis=0)
    live = mean > 0
    num = (disc[:, None] * rewards * rho).sum(axis=0)
    per_arm = np.divide(num, mean, out=np.zeros_like(num), where=live)
    value = float(per_arm.sum())
    d_rho = np.divide(disc[:, None] * rewards, mean, out=np.zeros_like(rho), where=live)
    d_rho -= np.divide(per_arm, horizon * mean, out=np.zeros_like(mean), where=live)
    grad = (d_rho * sign / behavior)[None]
    return EvalReport(value, "single-trajectory", weights=rho[None], gradient=grad)


def importance_eval(pull_probs, trajectories, gamma: float) -> EvalReport:
    """CWPDIS when there are several trajectories, the single-trajectory variant otherwise."""
    logs = _logged(trajectories)
    if logs["states"].shape[0] == 1:
        return cwpdis_eval_single(pull_probs, logs, gamma)
    return cwpdis_eval(pull_probs, logs, gamma)


# -- policies acting inside a simulator ------------------------------------------------

class StrictWhittlePolicy:
    def __init__(self, indices, k: int):
        self.indices = _indices(indices)
        self.k = k

    def __call__(self, states, rng):
        return strict_pulls(gather_scores(self.indices, states), self.k).astype(np.int64)


class SoftWhittlePolicy:
    """Samples k arms without replacement, each draw proportional to the
    remaining soft-top-k probabilities."""

    def __init__(self, indices, k: int, cfg: SoftTopKConfig = SoftTopKConfig()):
        self.indices = _indices(indices)
        self.k = k
        self.cfg = cfg

    def __call__(self, states, rng):
        probs, _ = soft_topk_forward(gather_scores(self.indices, states), self.k, self.cfg)
        return sample_without_replacement(probs, self.k, rng)


class NoActionPolicy:
    def __call__(self, states, rng):
        return np.zeros(np.shape(states), dtype=np.int64)


class RandomPolicy:
    """Uniformly random subset of k arms (the logging policy of synthetic data)."""

    def __init__(self, k: int):
        self.k = k

    def __call__(self, states, rng):
        keys = rng.random(np.shape(states))
        return strict_pulls(keys, self.k).astype(np.int64)


def sample_without_replacement(weights, k: int, rng) -> np.ndarray:
    """Sequentially draw k distinct arms per row, proportional to remaining weight."""
    w = np.array(weights, dtype=float).reshape(-1, np.shape(weights)[-1])
    rows = np.arange(w.shape[0])
    chosen = np.zeros(w.shape, dtype=np.int64)
    for _ in range(k):
        w = np.where(chosen == 1, 0.0, w)
        total = w.sum(axis=1, keepdims=True)
        # once the soft mass runs out, fall back to uniform over the rest
        w = np.where(total > 0, w, (chosen == 0).astype(float))
        cdf = np.cumsum(w, axis=1)
        u = rng.random(w.shape[0]) * cdf[:, -1]
        pick = np.minimum((cdf <= u[:, None]).sum(axis=1), w.shape[1] - 1)
        chosen[rows, pick] = 1
    return chosen.reshape(np.shape(weights))


def step_states(kernels, states, actions, rng) -> np.ndarray:
    """Sample next states for ``(E, N)`` joint states under joint actions."""
    n = kernels.shape[0]
    probs = kernels[np.arange(n), states, actions]  # (E, N, M)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(states.shape)[..., None] * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), kernels.shape[1] - 1)


def simulate_eval(kernels, reward, policy, gamma: float, horizon: int, episodes: int,
                  seed: int = 0, initial_states=None) -> EvalReport:
    """Monte-Carlo discounted return of ``policy`` on the given kernels.

    ``reward`` is ``(M,)`` or per-arm ``(N, M)``.  ``initial_states`` is a
    fixed ``(N,)`` joint state, a ``(S, N)`` pool sampled uniformly per
    episode, or ``None`` for independent uniform states.  Episodes run
    vectorized on one seeded stream.
    """
    kernels = np.asarray(kernels, dtype=float)
    n, m = kernels.shape[:2]
    reward = np.broadcast_to(np.asarray(reward, dtype=float), (n, m))
    rng = make_rng(seed)
    arms = np.arange(n)
    if initial_states is None:
        states = rng.integers(0, m, size=(episodes, n))
    else:
        pool = np.atleast_2d(np.asarray(initial_states, dtype=np.int64))
        states = pool[rng.integers(0, pool.shape[0], size=episodes)]
    returns = np.zeros(episodes)
    for t in range(horizon):
        returns += gamma**t * reward[arms, states].sum(axis=1)
        actions = policy(states, rng)
        states = step_states(kernels, states, actions, rng)
    se = returns.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return EvalReport(float(returns.mean()), "simulation", std_error=float(se))


def empirical_kernels(trajectories, num_states: int):
    """Count-based kernels ``(N, M, 2, M)`` and a mask of unobserved (s, a) rows.

    Unobserved rows are filled uniformly.
    """
    logs = _logged(trajectories) if not isinstance(trajectories, dict) else trajectories
    counts = transition_counts(logs, num_states)
    totals = counts.sum(axis=-1, keepdims=True)
    missing = totals[..., 0] == 0
    kernels = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / num_states)
    return kernels, missing

"""Whittle indices from subsidized Bellman equations.

The index of state ``u`` is the passive subsidy ``m`` at which both actions
are equally good in ``u``.  It is located by bisection on ``m``; each probe
solves the subsidized MDP exactly by policy iteration, batched over every
(arm, target state) pair so a whole table costs one bisection loop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RmabError, RmabInstance

BRACKET_TOL = 1e-9
INDIFFERENCE_TOL = 1e-6
VI_TOL = 1e-9


class WhittleError(RmabError):
    def __init__(self, msg: str, arm: int | None = None, state: int | None = None):
        tag = []
        if arm is not None:
            tag.append(f"arm {arm}")
        if state is not None:
            tag.append(f"state {state}")
        super().__init__(f"{msg} ({', '.join(tag)})" if tag else msg)
        self.detail = msg
        self.arm = arm
        self.state = state


@dataclass(frozen=True)
class SubsidizedValues:
    subsidy: float
    values: np.ndarray  # (M,)
    q_values: np.ndarray  # (M, 2)


@dataclass(frozen=True)
class WhittleTable:
    indices: np.ndarray  # (N, M) W[i, u]
    values: np.ndarray  # (N, M, M) V at subsidy W[i, u]
    q_values: np.ndarray  # (N, M, M, 2)

    def values_at(self, arm: int, state: int) -> SubsidizedValues:
        return SubsidizedValues(
            float(self.indices[arm, state]), self.values[arm, state], self.q_values[arm, state]
        )


def q_from_values(kernels, reward, gamma, subsidy, values):
    """Q(s, a) = m*[a=0] + R(s) + gamma * sum_s' P(s, a, s') V(s'), batched."""
    kernels = np.asarray(kernels, dtype=float)
    q = np.asarray(reward, dtype=float)[..., None] + gamma * np.einsum("...sat,...t->...sa", kernels, values)
    q[..., 0] += np.asarray(subsidy, dtype=float)[..., None]
    return q


def value_iteration(kernel, reward, gamma: float, subsidy: float, tol: float = VI_TOL) -> SubsidizedValues:
    """Fixed point of the subsidized Bellman equations by value iteration from V = 0."""
    if not 0.0 < gamma < 1.0:
        raise RmabError("value iteration needs 0 < gamma < 1")
    kernel = np.asarray(kernel, dtype=float)
    reward = np.asarray(reward, dtype=float)
    values = np.zeros(kernel.shape[0])
    q = q_from_values(kernel, reward, gamma, subsidy, values)
    new = q.max(axis=-1)
    residual0 = np.max(np.abs(new - values))
    if not np.isfinite(residual0):
        raise RmabError("value iteration received non-finite inputs")
    max_iter = 1 + int(np.ceil(np.log(max(residual0, tol) / tol) / np.log(1.0 / gamma)))
    for _ in range(max_iter + 1):
        residual = np.max(np.abs(new - values))
        values = new
        if residual <= tol:
            q = q_from_values(kernel, reward, gamma, subsidy, values)
            return SubsidizedValues(float(subsidy), values, q)
        q = q_from_values(kernel, reward, gamma, subsidy, values)
        new = q.max(axis=-1)
    raise RmabError("value iteration did not converge (NaN contamination?)")


def solve_subsidized(kernels, reward, gamma, subsidy, policy=None, max_iter: int = 200):
    """Exact subsidized values by policy iteration, batched over leading axis.

    kernels (B, M, 2, M), reward (B, M), subsidy (B,).  Returns
    ``(values (B, M), q (B, M, 2), policy (B, M))``.  Near-ties keep the
    incumbent action so the iteration cannot cycle.
    """
    kernels = np.asarray(kernels, dtype=float)
    b, m = kernels.shape[:2]
    reward = np.broadcast_to(reward, (b, m))
    subsidy = np.broadcast_to(np.asarray(subsidy, dtype=float), (b,))
    eye = np.eye(m)
    if policy is None:
        q = q_from_values(kernels, reward, gamma, subsidy, np.zeros((b, m)))
        policy = (q[..., 1] > q[..., 0]).astype(np.int64)
    for _ in range(max_iter):
        p_pi = np.take_along_axis(kernels, policy[:, :, None, None], axis=2)[:, :, 0, :]
        r_pi = reward + subsidy[:, None] * (policy == 0)
        values = np.linalg.solve(eye - gamma * p_pi, r_pi[..., None])[..., 0]
        q = q_from_values(kernels, reward, gamma, subsidy, values)
        scale = 1e-12 * (1.0 + np.abs(values))
        better = np.where(q[..., 1] > q[..., 0] + scale, 1, np.where(q[..., 0] > q[..., 1] + scale, 0, policy))
        if np.array_equal(better, policy):
            return values, q, policy
        policy = better
    raise RmabError("policy iteration did not converge")


def _bisect(kernels, reward, gamma, targets, tol=BRACKET_TOL, indiff_tol=INDIFFERENCE_TOL):
    """Batched bisection; returns (index, values, q, bad_bracket_mask, bad_gap_mask)."""
    b, m = kernels.shape[:2]
    rows = np.arange(b)
    span = reward.max(axis=1) - reward.min(axis=1)
    lo = -span / (1.0 - gamma)
    hi = span / (1.0 - gamma)

    def gap(q):
        return q[rows, targets, 0] - q[rows, targets, 1]

    _, q_lo, _ = solve_subsidized(kernels, reward, gamma, lo)
    _, q_hi, policy = solve_subsidized(kernels, reward, gamma, hi)
    bad_bracket = (gap(q_lo) > indiff_tol) | (gap(q_hi) < -indiff_tol)

    while True:
        live = hi - lo > tol
        if not live.any():
            break
        mid = 0.5 * (lo + hi)
        _, q, policy = solve_subsidized(kernels, reward, gamma, mid, policy)
        active_better = gap(q) < 0
        lo = np.where(live & active_better, mid, lo)
        hi = np.where(live & ~active_better, mid, hi)

    index = 0.5 * (lo + hi)
    values, q, _ = solve_subsidized(kernels, reward, gamma, index, policy)
    bad_gap = np.abs(gap(q)) > indiff_tol
    return index, values, q, bad_bracket, bad_gap


def whittle_index(kernel, reward, gamma: float, target_state: int, tol: float = BRACKET_TOL):
    """Whittle index of ``target_state`` for one arm; returns ``(index, SubsidizedValues)``."""
    kernel = np.asarray(kernel, dtype=float)
    m = kernel.shape[0]
    if not 0 <= target_state < m:
        raise RmabError(f"target state {target_state} outside [0, {m})")
    if not 0.0 < gamma < 1.0:
        raise RmabError("gamma must lie strictly inside (0, 1)")
    reward = np.asarray(reward, dtype=float)[None]
    index, values, q, bad_bracket, bad_gap = _bisect(
        kernel[None], reward, gamma, np.array([target_state]), tol=tol
    )
    if bad_bracket[0]:
        raise WhittleError("index outside bracket", state=target_state)
    if bad_gap[0]:
        raise WhittleError("actions not indifferent at located index; arm is not indexable", state=target_state)
    return float(index[0]), SubsidizedValues(float(index[0]), values[0], q[0])


def compute_whittle(arms, reward, gamma: float, tol: float = BRACKET_TOL) -> WhittleTable:
    """Whittle table for a stack of arms; ``reward`` is ``(M,)`` or per-arm ``(N, M)``."""
    arms = np.asarray(arms, dtype=float)
    n, m = arms.shape[:2]
    if not 0.0 < gamma < 1.0:
        raise RmabError("gamma must lie strictly inside (0, 1)")
    reward = np.broadcast_to(np.asarray(reward, dtype=float), (n, m))
    kernels = np.repeat(arms, m, axis=0)
    rewards = np.repeat(reward, m, axis=0)
    targets = np.tile(np.arange(m), n)
    index, values, q, bad_bracket, bad_gap = _bisect(kernels, rewards, gamma, targets, tol=tol)
    for mask, msg in ((bad_bracket, "index outside bracket"),
                      (bad_gap, "actions not indifferent at located index; arm is not indexable")):
        if mask.any():
            k = int(np.argmax(mask))
            raise WhittleError(msg, arm=k // m, state=k % m)
    return WhittleTable(index.reshape(n, m), values.reshape(n, m, m), q.reshape(n, m, m, 2))


def whittle_table(inst: RmabInstance) -> WhittleTable:
    return compute_whittle(inst.arms, inst.reward, inst.discount)

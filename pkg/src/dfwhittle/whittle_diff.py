"""Derivatives of Whittle indices with respect to transition probabilities.

At ``m = W(u)`` every state has at least one Bellman equality that holds
(its optimal action) and the target state ``u`` has two.  Picking those
``M + 1`` equalities gives a square linear system in ``[m, V]``:

    row (s, a):  [a == 0] * m + (gamma * P[s, a] - e_s) . V = -R(s)

so the index is an implicit function of ``P``.  Only the rows selecting
``(s, a)`` depend on ``P[s, a, :]`` (coefficient ``gamma`` in column
``s'``), which makes the full gradient one adjoint solve per (arm, state):

    dW/dP[s, a, s'] = -gamma * V(s') * sum_{rows r = (s, a)} y_r,
    lhs^T y = e_0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ACTIVE, PASSIVE, RmabInstance
from .whittle import INDIFFERENCE_TOL, SubsidizedValues, WhittleError, WhittleTable, q_from_values

CONDITION_LIMIT = 1e12
INDEX_MISMATCH_TOL = 1e-4


@dataclass(frozen=True)
class RowSelection:
    """Which Bellman equality each of the ``M + 1`` rows uses.

    ``states[r], actions[r]`` name the equality in row ``r``.  Rows
    ``0..M-1`` cover every state once; row ``M`` is the second equality at
    the target state.
    """

    states: np.ndarray  # (M+1,)
    actions: np.ndarray  # (M+1,)

    @property
    def target(self) -> int:
        return int(self.states[-1])

    @property
    def chosen_actions(self) -> np.ndarray:
        return self.actions[:-1]

    @property
    def matrix(self) -> np.ndarray:
        """Binary ``(M+1, 2M)`` selector over the stacked [passive; active] rows."""
        m = self.states.shape[0] - 1
        a = np.zeros((m + 1, 2 * m), dtype=np.int64)
        a[np.arange(m + 1), self.actions * m + self.states] = 1
        return a


@dataclass(frozen=True)
class WhittleJacobian:
    """``index_grad[i, u, s, a, s'] = dW_i(u) / dP_i(s, a, s')`` and
    ``reward_grad[i, u, s] = dW_i(u) / dR_i(s)``."""

    index_grad: np.ndarray
    reward_grad: np.ndarray


def _select_batch(kernels, reward, gamma, targets, values, subsidy, tol=INDIFFERENCE_TOL):
    b, m = values.shape
    rows = np.arange(b)
    q = q_from_values(kernels, reward, gamma, subsidy, values)
    slack = values - q.max(axis=-1)
    bad = np.abs(slack) > tol * (1.0 + np.abs(values))
    if bad.any():
        k, s = np.argwhere(bad)[0]
        raise WhittleError(f"inconsistent value functions at state {s}", arm=int(k))
    gap = q[rows, targets, 0] - q[rows, targets, 1]
    if np.any(np.abs(gap) > tol):
        k = int(np.argmax(np.abs(gap) > tol))
        raise WhittleError(
            f"target state not indifferent (gap {gap[k]:.3g}); values are not at the index", arm=k
        )
    actions = np.where(q[..., 1] > q[..., 0] + tol, ACTIVE, PASSIVE)
    actions[rows, targets] = PASSIVE
    states = np.concatenate([np.broadcast_to(np.arange(m), (b, m)), targets[:, None]], axis=1)
    actions = np.concatenate([actions, np.full((b, 1), ACTIVE)], axis=1)
    return states, actions


def _assemble_batch(kernels, reward, gamma, states, actions):
    b, r = states.shape
    m = r - 1
    bi = np.arange(b)[:, None]
    lhs = np.empty((b, r, r))
    lhs[..., 0] = actions == PASSIVE
    lhs[..., 1:] = gamma * kernels[bi, states, actions, :]
    lhs[bi, np.arange(r)[None, :], 1 + states] -= 1.0
    rhs = -np.broadcast_to(reward, (b, m))[bi, states]
    return lhs, rhs


def _solve_batch(kernels, reward, gamma, states, actions, subsidy):
    """Solve the selected systems and return ``(x, index_grad, reward_grad)``."""
    b, r = states.shape
    m = r - 1
    lhs, rhs = _assemble_batch(kernels, reward, gamma, states, actions)
    cond = np.linalg.cond(lhs)
    if np.any(~np.isfinite(cond) | (cond > CONDITION_LIMIT)):
        k = int(np.argmax(~np.isfinite(cond) | (cond > CONDITION_LIMIT)))
        raise WhittleError(f"ill-conditioned system (cond {cond[k]:.3g})", arm=k)
    x = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    mismatch = np.abs(x[:, 0] - subsidy)
    if np.any(mismatch > INDEX_MISMATCH_TOL):
        k = int(np.argmax(mismatch))
        raise WhittleError(f"row selection inconsistent (solved {x[k, 0]:.6g} vs {subsidy[k]:.6g})", arm=k)
    e0 = np.zeros((b, r, 1))
    e0[:, 0] = 1.0
    y = np.linalg.solve(np.swapaxes(lhs, 1, 2), e0)[..., 0]
    # scatter adjoint weights onto the (state, action) pairs the rows use
    row_weight = np.zeros((b, m, 2))
    np.add.at(row_weight, (np.arange(b)[:, None], states, actions), y)
    index_grad = -gamma * row_weight[..., None] * x[:, None, None, 1:]
    reward_grad = -row_weight.sum(axis=-1)
    return x, index_grad, reward_grad


def select_rows(kernel, reward, gamma: float, u: int, vals: SubsidizedValues) -> RowSelection:
    kernel = np.asarray(kernel, dtype=float)
    states, actions = _select_batch(
        kernel[None], np.asarray(reward, dtype=float)[None], gamma, np.array([u]),
        np.asarray(vals.values, dtype=float)[None], np.array([vals.subsidy]),
    )
    return RowSelection(states[0], actions[0])


def assemble_system(kernel, reward, gamma: float, sel: RowSelection):
    """Return ``(lhs, rhs)`` for unknowns ``[m, V(0), ..., V(M-1)]``."""
    lhs, rhs = _assemble_batch(
        np.asarray(kernel, dtype=float)[None], np.asarray(reward, dtype=float)[None], gamma,
        sel.states[None], sel.actions[None],
    )
    return lhs[0], rhs[0]


def solve_and_differentiate(kernel, reward, gamma: float, u: int, vals: SubsidizedValues):
    """Index from the selected system and its gradient ``(M, 2, M)`` w.r.t. the kernel."""
    index, grad, _ = _differentiate(
        np.asarray(kernel, dtype=float)[None], np.asarray(reward, dtype=float)[None], gamma,
        np.array([u]), np.asarray(vals.values, dtype=float)[None], np.array([vals.subsidy]),
    )
    return float(index[0]), grad[0]


def _differentiate(kernels, reward, gamma, targets, values, subsidy):
    states, actions = _select_batch(kernels, reward, gamma, targets, values, subsidy)
    x, index_grad, reward_grad = _solve_batch(kernels, reward, gamma, states, actions, subsidy)
    return x[:, 0], index_grad, reward_grad


def compute_jacobian(arms, reward, gamma: float, table: WhittleTable) -> WhittleJacobian:
    """Jacobian for every (arm, state); ``reward`` is ``(M,)`` or ``(N, M)``."""
    arms = np.asarray(arms, dtype=float)
    n, m = arms.shape[:2]
    reward = np.broadcast_to(np.asarray(reward, dtype=float), (n, m))
    try:
        _, index_grad, reward_grad = _differentiate(
            np.repeat(arms, m, axis=0), np.repeat(reward, m, axis=0), gamma,
            np.tile(np.arange(m), n), table.values.reshape(n * m, m), table.indices.reshape(n * m),
        )
    except WhittleError as err:
        k = err.arm
        raise WhittleError(err.detail, arm=k // m, state=k % m) from err
    return WhittleJacobian(index_grad.reshape(n, m, m, 2, m), reward_grad.reshape(n, m, m))


def whittle_jacobian(inst: RmabInstance, table: WhittleTable) -> WhittleJacobian:
    return compute_jacobian(inst.arms, inst.reward, inst.discount, table)

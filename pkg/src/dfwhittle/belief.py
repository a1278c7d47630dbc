"""Collapsing bandits: 2-state arms observed only when pulled.

A planner's knowledge of such an arm is the pair ``(w, d)``: the last
observed state and the number of steps since it was seen.  Its belief is
``e_w P0^d`` with ``P0`` the passive kernel.  Enumerating ``(w, d)`` for
``d = 1..T`` gives an ordinary fully observed chain on ``2T`` states:

* passive: ``(w, d) -> (w, min(d + 1, T))`` with probability 1;
* active: the state is revealed after the pull, ``(w, d) -> (s', 1)``
  with probability ``(b(w, d) P1)(s')``;
* reward: ``b(w, d) . R``.

Whittle indices of the chain then come from the usual solver, and their
derivatives are chained back to the 2-state kernel by forward-mode
differentiation of the matrix powers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ACTIVE, PASSIVE, RmabError, RmabInstance
from .whittle import BRACKET_TOL, compute_whittle
from .whittle_diff import compute_jacobian


@dataclass(frozen=True)
class BeliefChain:
    kernel: np.ndarray  # (2T, 2, 2T)
    reward: np.ndarray  # (2T,)
    beliefs: np.ndarray  # (2T, 2)
    labels: np.ndarray  # (2T, 2) rows of (w, d)
    horizon: int

    @property
    def num_states(self) -> int:
        return self.kernel.shape[0]

    def index_of(self, observed: int, elapsed: int) -> int:
        return chain_index(observed, elapsed, self.horizon)

    def to_json(self, budget: int = 1, discount: float = 0.99) -> dict:
        """Instance-format record of the chain plus a ``(w, d)`` annotation block."""
        inst = RmabInstance(self.kernel[None], self.reward, budget, self.horizon, discount)
        data = inst.to_json()
        data["belief_states"] = [{"index": i, "observed": int(w), "elapsed": int(d)}
                                 for i, (w, d) in enumerate(self.labels)]
        return data


@dataclass(frozen=True)
class BeliefWhittle:
    chain: BeliefChain
    indices: np.ndarray  # (2T,)
    jacobian: np.ndarray  # (2T, 2, 2, 2) dW(chain state) / dP(s, a, s')


def chain_index(observed, elapsed, horizon: int):
    return np.asarray(observed) * horizon + np.asarray(elapsed) - 1


def _check(kernel, horizon):
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (2, 2, 2):
        raise RmabError("collapsing bandits implemented for 2 states only")
    if horizon < 1:
        raise RmabError("horizon must be at least 1")
    return kernel


def _beliefs(passive, horizon):
    """``b[w, d-1] = e_w P0^d`` and its derivative w.r.t. ``P0[x, y]``."""
    b = np.zeros((2, horizon, 2))
    db = np.zeros((2, horizon, 2, 2, 2))  # [w, d-1, component, x, y]
    eye = np.eye(2)
    for w in range(2):
        cur = eye[w] @ passive
        dcur = np.zeros((2, 2, 2))
        for y in range(2):
            dcur[y, w, y] = 1.0
        b[w, 0], db[w, 0] = cur, dcur
        for d in range(1, horizon):
            prev, dprev = cur, dcur
            cur = prev @ passive
            # d(prev P0) = d(prev) P0 + prev[x] e_y
            dcur = np.einsum("jxy,jk->kxy", dprev, passive)
            for x in range(2):
                for y in range(2):
                    dcur[y, x, y] += prev[x]
            b[w, d], db[w, d] = cur, dcur
    return b.reshape(2 * horizon, 2), db.reshape(2 * horizon, 2, 2, 2)


def _expand(kernel, reward, horizon):
    kernel = _check(kernel, horizon)
    reward = np.asarray(reward, dtype=float)
    s = 2 * horizon
    passive, active = kernel[:, PASSIVE], kernel[:, ACTIVE]
    beliefs, d_beliefs = _beliefs(passive, horizon)
    labels = np.array([(w, d) for w in range(2) for d in range(1, horizon + 1)])
    obs, el = labels[:, 0], labels[:, 1]

    chain = np.zeros((s, 2, s))
    chain[np.arange(s), PASSIVE, chain_index(obs, np.minimum(el + 1, horizon), horizon)] = 1.0
    fresh = chain_index(np.arange(2), 1, horizon)
    chain[:, ACTIVE, fresh] = beliefs @ active

    # derivatives w.r.t. the underlying kernel, index [x, a, y]
    d_chain = np.zeros((s, 2, s, 2, 2, 2))
    # active row (b P1)(s'): through b (via P0) and through P1 directly
    via_belief = np.einsum("cjxy,jk->ckxy", d_beliefs, active)
    for sp in range(2):
        d_chain[:, ACTIVE, fresh[sp], :, PASSIVE, :] = via_belief[:, sp]
        d_chain[:, ACTIVE, fresh[sp], :, ACTIVE, sp] = beliefs
    d_reward = np.zeros((s, 2, 2, 2))
    d_reward[:, :, PASSIVE, :] = np.einsum("cjxy,j->cxy", d_beliefs, reward)
    return BeliefChain(chain, beliefs @ reward, beliefs, labels, horizon), d_chain, d_reward


def expand_belief_chain(kernel, reward, horizon: int) -> BeliefChain:
    return _expand(kernel, reward, horizon)[0]


def belief_whittle(kernel, reward, gamma: float, horizon: int, tol: float = BRACKET_TOL) -> BeliefWhittle:
    """Whittle indices over belief states with their Jacobian w.r.t. the 2-state kernel."""
    chain, d_chain, d_reward = _expand(kernel, reward, horizon)
    table = compute_whittle(chain.kernel[None], chain.reward, gamma, tol=tol)
    jac = compute_jacobian(chain.kernel[None], chain.reward, gamma, table)
    grad = np.einsum("ucaz,cazxby->uxby", jac.index_grad[0], d_chain)
    grad += np.einsum("uc,cxby->uxby", jac.reward_grad[0], d_reward)
    return BeliefWhittle(chain, table.indices[0], grad)


def belief_labels(states, actions, horizon: int) -> np.ndarray:
    """Chain indices an observer would hold along a logged trajectory.

    ``states`` and ``actions`` are ``(T, N)``.  The initial state counts as
    observed, a pull at step t reveals the state at t + 1, and passive
    steps increase the elapsed count up to the cap.
    """
    states = np.asarray(states)
    actions = np.asarray(actions)
    obs = states[0].copy()
    el = np.ones_like(obs)
    out = np.empty(states.shape, dtype=np.int64)
    for t in range(states.shape[0]):
        out[t] = chain_index(obs, el, horizon)
        if t + 1 < states.shape[0]:
            pulled = actions[t] == ACTIVE
            obs = np.where(pulled, states[t + 1], obs)
            el = np.where(pulled, 1, np.minimum(el + 1, horizon))
    return out

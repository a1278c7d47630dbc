"""Soft top-k through entropic optimal transport onto two anchors.

Scores are standardized, then each of the N points (mass 1/N) is
transported to a "rejected" anchor at the minimum score or a "selected"
anchor at the maximum score, with column masses ``(N-k)/N`` and ``k/N``.
The selection probability of item i is ``N * plan[i, selected]``.

With only two target columns the row projection of the Bregman/Sinkhorn
scheme has a closed form, leaving one dual unknown ``t`` (the potential
gap between the columns).  At the fixed point

    p_i = sigmoid((t + a_i) / eps),    a_i = C[i, rejected] - C[i, selected],
    sum_i p_i = k,

and ``t`` is found by bracketed Newton steps.  The backward pass
differentiates this fixed point implicitly, O(N) per score vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

STD_EPS = 1e-8
BUDGET_TOL = 1e-6


class SoftTopKError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SoftTopKConfig:
    epsilon: float = 0.1
    max_iters: int = 200
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class TopKState:
    """Forward quantities kept for the backward pass (leading batch axis)."""

    shape: tuple
    k: int
    epsilon: float
    probs: np.ndarray  # (B, N)
    z: np.ndarray  # standardized scores
    centered: np.ndarray
    std: np.ndarray  # (B,)
    lo_idx: np.ndarray
    hi_idx: np.ndarray
    converged: np.ndarray  # (B,) bool
    iterations: int

    @property
    def plan(self) -> np.ndarray:
        """Transport plan ``(B, N, 2)``, columns (rejected, selected)."""
        n = self.probs.shape[1]
        return np.stack([1.0 - self.probs, self.probs], axis=-1) / n


def _standardize(s):
    centered = s - s.mean(axis=-1, keepdims=True)
    std = np.sqrt((centered**2).mean(axis=-1))
    return centered / (std[:, None] + STD_EPS), centered, std


def _solve_gap(a, k, eps, max_iters, tol):
    """Find t with sum_i sigmoid((t + a_i)/eps) = k for each row of ``a``."""
    b, n = a.shape
    # every p_i <= 1/(n+1) at lo and >= 1 - 1/(n+1) at hi
    pad = eps * np.log(n + 1.0)
    lo = -a.max(axis=1) - pad
    hi = -a.min(axis=1) + pad
    t = 0.5 * (lo + hi)
    step_old = hi - lo
    target = float(k)
    it = 0
    for it in range(1, max_iters + 1):
        p = expit((t[:, None] + a) / eps)
        h = p.sum(axis=1) - target
        live = np.abs(h) > 1e-3 * tol
        if not live.any():
            break
        lo = np.where(h < 0, t, lo)
        hi = np.where(h > 0, t, hi)
        slope = (p * (1.0 - p)).sum(axis=1) / eps
        with np.errstate(divide="ignore", invalid="ignore"):
            step = h / slope
        newton = t - step
        # Newton only while it stays in the bracket and at least halves the step
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi) & (2.0 * np.abs(step) <= step_old)
        proposal = np.where(ok, newton, 0.5 * (lo + hi))
        step_old = np.where(live, np.abs(proposal - t), step_old)
        # rows already at their root stay put
        t = np.where(live, proposal, t)
    p = expit((t[:, None] + a) / eps)
    residual = np.abs(p.sum(axis=1) - target)
    return p, residual <= tol, it


def soft_topk_forward(scores, k: int, cfg: SoftTopKConfig = SoftTopKConfig()):
    """Soft top-k selection probabilities for ``scores`` of shape ``(..., N)``.

    Returns ``(probs, state)``; ``probs`` has the shape of ``scores`` and
    sums to ``k`` along the last axis.
    """
    scores = np.asarray(scores, dtype=float)
    shape = scores.shape
    n = shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    s = scores.reshape(-1, n)
    b = s.shape[0]
    z, centered, std = _standardize(s)
    rows = np.arange(b)
    lo_idx = np.argmin(z, axis=1)
    hi_idx = np.argmax(z, axis=1)
    if k == n:
        state = TopKState(shape, k, cfg.epsilon, np.ones((b, n)), z, centered, std,
                          lo_idx, hi_idx, np.ones(b, dtype=bool), 0)
        return np.ones(shape), state

    y0 = z[rows, lo_idx][:, None]
    y1 = z[rows, hi_idx][:, None]
    a = (z - y0) ** 2 - (z - y1) ** 2
    probs, converged, it = _solve_gap(a, k, cfg.epsilon, cfg.max_iters, cfg.convergence_tol)
    if np.any(np.abs(probs.sum(axis=1) - k) > BUDGET_TOL):
        raise SoftTopKError("soft top-k lost budget conservation")
    state = TopKState(shape, k, cfg.epsilon, probs, z, centered, std, lo_idx, hi_idx, converged, it)
    return probs.reshape(shape), state


def soft_topk_backward(state: TopKState, upstream) -> np.ndarray:
    """Vector-Jacobian product: ``dL/dscores`` from ``dL/dprobs``."""
    if not state.converged.all():
        raise SoftTopKError("backward on unconverged transport")
    b, n = state.probs.shape
    v = np.asarray(upstream, dtype=float).reshape(b, n)
    if state.k == n:
        return np.zeros(state.shape)
    rows = np.arange(b)
    p = state.probs
    w = p * (1.0 - p) / state.epsilon
    wsum = w.sum(axis=1, keepdims=True)
    v_bar = np.divide((v * w).sum(axis=1, keepdims=True), wsum, out=np.zeros((b, 1)), where=wsum > 0)
    ga = w * (v - v_bar)  # dL/da with the budget constraint eliminating t

    z = state.z
    y0 = z[rows, state.lo_idx][:, None]
    y1 = z[rows, state.hi_idx][:, None]
    gz = ga * 2.0 * (y1 - y0)
    np.add.at(gz, (rows, state.hi_idx), (ga * 2.0 * (z - y1)).sum(axis=1))
    np.add.at(gz, (rows, state.lo_idx), (-ga * 2.0 * (z - y0)).sum(axis=1))

    scale = state.std + STD_EPS
    c = state.centered
    safe_std = np.where(state.std > 0, state.std, 1.0)[:, None]
    dstd = np.where(state.std[:, None] > 0, c / (n * safe_std), 0.0)
    gc = gz / scale[:, None] - ((gz * c).sum(axis=1) / scale**2)[:, None] * dstd
    gs = gc - gc.mean(axis=1, keepdims=True)
    return gs.reshape(state.shape)

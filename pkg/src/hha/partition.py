"""Geometry of the polyhedral partition induced by the recurrence softmax.

All geometry lives in state space with the control input held at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .hybrid_model import HybridSystemParams, mode_transition_probs

logger = logging.getLogger(__name__)


def _as_bounds(bounds) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(bounds, dtype=float)
    lb, ub = b[:, 0], b[:, 1]
    if not (np.all(np.isfinite(b)) and np.all(lb < ub)):
        raise ValueError("bounds must be finite with lower < upper in every dimension")
    return lb, ub


def boundary_feasible(W: np.ndarray, r: np.ndarray, i: int, j: int, bounds) -> bool:
    """True if some in-bounds point ties logits ``i`` and ``j`` at the top.

    Solves the feasibility program::

        (W_i - W_j) x  = r_j - r_i
        (W_i - W_k) x >= r_k - r_i    for every k not in {i, j}
        lb <= x <= ub
    """
    lb, ub = _as_bounds(bounds)
    K, M = W.shape
    others = [k for k in range(K) if k not in (i, j)]
    A_eq = (W[i] - W[j])[None]
    b_eq = np.array([r[j] - r[i]])
    if others:
        A_ub = -(W[i] - W[others])
        b_ub = r[i] - r[others]
    else:
        A_ub, b_ub = None, None
    res = linprog(
        np.zeros(M), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=list(zip(lb, ub)), method="highs",
    )
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    logger.warning("adjacency LP (%d, %d) ended with status %d; keeping the edge", i, j, res.status)
    return True


def region_margin(W: np.ndarray, r: np.ndarray, j: int, bounds) -> float:
    """Largest amount by which logit ``j`` can beat every other logit in bounds.

    Positive means mode ``j`` owns a region with interior inside the box,
    negative means it is never the most likely mode there.
    """
    lb, ub = _as_bounds(bounds)
    K, M = W.shape
    if K == 1:
        return np.inf
    others = [k for k in range(K) if k != j]
    # maximize t subject to (W_k - W_j) x + t <= r_j - r_k
    A_ub = np.hstack([W[others] - W[j], np.ones((K - 1, 1))])
    b_ub = r[j] - r[others]
    c = np.zeros(M + 1)
    c[-1] = -1.0
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, bounds=list(zip(lb, ub)) + [(None, None)], method="highs"
    )
    if res.status != 0:
        raise RuntimeError(f"region LP for mode {j} failed with status {res.status}")
    return float(-res.fun)


def extract_adjacency(params: HybridSystemParams, bounds) -> np.ndarray:
    """K x K boolean adjacency of the partition cells within ``bounds``."""
    K = params.K
    adj = np.eye(K, dtype=bool)
    for i in range(K):
        for j in range(i + 1, K):
            adj[i, j] = adj[j, i] = boundary_feasible(params.W_x, params.r, i, j, bounds)
    return adj


@dataclass
class ControlPrior:
    mode: int
    point: np.ndarray
    attained_probability: float
    success: bool
    iterations: int


def softmax_input_gradient(x, j: int, W: np.ndarray, r: np.ndarray):
    """Return ``sigma_j(x)`` and its gradient ``sigma_j (e_j - sigma) . W``."""
    v = W @ x + r
    v = v - v.max()
    p = np.exp(v)
    p /= p.sum()
    e = np.zeros_like(p)
    e[j] = 1.0
    return p[j], p[j] * (e - p) @ W


def control_prior(
    params: HybridSystemParams,
    j: int,
    theta: float = 0.7,
    bounds=None,
    init=None,
    lr: float = 0.5,
    max_iters: int = 10_000,
) -> ControlPrior:
    """Gradient ascent on ``P(z = j | x, u = 0)`` until it reaches ``theta``.

    Steps are taken along the probability gradient expressed in box-normalized
    coordinates (each dimension rescaled to unit width), with step halving
    whenever a step fails to raise the probability.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    lb, ub = _as_bounds(bounds)
    span = ub - lb
    W, r = params.W_x, params.r
    x = (lb + ub) / 2 if init is None else np.clip(np.asarray(init, dtype=float), lb, ub)
    p, g = softmax_input_gradient(x, j, W, r)
    step = lr
    it = 0
    while p < theta and it < max_iters:
        it += 1
        gy = g * span
        norm = np.linalg.norm(gy)
        if norm == 0.0 or step < 1e-12:
            break
        x_new = np.clip(x + step * (gy / norm) * span, lb, ub)
        p_new, g_new = softmax_input_gradient(x_new, j, W, r)
        if p_new > p:
            x, p, g = x_new, p_new, g_new
            step = min(step * 1.5, 1.0)
        else:
            step *= 0.5
    return ControlPrior(j, x, float(p), bool(p >= theta), it)


def mode_centroids(states: np.ndarray, labels: np.ndarray, K: int) -> list:
    """Mean state per mode, ``None`` for modes with no points."""
    out = []
    for k in range(K):
        sel = labels == k
        out.append(states[sel].mean(axis=0) if np.any(sel) else None)
    return out


def control_priors(
    params: HybridSystemParams,
    bounds,
    theta: float = 0.7,
    centroids=None,
    lr: float = 0.5,
    max_iters: int = 10_000,
) -> list[ControlPrior]:
    lb, ub = _as_bounds(bounds)
    priors = []
    for j in range(params.K):
        init = None if centroids is None else centroids[j]
        if init is None:
            init = (lb + ub) / 2
        priors.append(control_prior(params, j, theta, bounds, init, lr, max_iters))
    return priors


def region_probabilities(params: HybridSystemParams, points: np.ndarray) -> np.ndarray:
    """Mode probabilities with zero control, row per point."""
    return mode_transition_probs(points, np.zeros((len(points), params.N)), params)

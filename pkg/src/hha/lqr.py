"""Finite-horizon LQR for mode-to-mode subproblems.

Each subproblem drives the affine dynamics ``x' = A x + B u + b`` towards a
fixed goal, penalizing only the terminal deviation and the control effort::

    J = (x_S - g)' Q_f (x_S - g) + sum_{t<S} u_t' R u_t

The affine term and the goal are absorbed by augmenting the state with a
constant 1, after which the standard backward Riccati pass applies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hybrid_model import HybridSystemParams

logger = logging.getLogger(__name__)


@dataclass
class LqrConfig:
    horizon: int = 50
    q_f: float = 100.0
    r: float = 1.0


@dataclass
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    x_goal: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray
    S: int

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        M = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(M, -1)
        self.b = np.asarray(self.b, dtype=float).reshape(M)
        self.x_goal = np.asarray(self.x_goal, dtype=float).reshape(M)
        self.Q_f = np.atleast_2d(np.asarray(self.Q_f, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.S < 1:
            raise ValueError("horizon must be at least 1")
        if not np.allclose(self.Q_f, self.Q_f.T) or np.linalg.eigvalsh(self.Q_f).min() < -1e-12:
            raise ValueError("Q_f must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")

    @classmethod
    def from_config(cls, A, B, b, x_goal, config: LqrConfig) -> "LqrProblem":
        M = np.atleast_2d(A).shape[0]
        N = np.asarray(B).reshape(M, -1).shape[1]
        return cls(A, B, b, x_goal, config.q_f * np.eye(M), config.r * np.eye(N), config.horizon)


@dataclass
class LqrPolicy:
    """Time-indexed affine feedback ``u_t = -K_t x - k_t``.

    ``cost_to_go[t]`` is the (M+1) x (M+1) quadratic form in ``[x, 1]``.
    """

    gains: np.ndarray
    offsets: np.ndarray
    cost_to_go: np.ndarray = field(repr=False)

    @property
    def horizon(self) -> int:
        return len(self.gains)

    def control(self, x, t: int) -> np.ndarray:
        t = min(max(int(t), 0), self.horizon - 1)
        return -self.gains[t] @ np.asarray(x, dtype=float) - self.offsets[t]

    def expected_cost(self, x0) -> float:
        z = np.append(np.asarray(x0, dtype=float), 1.0)
        return float(z @ self.cost_to_go[0] @ z)

    def to_dict(self) -> dict:
        return {"gains": self.gains.tolist(), "offsets": self.offsets.tolist()}


def _augment(problem: LqrProblem):
    M, N = problem.B.shape
    Aa = np.zeros((M + 1, M + 1))
    Aa[:M, :M] = problem.A
    Aa[:M, M] = problem.b
    Aa[M, M] = 1.0
    Ba = np.vstack([problem.B, np.zeros((1, N))])
    g = problem.x_goal
    Qg = problem.Q_f @ g
    P = np.zeros((M + 1, M + 1))
    P[:M, :M] = problem.Q_f
    P[:M, M] = -Qg
    P[M, :M] = -Qg
    P[M, M] = g @ Qg
    return Aa, Ba, P


def solve(problem: LqrProblem) -> LqrPolicy:
    Aa, Ba, P = _augment(problem)
    M, N = problem.B.shape
    S = problem.S
    gains = np.empty((S, N, M + 1))
    Ps = np.empty((S + 1, M + 1, M + 1))
    Ps[S] = P
    for t in range(S - 1, -1, -1):
        H = problem.R + Ba.T @ P @ Ba
        if np.linalg.cond(H) > 1e12:
            raise ValueError(f"R + B'PB is numerically singular at step {t}")
        Kt = np.linalg.solve(H, Ba.T @ P @ Aa)
        P = Aa.T @ P @ Aa - Aa.T @ P @ Ba @ Kt
        P = 0.5 * (P + P.T)
        gains[t] = Kt
        Ps[t] = P
    return LqrPolicy(gains[:, :, :M].copy(), gains[:, :, M].copy(), Ps)


def rollout_cost(policy: LqrPolicy, problem: LqrProblem, x0) -> float:
    """Realized objective of the noiseless closed loop started at ``x0``."""
    x = np.asarray(x0, dtype=float).copy()
    cost = 0.0
    for t in range(problem.S):
        u = policy.control(x, t)
        cost += float(u @ problem.R @ u)
        x = problem.A @ x + problem.B @ u + problem.b
    d = x - problem.x_goal
    return cost + float(d @ problem.Q_f @ d)


@dataclass
class PolicyTable:
    """Cached subproblem solutions keyed by ``(from_mode, to_mode)``."""

    policies: dict
    costs: np.ndarray
    goals: dict

    def get(self, i: int, j: int):
        return self.policies.get((i, j))

    def keys(self):
        return self.policies.keys()

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "from": int(i),
                    "to": int(j),
                    "goal": self.goals[(i, j)].tolist(),
                    "cost": float(self.costs[i, j]),
                    **pol.to_dict(),
                }
                for (i, j), pol in sorted(self.policies.items())
            ]
        }


def cache_policies(
    params: HybridSystemParams,
    adjacency: np.ndarray,
    control_priors: list,
    config: LqrConfig | None = None,
    entry_states: dict | None = None,
) -> PolicyTable:
    """Solve every adjacency-valid subproblem ``i -> j`` under mode-i dynamics.

    ``J*_ij`` is the cost-to-go from the mean observed entry state of mode ``i``
    (or the mode's own prior point when no entries were observed). Pairs whose
    target has no usable control prior are omitted and cost ``inf``.
    """
    config = config or LqrConfig()
    entry_states = entry_states or {}
    K = params.K
    costs = np.full((K, K), np.inf)
    policies, goals = {}, {}
    for j in range(K):
        prior = control_priors[j]
        if prior is None or not prior.success:
            logger.info("mode %d has no control prior; transitions into it are not cached", j)
            continue
        for i in range(K):
            if not adjacency[i, j]:
                continue
            problem = LqrProblem.from_config(
                params.A[i], params.B[i], params.b[i], prior.point, config
            )
            try:
                policy = solve(problem)
            except ValueError as exc:
                logger.warning("LQR %d->%d failed: %s", i, j, exc)
                continue
            start = entry_states.get(i)
            if start is None:
                start = control_priors[i].point if control_priors[i] is not None else prior.point
            policies[(i, j)] = policy
            goals[(i, j)] = np.asarray(prior.point, dtype=float)
            costs[i, j] = policy.expected_cost(start)
    return PolicyTable(policies, costs, goals)

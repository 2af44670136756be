"""Bayesian MDP over discrete modes with information-seeking planning.

States and actions are both mode indices: action ``a`` means "drive the
system into mode ``a``". Transition probabilities carry Dirichlet
pseudo-counts ``alpha[a, s, s']`` whose support is restricted by the
partition adjacency.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

logger = logging.getLogger(__name__)

PRIOR_COUNT = 0.9
FLOOR_COUNT = 1e-6


@dataclass
class DirichletTransitionModel:
    alpha: np.ndarray  # (K actions, K states, K next states)
    adjacency: np.ndarray = None

    @property
    def K(self) -> int:
        return self.alpha.shape[1]

    def predictive(self, s: int | None = None, a: int | None = None) -> np.ndarray:
        """Posterior-mean transition probabilities, full tensor or one row."""
        p = self.alpha / self.alpha.sum(axis=-1, keepdims=True)
        if s is None:
            return p
        return p[a, s]

    def copy(self) -> "DirichletTransitionModel":
        return DirichletTransitionModel(
            self.alpha.copy(), None if self.adjacency is None else self.adjacency.copy()
        )


def init_priors(adjacency, prior: float = PRIOR_COUNT, floor: float = FLOOR_COUNT):
    adj = np.asarray(adjacency, dtype=bool)
    K = adj.shape[0]
    alpha = np.where(adj[None, :, :], prior, floor) * np.ones((K, 1, 1))
    return DirichletTransitionModel(alpha, adj.copy())


def update(model: DirichletTransitionModel, s: int, a: int, s_next: int) -> DirichletTransitionModel:
    """Count one observed ``s --a--> s_next`` transition (in place)."""
    if model.adjacency is not None and not model.adjacency[s, s_next]:
        logger.warning(
            "transition %d -> %d is not adjacent in the partition; count not recorded", s, s_next
        )
        return model
    model.alpha[a, s, s_next] += 1.0
    return model


def dirichlet_kl(alpha_post, alpha_prior) -> np.ndarray:
    """KL(Dir(alpha_post) || Dir(alpha_prior)) over the last axis."""
    a = np.asarray(alpha_post, dtype=float)
    b = np.asarray(alpha_prior, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    a0 = a.sum(axis=-1)
    b0 = b.sum(axis=-1)
    return (
        gammaln(a0)
        - gammaln(a).sum(axis=-1)
        - gammaln(b0)
        + gammaln(b).sum(axis=-1)
        + ((a - b) * (digamma(a) - digamma(a0)[..., None])).sum(axis=-1)
    )


def _expected_kl(alpha: np.ndarray) -> np.ndarray:
    """sum_k pbar_k KL(alpha + e_k || alpha), vectorized over leading axes."""
    K = alpha.shape[-1]
    p = alpha / alpha.sum(axis=-1, keepdims=True)
    post = alpha[..., None, :] + np.eye(K)
    kl = dirichlet_kl(post, alpha[..., None, :])
    return np.sum(p * kl, axis=-1)


def expected_info_gain(model: DirichletTransitionModel, s: int, a: int) -> float:
    return float(_expected_kl(model.alpha[a, s]))


def info_gain_table(model: DirichletTransitionModel) -> np.ndarray:
    """IG[s, a] for every state/action pair."""
    return _expected_kl(model.alpha).T


def state_entropy_bonus(predictive) -> float:
    p = np.asarray(predictive, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_table(model: DirichletTransitionModel) -> np.ndarray:
    p = model.predictive()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)
    return h.T


def goal_prior(K: int, preferred=(), preference: float = 5.0) -> np.ndarray:
    """Log-preferences: ``preference`` on the listed modes, 0 elsewhere."""
    lp = np.zeros(K)
    for g in preferred:
        lp[g] = preference
    return lp


def one_hot_goal_prior(K: int, g: int, floor: float = -50.0) -> np.ndarray:
    lp = np.full(K, floor)
    lp[g] = 0.0
    return lp


@dataclass
class PlannerConfig:
    horizon: int = 3
    n_rollouts: int = 32
    n_sequences: int = 256
    enumeration_cap: int = 4096
    beta_p: float = 1.0
    beta_s: float = 1.0
    lambda_c: float = 0.01
    unreachable_penalty: float = 100.0
    reward_threshold: float = 0.0
    goal_preference: float = 5.0


@dataclass
class PlanResult:
    action: int
    value: float
    sequence: tuple
    breakdown: dict = field(default_factory=dict)


def _candidate_sequences(K: int, T: int, cfg: PlannerConfig, rng) -> np.ndarray:
    if K**T <= cfg.enumeration_cap:
        return np.array(list(itertools.product(range(K), repeat=T)), dtype=int).reshape(-1, T)
    return rng.integers(0, K, size=(cfg.n_sequences, T))


def plan_detailed(
    s0: int,
    model: DirichletTransitionModel,
    log_goal: np.ndarray,
    subgoal_costs: np.ndarray | None,
    config: PlannerConfig | None = None,
    seed=None,
) -> PlanResult:
    """Receding-horizon choice of the next subgoal mode.

    Each open-loop action sequence is scored by Monte Carlo rollouts through
    the posterior-mean transition model, accumulating per step::

        ln p~(s_t) - lambda_c J*[s_{t-1}, a_t] + beta_p IG[s_{t-1}, a_t] + beta_s H[s_{t-1}, a_t]

    and the first action of the highest-scoring sequence is returned.
    """
    cfg = config or PlannerConfig()
    K = model.K
    T = cfg.horizon
    if T < 1:
        raise ValueError("planning horizon must be at least 1")
    rng = np.random.default_rng(seed)
    costs = np.zeros((K, K)) if subgoal_costs is None else np.asarray(subgoal_costs, dtype=float)
    feasible = np.isfinite(costs)
    log_goal = np.asarray(log_goal, dtype=float)

    ig = cfg.beta_p * info_gain_table(model) if cfg.beta_p else np.zeros((K, K))
    ent = cfg.beta_s * entropy_table(model) if cfg.beta_s else np.zeros((K, K))
    cost = np.where(feasible, -cfg.lambda_c * np.where(feasible, costs, 0.0), -cfg.unreachable_penalty)

    seqs = _candidate_sequences(K, T, cfg, rng)
    seqs = seqs[feasible[s0, seqs[:, 0]]]
    if len(seqs) == 0:
        logger.info("no actionable subgoal from mode %d; staying put", s0)
        return PlanResult(int(s0), float("-inf"), (int(s0),) * T)

    cdf = np.cumsum(model.predictive(), axis=-1)
    cdf[..., -1] = 1.0
    n, R = len(seqs), cfg.n_rollouts
    state = np.full((n, R), s0, dtype=int)
    terms = {k: np.zeros((n, R)) for k in ("goal", "cost", "info_gain", "entropy")}
    for t in range(T):
        a = np.broadcast_to(seqs[:, t][:, None], (n, R))
        terms["cost"] += cost[state, a]
        terms["info_gain"] += ig[state, a]
        terms["entropy"] += ent[state, a]
        draw = rng.random((n, R))
        nxt = np.sum(draw[..., None] >= cdf[a, state], axis=-1)
        state = np.minimum(nxt, K - 1)
        terms["goal"] += log_goal[state]
    means = {k: v.mean(axis=1) for k, v in terms.items()}
    value = sum(means.values())
    best = int(np.argmax(value))
    breakdown = {k: float(v[best]) for k, v in means.items()}
    return PlanResult(int(seqs[best, 0]), float(value[best]), tuple(int(a) for a in seqs[best]), breakdown)


def plan(s0, model, log_goal, subgoal_costs=None, config=None, seed=None) -> int:
    return plan_detailed(s0, model, log_goal, subgoal_costs, config, seed).action

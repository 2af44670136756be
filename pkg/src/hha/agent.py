"""Hybrid hierarchical agent.

The continuous loop runs cached LQR policies; the discrete planner is only
consulted when the classified mode changes or the dwell-time budget runs out.
Every ``refit_interval`` environment steps the hybrid model is refitted to
the replay buffer and everything derived from it (partition adjacency,
control priors, LQR cache, Dirichlet counts) is rebuilt.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import lqr as lqr_mod
from . import planner as planner_mod
from .hybrid_model import (
    FitConfig,
    HybridSystemParams,
    Trajectory,
    classify,
    fit_em,
    most_likely_mode,
)
from .lqr import LqrConfig, PolicyTable
from .partition import control_priors, extract_adjacency, mode_centroids
from .planner import DirichletTransitionModel, PlannerConfig

logger = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    K: int = 5
    refit_interval: int = 1000
    reward_refit_threshold: float = 90.0
    max_dwell_time: int = 50
    theta: float = 0.7
    bounds: list | None = None
    lqr: LqrConfig = field(default_factory=LqrConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.refit_interval < 1:
            raise ValueError("refit_interval must be at least 1")
        if self.max_dwell_time < 1:
            raise ValueError("max_dwell_time must be at least 1")


@dataclass
class ModelSnapshot:
    """Everything derived from one fit. Swapped in as a unit after a refit."""

    params: HybridSystemParams
    adjacency: np.ndarray
    priors: list
    table: PolicyTable
    fit_labels: list

    def to_dict(self) -> dict:
        return {
            "model": self.params.to_dict(),
            "adjacency": self.adjacency.astype(int).tolist(),
            "control_priors": [
                {
                    "mode": p.mode,
                    "point": p.point.tolist(),
                    "attained_probability": p.attained_probability,
                    "success": p.success,
                }
                for p in self.priors
            ],
            "policy_table": self.table.to_dict(),
        }


@dataclass
class _Episode:
    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    decisions: list = field(default_factory=list)  # (t, goal point)
    final_state: np.ndarray = None

    def trajectory(self, final_state=None) -> Trajectory:
        states = list(self.states)
        controls = list(self.controls)
        rewards = list(self.rewards)
        modes = list(self.modes)
        if final_state is not None:
            states.append(final_state)
            controls.append(np.zeros_like(controls[-1]) if controls else np.zeros(1))
            rewards.append(0.0)
            modes.append(modes[-1] if modes else 0)
        modes = [max(m, 0) for m in modes]
        return Trajectory(np.array(states), np.array(controls), np.array(modes), np.array(rewards))


class HybridHierarchicalAgent:
    def __init__(self, config: AgentConfig, bounds=None, seed: int = 0):
        self.config = config
        b = bounds if bounds is not None else config.bounds
        if b is None:
            raise ValueError("state bounds are required")
        self.bounds = np.asarray(b, dtype=float)
        self.M = self.bounds.shape[0]
        self.N = 1
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.plan_rng = np.random.default_rng([seed, 1])

        self.snapshot: ModelSnapshot | None = None
        self.dirichlet: DirichletTransitionModel | None = None
        self.log_goal: np.ndarray | None = None
        self.goal_points: list = []
        self.goal_policy: dict = {}

        self.episodes: list = []  # completed _Episode records with final state
        self._episode = _Episode()
        self.best_episode_reward = -np.inf
        self._episode_reward = 0.0

        self.current_mode: int | None = None
        self.dwell = 0
        self.decision: tuple | None = None  # (mode at decision, action)
        self.policy_start = 0
        self.veto: set = set()
        self.last_u = np.zeros(self.N)
        self.t = 0  # step index within the episode

        self.planner_calls = 0
        self.switch_events = 0
        self.dwell_events = 0
        self.refits = 0
        self.events: list = []
        self.last_info: dict = {}

    # -- model-derived quantities ------------------------------------------

    @property
    def params(self) -> HybridSystemParams | None:
        return None if self.snapshot is None else self.snapshot.params

    def classify(self, x, u=None) -> int:
        u = self.last_u if u is None else np.atleast_1d(u)
        return most_likely_mode(np.asarray(x, dtype=float), u, self.params)

    def lift_goal(self, goal_point) -> int:
        """Mode containing ``goal_point``; adds it to the goal prior."""
        g = most_likely_mode(np.asarray(goal_point, dtype=float), np.zeros(self.N), self.params)
        if self.log_goal is None:
            self.log_goal = np.zeros(self.params.K)
        self.log_goal[g] = self.config.planner.goal_preference
        return g

    def _rebuild_goal(self):
        self.log_goal = np.zeros(self.params.K)
        self.goal_policy = {}
        if not self.goal_points:
            return
        target = np.mean(self.goal_points, axis=0)
        for gp in self.goal_points:
            g = self.lift_goal(gp)
            if g not in self.goal_policy:
                p = self.params
                problem = lqr_mod.LqrProblem.from_config(p.A[g], p.B[g], p.b[g], target, self.config.lqr)
                self.goal_policy[g] = lqr_mod.solve(problem)

    # -- acting -------------------------------------------------------------

    def act(self, observation) -> float:
        x = np.asarray(
            observation.as_array() if hasattr(observation, "as_array") else observation, dtype=float
        )
        if self.snapshot is None:
            u = float(self.rng.uniform(-1.0, 1.0))
            self._record(x, u, mode=-1, replanned=False, action=-1)
            return u

        mode = self.classify(x)
        replanned = False
        if self.decision is None or mode != self.current_mode:
            kind = "switch"
        elif self.dwell >= self.config.max_dwell_time:
            kind = "dwell"
        else:
            kind = None

        if kind is not None:
            self._close_sojourn(mode)
            result = self._plan(mode)
            action = result.action
            self.decision = (mode, action)
            self.policy_start = self.t
            self.dwell = 0
            replanned = True
            if kind == "switch":
                self.switch_events += 1
            else:
                self.dwell_events += 1
            goal = self._decision_goal(mode, action)
            self._episode.decisions.append((self.t, goal))
            self.events.append(
                {"t": self.t, "kind": kind, "state": mode, "action": action, **result.breakdown}
            )
        self.current_mode = mode
        action = self.decision[1]

        policy = self._policy(mode, action)
        if policy is None:
            logger.info("no cached policy for %d -> %d; vetoing it for the next plan", mode, action)
            self.veto.add((mode, action))
            u = 0.0
        else:
            u = float(np.clip(policy.control(x, self.t - self.policy_start)[0], -1.0, 1.0))
        self.dwell += 1
        self._record(x, u, mode=mode, replanned=replanned, action=action)
        return u

    def _policy(self, mode, action):
        if action == mode and mode in self.goal_policy:
            return self.goal_policy[mode]
        return self.snapshot.table.get(mode, action)

    def _decision_goal(self, mode, action):
        if action == mode and mode in self.goal_policy:
            return np.mean(self.goal_points, axis=0)
        return self.snapshot.priors[action].point

    def _plan(self, mode: int):
        costs = self.snapshot.table.costs.copy()
        for s, a in self.veto:
            costs[s, a] = np.inf
        self.veto.clear()
        self.planner_calls += 1
        return planner_mod.plan_detailed(
            mode,
            self.dirichlet,
            self.log_goal,
            costs,
            self.config.planner,
            seed=self.plan_rng,
        )

    def _close_sojourn(self, new_mode: int):
        if self.decision is not None:
            s, a = self.decision
            planner_mod.update(self.dirichlet, s, a, new_mode)

    def _record(self, x, u, mode, replanned, action):
        self._episode.states.append(x)
        self._episode.controls.append(np.array([u]))
        self._episode.modes.append(mode)
        self.last_u = np.array([u])
        self.last_info = {"mode": mode, "replanned": replanned, "action": action}
        self.t += 1

    # -- feedback from the environment -------------------------------------

    def observe(self, reward: float, next_observation, done: bool):
        x_next = np.asarray(
            next_observation.as_array()
            if hasattr(next_observation, "as_array")
            else next_observation,
            dtype=float,
        )
        self._episode.rewards.append(float(reward))
        self._episode_reward += float(reward)
        if reward > self.config.planner.reward_threshold:
            self.goal_points.append(x_next)
            if self.snapshot is not None:
                self._rebuild_goal()
        if done:
            self.end_episode(x_next)

    def end_episode(self, final_state):
        if self.snapshot is not None and self.decision is not None:
            self._close_sojourn(self.classify(final_state))
        ep = self._episode
        ep.final_state = np.asarray(final_state, dtype=float)
        self.episodes.append(ep)
        self.best_episode_reward = max(self.best_episode_reward, self._episode_reward)
        self._episode = _Episode()
        self._episode_reward = 0.0
        self.current_mode = None
        self.decision = None
        self.dwell = 0
        self.t = 0
        self.last_u = np.zeros(self.N)

    # -- refitting ----------------------------------------------------------

    def _buffer(self):
        """(episode record, trajectory) pairs, including the running episode."""
        out = [(ep, ep.trajectory(ep.final_state)) for ep in self.episodes]
        cur = self._episode
        if len(cur.rewards) >= 1:
            n = len(cur.rewards)
            part = _Episode(cur.states[:n], cur.controls[:n], cur.rewards[:n], cur.modes[:n],
                            [d for d in cur.decisions if d[0] < n])
            out.append((part, part.trajectory(None)))
        return out

    @property
    def replay_buffer(self) -> list:
        return [traj for _, traj in self._buffer()]

    def maybe_refit(self, global_step: int) -> bool:
        if global_step <= 0 or global_step % self.config.refit_interval != 0:
            return False
        if self.best_episode_reward >= self.config.reward_refit_threshold:
            return False
        buffer = self._buffer()
        if not buffer:
            return False
        self.refit(buffer)
        return True

    def refit(self, buffer=None):
        buffer = self._buffer() if buffer is None else buffer
        trajs = [tr for _, tr in buffer if len(tr) >= 2]
        try:
            result = fit_em(trajs, self.config.K, self.config.fit)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("refit failed (%s); keeping the previous model", exc)
            return
        params = result.params
        adjacency = extract_adjacency(params, self.bounds)
        states = np.vstack([tr.states for tr in trajs])
        labels = np.concatenate(result.labels)
        centroids = mode_centroids(states, labels, params.K)
        priors = control_priors(params, self.bounds, self.config.theta, centroids)
        entry = _entry_states(trajs, result.labels, params.K)
        table = lqr_mod.cache_policies(params, adjacency, priors, self.config.lqr, entry)
        self.snapshot = ModelSnapshot(params, adjacency, priors, table, result.labels)
        self.dirichlet = self._recount(buffer)
        self._rebuild_goal()
        self.refits += 1
        # indices changed meaning: force a fresh decision on the next step
        self.current_mode = None
        self.decision = None
        self.veto.clear()

    def _recount(self, buffer) -> DirichletTransitionModel:
        model = planner_mod.init_priors(self.snapshot.adjacency)
        params = self.params
        for ep, traj in buffer:
            if not ep.decisions:
                continue
            prev_u = np.vstack([np.zeros((1, self.N)), traj.controls[:-1]])
            labels = classify(traj.states, prev_u, params)
            times = [t for t, _ in ep.decisions] + [len(traj) - 1]
            for (t, goal), t_next in zip(ep.decisions, times[1:]):
                s = int(labels[t])
                a = most_likely_mode(goal, np.zeros(self.N), params)
                s_next = int(labels[t_next])
                if model.adjacency[s, s_next]:
                    model.alpha[a, s, s_next] += 1.0
        return model

    def snapshot_dict(self) -> dict:
        doc = self.snapshot.to_dict() if self.snapshot else {}
        if self.dirichlet is not None:
            doc["dirichlet_alpha"] = self.dirichlet.alpha.tolist()
        return doc


def _entry_states(trajs, labels, K) -> dict:
    sums = {}
    for tr, lab in zip(trajs, labels):
        idx = np.nonzero(lab[1:] != lab[:-1])[0] + 1
        for t in idx:
            k = int(lab[t])
            sums.setdefault(k, []).append(tr.states[t])
    return {k: np.mean(v, axis=0) for k, v in sums.items()}

"""Experiment runner and command line interface.

Two protocols are provided: state-space coverage over a fixed step budget and
per-episode reward curves. Each can run the full agent (``hha``), the agent
with exploration bonuses switched off (``hha_no_ig``), or uniformly random
controls (``random``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as env_mod
from .agent import AgentConfig, HybridHierarchicalAgent
from .hybrid_model import FitConfig, HybridSystemParams, Trajectory, fit_em
from .lqr import LqrConfig
from .partition import control_priors, extract_adjacency, mode_centroids
from .planner import PlannerConfig

logger = logging.getLogger(__name__)

MODES = ("hha", "hha_no_ig", "random")
TRAJECTORY_HEADER = ["step", "position", "velocity", "control", "mode", "replanned", "action", "reward"]
COVERAGE_HEADER = ["step", "cells_visited", "fraction"]
REWARD_HEADER = ["episode", "reward", "steps", "reached_goal"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    modes: list = field(default_factory=lambda: list(MODES))
    total_steps: int = 10_000
    n_episodes: int = 20
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    coverage_grid: list = field(default_factory=lambda: [50, 50])
    checkpoint_every: int = 100
    output_dir: str = "out"
    save_snapshots: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(self.coverage_grid) != 2 or min(self.coverage_grid) < 2:
            raise ConfigError("coverage_grid needs two dimensions of at least 2 cells")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown mode(s) {bad}; choose from {MODES}")


@dataclass
class Config:
    env: env_mod.EnvConfig = field(default_factory=env_mod.EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


def _build(cls, block: dict, name: str):
    if not isinstance(block, dict):
        raise ConfigError(f"block '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' block: {exc}") from exc


def config_from_dict(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"env", "agent", "planner", "lqr", "fit", "experiment"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    env_cfg = _build(env_mod.EnvConfig, doc.get("env", {}), "env")
    agent_block = dict(doc.get("agent", {}))
    for nested in ("planner", "lqr", "fit"):
        if nested in agent_block:
            raise ConfigError(f"'{nested}' is a top-level block, not part of 'agent'")
    agent_block["planner"] = _build(PlannerConfig, doc.get("planner", {}), "planner")
    agent_block["lqr"] = _build(LqrConfig, doc.get("lqr", {}), "lqr")
    agent_block["fit"] = _build(FitConfig, doc.get("fit", {}), "fit")
    agent_cfg = _build(AgentConfig, agent_block, "agent")
    exp_cfg = _build(ExperimentConfig, doc.get("experiment", {}), "experiment")
    return Config(env_cfg, agent_cfg, exp_cfg)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


# --- coverage ---------------------------------------------------------------


class CoverageGrid:
    def __init__(self, env_cfg: env_mod.EnvConfig, shape=(50, 50)):
        self.rows, self.cols = int(shape[0]), int(shape[1])
        self.lo = np.array([env_cfg.position_min, -env_cfg.max_speed])
        self.hi = np.array([env_cfg.position_max, env_cfg.max_speed])
        self.visited = np.zeros((self.rows, self.cols), dtype=bool)

    def cell(self, x) -> tuple:
        return cell_index(x, self.lo, self.hi, (self.rows, self.cols))

    def add(self, x):
        self.visited[self.cell(x)] = True

    @property
    def cells_visited(self) -> int:
        return int(self.visited.sum())

    @property
    def fraction(self) -> float:
        return self.cells_visited / self.visited.size


def cell_index(x, lo, hi, shape) -> tuple:
    frac = (np.asarray(x, dtype=float) - lo) / (hi - lo)
    idx = np.floor(frac * np.array(shape)).astype(int)
    idx = np.clip(idx, 0, np.array(shape) - 1)
    return int(idx[0]), int(idx[1])


# --- single run ---------------------------------------------------------------


@dataclass
class RunLog:
    mode: str
    seed: int
    trajectory_rows: list = field(default_factory=list)
    coverage_rows: list = field(default_factory=list)
    episodes: list = field(default_factory=list)  # (episode, reward, steps, reached)
    planner_calls: int = 0
    switch_events: int = 0
    dwell_events: int = 0
    refits: int = 0
    first_reward_step: int | None = None
    snapshots: list = field(default_factory=list)


def make_agent(mode: str, cfg: Config, seed: int):
    if mode == "random":
        return None
    agent_cfg = cfg.agent
    if mode == "hha_no_ig":
        agent_cfg = dataclasses.replace(
            agent_cfg, planner=dataclasses.replace(agent_cfg.planner, beta_p=0.0, beta_s=0.0)
        )
    return HybridHierarchicalAgent(agent_cfg, bounds=cfg.env.bounds, seed=seed)


def run(mode: str, cfg: Config, seed: int, total_steps=None, n_episodes=None) -> RunLog:
    """Drive one agent through the environment for a step or episode budget."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    env_cfg = cfg.env
    log = RunLog(mode, seed)
    rng = np.random.default_rng([seed, 0])
    agent = make_agent(mode, cfg, seed)
    grid = CoverageGrid(env_cfg, cfg.experiment.coverage_grid)
    every = cfg.experiment.checkpoint_every

    step = 0
    episode = 0
    state = env_mod.reset(int(rng.integers(2**31)), env_cfg)
    grid.add(state.as_array())
    log.coverage_rows.append((0, grid.cells_visited, grid.fraction))
    ep_reward, ep_steps = 0.0, 0

    def budget_left():
        if total_steps is not None and step >= total_steps:
            return False
        if n_episodes is not None and episode >= n_episodes:
            return False
        return True

    while budget_left():
        if agent is None:
            u = float(rng.uniform(-1.0, 1.0))
            info = {"mode": -1, "replanned": False, "action": -1}
        else:
            u = agent.act(state)
            info = agent.last_info
        nxt, reward, done = env_mod.step(state, u, env_cfg)
        step += 1
        ep_reward += reward
        ep_steps += 1
        if reward > 0 and log.first_reward_step is None:
            log.first_reward_step = step
        log.trajectory_rows.append(
            (step, state.position, state.velocity, u, info["mode"], info["replanned"],
             info["action"], reward)
        )
        if agent is not None:
            agent.observe(reward, nxt, done)
            if agent.maybe_refit(step) and cfg.experiment.save_snapshots:
                log.snapshots.append((step, agent.snapshot_dict()))
        grid.add(nxt.as_array())
        if step % every == 0:
            log.coverage_rows.append((step, grid.cells_visited, grid.fraction))
        state = nxt
        if done:
            reached = env_mod.reached_goal(nxt, env_cfg)
            log.episodes.append((episode, ep_reward, ep_steps, reached))
            episode += 1
            ep_reward, ep_steps = 0.0, 0
            state = env_mod.reset(int(rng.integers(2**31)), env_cfg)
            grid.add(state.as_array())
    if ep_steps > 0:
        log.episodes.append((episode, ep_reward, ep_steps, False))
    if not log.coverage_rows or log.coverage_rows[-1][0] != step:
        log.coverage_rows.append((step, grid.cells_visited, grid.fraction))
    if agent is not None:
        log.planner_calls = agent.planner_calls
        log.switch_events = agent.switch_events
        log.dwell_events = agent.dwell_events
        log.refits = agent.refits
    return log


# --- output -------------------------------------------------------------------


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _prepare_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_run(out: Path, log: RunLog, kind: str):
    d = out / log.mode
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / f"trajectory_seed{log.seed}.csv", TRAJECTORY_HEADER, log.trajectory_rows)
    if kind == "coverage":
        _write_csv(d / f"coverage_seed{log.seed}.csv", COVERAGE_HEADER, log.coverage_rows)
    else:
        _write_csv(d / f"reward_seed{log.seed}.csv", REWARD_HEADER, log.episodes)
    for step, doc in log.snapshots:
        (d / f"snapshot_seed{log.seed}_step{step}.json").write_text(json.dumps(doc))


def metrics_record(log: RunLog) -> dict:
    return {
        "mode": log.mode,
        "seed": log.seed,
        "episode_rewards": [float(e[1]) for e in log.episodes],
        "coverage": [[int(s), float(f)] for s, _, f in log.coverage_rows],
        "final_coverage": float(log.coverage_rows[-1][2]),
        "first_reward_step": log.first_reward_step,
        "planner_calls": log.planner_calls,
        "switch_events": log.switch_events,
        "dwell_events": log.dwell_events,
        "refits": log.refits,
    }


def run_coverage_experiment(cfg: Config, modes=None, seeds=None) -> dict:
    """Run each mode for ``total_steps`` per seed and summarize best-of-seeds coverage."""
    out = _prepare_dir(cfg.experiment.output_dir)
    modes = modes or cfg.experiment.modes
    seeds = seeds if seeds is not None else cfg.experiment.seeds
    records = {}
    for mode in modes:
        records[mode] = []
        for seed in seeds:
            log = run(mode, cfg, seed, total_steps=cfg.experiment.total_steps)
            _write_run(out, log, "coverage")
            records[mode].append(metrics_record(log))
            logger.info("coverage %s seed %d: %.4f", mode, seed, records[mode][-1]["final_coverage"])
    summary = {
        mode: {
            "best": max(r["final_coverage"] for r in recs),
            "mean": float(np.mean([r["final_coverage"] for r in recs])),
            "std": float(np.std([r["final_coverage"] for r in recs])),
            "per_seed": {str(r["seed"]): r["final_coverage"] for r in recs},
        }
        for mode, recs in records.items()
    }
    (out / "coverage_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"summary": summary, "records": records}


def run_reward_experiment(cfg: Config, modes=None, seeds=None) -> dict:
    """Per-episode rewards over ``n_episodes`` per seed, with mean/std across seeds."""
    out = _prepare_dir(cfg.experiment.output_dir)
    modes = modes or cfg.experiment.modes
    seeds = seeds if seeds is not None else cfg.experiment.seeds
    records = {}
    summary = {}
    for mode in modes:
        records[mode] = []
        for seed in seeds:
            log = run(mode, cfg, seed, n_episodes=cfg.experiment.n_episodes)
            _write_run(out, log, "reward")
            records[mode].append(metrics_record(log))
        curves = np.array([r["episode_rewards"] for r in records[mode]])
        mean, std = curves.mean(axis=0), curves.std(axis=0)
        rows = [(i, m, s) for i, (m, s) in enumerate(zip(mean, std))]
        _write_csv(out / mode / "reward_summary.csv", ["episode", "mean", "std"], rows)
        totals = curves.sum(axis=1)
        summary[mode] = {
            "best": float(totals.max()),
            "mean": float(totals.mean()),
            "std": float(totals.std()),
            "mean_curve": mean.tolist(),
            "std_curve": std.tolist(),
        }
    (out / "reward_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"summary": summary, "records": records}


# --- fit-demo / inspect ---------------------------------------------------------


def read_trajectory_csv(path, env_cfg: env_mod.EnvConfig | None = None) -> list:
    """Split a trajectory log into per-episode Trajectory objects.

    Logs run across episode resets. A row starts a new episode when stepping
    the environment from the previous row (with its logged control) either
    terminates or does not land on this row's state.
    """
    env_cfg = env_cfg or env_mod.EnvConfig()
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    episodes, cur = [], []
    for row in rows:
        x = np.array([float(row["position"]), float(row["velocity"])])
        u = float(row["control"])
        if cur:
            prev_x, prev_u = cur[-1]
            nxt, _, done = env_mod.step(env_mod.EnvState(*prev_x), prev_u, env_cfg)
            if done or not np.allclose(nxt.as_array(), x, rtol=0.0, atol=1e-12):
                episodes.append(cur)
                cur = []
        cur.append((x, u))
    if cur:
        episodes.append(cur)
    return [
        Trajectory(np.array([e[0] for e in ep]), np.array([[e[1]] for e in ep]))
        for ep in episodes
        if len(ep) >= 2
    ]


def random_dataset(env_cfg, n_episodes: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n_episodes):
        s = env_mod.reset(int(rng.integers(2**31)), env_cfg)
        xs, us = [s.as_array()], []
        done = False
        while not done:
            u = float(rng.uniform(-1, 1))
            s, _, done = env_mod.step(s, u, env_cfg)
            xs.append(s.as_array())
            us.append(u)
        us.append(0.0)
        data.append(Trajectory(np.array(xs), np.array(us)))
    return data


def fit_demo(cfg: Config, data_paths, seed: int, out_dir) -> dict:
    out = _prepare_dir(out_dir)
    if data_paths:
        dataset = [t for p in data_paths for t in read_trajectory_csv(p, cfg.env)]
    else:
        dataset = random_dataset(cfg.env, 10, seed)
    fit_cfg = dataclasses.replace(cfg.agent.fit, seed=seed)
    result = fit_em(dataset, cfg.agent.K, fit_cfg)
    bounds = cfg.env.bounds
    adjacency = extract_adjacency(result.params, bounds)
    states = np.vstack([t.states for t in dataset])
    centroids = mode_centroids(states, np.concatenate(result.labels), result.params.K)
    priors = control_priors(result.params, bounds, cfg.agent.theta, centroids)
    doc = {
        "model": result.params.to_dict(),
        "adjacency": adjacency.astype(int).tolist(),
        "control_priors": [
            {"mode": p.mode, "point": p.point.tolist(),
             "attained_probability": p.attained_probability, "success": p.success}
            for p in priors
        ],
        "fit": {"objective": result.history, "converged": result.converged,
                "active_modes": result.active_modes},
    }
    path = out / f"model_seed{seed}.json"
    path.write_text(json.dumps(doc))
    print(partition_report(result.params, adjacency, priors))
    print(f"snapshot written to {path}")
    return doc


def partition_report(params: HybridSystemParams, adjacency, priors=None) -> str:
    lines = [f"K = {params.K}  (M = {params.M}, N = {params.N})", "mode  spectral_radius"]
    for k in range(params.K):
        rho = float(np.max(np.abs(np.linalg.eigvals(params.A[k]))))
        lines.append(f"{k:>4}  {rho:.6f}")
    lines.append("adjacency:")
    lines.append("     " + " ".join(f"{j:>2}" for j in range(params.K)))
    for i in range(params.K):
        lines.append(f"{i:>4} " + " ".join(f"{int(v):>2}" for v in adjacency[i]))
    if priors:
        lines.append("control priors:")
        for p in priors:
            pt = ", ".join(f"{v:.4g}" for v in p.point)
            lines.append(f"{p.mode:>4}  [{pt}]  p={p.attained_probability:.3f}  ok={p.success}")
    return "\n".join(lines)


def inspect(path) -> str:
    doc = json.loads(Path(path).read_text())
    params = HybridSystemParams.from_dict(doc.get("model", doc))
    if "adjacency" in doc:
        adjacency = np.array(doc["adjacency"], dtype=bool)
    else:
        adjacency = np.eye(params.K, dtype=bool)
    report = partition_report(params, adjacency)
    print(report)
    return report


# --- CLI ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hha", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=MODES, help="run a single agent variant")

    common(sub.add_parser("coverage", help="state-space coverage experiment"))
    common(sub.add_parser("reward", help="per-episode reward experiment"))
    p = sub.add_parser("fit-demo", help="fit the hybrid model and print the partition")
    common(p)
    p.add_argument("data", nargs="*", help="trajectory CSV logs (default: random rollouts)")
    p = sub.add_parser("inspect", help="summarize a model snapshot")
    p.add_argument("snapshot")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    try:
        if args.command == "inspect":
            inspect(args.snapshot)
            return 0
        cfg = load_config(args.config) if args.config else Config()
        if args.out:
            cfg.experiment.output_dir = args.out
        seeds = [args.seed] if args.seed is not None else None
        modes = [args.mode] if args.mode else None
        if args.command == "coverage":
            res = run_coverage_experiment(cfg, modes, seeds)
            print(json.dumps({m: s["best"] for m, s in res["summary"].items()}))
        elif args.command == "reward":
            res = run_reward_experiment(cfg, modes, seeds)
            print(json.dumps({m: s["mean_curve"] for m, s in res["summary"].items()}))
        elif args.command == "fit-demo":
            fit_demo(cfg, args.data, args.seed or 0, cfg.experiment.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

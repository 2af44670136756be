import csv
import json

import numpy as np
import pytest

from hha import env, harness

QUICK = {
    "agent": {"K": 3, "refit_interval": 300},
    "fit": {"max_iters": 10, "recurrence_iters": 200},
    "experiment": {"total_steps": 700, "n_episodes": 2, "seeds": [0], "checkpoint_every": 50},
}


def write_config(tmp_path, doc=QUICK, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = harness.config_from_dict({})
        assert cfg.agent.K == 5 and cfg.agent.planner.lambda_c == 0.01
        assert cfg.experiment.coverage_grid == [50, 50]

    @pytest.mark.parametrize(
        "doc",
        [
            {"bogus": {}},
            {"agent": {"K": 3, "colour": 1}},
            {"agent": {"planner": {}}},
            {"planner": {"horizon": 3, "temperature": 1}},
            {"experiment": {"seeds": []}},
            {"experiment": {"coverage_grid": [1, 50]}},
            {"experiment": {"modes": ["greedy"]}},
            {"agent": {"refit_interval": 0}},
            {"env": []},
        ],
    )
    def test_rejected(self, doc):
        with pytest.raises(harness.ConfigError):
            harness.config_from_dict(doc)

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(harness.ConfigError):
            harness.load_config(path)


class TestCli:
    def test_coverage_single_seed(self, tmp_path):
        out = tmp_path / "out"
        code = harness.main(
            ["coverage", "--config", write_config(tmp_path), "--seed", "1", "--out", str(out), "--mode", "random"]
        )
        assert code == 0
        assert (out / "random" / "coverage_seed1.csv").exists()
        assert (out / "random" / "trajectory_seed1.csv").exists()
        summary = json.loads((out / "coverage_summary.json").read_text())
        assert set(summary) == {"random"}

    def test_missing_config_file(self, tmp_path):
        assert harness.main(["coverage", "--config", str(tmp_path / "nope.json")]) == 2

    def test_unknown_key_in_file(self, tmp_path):
        path = write_config(tmp_path, {"experiment": {"steps": 5}})
        assert harness.main(["reward", "--config", path, "--out", str(tmp_path)]) == 2

    def test_unknown_flag(self, capsys):
        assert harness.main(["coverage", "--frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        code = harness.main(
            ["coverage", "--config", write_config(tmp_path), "--out", str(blocker / "sub"), "--mode", "random"]
        )
        assert code == 2

    def test_fit_demo_and_inspect(self, tmp_path, capsys):
        out = tmp_path / "fit"
        doc = dict(QUICK, agent={"K": 2})
        assert harness.main(["fit-demo", "--config", write_config(tmp_path, doc), "--out", str(out)]) == 0
        snapshot = out / "model_seed0.json"
        assert snapshot.exists()
        capsys.readouterr()
        assert harness.main(["inspect", str(snapshot)]) == 0
        report = capsys.readouterr().out
        assert "K = 2" in report and "spectral_radius" in report and "adjacency" in report


class TestCoverage:
    def test_zero_steps_counts_initial_cell(self):
        log = harness.run("random", harness.Config(), seed=0, total_steps=0)
        assert log.coverage_rows == [(0, 1, 1 / 2500)]

    def test_cell_index_edges(self):
        lo, hi = np.array([-1.2, -0.07]), np.array([0.6, 0.07])
        assert harness.cell_index([-1.2, -0.07], lo, hi, (50, 50)) == (0, 0)
        assert harness.cell_index([0.6, 0.07], lo, hi, (50, 50)) == (49, 49)

    def test_monotone_and_recomputable(self, tmp_path):
        cfg = harness.config_from_dict(dict(QUICK, experiment=dict(QUICK["experiment"], output_dir=str(tmp_path))))
        harness.run_coverage_experiment(cfg, modes=["random"], seeds=[3])
        cov = read_rows(tmp_path / "random" / "coverage_seed3.csv")
        fractions = [float(r["fraction"]) for r in cov]
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))
        assert int(cov[-1]["step"]) == 700

        # independent pass: every logged state plus where each logged step lands
        rows = read_rows(tmp_path / "random" / "trajectory_seed3.csv")
        cells = set()
        for r in rows:
            x = env.EnvState(float(r["position"]), float(r["velocity"]))
            nxt, _, _ = env.step(x, float(r["control"]))
            for s in (x, nxt):
                i = min(int((s.position + 1.2) / 1.8 * 50), 49)
                j = min(int((s.velocity + 0.07) / 0.14 * 50), 49)
                cells.add((i, j))
        assert len(cells) == int(cov[-1]["cells_visited"])
        assert float(cov[-1]["fraction"]) == len(cells) / 2500


class TestReward:
    def test_episode_rewards_match_control_cost(self, tmp_path):
        cfg = harness.config_from_dict(dict(QUICK, experiment=dict(QUICK["experiment"], output_dir=str(tmp_path))))
        harness.run_reward_experiment(cfg, modes=["random"], seeds=[0])
        episodes = read_rows(tmp_path / "random" / "reward_seed0.csv")
        assert len(episodes) == 2
        traj = read_rows(tmp_path / "random" / "trajectory_seed0.csv")
        start = 0
        for ep in episodes:
            n = int(ep["steps"])
            u = np.array([float(r["control"]) for r in traj[start:start + n]])
            if ep["reached_goal"] == "0":
                assert n == 200
                assert float(ep["reward"]) == pytest.approx(-0.1 * np.sum(u**2))
                assert float(ep["reward"]) <= 0
            start += n
        summary = read_rows(tmp_path / "random" / "reward_summary.csv")
        assert [r["episode"] for r in summary] == ["0", "1"]

    def test_goal_episode_is_positive_when_cheap(self):
        # a hand-driven episode: full throttle with the swing of the valley
        cfg = env.EnvConfig()
        s = env.EnvState(-0.5, 0.0)
        total, done = 0.0, False
        while not done:
            u = 1.0 if s.velocity >= 0 else -1.0
            s, r, done = env.step(s, u, cfg)
            total += r
        assert env.reached_goal(s)
        assert total > 0


class TestOutputs:
    def test_float_format(self):
        assert harness.fmt(0.1) == "0.10000000000000001"
        assert harness.fmt(3) == "3"
        assert harness.fmt(True) == "1"
        assert float(harness.fmt(1 / 3)) == 1 / 3

    def test_reruns_are_byte_identical(self, tmp_path):
        paths = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = harness.main(
                ["coverage", "--config", write_config(tmp_path), "--out", str(out), "--mode", "hha", "--seed", "2"]
            )
            assert code == 0
            paths.append(out / "hha")
        for fname in ("trajectory_seed2.csv", "coverage_seed2.csv"):
            assert (paths[0] / fname).read_bytes() == (paths[1] / fname).read_bytes()

    def test_trajectory_log_splits_into_episodes(self, tmp_path):
        log = harness.run("random", harness.Config(), seed=5, n_episodes=3)
        path = tmp_path / "traj.csv"
        harness._write_csv(path, harness.TRAJECTORY_HEADER, log.trajectory_rows)
        trajs = harness.read_trajectory_csv(path)
        assert [len(t) for t in trajs] == [e[2] for e in log.episodes]
        first = log.trajectory_rows[0]
        assert trajs[0].states[0].tolist() == [first[1], first[2]]
        assert trajs[0].controls.shape == (200, 1)

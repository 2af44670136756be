import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hha import env
from hha.env import EnvConfig, EnvState


def test_step_matches_hand_arithmetic():
    s = EnvState(-0.5, 0.0)
    nxt, reward, done = env.step(s, 1.0)
    v = 0.0015 - 0.0025 * math.cos(-1.5)
    assert nxt.velocity == pytest.approx(v, abs=1e-15)
    assert nxt.position == pytest.approx(-0.5 + v, abs=1e-15)
    assert reward == pytest.approx(-0.1)
    assert not done
    assert nxt.steps == 1


def test_force_is_clipped():
    s = EnvState(-0.5, 0.0)
    a, ra, _ = env.step(s, 5.0)
    b, rb, _ = env.step(s, 1.0)
    assert a == b
    assert ra == rb == pytest.approx(-0.1)


def test_left_wall_zeroes_velocity():
    nxt, _, _ = env.step(EnvState(-1.19, -0.07), -1.0)
    assert nxt.position == -1.2
    assert nxt.velocity == 0.0


def test_goal_reward_and_done():
    nxt, reward, done = env.step(EnvState(0.44, 0.07), 0.0)
    assert nxt.position >= 0.45
    assert done
    assert reward == pytest.approx(100.0)
    assert env.reached_goal(nxt)


def test_time_limit():
    cfg = EnvConfig(max_episode_steps=3)
    s = env.reset(0, cfg)
    dones = []
    for _ in range(3):
        s, _, d = env.step(s, 0.0, cfg)
        dones.append(d)
    assert dones == [False, False, True]


def test_non_finite_action_rejected():
    with pytest.raises(ValueError):
        env.step(EnvState(-0.5, 0.0), float("nan"))


def test_reset_is_seeded():
    assert env.reset(3) == env.reset(3)
    s = env.reset(7)
    assert -0.6 <= s.position <= -0.4 and s.velocity == 0.0


def test_bad_config():
    with pytest.raises(ValueError):
        EnvConfig(goal_position=1.0)


@settings(max_examples=200, deadline=None)
@given(
    p=st.floats(-1.2, 0.6),
    v=st.floats(-0.07, 0.07),
    u=st.floats(-10, 10),
)
def test_state_stays_in_bounds(p, v, u):
    nxt, reward, _ = env.step(EnvState(p, v), u)
    assert -1.2 <= nxt.position <= 0.6
    assert -0.07 <= nxt.velocity <= 0.07
    assert reward <= 100.0
    assert np.isfinite(reward)

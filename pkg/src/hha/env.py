"""Continuous Mountain Car.

A value-semantics reimplementation of the classic control benchmark. The
transition function is pure: ``step(state, action, config)`` never mutates its
inputs, so many rollouts can share one config safely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class EnvConfig:
    position_min: float = -1.2
    position_max: float = 0.6
    max_speed: float = 0.07
    goal_position: float = 0.45
    power: float = 0.0015
    gravity_coeff: float = 0.0025
    goal_reward: float = 100.0
    action_cost_coeff: float = 0.1
    max_episode_steps: int = 200
    start_low: float = -0.6
    start_high: float = -0.4

    def __post_init__(self):
        if not self.position_min < self.goal_position <= self.position_max:
            raise ValueError("need position_min < goal_position <= position_max")
        if self.power <= 0 or self.max_speed <= 0:
            raise ValueError("power and max_speed must be positive")
        if self.max_episode_steps <= 0:
            raise ValueError("max_episode_steps must be positive")
        if self.start_low > self.start_high:
            raise ValueError("start interval is empty")

    @property
    def bounds(self) -> np.ndarray:
        """(2, 2) array of [lower, upper] per state dimension."""
        return np.array(
            [[self.position_min, self.position_max], [-self.max_speed, self.max_speed]]
        )


@dataclass(frozen=True)
class EnvState:
    position: float
    velocity: float
    steps: int = field(default=0, compare=False)

    def as_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity])


def _check_finite(*values):
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value {v!r}")


def step(
    state: EnvState, action: float, config: EnvConfig = EnvConfig()
) -> tuple[EnvState, float, bool]:
    """Advance one tick. Returns ``(next_state, reward, done)``."""
    action = float(action)
    _check_finite(state.position, state.velocity, action)
    force = min(max(action, -1.0), 1.0)

    velocity = state.velocity + force * config.power - config.gravity_coeff * math.cos(
        3.0 * state.position
    )
    velocity = min(max(velocity, -config.max_speed), config.max_speed)
    position = state.position + velocity
    position = min(max(position, config.position_min), config.position_max)
    if position == config.position_min and velocity < 0.0:
        velocity = 0.0

    reached = position >= config.goal_position
    reward = -config.action_cost_coeff * force * force
    if reached:
        reward += config.goal_reward
    steps = state.steps + 1
    done = reached or steps >= config.max_episode_steps
    return EnvState(position, velocity, steps), reward, done


def reset(seed: int, config: EnvConfig = EnvConfig()) -> EnvState:
    rng = np.random.default_rng(seed)
    position = float(rng.uniform(config.start_low, config.start_high))
    return EnvState(position, 0.0, 0)


def reached_goal(state: EnvState, config: EnvConfig = EnvConfig()) -> bool:
    return state.position >= config.goal_position


def with_overrides(config: EnvConfig, **overrides) -> EnvConfig:
    return replace(config, **overrides)

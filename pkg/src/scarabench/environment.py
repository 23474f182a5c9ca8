"""Episodic planar reaching task.

Both control pipelines run against this task: start at a joint
configuration, apply bounded joint increments, try to hold the end
effector at a fixed goal. Observations may carry Gaussian joint noise;
rewards and distances always come from the true state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kinematics import RobotModel, forward_kinematics, is_reachable, _limit_arrays
from .noise import NoiseModel, perturb

OBS_DIM = 7  # q_noisy (3) + goal (2) + noisy end-effector delta (2)

TRACE_COLUMNS = (
    "step",
    "q1_true", "q2_true", "q3_true",
    "q1_noisy", "q2_noisy", "q3_noisy",
    "ee_x", "ee_y",
    "reward", "distance",
)


class InvalidConfig(ValueError):
    """Environment configuration that cannot produce valid episodes."""


class EpisodeOver(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class EnvConfig:
    """Task definition: robot, goal, observation noise, episode shape.

    action_clip bounds each joint increment per step (rad), success_radius
    is the distance (m) inside which the reward bonus applies. Episodes end
    at max_steps; with terminate_on_success they also end as soon as the
    bonus region is hit.
    """

    model: RobotModel = field(default_factory=RobotModel)
    goal: tuple = (0.5, 0.4)
    obs_noise: NoiseModel = field(default_factory=NoiseModel)
    max_steps: int = 100
    action_clip: float = 0.05
    success_radius: float = 0.01
    randomize_start: bool = False
    terminate_on_success: bool = False

    def __post_init__(self):
        goal = tuple(float(v) for v in self.goal)
        if len(goal) != 2 or not all(np.isfinite(v) for v in goal):
            raise InvalidConfig(f"goal must be a finite (x, y) pair, got {self.goal}")
        object.__setattr__(self, "goal", goal)
        if int(self.max_steps) < 1:
            raise InvalidConfig("max_steps must be at least 1")
        object.__setattr__(self, "max_steps", int(self.max_steps))
        if not self.action_clip > 0.0:
            raise InvalidConfig("action_clip must be positive")
        if not self.success_radius > 0.0:
            raise InvalidConfig("success_radius must be positive")

    def validate(self) -> None:
        if not is_reachable(self.model, self.goal):
            raise InvalidConfig(f"goal {self.goal} is outside the reachable workspace")

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal)


@dataclass
class EnvState:
    """True joint angles plus episode progress. Owned by one rollout."""

    q_true: np.ndarray
    step_index: int = 0
    done: bool = False


@dataclass
class Observation:
    """What a controller sees: noisy joints, the goal, and the noisy
    end-effector offset from the goal (computed from q_noisy, never from
    the true state)."""

    q_noisy: np.ndarray
    goal: np.ndarray
    ee_delta: np.ndarray

    def vector(self) -> np.ndarray:
        """Flat feature vector of length OBS_DIM."""
        return np.concatenate((self.q_noisy, self.goal, self.ee_delta))


@dataclass
class StepResult:
    obs: Observation
    reward: float
    done: bool
    info_distance: float  # ground-truth distance to goal, m


def goal_distance(cfg: EnvConfig, q_true) -> float:
    """Ground-truth end-effector distance to the goal."""
    ee = forward_kinematics(cfg.model, q_true)
    return float(np.linalg.norm(ee - cfg.goal_array))


def _reward_from_distance(distance: float, cfg: EnvConfig) -> float:
    bonus = 1.0 if distance <= cfg.success_radius else 0.0
    return -distance + bonus

def reward(state: EnvState, cfg: EnvConfig) -> float:
    """Negative true distance, plus a unit bonus inside success_radius."""
    return _reward_from_distance(goal_distance(cfg, state.q_true), cfg)


def observe(cfg: EnvConfig, q_true, rng: np.random.Generator) -> Observation:
    """Build the noisy observation for the given true joints."""
    q_noisy = perturb(cfg.obs_noise, q_true, rng)
    ee_noisy = forward_kinematics(cfg.model, q_noisy)
    goal = cfg.goal_array
    return Observation(q_noisy=q_noisy, goal=goal, ee_delta=ee_noisy - goal)


def reset(cfg: EnvConfig, rng: np.random.Generator):
    """Start an episode; returns (state, observation).

    The start pose is the home configuration (all zeros) unless
    randomize_start draws uniformly inside the joint limits.
    """
    cfg.validate()
    if cfg.randomize_start:
        lo, hi = _limit_arrays(cfg.model)
        q = rng.uniform(lo, hi)
    else:
        q = np.zeros(3)
    state = EnvState(q_true=q, step_index=0, done=False)
    return state, observe(cfg, q, rng)


def step(state: EnvState, cfg: EnvConfig, action, rng: np.random.Generator):
    """Apply a clamped joint increment; returns (new_state, StepResult).

    The action is clipped to +/- action_clip per joint, then the joints are
    clamped into their limits. Reward and the reported distance use the
    true state; only the observation passes through the noise model. done
    is monotone: once an episode finishes, further steps raise EpisodeOver.
    """
    if state.done or state.step_index >= cfg.max_steps:
        raise EpisodeOver(f"episode already finished at step {state.step_index}")
    action = np.clip(np.asarray(action, dtype=float), -cfg.action_clip, cfg.action_clip)
    lo, hi = _limit_arrays(cfg.model)
    q = np.clip(state.q_true + action, lo, hi)
    step_index = state.step_index + 1
    distance = goal_distance(cfg, q)
    rew = _reward_from_distance(distance, cfg)
    done = step_index >= cfg.max_steps or (
        cfg.terminate_on_success and distance <= cfg.success_radius
    )
    new_state = EnvState(q_true=q, step_index=step_index, done=done)
    return new_state, StepResult(
        obs=observe(cfg, q, rng),
        reward=rew,
        done=done,
        info_distance=distance,
    )


def trace_row(step_index: int, q_true, q_noisy, ee, rew: float, distance: float) -> list:
    """One episode-trace row matching TRACE_COLUMNS."""
    return [
        step_index,
        float(q_true[0]), float(q_true[1]), float(q_true[2]),
        float(q_noisy[0]), float(q_noisy[1]), float(q_noisy[2]),
        float(ee[0]), float(ee[1]),
        float(rew), float(distance),
    ]

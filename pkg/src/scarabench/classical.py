"""Classical sense-model-plan-act pipeline.

Sense: read (possibly noisy) joint angles. Model: forward kinematics gives
the believed end-effector pose. Plan: inverse kinematics plus joint-space
interpolation produces a waypoint trajectory. Act: position controllers
track each waypoint, where controller noise perturbs every command. The
plan is computed once and executed open loop, with no replanning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvConfig, reset, trace_row
from .kinematics import (
    NotConverged,
    RobotModel,
    forward_kinematics,
    inverse_kinematics,
    _limit_arrays,
)
from .noise import NoiseModel

DEFAULT_WAYPOINTS = 50
# Target per-joint spacing the default waypoint count keeps under even for
# the longest in-limits motions.
MAX_WAYPOINT_STEP = 0.2  # rad


@dataclass
class Trajectory:
    """Joint-space waypoints (n, 3) and the goal pose the plan targets."""

    waypoints: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 3:
            raise ValueError(f"waypoints must be (n, 3), got {self.waypoints.shape}")
        if len(self.waypoints) < 2:
            raise ValueError("a trajectory needs at least 2 waypoints")
        self.goal = np.asarray(self.goal, dtype=float)

    def __len__(self) -> int:
        return len(self.waypoints)

    def max_joint_step(self) -> float:
        """Largest per-joint difference between consecutive waypoints."""
        return float(np.max(np.abs(np.diff(self.waypoints, axis=0))))


@dataclass
class ExecutionLog:
    """What actually happened: commanded vs realized waypoints, the
    end-effector track of the realized motion, and the final distance to
    the planned goal."""

    commanded: np.ndarray
    realized: np.ndarray
    ee_trace: np.ndarray
    goal: np.ndarray
    final_distance: float
    ee_start_estimate: np.ndarray | None = None

    def trace_rows(self) -> list:
        """Rows in the environment episode-trace schema.

        The commanded waypoint stands in for the noisy joint reading and
        the reward column carries the dense part only (negative distance),
        since no reward bonus is defined for open-loop execution.
        """
        rows = []
        for i in range(len(self.realized)):
            dist = float(np.linalg.norm(self.ee_trace[i] - self.goal))
            rows.append(
                trace_row(i, self.realized[i], self.commanded[i], self.ee_trace[i], -dist, dist)
            )
        return rows


def estimate_state(model: RobotModel, q_observed) -> np.ndarray:
    """Believed end-effector pose: forward kinematics of the observed
    joints. With noisy readings the estimate inherits the noise pushed
    through the kinematics."""
    return forward_kinematics(model, q_observed)


def plan_trajectory(model: RobotModel, q_start, goal, n_waypoints: int = DEFAULT_WAYPOINTS) -> Trajectory:
    """Straight joint-space path from q_start to an IK solution of goal.

    Endpoints are included, so n_waypoints=2 gives exactly the start and
    the solution. The solver is seeded with q_start so nearby goals get
    nearby solutions; if it stalls from there the plan falls back to the
    solver's own start pose. Raises whatever inverse_kinematics raises
    for goals that fail both ways.
    """
    if n_waypoints < 2:
        raise ValueError("n_waypoints must be at least 2")
    q_start = np.asarray(q_start, dtype=float)
    try:
        q_goal = inverse_kinematics(model, goal, q0=q_start)
    except NotConverged:
        q_goal = inverse_kinematics(model, goal)
    waypoints = np.linspace(q_start, q_goal, int(n_waypoints))
    return Trajectory(waypoints=waypoints, goal=np.asarray(goal, dtype=float))


def execute(traj: Trajectory, model: RobotModel, ctrl_noise: NoiseModel, rng: np.random.Generator) -> ExecutionLog:
    """Track the trajectory with noisy position controllers.

    Every commanded waypoint is perturbed by one controller-noise draw and
    clamped into the joint limits; the realized joints are what the arm
    actually visits. In this kinematic setting only the last realized
    waypoint determines the final distance.
    """
    commanded = traj.waypoints
    lo, hi = _limit_arrays(model)
    draws = rng.normal(0.0, ctrl_noise.sigma_array, size=commanded.shape)
    realized = np.clip(commanded + draws, lo, hi)
    ee_trace = forward_kinematics(model, realized)
    final_distance = float(np.linalg.norm(ee_trace[-1] - traj.goal))
    return ExecutionLog(
        commanded=commanded.copy(),
        realized=realized,
        ee_trace=ee_trace,
        goal=traj.goal.copy(),
        final_distance=final_distance,
    )


def run_traditional(
    cfg: EnvConfig,
    ctrl_noise: NoiseModel,
    n_waypoints: int = DEFAULT_WAYPOINTS,
    rng: np.random.Generator | None = None,
) -> ExecutionLog:
    """One full classical episode: sense, estimate, plan once, execute.

    The start reading comes from the environment's observation noise; the
    execution noise comes from ctrl_noise. There is no feedback after
    planning, which is exactly why accuracy degrades with controller
    noise: the last command is tracked with one uncorrected noise draw.
    """
    if rng is None:
        rng = ctrl_noise.make_rng()
    _, obs = reset(cfg, rng)
    ee_estimate = estimate_state(cfg.model, obs.q_noisy)
    traj = plan_trajectory(cfg.model, obs.q_noisy, cfg.goal_array, n_waypoints)
    log = execute(traj, cfg.model, ctrl_noise, rng)
    log.ee_start_estimate = ee_estimate
    return log

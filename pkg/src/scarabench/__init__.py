"""Planar SCARA reaching benchmark: classical pipeline vs learned policy."""

from .kinematics import (
    RobotModel,
    forward_kinematics,
    inverse_kinematics,
    is_reachable,
    jacobian,
)
from .noise import NoiseModel, perturb
from .environment import EnvConfig, Observation, StepResult, reset, step
from .classical import plan_trajectory, execute, run_traditional
from .ppo import PpoConfig, TrainedPolicy, evaluate, train
from .benchmark import SweepConfig, run_sweep, export_reports

__all__ = [
    "RobotModel",
    "forward_kinematics",
    "inverse_kinematics",
    "is_reachable",
    "jacobian",
    "NoiseModel",
    "perturb",
    "EnvConfig",
    "Observation",
    "StepResult",
    "reset",
    "step",
    "plan_trajectory",
    "execute",
    "run_traditional",
    "PpoConfig",
    "TrainedPolicy",
    "evaluate",
    "train",
    "SweepConfig",
    "run_sweep",
    "export_reports",
]

__version__ = "0.1.0"

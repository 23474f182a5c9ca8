"""Planar 3R arm geometry: forward kinematics, Jacobian, damped least
squares inverse kinematics, and workspace membership tests.

Conventions: joint angles are radians in arrays of shape (3,), lengths and
positions are meters. Angles accumulate along the chain, so joint k rotates
every link from k outward. The end effector pose is an (x, y) array.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import yaml

DEFAULT_LINK_LENGTHS = (0.4, 0.3, 0.2)
DEFAULT_JOINT_LIMITS = ((-math.pi, math.pi), (-math.pi, math.pi), (-math.pi, math.pi))
DEFAULT_BASE_POSITION = (0.0, 0.0)

IK_DAMPING = 0.05          # base damping factor, dimensionless
IK_STEP_CLAMP = 0.2        # max per-joint update per iteration, rad
IK_TOL = 1e-6              # position tolerance, m
IK_MAX_ITERS = 500
_IK_DAMPING_ERR_SCALE = 0.05   # residual (m) at which damping starts shrinking
_GRID_STEP = math.radians(1.0)  # workspace grid resolution


class Unreachable(ValueError):
    """Target lies outside the reachable workspace."""


class NotConverged(RuntimeError):
    """IK ran out of iterations before reaching tolerance."""

    def __init__(self, message: str, q=None, error: float | None = None):
        super().__init__(message)
        self.q = q
        self.error = error


def _float_tuple(values, n: int, what: str) -> tuple:
    out = tuple(float(v) for v in values)
    if len(out) != n:
        raise ValueError(f"{what} must have {n} entries, got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise ValueError(f"{what} must be finite")
    return out


@dataclass(frozen=True)
class RobotModel:
    """Geometry of the arm: three link lengths, per-joint angle limits,
    and the base position in the plane.

    Instances are immutable; the digest identifies the geometry, so any
    change in any field yields a different digest.
    """

    link_lengths: tuple = DEFAULT_LINK_LENGTHS
    joint_limits: tuple = DEFAULT_JOINT_LIMITS
    base_position: tuple = DEFAULT_BASE_POSITION

    def __post_init__(self):
        lengths = _float_tuple(self.link_lengths, 3, "link_lengths")
        if any(v <= 0.0 for v in lengths):
            raise ValueError("link lengths must be positive")
        limits = tuple(_float_tuple(pair, 2, "joint limit pair") for pair in self.joint_limits)
        if len(limits) != 3:
            raise ValueError("joint_limits must have 3 (lower, upper) pairs")
        for lo, hi in limits:
            if not lo < hi:
                raise ValueError(f"joint limit lower bound must be below upper, got ({lo}, {hi})")
        base = _float_tuple(self.base_position, 2, "base_position")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "base_position", base)

    @property
    def reach(self) -> float:
        """Outer workspace radius: the sum of the link lengths."""
        return float(sum(self.link_lengths))

    def canonical(self) -> str:
        """Canonical text form of the geometry, used for the digest."""
        links = ",".join(repr(v) for v in self.link_lengths)
        limits = "|".join(f"{lo!r}:{hi!r}" for lo, hi in self.joint_limits)
        base = ",".join(repr(v) for v in self.base_position)
        return f"link_lengths={links};joint_limits={limits};base_position={base}"

    @property
    def digest(self) -> str:
        """Hex digest identifying the geometry."""
        return hashlib.sha256(self.canonical().encode("ascii")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "link_lengths": list(self.link_lengths),
            "joint_limits": [list(pair) for pair in self.joint_limits],
            "base_position": list(self.base_position),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RobotModel":
        known = {"link_lengths", "joint_limits", "base_position"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown robot config keys: {sorted(unknown)}")
        kwargs = {}
        for key in known:
            if key in data:
                kwargs[key] = data[key]
        return cls(**kwargs)


def save_robot(model: RobotModel, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(model.to_dict(), fh, sort_keys=True)


def load_robot(path) -> RobotModel:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"robot config at {path} must be a mapping")
    return RobotModel.from_dict(data)


@lru_cache(maxsize=None)
def _geometry(model: RobotModel):
    lengths = np.array(model.link_lengths)
    base = np.array(model.base_position)
    lengths.flags.writeable = False
    base.flags.writeable = False
    return lengths, base


@lru_cache(maxsize=None)
def _limit_arrays(model: RobotModel):
    lo = np.array([pair[0] for pair in model.joint_limits])
    hi = np.array([pair[1] for pair in model.joint_limits])
    lo.flags.writeable = False
    hi.flags.writeable = False
    return lo, hi


def clamp_to_limits(model: RobotModel, q) -> np.ndarray:
    """Clip joint angles into the model's limit box."""
    lo, hi = _limit_arrays(model)
    return np.clip(np.asarray(q, dtype=float), lo, hi)


def forward_kinematics(model: RobotModel, q) -> np.ndarray:
    """End-effector (x, y) for joint angles q.

    Accepts a single (3,) vector or any (..., 3) batch and returns a
    matching (..., 2) array.
    """
    q = np.asarray(q, dtype=float)
    lengths, base = _geometry(model)
    theta = np.cumsum(q, axis=-1)
    x = base[0] + (lengths * np.cos(theta)).sum(axis=-1)
    y = base[1] + (lengths * np.sin(theta)).sum(axis=-1)
    return np.stack((x, y), axis=-1)


def jacobian(model: RobotModel, q) -> np.ndarray:
    """2x3 matrix of d(x, y)/dq at q, in closed form.

    Column k sums the contributions of links k..2 because joint k swings
    everything outward of it.
    """
    q = np.asarray(q, dtype=float)
    lengths, _ = _geometry(model)
    theta = np.cumsum(q)
    sin_terms = lengths * np.sin(theta)
    cos_terms = lengths * np.cos(theta)
    jx = -np.cumsum(sin_terms[::-1])[::-1]
    jy = np.cumsum(cos_terms[::-1])[::-1]
    return np.vstack((jx, jy))


@lru_cache(maxsize=None)
def inner_radius(model: RobotModel) -> float:
    """Smallest distance from the base the arm can still reach.

    Found by a 1 degree grid search over the two distal joints. The base
    joint rotates the whole chain rigidly and cannot change the radius, so
    it stays out of the grid. The grid minimum is an upper bound on the
    true minimum, which makes the reachability test conservative.
    """
    l1, l2, l3 = model.link_lengths
    (lo2, hi2), (lo3, hi3) = model.joint_limits[1], model.joint_limits[2]
    n2 = int(math.ceil((hi2 - lo2) / _GRID_STEP)) + 1
    n3 = int(math.ceil((hi3 - lo3) / _GRID_STEP)) + 1
    q2 = np.linspace(lo2, hi2, n2)[:, None]
    q3 = np.linspace(lo3, hi3, n3)[None, :]
    q23 = q2 + q3
    x = l1 + l2 * np.cos(q2) + l3 * np.cos(q23)
    y = l2 * np.sin(q2) + l3 * np.sin(q23)
    return float(np.sqrt((x * x + y * y).min()))


def is_reachable(model: RobotModel, target) -> bool:
    """True when the target lies inside the annulus the arm covers."""
    target = np.asarray(target, dtype=float)
    _, base = _geometry(model)
    rho = float(np.linalg.norm(target - base))
    return inner_radius(model) - 1e-12 <= rho <= model.reach + 1e-12


def inverse_kinematics(
    model: RobotModel,
    target,
    q0=None,
    tol: float = IK_TOL,
    max_iters: int = IK_MAX_ITERS,
) -> np.ndarray:
    """Joint angles that place the end effector at target.

    Damped least squares iteration. The damping shrinks with the residual
    so the solver stays stable near singular configurations while still
    converging quickly once it gets close; a fixed damping stalls on
    targets at the workspace boundary, where the Jacobian loses rank at
    the solution itself. Every iterate is clamped into the joint limits.

    Without an explicit q0 the solver works through a ladder of start
    poses: exact seeds from the two-link closed form first (fixing the
    wrist link along or against the target heading reduces the arm to two
    links, which a law of cosines solves outright), then heading-aligned
    bends and deep folds as backstops. Each start gets the full iteration
    budget; the first seed already sits on a solution for almost every
    reachable target, so the descent only has to polish it. An explicit
    q0 gets a single attempt from exactly that pose, since callers use it
    to pick among solution branches. Raises Unreachable for targets
    outside the workspace and NotConverged when the iteration budget runs
    out (the caller may retry from a different q0).
    """
    target = np.asarray(target, dtype=float)
    if not is_reachable(model, target):
        raise Unreachable(f"target {target.tolist()} is outside the workspace")
    lo, hi = _limit_arrays(model)
    if q0 is None:
        _, base = _geometry(model)
        offset = target - base
        heading = math.atan2(offset[1], offset[0])
        radius = float(np.linalg.norm(offset))
        starts = _seed_candidates(model, heading, radius)
        starts += [
            np.array([heading, 0.5, -0.5]),
            np.array([heading, 3.0, 1.5]),
            np.array([heading, -3.0, -1.5]),
            np.zeros(3),
        ]
    else:
        starts = [np.asarray(q0, dtype=float)]
    last_q = None
    last_err = math.inf
    for start in starts:
        q = np.clip(start, lo, hi)
        q, err = _descend(model, target, q, lo, hi, tol, max_iters)
        if err <= tol:
            return q
        if err < last_err:
            last_q, last_err = q, err
    raise NotConverged(
        f"no IK solution within {max_iters} iterations (residual {last_err:.3e} m)",
        q=last_q,
        error=last_err,
    )


def _wrap(angle: float) -> float:
    """Map an angle into [-pi, pi]."""
    return math.remainder(angle, math.tau)


def _seed_candidates(model: RobotModel, heading: float, radius: float) -> list:
    """Exact start poses from the two-link closed form.

    Pointing the wrist link along (or against) the target heading puts the
    wrist joint on the heading ray, where the remaining two links have a
    law-of-cosines solution. Every feasible wrist direction and elbow sign
    yields a pose whose residual is already zero up to rounding.
    """
    l1, l2, l3 = model.link_lengths
    seeds = []
    if l1 <= 0.0 or l2 <= 0.0:
        return seeds
    for wrist_sign in (1.0, -1.0):
        along = radius - wrist_sign * l3
        wrist_heading = heading if along >= 0.0 else heading + math.pi
        m = abs(along)
        c = (m * m - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
        if not -1.0 <= c <= 1.0:
            continue
        for elbow in (math.acos(c), -math.acos(c)):
            q1 = wrist_heading - math.atan2(l2 * math.sin(elbow), l1 + l2 * math.cos(elbow))
            theta3 = heading if wrist_sign > 0.0 else heading + math.pi
            seeds.append(np.array([_wrap(q1), elbow, _wrap(theta3 - q1 - elbow)]))
    return seeds


def _descend(model, target, q, lo, hi, tol, max_iters):
    """Damped least squares from one start pose; returns (q, error)."""
    eye2 = np.eye(2)
    for _ in range(max_iters):
        residual = target - forward_kinematics(model, q)
        err = float(np.linalg.norm(residual))
        if err <= tol:
            return q, err
        jac = jacobian(model, q)
        lam = IK_DAMPING * min(1.0, max(err / _IK_DAMPING_ERR_SCALE, 2e-3))
        gram = jac @ jac.T + (lam * lam) * eye2
        dq = jac.T @ np.linalg.solve(gram, residual)
        biggest = float(np.max(np.abs(dq)))
        if biggest > IK_STEP_CLAMP:
            dq *= IK_STEP_CLAMP / biggest
        q = np.clip(q + dq, lo, hi)
    err = float(np.linalg.norm(target - forward_kinematics(model, q)))
    return q, err

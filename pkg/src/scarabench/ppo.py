"""Proximal policy optimization over the reaching task.

The policy is a diagonal Gaussian over joint increments: an MLP maps the
observation vector to the mean and a state-independent log standard
deviation is learned alongside it. A second MLP estimates state values.
Updates maximize the clipped surrogate objective minus a value-error
penalty plus an entropy bonus, with gradients computed by hand through
the networks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import EnvConfig, OBS_DIM, reset, step, trace_row
from .kinematics import forward_kinematics
from .mlp import MlpParams, backward, forward_cached, init_mlp, mlp_forward
from .noise import derive_rng, seed_keys

ACTION_DIM = 3
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)

POLICY_FORMAT_VERSION = 1


class EmptyBuffer(ValueError):
    """Estimator called on a rollout buffer with no transitions."""


class NonFiniteLoss(RuntimeError):
    """Training objective became NaN or infinite; aborting is safer than
    continuing with poisoned parameters."""


class DigestMismatch(RuntimeError):
    """Policy was trained against a different robot geometry."""


@dataclass
class PolicyParams:
    """Mean network plus the shared log standard deviation (one per joint)."""

    mean_net: MlpParams
    log_std: np.ndarray

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mean_net.copy(), self.log_std.copy())


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    steps_per_update: int = 2048
    total_steps: int = 200_000
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    grad_clip: float = 0.5
    optimizer: str = "adam"
    hidden_sizes: tuple = (64, 64)
    # exp(-3) ~ 0.0498: initial exploration noise sized to the per-step
    # action bound, so early samples cover the feasible increment box
    # without saturating it.
    log_std_init: float = -3.0
    eval_episodes: int = 50
    success_distance: float = 0.02

    def validate(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.epochs < 1 or self.minibatch_size < 1 or self.steps_per_update < 1:
            raise ValueError("epochs, minibatch_size and steps_per_update must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class RolloutBuffer:
    """Fixed-length on-policy storage for one update cycle."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def empty(cls, n_steps: int, obs_dim: int = OBS_DIM, act_dim: int = ACTION_DIM) -> "RolloutBuffer":
        return cls(
            obs=np.empty((n_steps, obs_dim)),
            actions=np.empty((n_steps, act_dim)),
            log_probs=np.empty(n_steps),
            rewards=np.empty(n_steps),
            values=np.empty(n_steps),
            dones=np.empty(n_steps),
        )


@dataclass
class EvalStats:
    """Deterministic-policy evaluation summary."""

    mean_final_distance: float
    std_final_distance: float
    rmse: float
    final_distances: np.ndarray
    tail_distances: np.ndarray
    final_joints: np.ndarray
    final_ee: np.ndarray
    traces: list = field(default_factory=list)


@dataclass
class TrainedPolicy:
    """Training artifact: networks, the geometry digest they were trained
    for, the learning curve, and the success verdict of the final
    evaluation."""

    policy: PolicyParams
    value: MlpParams
    model_digest: str
    curve: list
    success: bool
    mean_final_distance: float

    def save(self, path) -> None:
        payload = {
            "format_version": POLICY_FORMAT_VERSION,
            "policy": {
                "layer_sizes": list(self.policy.mean_net.layer_sizes),
                "weights": [w.tolist() for w in self.policy.mean_net.weights],
                "biases": [b.tolist() for b in self.policy.mean_net.biases],
            },
            "log_std": self.policy.log_std.tolist(),
            "value": {
                "layer_sizes": list(self.value.layer_sizes),
                "weights": [w.tolist() for w in self.value.weights],
                "biases": [b.tolist() for b in self.value.biases],
            },
            "model_digest": self.model_digest,
            "curve": [[int(s), float(r)] for s, r in self.curve],
            "success": bool(self.success),
            "mean_final_distance": float(self.mean_final_distance),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainedPolicy":
        with open(path) as fh:
            payload = json.load(fh)
        version = payload.get("format_version")
        if version != POLICY_FORMAT_VERSION:
            raise ValueError(f"unsupported policy format version {version!r}")
        mean_net = MlpParams(
            [np.array(w) for w in payload["policy"]["weights"]],
            [np.array(b) for b in payload["policy"]["biases"]],
        )
        value = MlpParams(
            [np.array(w) for w in payload["value"]["weights"]],
            [np.array(b) for b in payload["value"]["biases"]],
        )
        return cls(
            policy=PolicyParams(mean_net, np.array(payload["log_std"])),
            value=value,
            model_digest=payload["model_digest"],
            curve=[(int(s), float(r)) for s, r in payload["curve"]],
            success=bool(payload["success"]),
            mean_final_distance=float(payload["mean_final_distance"]),
        )


def gaussian_log_prob(actions, means, log_std) -> np.ndarray:
    """Log density of a diagonal Gaussian, batched over rows."""
    actions = np.atleast_2d(actions)
    means = np.atleast_2d(means)
    std = np.exp(log_std)
    z = (actions - means) / std
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * actions.shape[-1] * _LOG_2PI


def policy_mean(policy: PolicyParams, obs_vec) -> np.ndarray:
    """Deterministic action: the mean-network output."""
    return mlp_forward(policy.mean_net, obs_vec)


def policy_sample(policy: PolicyParams, obs_vec, rng: np.random.Generator):
    """Draw an action and return (action, log_prob of that exact action)."""
    mean = mlp_forward(policy.mean_net, obs_vec)
    z = rng.standard_normal(ACTION_DIM)
    action = mean + np.exp(policy.log_std) * z
    log_prob = float(
        -0.5 * (z @ z) - policy.log_std.sum() - 0.5 * ACTION_DIM * _LOG_2PI
    )
    return action, log_prob


def policy_entropy(log_std) -> float:
    """Differential entropy of the diagonal Gaussian (mean-independent)."""
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


def gae(buffer: RolloutBuffer, gamma: float, lam: float, bootstrap_value: float = 0.0) -> RolloutBuffer:
    """Fill advantages and returns by the usual backward recursion.

    dones mask both the bootstrap and the advantage carry, so episodes
    inside the buffer stay independent. bootstrap_value is the value
    estimate of the state right after the last stored transition; it is
    ignored when that transition ended its episode.
    """
    n = len(buffer)
    if n == 0:
        raise EmptyBuffer("cannot run GAE on an empty buffer")
    advantages = np.empty(n)
    carry = 0.0
    next_value = float(bootstrap_value)
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - buffer.dones[t]
        delta = buffer.rewards[t] + gamma * next_value * nonterminal - buffer.values[t]
        carry = delta + gamma * lam * nonterminal * carry
        advantages[t] = carry
        next_value = buffer.values[t]
    buffer.advantages = advantages
    buffer.returns = advantages + buffer.values
    return buffer


def normalize_advantages(buffer: RolloutBuffer) -> RolloutBuffer:
    """Shift and scale advantages to mean 0, stdev 1 over the buffer."""
    if buffer.advantages is None:
        raise EmptyBuffer("advantages not computed yet")
    adv = buffer.advantages
    buffer.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)
    return buffer


class SgdOptimizer:
    """Plain gradient ascent."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, arrays, grads) -> None:
        for param, grad in zip(arrays, grads):
            param += self.learning_rate * grad


class AdamOptimizer:
    """Adam in ascent form; moments persist across update cycles."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, arrays, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for i, (param, grad) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / correct1
            v_hat = self.v[i] / correct2
            param += self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: PpoConfig):
    if cfg.optimizer == "adam":
        return AdamOptimizer(cfg.learning_rate)
    return SgdOptimizer(cfg.learning_rate)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale all gradient arrays in place so their joint norm is at most
    max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def ppo_update(
    policy: PolicyParams,
    value: MlpParams,
    buffer: RolloutBuffer,
    cfg: PpoConfig,
    rng: np.random.Generator,
    policy_opt=None,
    value_opt=None,
):
    """One PPO update cycle over the buffer: epochs of shuffled minibatches.

    Maximizes clipped_surrogate - value_coef * value_error + entropy_coef
    * entropy. Parameters are updated in place and returned together with
    averaged diagnostics. The rng drives minibatch shuffling only.
    """
    n = len(buffer)
    if n == 0:
        raise EmptyBuffer("cannot update from an empty buffer")
    if buffer.advantages is None or buffer.returns is None:
        raise EmptyBuffer("buffer is missing advantages/returns; run gae first")
    if policy_opt is None:
        policy_opt = make_optimizer(cfg)
    if value_opt is None:
        value_opt = make_optimizer(cfg)

    policy_arrays = policy.mean_net.arrays() + [policy.log_std]
    value_arrays = value.arrays()
    eps = cfg.clip_epsilon
    totals = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0, "approx_kl": 0.0}
    batches = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            obs = buffer.obs[idx]
            acts = buffer.actions[idx]
            old_lp = buffer.log_probs[idx]
            adv = buffer.advantages[idx]
            ret = buffer.returns[idx]
            m = len(idx)

            mean, mean_acts = forward_cached(policy.mean_net, obs)
            std = np.exp(policy.log_std)
            z = (acts - mean) / std
            new_lp = -0.5 * (z * z).sum(axis=1) - policy.log_std.sum() - 0.5 * ACTION_DIM * _LOG_2PI
            ratio = np.exp(new_lp - old_lp)
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
            surrogate = np.minimum(unclipped, clipped)

            v_out, v_acts = forward_cached(value, obs)
            v_pred = v_out[:, 0]
            v_err = v_pred - ret
            entropy = policy_entropy(policy.log_std)

            objective = surrogate.mean() - cfg.value_coef * (v_err ** 2).mean() + cfg.entropy_coef * entropy
            if not np.isfinite(objective):
                raise NonFiniteLoss(
                    f"objective became non-finite (surrogate {surrogate.mean():.3e}, "
                    f"value_err {np.abs(v_err).max():.3e}, log_std {policy.log_std})"
                )

            # d objective / d new_lp: the clipped branch has zero derivative
            # wherever it is strictly active, and both branches agree inside
            # the clip window.
            active = unclipped <= clipped
            d_lp = np.where(active, unclipped, 0.0) / m
            d_mean = d_lp[:, None] * z / std
            policy_grads, _ = backward(policy.mean_net, mean_acts, d_mean)
            d_log_std = (d_lp[:, None] * (z * z - 1.0)).sum(axis=0) + cfg.entropy_coef

            d_v = (-2.0 * cfg.value_coef / m) * v_err
            value_grads, _ = backward(value, v_acts, d_v[:, None])

            grad_arrays = policy_grads.arrays() + [d_log_std] + value_grads.arrays()
            clip_global_norm(grad_arrays, cfg.grad_clip)
            n_policy = len(policy_arrays)
            policy_opt.step(policy_arrays, grad_arrays[:n_policy])
            value_opt.step(value_arrays, grad_arrays[n_policy:])
            np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)

            totals["surrogate"] += float(surrogate.mean())
            totals["value_loss"] += float((v_err ** 2).mean())
            totals["entropy"] += entropy
            totals["clip_fraction"] += float((np.abs(ratio - 1.0) > eps).mean())
            totals["approx_kl"] += float((old_lp - new_lp).mean())
            batches += 1

    diagnostics = {k: v / batches for k, v in totals.items()}
    diagnostics["batches"] = batches
    return policy, value, diagnostics


def _collect_rollout(policy, value, env_cfg, n_steps, state, obs, env_rng, action_rng):
    """Gather n_steps transitions, resetting whenever an episode ends.

    Returns the filled buffer, the carried (state, obs), the total returns
    of episodes that finished inside the chunk, and the value bootstrap
    for the trailing partial episode.
    """
    buffer = RolloutBuffer.empty(n_steps)
    finished_returns = []
    episode_return = 0.0
    for t in range(n_steps):
        vec = obs.vector()
        action, log_prob = policy_sample(policy, vec, action_rng)
        state, result = step(state, env_cfg, action, env_rng)
        buffer.obs[t] = vec
        buffer.actions[t] = action
        buffer.log_probs[t] = log_prob
        buffer.rewards[t] = result.reward
        buffer.dones[t] = 1.0 if result.done else 0.0
        episode_return += result.reward
        if result.done:
            finished_returns.append(episode_return)
            episode_return = 0.0
            state, obs = reset(env_cfg, env_rng)
        else:
            obs = result.obs
    # One batched pass for the stored values plus the bootstrap state.
    stacked = np.vstack([buffer.obs, obs.vector()[None, :]])
    values = mlp_forward(value, stacked)[:, 0]
    buffer.values = values[:-1]
    bootstrap = float(values[-1])
    return buffer, state, obs, finished_returns, bootstrap


def run_policy_episode(policy: PolicyParams, env_cfg: EnvConfig, rng: np.random.Generator, collect_trace: bool = False):
    """Run one episode with deterministic mean actions.

    Returns (per-step ground-truth distances, final joints, final ee,
    trace rows or None). Observations stay noisy; the policy never sees
    the true state.
    """
    state, obs = reset(env_cfg, rng)
    distances = []
    rows = [] if collect_trace else None
    while True:
        action = policy_mean(policy, obs.vector())
        state, result = step(state, env_cfg, action, rng)
        distances.append(result.info_distance)
        if collect_trace:
            ee = forward_kinematics(env_cfg.model, state.q_true)
            rows.append(
                trace_row(
                    state.step_index,
                    state.q_true,
                    result.obs.q_noisy,
                    ee,
                    result.reward,
                    result.info_distance,
                )
            )
        obs = result.obs
        if result.done:
            break
    final_ee = forward_kinematics(env_cfg.model, state.q_true)
    return np.array(distances), state.q_true.copy(), final_ee, rows


def _mean_final_distance(policy, env_cfg, n_episodes, rng) -> float:
    finals = [
        run_policy_episode(policy, env_cfg, rng)[0][-1] for _ in range(n_episodes)
    ]
    return float(np.mean(finals))


def train(env_cfg: EnvConfig, ppo_cfg: PpoConfig, seed=0, progress=None) -> TrainedPolicy:
    """Train a policy for env_cfg's robot and noise level.

    Runs total_steps // steps_per_update full update cycles, then scores
    the deterministic policy over eval_episodes fresh episodes. The
    returned artifact records the geometry digest, the learning curve,
    and whether the mean final distance met the success threshold. With a
    zero step budget the random initial policy comes back flagged as
    failed.

    The seed may be an int or a tuple of keys; all internal streams
    (init, environment, action sampling, shuffling, final eval) derive
    from it deterministically.
    """
    ppo_cfg.validate()
    env_cfg.validate()
    keys = seed_keys(seed)
    init_rng = derive_rng(*keys, "init")
    env_rng = derive_rng(*keys, "env")
    action_rng = derive_rng(*keys, "actions")
    shuffle_rng = derive_rng(*keys, "shuffle")
    eval_rng = derive_rng(*keys, "final-eval")

    sizes = (OBS_DIM,) + tuple(ppo_cfg.hidden_sizes)
    policy = PolicyParams(
        mean_net=init_mlp(sizes + (ACTION_DIM,), init_rng, out_scale=0.01),
        log_std=np.full(ACTION_DIM, ppo_cfg.log_std_init),
    )
    value = init_mlp(sizes + (1,), init_rng)
    policy_opt = make_optimizer(ppo_cfg)
    value_opt = make_optimizer(ppo_cfg)

    n_updates = ppo_cfg.total_steps // ppo_cfg.steps_per_update
    state, obs = reset(env_cfg, env_rng)
    curve = []
    steps_done = 0
    for update in range(n_updates):
        buffer, state, obs, finished, bootstrap = _collect_rollout(
            policy, value, env_cfg, ppo_cfg.steps_per_update, state, obs, env_rng, action_rng
        )
        gae(buffer, ppo_cfg.gamma, ppo_cfg.lam, bootstrap)
        normalize_advantages(buffer)
        policy, value, diagnostics = ppo_update(
            policy, value, buffer, ppo_cfg, shuffle_rng, policy_opt, value_opt
        )
        steps_done += ppo_cfg.steps_per_update
        mean_reward = float(np.mean(finished)) if finished else float("nan")
        curve.append((steps_done, mean_reward))
        if progress is not None:
            progress(
                {
                    "update": update + 1,
                    "of": n_updates,
                    "step": steps_done,
                    "mean_episode_reward": mean_reward,
                    **diagnostics,
                }
            )

    mean_final = _mean_final_distance(policy, env_cfg, ppo_cfg.eval_episodes, eval_rng)
    return TrainedPolicy(
        policy=policy,
        value=value,
        model_digest=env_cfg.model.digest,
        curve=curve,
        success=mean_final <= ppo_cfg.success_distance,
        mean_final_distance=mean_final,
    )


def evaluate(
    trained: TrainedPolicy,
    env_cfg: EnvConfig,
    n_episodes: int,
    seed=0,
    tail_window: int = 10,
    trace_episodes: int = 0,
) -> EvalStats:
    """Score a trained policy on env_cfg with deterministic mean actions.

    Each episode contributes its final ground-truth distance and the mean
    distance over its last tail_window steps; the reported rmse is the
    root mean square of the tail means. Raises DigestMismatch when the
    policy was trained for different geometry.
    """
    if trained.model_digest != env_cfg.model.digest:
        raise DigestMismatch(
            "policy digest does not match the robot model; retrain before evaluating"
        )
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    rng = derive_rng(*seed_keys(seed), "eval")
    finals, tails, joints, ees, traces = [], [], [], [], []
    for episode in range(n_episodes):
        collect = episode < trace_episodes
        distances, q_final, ee_final, rows = run_policy_episode(
            trained.policy, env_cfg, rng, collect_trace=collect
        )
        finals.append(distances[-1])
        window = distances[-tail_window:] if tail_window > 0 else distances
        tails.append(float(np.mean(window)))
        joints.append(q_final)
        ees.append(ee_final)
        if collect:
            traces.append(rows)
    finals = np.array(finals)
    tails = np.array(tails)
    return EvalStats(
        mean_final_distance=float(finals.mean()),
        std_final_distance=float(finals.std()),
        rmse=float(np.sqrt(np.mean(tails ** 2))),
        final_distances=finals,
        tail_distances=tails,
        final_joints=np.array(joints),
        final_ee=np.array(ees),
        traces=traces,
    )

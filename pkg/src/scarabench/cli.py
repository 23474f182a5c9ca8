"""Command line interface.

Commands: train, eval, traditional, sweep, report. Configuration comes
from a YAML file plus flag overrides; the effective merged config is
echoed into the output directory, and no command writes outside it.
Exit codes: 0 success, 1 usage or config error, 2 task failure, 3 I/O
error.
"""
from __future__ import annotations

import argparse
import copy
import math
import os
import sys

import yaml

from . import benchmark as bench
from .classical import run_traditional
from .environment import TRACE_COLUMNS, EnvConfig, InvalidConfig
from .kinematics import NotConverged, RobotModel, Unreachable
from .noise import NoiseModel, derive_rng
from .ppo import DigestMismatch, NonFiniteLoss, PpoConfig, TrainedPolicy, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_TASK = 2
EXIT_IO = 3


class ConfigError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


class TaskFailure(Exception):
    """The requested run finished but did not meet its goal; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "out",
    "episodes": 100,
    "robot": {
        "link_lengths": [0.4, 0.3, 0.2],
        "joint_limits": [
            [-math.pi, math.pi],
            [-math.pi, math.pi],
            [-math.pi, math.pi],
        ],
        "base_position": [0.0, 0.0],
    },
    "env": {
        "goal": [0.5, 0.4],
        "sigma": 0.0,
        "noise_seed": 0,
        "max_steps": 100,
        "action_clip": 0.05,
        "success_radius": 0.01,
        "randomize_start": False,
    },
    "classical": {
        "n_waypoints": 50,
    },
    "ppo": {
        "clip_epsilon": 0.2,
        "gamma": 0.99,
        "lam": 0.95,
        "epochs": 10,
        "minibatch_size": 64,
        "learning_rate": 3e-4,
        "steps_per_update": 2048,
        "total_steps": 200_000,
        "value_coef": 0.5,
        "entropy_coef": 0.0,
        "grad_clip": 0.5,
        "optimizer": "adam",
        "hidden_sizes": [64, 64],
        "log_std_init": -3.0,
        "eval_episodes": 50,
        "success_distance": 0.02,
    },
    "sweep": {
        "sigma_grid": [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5],
        "episodes_per_cell": 100,
        "seeds": [0, 1, 2],
        "reuse_policy": False,
        "tail_window": 10,
        "trace_episodes": 3,
    },
}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Defaults merged with the YAML file at path (if given)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigError(f"config parse error at {path}:{mark.line + 1}: {exc}") from exc
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return _deep_merge(DEFAULT_CONFIG, data)


def build_robot(cfg: dict) -> RobotModel:
    try:
        return RobotModel.from_dict(cfg["robot"])
    except ValueError as exc:
        raise ConfigError(f"robot config: {exc}") from exc


def build_env(cfg: dict, sigma: float | None = None) -> EnvConfig:
    env = cfg["env"]
    eff_sigma = env["sigma"] if sigma is None else sigma
    try:
        config = EnvConfig(
            model=build_robot(cfg),
            goal=tuple(env["goal"]),
            obs_noise=NoiseModel.isotropic(eff_sigma, seed=int(env["noise_seed"])),
            max_steps=env["max_steps"],
            action_clip=env["action_clip"],
            success_radius=env["success_radius"],
            randomize_start=bool(env["randomize_start"]),
        )
        config.validate()
    except (InvalidConfig, ValueError) as exc:
        raise ConfigError(f"env config: {exc}") from exc
    return config


def build_ppo(cfg: dict, total_steps: int | None = None) -> PpoConfig:
    ppo = dict(cfg["ppo"])
    if total_steps is not None:
        ppo["total_steps"] = total_steps
    ppo["hidden_sizes"] = tuple(ppo["hidden_sizes"])
    try:
        config = PpoConfig(**ppo)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ppo config: {exc}") from exc
    return config


def build_sweep(cfg: dict, args) -> bench.SweepConfig:
    sweep = cfg["sweep"]
    episodes = sweep["episodes_per_cell"] if args.episodes is None else args.episodes
    try:
        return bench.SweepConfig(
            sigma_grid=tuple(sweep["sigma_grid"]),
            episodes_per_cell=episodes,
            seeds=tuple(sweep["seeds"]),
            env=build_env(cfg),
            ppo=build_ppo(cfg),
            reuse_policy=bool(sweep["reuse_policy"]),
            n_waypoints=cfg["classical"]["n_waypoints"],
            tail_window=sweep["tail_window"],
            trace_episodes=sweep["trace_episodes"],
        )
    except ValueError as exc:
        raise ConfigError(f"sweep config: {exc}") from exc


def _prepare_out_dir(cfg: dict) -> str:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_used.yaml"), "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return out_dir


def _apply_global_overrides(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    if getattr(args, "sigma", None) is not None:
        cfg["env"]["sigma"] = args.sigma
    if getattr(args, "total_steps", None) is not None:
        cfg["ppo"]["total_steps"] = args.total_steps
    if getattr(args, "episodes", None) is not None:
        cfg["episodes"] = args.episodes
    if getattr(args, "sigma_grid", None) is not None:
        try:
            cfg["sweep"]["sigma_grid"] = [
                float(tok) for tok in args.sigma_grid.split(",") if tok.strip() != ""
            ]
        except ValueError as exc:
            raise ConfigError(f"bad --sigma-grid value: {args.sigma_grid!r}") from exc
    return cfg


def _positive_episodes(cfg: dict) -> int:
    episodes = int(cfg["episodes"])
    if episodes < 1:
        raise ConfigError(f"episodes must be at least 1, got {episodes}")
    return episodes


def cmd_train(args) -> int:
    cfg = _apply_global_overrides(load_config(args.config), args)
    out_dir = _prepare_out_dir(cfg)
    env = build_env(cfg)
    ppo = build_ppo(cfg)

    def progress(info):
        _log(
            f"update {info['update']}/{info['of']} step {info['step']} "
            f"mean_episode_reward {info['mean_episode_reward']:.4f}"
        )

    trained = train(env, ppo, seed=(cfg["seed"], "train"), progress=progress)
    policy_path = os.path.join(out_dir, "policy.json")
    trained.save(policy_path)
    bench.write_csv(
        os.path.join(out_dir, "curves.csv"),
        bench.CURVE_COLUMNS,
        [(env.obs_noise.sigma[0], s, r) for s, r in trained.curve],
    )
    print(f"policy written to {policy_path}")
    print(f"mean_final_distance {bench.fmt_float(trained.mean_final_distance)} m")
    print(f"success {trained.success}")
    if not trained.success:
        raise TaskFailure(
            f"training missed the accuracy threshold "
            f"({trained.mean_final_distance:.4f} m > {ppo.success_distance} m)"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_global_overrides(load_config(args.config), args)
    out_dir = _prepare_out_dir(cfg)
    env = build_env(cfg)
    try:
        trained = TrainedPolicy.load(args.policy)
    except FileNotFoundError:
        raise ConfigError(f"policy file not found: {args.policy}")
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad policy file {args.policy}: {exc}")

    if bench.check_model_digest(trained, env.model) == "stale":
        if args.no_retrain:
            raise TaskFailure(
                "policy is stale for this robot model and --no-retrain was given"
            )
        _log("policy digest is stale for this model; retraining")
        trained = train(env, build_ppo(cfg), seed=(cfg["seed"], "train"))
        retrained_path = os.path.join(out_dir, "policy.json")
        trained.save(retrained_path)
        _log(f"retrained policy written to {retrained_path}")

    episodes = _positive_episodes(cfg)
    stats = evaluate(trained, env, episodes, seed=(cfg["seed"], "eval"))
    lines = [
        f"episodes {episodes}",
        f"mean_final_distance {bench.fmt_float(stats.mean_final_distance)}",
        f"std_final_distance {bench.fmt_float(stats.std_final_distance)}",
        f"rmse {bench.fmt_float(stats.rmse)}",
    ]
    with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_traditional(args) -> int:
    cfg = _apply_global_overrides(load_config(args.config), args)
    out_dir = _prepare_out_dir(cfg)
    # The sigma setting means controller noise here; observations stay clean.
    env = build_env(cfg, sigma=0.0)
    try:
        ctrl = NoiseModel.isotropic(cfg["env"]["sigma"])
    except ValueError as exc:
        raise ConfigError(f"sigma: {exc}") from exc
    episodes = _positive_episodes(cfg)
    rng = derive_rng(cfg["seed"], "traditional")
    finals = []
    rows = []
    for episode in range(episodes):
        log = run_traditional(env, ctrl, cfg["classical"]["n_waypoints"], rng)
        finals.append(log.final_distance)
        for row in log.trace_rows():
            rows.append([episode] + row)
    bench.write_csv(
        os.path.join(out_dir, "traditional_traces.csv"),
        ("episode",) + TRACE_COLUMNS,
        rows,
    )
    print(f"episodes {episodes}")
    print(f"final_distance {bench.fmt_float(finals[-1])}")
    if episodes > 1:
        print(f"rmse {bench.fmt_float(bench.rmse(finals))}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_global_overrides(load_config(args.config), args)
    out_dir = _prepare_out_dir(cfg)
    sweep_cfg = build_sweep(cfg, args)
    if args.traditional_only and args.masa_only:
        raise ConfigError("--traditional-only and --masa-only are mutually exclusive")
    result = bench.run_sweep(
        sweep_cfg,
        include_masa=not args.traditional_only,
        include_traditional=not args.masa_only,
        jobs=args.jobs,
        progress=_log,
    )
    paths = bench.export_reports(
        result.table, result.traces, result.curves, result.final_poses, out_dir,
        failures=result.failures,
    )
    print(bench.format_table(result.table))
    for note in result.failures:
        _log(f"failed cell: {note}")
    _log(f"reports written to {paths['table']}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _apply_global_overrides(load_config(args.config), args)
    out_dir = cfg["out_dir"]
    table_path = os.path.join(out_dir, "table.csv")
    if not os.path.exists(table_path):
        raise FileNotFoundError(f"no benchmark table at {table_path}; run sweep first")
    rows = []
    with open(table_path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != bench.TABLE_COLUMNS:
            raise ConfigError(f"unexpected table schema in {table_path}: {header}")
        for line in fh:
            cells = line.strip().split(",")
            if len(cells) != 4:
                continue
            rows.append(
                bench.BenchmarkRow(
                    sigma_rad=float(cells[0]),
                    sigma_deg=float(cells[1]),
                    rmse_masa=float(cells[2]),
                    rmse_traditional=float(cells[3]),
                )
            )
    table = bench.BenchmarkTable(rows)
    text = bench.format_table(table)
    print(text)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(text + "\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="scarabench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="base seed override")
        p.add_argument("--out-dir", help="output directory override")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers (sweep)")

    p_train = sub.add_parser("train", help="train a policy")
    add_common(p_train)
    p_train.add_argument("--sigma", type=float, help="observation noise sigma, rad")
    p_train.add_argument("--total-steps", type=int, help="training step budget")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved policy")
    add_common(p_eval)
    p_eval.add_argument("--policy", required=True, help="path to a saved policy")
    p_eval.add_argument("--sigma", type=float, help="observation noise sigma, rad")
    p_eval.add_argument("--episodes", type=int, help="evaluation episode count")
    p_eval.add_argument("--total-steps", type=int, help="retraining step budget")
    p_eval.add_argument(
        "--no-retrain", action="store_true",
        help="fail instead of retraining when the policy is stale",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_trad = sub.add_parser("traditional", help="run the classical pipeline")
    add_common(p_trad)
    p_trad.add_argument("--sigma", type=float, help="controller noise sigma, rad")
    p_trad.add_argument("--episodes", type=int, help="episode count")
    p_trad.set_defaults(func=cmd_traditional)

    p_sweep = sub.add_parser("sweep", help="run the noise-robustness benchmark")
    add_common(p_sweep)
    p_sweep.add_argument("--sigma-grid", help="comma-separated sigma values, rad")
    p_sweep.add_argument("--episodes", type=int, help="episodes per cell")
    p_sweep.add_argument("--total-steps", type=int, help="training budget per cell")
    p_sweep.add_argument("--traditional-only", action="store_true")
    p_sweep.add_argument("--masa-only", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="re-render reports from a sweep directory")
    add_common(p_report)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except TaskFailure as exc:
        _log(f"task failed: {exc}")
        return EXIT_TASK
    except (Unreachable, NotConverged, NonFiniteLoss, DigestMismatch, InvalidConfig) as exc:
        _log(f"task failed: {exc}")
        return EXIT_TASK
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

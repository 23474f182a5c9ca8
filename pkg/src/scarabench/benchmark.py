"""Noise-robustness benchmark: sweep a sigma grid with both pipelines.

For every noise level the classical pipeline runs with controller noise
and the learned pipeline trains and evaluates with observation noise of
the same magnitude, over the same goal and episode counts. Per-seed RMSE
values are reduced by the median, and everything exports to fixed-schema
CSV files.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classical import DEFAULT_WAYPOINTS, run_traditional
from .environment import EnvConfig
from .kinematics import RobotModel
from .noise import NoiseModel, derive_rng
from .ppo import NonFiniteLoss, PpoConfig, TrainedPolicy, evaluate, train

DEFAULT_SIGMA_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5)

TABLE_COLUMNS = ("sigma_rad", "sigma_deg", "rmse_masa", "rmse_traditional")
TRACE_COLUMNS = ("pipeline", "sigma", "episode", "step", "x", "y")
CURVE_COLUMNS = ("sigma", "step", "mean_reward")
POSE_COLUMNS = ("pipeline", "sigma", "episode", "q1", "q2", "q3", "ee_x", "ee_y")


class EmptyInput(ValueError):
    """Aggregate asked for on an empty collection."""


def rmse(distances) -> float:
    """Root mean square of a non-empty distance collection."""
    arr = np.asarray(distances, dtype=float)
    if arr.size == 0:
        raise EmptyInput("rmse of an empty collection is undefined")
    return float(np.sqrt(np.mean(arr ** 2)))


def round_sig(x: float, digits: int = 3) -> float:
    """Round to a number of significant figures."""
    if x == 0.0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


def fmt_float(x) -> str:
    """Fixed CSV float formatting: 6 significant digits."""
    return f"{float(x):.6g}"


@dataclass
class BenchmarkRow:
    sigma_rad: float
    sigma_deg: float
    rmse_masa: float
    rmse_traditional: float


@dataclass
class BenchmarkTable:
    rows: list

    def __post_init__(self):
        sigmas = [row.sigma_rad for row in self.rows]
        if sigmas != sorted(sigmas):
            raise ValueError("rows must be ordered by ascending sigma")


@dataclass(frozen=True)
class SweepConfig:
    """Grid definition plus the shared task and training configuration.

    reuse_policy=False trains one policy per (sigma, seed) cell; True
    trains once per seed at the first grid sigma and evaluates that policy
    everywhere (cheaper, but the policy never sees the other noise
    levels during training).
    """

    sigma_grid: tuple = DEFAULT_SIGMA_GRID
    episodes_per_cell: int = 100
    seeds: tuple = (0, 1, 2)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reuse_policy: bool = False
    n_waypoints: int = DEFAULT_WAYPOINTS
    tail_window: int = 10
    trace_episodes: int = 3

    def __post_init__(self):
        grid = tuple(float(s) for s in self.sigma_grid)
        if len(grid) == 0:
            raise ValueError("sigma_grid must not be empty")
        if any(s < 0 for s in grid):
            raise ValueError("sigma values must be non-negative")
        if list(grid) != sorted(set(grid)):
            raise ValueError("sigma_grid must be strictly increasing")
        object.__setattr__(self, "sigma_grid", grid)
        seeds = tuple(int(s) for s in self.seeds)
        if len(seeds) == 0:
            raise ValueError("need at least one seed")
        object.__setattr__(self, "seeds", seeds)
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be positive")


@dataclass
class SweepResult:
    """Benchmark table plus the side products needed for the reports."""

    table: BenchmarkTable
    traces: list = field(default_factory=list)       # TRACE_COLUMNS rows
    curves: list = field(default_factory=list)       # CURVE_COLUMNS rows
    final_poses: list = field(default_factory=list)  # POSE_COLUMNS rows
    failures: list = field(default_factory=list)


def check_model_digest(trained: TrainedPolicy, model: RobotModel) -> str:
    """'ok' when the policy matches the geometry, 'stale' otherwise."""
    return "ok" if trained.model_digest == model.digest else "stale"


def _traditional_cell(cfg: SweepConfig, sigma_index: int, seed: int):
    """Classical RMSE for one (sigma, seed) cell, plus trace products.

    Controller noise carries the cell sigma; the start-pose reading stays
    clean so both pipelines receive the noise at the stage where their
    approach is exposed to it.
    """
    sigma = cfg.sigma_grid[sigma_index]
    env = replace(cfg.env, obs_noise=NoiseModel(sigma=(0.0, 0.0, 0.0), seed=cfg.env.obs_noise.seed))
    ctrl = NoiseModel.isotropic(sigma)
    rng = derive_rng(seed, "traditional", sigma_index)
    finals = []
    traces = []
    poses = []
    for episode in range(cfg.episodes_per_cell):
        log = run_traditional(env, ctrl, cfg.n_waypoints, rng)
        finals.append(log.final_distance)
        if episode < cfg.trace_episodes:
            for step_i, ee in enumerate(log.ee_trace):
                traces.append(("traditional", sigma, episode, step_i, float(ee[0]), float(ee[1])))
            q = log.realized[-1]
            ee = log.ee_trace[-1]
            poses.append(("traditional", sigma, episode, q[0], q[1], q[2], float(ee[0]), float(ee[1])))
    return rmse(finals), traces, poses


def _masa_cell(cfg: SweepConfig, sigma_index: int, seed: int, trained: TrainedPolicy | None = None):
    """Learned-pipeline RMSE for one (sigma, seed) cell.

    Trains a fresh policy unless one is handed in (reuse mode). A training
    run that aborts on a non-finite loss marks the cell failed; a policy
    that merely misses the success threshold is still evaluated, since the
    benchmark reports measured accuracy rather than the training verdict.
    """
    sigma = cfg.sigma_grid[sigma_index]
    env = replace(cfg.env, obs_noise=NoiseModel.isotropic(sigma, seed=cfg.env.obs_noise.seed))
    failure = None
    if trained is None:
        try:
            trained = train(env, cfg.ppo, seed=(seed, "masa", sigma_index))
        except NonFiniteLoss as exc:
            return float("nan"), None, [], [], f"sigma={sigma} seed={seed}: {exc}"
    stats = evaluate(
        trained,
        env,
        cfg.episodes_per_cell,
        seed=(seed, "masa-eval", sigma_index),
        tail_window=cfg.tail_window,
        trace_episodes=cfg.trace_episodes,
    )
    traces = []
    for episode, rows in enumerate(stats.traces):
        for row in rows:
            traces.append(("masa", sigma, episode, row[0], row[7], row[8]))
    poses = []
    limit = min(cfg.trace_episodes, len(stats.final_joints))
    for episode in range(limit):
        q = stats.final_joints[episode]
        ee = stats.final_ee[episode]
        poses.append(("masa", sigma, episode, q[0], q[1], q[2], float(ee[0]), float(ee[1])))
    return stats.rmse, trained, traces, poses, failure


def _run_cell(args):
    """Process-pool entry: compute one (pipeline, sigma, seed) cell."""
    cfg, pipeline, sigma_index, seed = args
    if pipeline == "traditional":
        value, traces, poses = _traditional_cell(cfg, sigma_index, seed)
        return pipeline, sigma_index, seed, value, traces, poses, None, None
    value, trained, traces, poses, failure = _masa_cell(cfg, sigma_index, seed)
    curve = trained.curve if trained is not None else []
    return pipeline, sigma_index, seed, value, traces, poses, curve, failure


def run_sweep(
    cfg: SweepConfig,
    include_masa: bool = True,
    include_traditional: bool = True,
    jobs: int = 1,
    progress=None,
) -> SweepResult:
    """Fill the benchmark table over the sigma grid.

    Every cell derives its random streams from (seed, pipeline, sigma
    index), so results do not depend on execution order and jobs > 1
    produces the same numbers as a serial run. Per-sigma values are the
    medians across seeds. Failed cells keep a NaN sentinel and a message
    in result.failures instead of aborting the sweep.
    """
    cfg.env.validate()
    tasks = []
    for sigma_index in range(len(cfg.sigma_grid)):
        for seed in cfg.seeds:
            if include_traditional:
                tasks.append((cfg, "traditional", sigma_index, seed))
            if include_masa and not cfg.reuse_policy:
                tasks.append((cfg, "masa", sigma_index, seed))

    results = {}
    if jobs > 1 and tasks:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for out in pool.map(_run_cell, tasks):
                results[(out[0], out[1], out[2])] = out[3:]
                if progress is not None:
                    progress(f"{out[0]} sigma={cfg.sigma_grid[out[1]]} seed={out[2]} done")
    else:
        for task in tasks:
            out = _run_cell(task)
            results[(out[0], out[1], out[2])] = out[3:]
            if progress is not None:
                progress(f"{out[0]} sigma={cfg.sigma_grid[out[1]]} seed={out[2]} done")

    if cfg.reuse_policy and include_masa:
        for seed in cfg.seeds:
            base_env = replace(
                cfg.env, obs_noise=NoiseModel.isotropic(cfg.sigma_grid[0], seed=cfg.env.obs_noise.seed)
            )
            try:
                shared = train(base_env, cfg.ppo, seed=(seed, "masa", 0))
            except NonFiniteLoss as exc:
                shared = None
                note = f"seed={seed}: {exc}"
            for sigma_index in range(len(cfg.sigma_grid)):
                if shared is None:
                    results[("masa", sigma_index, seed)] = (float("nan"), [], [], [], note)
                    continue
                value, _, traces, poses, failure = _masa_cell(cfg, sigma_index, seed, trained=shared)
                curve = shared.curve if sigma_index == 0 else []
                results[("masa", sigma_index, seed)] = (value, traces, poses, curve, failure)
                if progress is not None:
                    progress(f"masa sigma={cfg.sigma_grid[sigma_index]} seed={seed} done (reused)")

    rows = []
    traces = []
    curves = []
    poses = []
    failures = []
    first_seed = cfg.seeds[0]
    for sigma_index, sigma in enumerate(cfg.sigma_grid):
        masa_values = []
        trad_values = []
        for seed in cfg.seeds:
            if include_traditional:
                value, cell_traces, cell_poses, _, _ = results[("traditional", sigma_index, seed)]
                trad_values.append(value)
                if seed == first_seed:
                    traces.extend(cell_traces)
                    poses.extend(cell_poses)
            if include_masa:
                value, cell_traces, cell_poses, curve, failure = results[("masa", sigma_index, seed)]
                masa_values.append(value)
                if failure:
                    failures.append(failure)
                if seed == first_seed:
                    traces.extend(cell_traces)
                    poses.extend(cell_poses)
                    for step_i, mean_reward in curve or []:
                        curves.append((sigma, step_i, mean_reward))
        rows.append(
            BenchmarkRow(
                sigma_rad=sigma,
                sigma_deg=round_sig(math.degrees(sigma), 3),
                rmse_masa=float(np.median(masa_values)) if masa_values else float("nan"),
                rmse_traditional=float(np.median(trad_values)) if trad_values else float("nan"),
            )
        )
    return SweepResult(
        table=BenchmarkTable(rows),
        traces=traces,
        curves=curves,
        final_poses=poses,
        failures=failures,
    )


def write_csv(path, header, rows) -> None:
    """Write rows with the shared float formatting; bytes are stable for
    identical inputs (ints verbatim, floats at 6 significant digits)."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for value in row:
            if isinstance(value, str):
                cells.append(value)
            elif isinstance(value, (int, np.integer)):
                cells.append(str(int(value)))
            else:
                cells.append(fmt_float(value))
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def format_table(table: BenchmarkTable) -> str:
    """Aligned text rendering of the benchmark table."""
    header = f"{'sigma_rad':>10} {'sigma_deg':>10} {'rmse_masa':>12} {'rmse_trad':>12}"
    lines = [header, "-" * len(header)]
    for row in table.rows:
        lines.append(
            f"{fmt_float(row.sigma_rad):>10} {fmt_float(row.sigma_deg):>10} "
            f"{fmt_float(row.rmse_masa):>12} {fmt_float(row.rmse_traditional):>12}"
        )
    return "\n".join(lines)


def export_reports(table: BenchmarkTable, traces, curves, final_poses, out_dir, failures=None) -> dict:
    """Write table.csv, traces.csv, curves.csv, final_poses.csv and a text
    summary into out_dir; returns the paths. Output is byte-stable for a
    given table."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "table": os.path.join(out_dir, "table.csv"),
        "traces": os.path.join(out_dir, "traces.csv"),
        "curves": os.path.join(out_dir, "curves.csv"),
        "final_poses": os.path.join(out_dir, "final_poses.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
    }
    table_rows = [
        (row.sigma_rad, row.sigma_deg, row.rmse_masa, row.rmse_traditional)
        for row in table.rows
    ]
    write_csv(paths["table"], TABLE_COLUMNS, table_rows)
    write_csv(paths["traces"], TRACE_COLUMNS, traces)
    write_csv(paths["curves"], CURVE_COLUMNS, curves)
    write_csv(paths["final_poses"], POSE_COLUMNS, final_poses)
    summary = [format_table(table)]
    wins = sum(
        1
        for row in table.rows
        if math.isfinite(row.rmse_masa)
        and math.isfinite(row.rmse_traditional)
        and row.rmse_masa < row.rmse_traditional
    )
    summary.append("")
    summary.append(f"rows where the learned pipeline wins: {wins} of {len(table.rows)}")
    for note in failures or []:
        summary.append(f"failed cell: {note}")
    with open(paths["summary"], "w") as fh:
        fh.write("\n".join(summary) + "\n")
    return paths

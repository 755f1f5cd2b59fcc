"""Trajectory RMSE and multi-trial experiment orchestration.

One experiment fixes (plan, algorithm, measurement mode, dimensionality) and
runs k seeded trials. Per trial, a fresh random walk provides ground truth,
the per-AP measurement noise scale and the motion noise std are drawn from
their configured ranges, and the filter localizes from a uniform prior. All
per-trial data is kept so any summary statistic can be recomputed.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError, WalkTimeout
from .fastslam import SlamConfig, run_fastslam
from .filters import FilterConfig, InitDistribution, MeasurementMode, run_particle_filter
from .propagation import ApMap, PropagationParams
from .world import FloorPlan, Trajectory, random_walk


def rmse(ground_truth, estimate) -> float:
    """Root-mean-square Euclidean error between two waypoint sequences."""
    gt = ground_truth.waypoints if isinstance(ground_truth, Trajectory) else np.asarray(ground_truth, float)
    est = estimate.waypoints if isinstance(estimate, Trajectory) else np.asarray(estimate, float)
    gt = gt.reshape(-1, 3)
    est = est.reshape(-1, 3)
    if len(gt) != len(est):
        raise ValidationError(f"waypoint counts differ: {len(gt)} vs {len(est)}")
    if len(gt) == 0:
        raise ValidationError("empty trajectories")
    return float(np.sqrt(np.mean(np.sum((gt - est) ** 2, axis=1))))


@dataclass(frozen=True)
class ExperimentConfig:
    """One row of the comparison matrix: algorithm x mode x dimensionality."""

    plan: FloorPlan
    ap_map: ApMap
    algorithm: str  # "pf" | "fastslam"
    mode: MeasurementMode
    dim: int = 2
    trials: int = 20
    base_seed: int = 0
    classifier: object = None
    filter_template: FilterConfig = field(default_factory=FilterConfig)
    slam: SlamConfig = field(default_factory=SlamConfig)
    params: PropagationParams = field(default_factory=PropagationParams)
    motion_noise_max_m: float = 0.8  # per-axis std drawn U(0, max) per trial
    sz_range_m: tuple[float, float] = (10.0, 100.0)  # per-AP sz drawn per trial
    device_z_m: float = 1.0
    walk_goal_bias: float = 0.2
    walk_max_steps: int = 10_000
    min_start_goal_dist_m: float = 0.0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        if self.algorithm not in ("pf", "fastslam"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.mode is not MeasurementMode.NC and self.classifier is None:
            raise ConfigError(f"mode {self.mode.value} requires a classifier")


@dataclass
class TrialReport:
    trial: int
    seed: int
    rmse_m: float = math.nan
    waypoint_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duration_s: float = 0.0
    failed: bool = False
    failure: str = ""
    n_collapses: int = 0
    ap_initial_err_m: float = math.nan
    ap_final_err_m: float = math.nan


@dataclass
class ExperimentReport:
    algorithm: str
    mode: str
    dim: int
    base_seed: int
    trials: list[TrialReport]

    def _ok(self) -> list[TrialReport]:
        return [t for t in self.trials if not t.failed]

    @property
    def rmse_values(self) -> np.ndarray:
        return np.array([t.rmse_m for t in self._ok()])

    @property
    def mean_rmse(self) -> float:
        return float(self.rmse_values.mean())

    @property
    def std_rmse(self) -> float:
        return float(self.rmse_values.std())

    @property
    def n_failed(self) -> int:
        return sum(t.failed for t in self.trials)

    def summary_row(self) -> str:
        vals = self.rmse_values
        return ",".join(
            [
                self.algorithm,
                self.mode,
                str(self.dim),
                str(len(self.trials)),
                repr(float(vals.mean())),
                repr(float(vals.std())),
                repr(float(vals.min())),
                repr(float(vals.max())),
            ]
        )


def _sample_free_pose(plan: FloorPlan, rng: np.random.Generator, z_m: float) -> np.ndarray:
    layer = plan.z_layer_of(z_m)
    cells = plan.free_motion_cells(z_layer=layer)
    cell = cells[rng.integers(len(cells))]
    center = plan.origin + (cell + 0.5) * plan.resolution
    pose = center + np.array([*(rng.uniform(-0.5, 0.5, 2) * plan.resolution), 0.0])
    pose[2] = z_m
    return pose


def run_single_trial(cfg: ExperimentConfig, trial: int) -> TrialReport:
    """One seeded trial: walk, draw noise scales, filter, score."""
    seed = cfg.base_seed + trial
    report = TrialReport(trial=trial, seed=seed)
    t0 = time.perf_counter()
    try:
        ss = np.random.SeedSequence(seed)
        walk_ss, param_ss, filter_ss = ss.spawn(3)
        walk_rng = np.random.default_rng(walk_ss)
        param_rng = np.random.default_rng(param_ss)

        three_d = cfg.dim == 3
        start = _sample_free_pose(cfg.plan, walk_rng, cfg.device_z_m)
        goal = _sample_free_pose(cfg.plan, walk_rng, cfg.device_z_m)
        while np.linalg.norm(goal - start) < cfg.min_start_goal_dist_m:
            goal = _sample_free_pose(cfg.plan, walk_rng, cfg.device_z_m)
        traj = random_walk(
            cfg.plan, start, goal, cfg.filter_template.step_size_m, walk_rng,
            goal_bias=cfg.walk_goal_bias, max_steps=cfg.walk_max_steps, three_d=three_d,
        )

        motion_std = param_rng.uniform(0.0, cfg.motion_noise_max_m, 3)
        if not three_d:
            motion_std[2] = 0.0
        sz = {
            ap.ap_id: float(param_rng.uniform(*cfg.sz_range_m)) for ap in cfg.ap_map
        }
        init = InitDistribution(kind="uniform", z=None if three_d else cfg.device_z_m)
        fcfg = replace(
            cfg.filter_template,
            mode=cfg.mode,
            motion_noise_std=tuple(motion_std),
            measurement_noise_std_m=sz,
            sensing_range_m=cfg.params.sensing_range_m,
            init=init,
        )
        if cfg.algorithm == "pf":
            run = run_particle_filter(
                cfg.plan, cfg.ap_map, traj, fcfg, cfg.classifier,
                seed=filter_ss, params=cfg.params,
            )
        else:
            run = run_fastslam(
                cfg.plan, cfg.ap_map, traj, fcfg, cfg.slam, cfg.classifier,
                seed=filter_ss, params=cfg.params,
            )
            report.ap_initial_err_m = run.mean_initial_ap_error
            report.ap_final_err_m = run.mean_final_ap_error
        report.rmse_m = rmse(traj.waypoints, run.estimates)
        report.waypoint_errors = run.errors
        report.n_collapses = len(run.collapse_steps)
    except (WalkTimeout, ConfigError, ValidationError) as e:
        report.failed = True
        report.failure = f"{type(e).__name__}: {e}"
    report.duration_s = time.perf_counter() - t0
    return report


def run_trials(cfg: ExperimentConfig) -> ExperimentReport:
    """Run all trials of one experiment; failures are flagged, never dropped."""
    trials = [run_single_trial(cfg, k) for k in range(cfg.trials)]
    return ExperimentReport(
        algorithm=cfg.algorithm,
        mode=cfg.mode.value,
        dim=cfg.dim,
        base_seed=cfg.base_seed,
        trials=trials,
    )


AGGREGATE_HEADER = "algorithm,mode,dim,trials,mean_rmse,std_rmse,min,max"


def emit_report(reports, out_dir, formats: tuple[str, ...] = ("csv",)) -> list[Path]:
    """Write aggregate, per-trial, and per-waypoint files; optionally SVG plots.

    File contents are deterministic functions of the report data (durations
    are deliberately excluded from files; they live only in memory).
    """
    reports = list(reports)
    if not reports:
        raise ConfigError("emit_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    agg = out_dir / "aggregate.csv"
    agg.write_text("\n".join([AGGREGATE_HEADER] + [r.summary_row() for r in reports]) + "\n")
    written.append(agg)

    for r in reports:
        stem = f"{r.algorithm}_{r.mode}_{r.dim}d"
        per_trial = out_dir / f"trials_{stem}.csv"
        lines = ["trial,seed,rmse_m,failed,n_collapses,ap_initial_err_m,ap_final_err_m"]
        for t in r.trials:
            lines.append(
                f"{t.trial},{t.seed},{t.rmse_m!r},{int(t.failed)},{t.n_collapses},"
                f"{t.ap_initial_err_m!r},{t.ap_final_err_m!r}"
            )
        per_trial.write_text("\n".join(lines) + "\n")
        written.append(per_trial)

        per_wp = out_dir / f"waypoints_{stem}.csv"
        lines = ["trial,step,err_m"]
        for t in r.trials:
            for step, err in enumerate(t.waypoint_errors):
                lines.append(f"{t.trial},{step},{err!r}")
        per_wp.write_text("\n".join(lines) + "\n")
        written.append(per_wp)

    if "svg" in formats:
        written.extend(_emit_plots(reports, out_dir))
    return written


def _emit_plots(reports, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "wifiloc"
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r.algorithm}-{r.mode}" for r in reports]
    ax.boxplot([r.rmse_values for r in reports], tick_labels=labels)
    ax.set_ylabel("localization RMSE (m)")
    ax.set_title("RMSE across trials")
    box_path = out_dir / "rmse_box.svg"
    fig.savefig(box_path, metadata={"Date": None})
    plt.close(fig)
    written.append(box_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        ok = [t for t in r.trials if not t.failed]
        if not ok:
            continue
        t = ok[0]
        ax.plot(np.arange(len(t.waypoint_errors)), t.waypoint_errors,
                label=f"{r.algorithm}-{r.mode} (trial {t.trial})")
    ax.set_xlabel("waypoint index")
    ax.set_ylabel("error (m)")
    ax.legend(fontsize=8)
    series_path = out_dir / "waypoint_errors.svg"
    fig.savefig(series_path, metadata={"Date": None})
    plt.close(fig)
    written.append(series_path)
    return written

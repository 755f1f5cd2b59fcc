"""SIR particle filter with the three-mode range measurement model.

Per step: propagate every particle through the motion model, reweight by the
range likelihood, normalize, and (gated on effective sample size) resample.
The measurement model compares the FSPL-inverted range dr against each
particle's map distance de to every audible access point and supports three
modes:

 - no classification (NC): dz = |dr - de| for every in-range AP;
 - hard classification (HC): the AP contributes only when the classifier
   labels the (de, dr) pair LOS;
 - soft classification (SC): dz blends the LOS residual with an NLOS
   hypothesis |dr - dn|, dn ~ N(sensing_range, nlos_std^2), weighted by the
   classifier's probabilities.

Each contribution multiplies the particle weight by the Gaussian density
f(dz; 0, sz_j^2) with the per-AP noise scale sz_j.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataAssociationError
from .propagation import ApMap, PropagationParams, RssiObservation, fspl_distance, synthesize_rssi
from .world import FloorPlan, Pose, Trajectory, as_xyz


class MeasurementMode(Enum):
    NC = "nc"  # no classification
    HC = "hc"  # hard accept/reject classification
    SC = "sc"  # soft probabilistic classification


@dataclass(frozen=True)
class InitDistribution:
    """Prior over the initial pose: uniform over free space, point, or Gaussian."""

    kind: str = "uniform"  # "uniform" | "point" | "gaussian"
    pose: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    z: float | None = None  # fix particles to this height (planar runs)

    def __post_init__(self):
        if self.kind not in ("uniform", "point", "gaussian"):
            raise ConfigError(f"unknown init distribution kind {self.kind!r}")
        if self.kind in ("point", "gaussian") and self.pose is None:
            raise ConfigError(f"init distribution {self.kind!r} requires a pose")
        if self.kind == "gaussian" and self.std is None:
            raise ConfigError("gaussian init distribution requires std")


@dataclass(frozen=True)
class FilterConfig:
    num_particles: int = 3000
    step_size_m: float = 2.0
    motion_noise_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    measurement_noise_std_m: float | Mapping[str, float] = 30.0  # sz per AP
    sensing_range_m: float = 15.0
    nlos_range_std_m: float = 3.0
    mode: MeasurementMode = MeasurementMode.NC
    init: InitDistribution = InitDistribution()
    resample_kind: str = "multinomial"  # or "systematic"
    resample_ess_frac: float = 0.5  # resample when n_eff < frac * n
    resample_every_step: bool = False
    likelihood_form: str = "normalized"  # or "density"
    sc_dn_per_step: bool = False  # share one NLOS range draw per (AP, step)

    def __post_init__(self):
        if self.num_particles < 1:
            raise ConfigError("num_particles must be >= 1")
        if any(s < 0 for s in self.motion_noise_std):
            raise ConfigError("motion noise stds must be >= 0")
        if self.nlos_range_std_m < 0:
            raise ConfigError("nlos_range_std_m must be >= 0")
        if self.resample_kind not in ("multinomial", "systematic"):
            raise ConfigError(f"unknown resample kind {self.resample_kind!r}")
        if self.likelihood_form not in ("normalized", "density"):
            raise ConfigError(f"unknown likelihood form {self.likelihood_form!r}")

    def sz_for(self, ap_id: str) -> float:
        if isinstance(self.measurement_noise_std_m, Mapping):
            try:
                return float(self.measurement_noise_std_m[ap_id])
            except KeyError:
                raise ConfigError(f"no measurement noise configured for AP {ap_id!r}") from None
        return float(self.measurement_noise_std_m)


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float


@dataclass
class ParticleSet:
    """Pose hypotheses as an (n, 3) array plus importance weights."""

    poses: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.poses) != len(self.weights):
            raise ValueError("poses and weights must have matching length")

    def __len__(self) -> int:
        return len(self.weights)

    def particle(self, i: int) -> Particle:
        x, y, z = self.poses[i]
        return Particle(Pose(float(x), float(y), float(z)), float(self.weights[i]))

    def n_eff(self) -> float:
        s = float((self.weights**2).sum())
        return 1.0 / s if s > 0 else 0.0


def _gauss_pdf(x, std):
    """Gaussian density value f(x; 0, std^2)."""
    return np.exp(-0.5 * (x / std) ** 2) / (std * math.sqrt(2.0 * math.pi))


def _likelihood(dz, std, form: str):
    """Per-AP weight factor for residual dz.

    "normalized" peaks at 1 so particles that hear an AP are never crushed
    relative to particles out of its range (which keep an implicit factor of
    1); "density" is the literal Gaussian density value. Ratios between
    particles hearing the same AP are identical either way.
    """
    if form == "density":
        return _gauss_pdf(dz, std)
    return np.exp(-0.5 * (dz / std) ** 2)


def init_particles(cfg: FilterConfig, plan: FloorPlan, rng: np.random.Generator) -> ParticleSet:
    """Draw the initial particle set from the configured prior over free space."""
    n = cfg.num_particles
    init = cfg.init
    if init.kind == "point":
        poses = np.tile(np.asarray(init.pose, dtype=float), (n, 1))
    elif init.kind == "gaussian":
        center = np.asarray(init.pose, dtype=float)
        std = np.asarray(init.std, dtype=float)
        poses = center + rng.normal(size=(n, 3)) * std
    else:
        layer = plan.z_layer_of(init.z) if init.z is not None else None
        cells = plan.free_motion_cells(z_layer=layer)
        if len(cells) == 0:
            raise ConfigError("no free cells to initialize particles in")
        picks = cells[rng.integers(len(cells), size=n)]
        centers = plan.origin + (picks + 0.5) * plan.resolution
        poses = centers + rng.uniform(-0.5, 0.5, size=(n, 3)) * plan.resolution
        if init.z is not None:
            poses[:, 2] = init.z
    return ParticleSet(poses=poses, weights=np.full(n, 1.0 / n))


def motion_sample(x_prev, u, cfg: FilterConfig, rng: np.random.Generator) -> np.ndarray:
    """One noisy motion step: x + u + per-axis zero-mean Gaussian noise."""
    x = as_xyz(x_prev)
    du = as_xyz(u) if not isinstance(u, np.ndarray) else u
    noise = rng.normal(size=3) * np.asarray(cfg.motion_noise_std, dtype=float)
    return x + du + noise


def _motion_batch(poses: np.ndarray, u, std, rng: np.random.Generator) -> np.ndarray:
    return poses + np.asarray(u, dtype=float) + rng.normal(size=poses.shape) * np.asarray(std, dtype=float)


def _mode_dz(
    de: np.ndarray,
    dr: float,
    mode: MeasurementMode,
    classifier,
    sensing_range: float,
    nlos_std: float,
    rng: np.random.Generator | None,
    dn_per_step: bool = False,
):
    """Per-particle residual dz plus the mask of particles this AP weights.

    The observation was received, so it weights every particle (the device's
    sensing range gates which APs are audible at all, not which hypotheses
    the evidence applies to). HC is the exception: particles whose (de, dr)
    pair the classifier labels NLOS reject the range outright.

    Also returns the per-particle LOS belief (0/1 for HC, probability for
    SC, all-ones for NC) so landmark filters can gate their updates the same
    way the range is trusted.
    """
    n = len(de)
    dz = np.zeros(n)
    los_belief = np.ones(n)
    if mode is MeasurementMode.NC:
        contribute = np.ones(n, dtype=bool)
        dz = np.abs(dr - de)
    elif mode is MeasurementMode.HC:
        labels = np.asarray(classifier.labels(de, np.full(n, dr)))
        contribute = labels == 1
        los_belief = contribute.astype(float)
        dz[contribute] = np.abs(dr - de[contribute])
    else:  # SC
        contribute = np.ones(n, dtype=bool)
        # NLOS range hypothesis: fresh per (particle, AP, step) by default,
        # or one shared draw per (AP, step) for variance reduction
        if dn_per_step:
            dn = np.full(n, rng.normal(sensing_range, nlos_std))
        else:
            dn = rng.normal(sensing_range, nlos_std, size=n)
        probs = np.asarray(classifier.probs(de, np.full(n, dr)))
        p_los = probs[:, 1]
        dz = p_los * np.abs(dr - de) + (1.0 - p_los) * np.abs(dr - dn)
        los_belief = p_los
    return dz, contribute, los_belief


@dataclass
class MeasurementDiagnostics:
    collapsed: bool = False
    n_contributions: int = 0


def measurement_update(
    particles: ParticleSet,
    observations: Sequence[RssiObservation],
    ap_map: ApMap,
    cfg: FilterConfig,
    classifier=None,
    rng: np.random.Generator | None = None,
    params: PropagationParams | None = None,
) -> MeasurementDiagnostics:
    """Reweight particles by the mode-dependent range likelihood, then normalize.

    Steps with no observations leave the weights untouched (motion-only);
    if every weight underflows to zero the set is reset to uniform and
    flagged in the diagnostics.
    """
    if cfg.mode is not MeasurementMode.NC and classifier is None:
        raise ConfigError(f"mode {cfg.mode.value} requires a classifier")
    if cfg.mode is MeasurementMode.SC and rng is None:
        raise ConfigError("soft classification requires an RNG for NLOS range draws")
    if params is None:
        params = PropagationParams(sensing_range_m=cfg.sensing_range_m)
    diag = MeasurementDiagnostics()
    poses = particles.poses
    for obs in observations:
        ap = ap_map.get(obs.ap_id)
        dr = fspl_distance(obs.rssi_dbm, ap.tx_power_dbm, ap.freq_mhz, params)
        de = np.linalg.norm(poses - ap.position, axis=1)
        dz, contribute, _ = _mode_dz(
            de, dr, cfg.mode, classifier, cfg.sensing_range_m, cfg.nlos_range_std_m, rng,
            cfg.sc_dn_per_step,
        )
        if contribute.any():
            sz = cfg.sz_for(obs.ap_id)
            particles.weights[contribute] *= _likelihood(dz[contribute], sz, cfg.likelihood_form)
            diag.n_contributions += int(contribute.sum())
    diag.collapsed = normalize_weights(particles)
    return diag


def normalize_weights(particles: ParticleSet) -> bool:
    """Scale weights to sum to one; reset to uniform (and report) on collapse."""
    total = float(particles.weights.sum())
    if not math.isfinite(total) or total <= 0.0:
        particles.weights[:] = 1.0 / len(particles)
        return True
    particles.weights /= total
    return False


def _resample_indices(weights: np.ndarray, rng: np.random.Generator, kind: str) -> np.ndarray:
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # guard against accumulated rounding
    if kind == "systematic":
        points = (rng.random() + np.arange(n)) / n
    else:
        points = rng.random(n)
    return np.searchsorted(cdf, points, side="right").clip(max=n - 1)


def resample(particles: ParticleSet, rng: np.random.Generator, kind: str = "multinomial") -> ParticleSet:
    """Draw n particles with replacement by weight; output weights are uniform."""
    idx = _resample_indices(particles.weights, rng, kind)
    particles.poses = particles.poses[idx]
    particles.weights = np.full(len(particles), 1.0 / len(particles))
    return particles


def estimate_pose(particles: ParticleSet) -> np.ndarray:
    """Weighted mean of the particle poses (weights assumed normalized)."""
    return particles.weights @ particles.poses


@dataclass(frozen=True)
class StepData:
    """One filter step: odometry command (None at step 0) plus observations."""

    command: np.ndarray | None
    observations: tuple[RssiObservation, ...]
    gt_pose: np.ndarray | None = None


def simulate_steps(
    plan: FloorPlan,
    ap_map: ApMap,
    trajectory: Trajectory,
    params: PropagationParams,
    rng: np.random.Generator,
) -> list[StepData]:
    """Synthesize per-waypoint observations for a ground-truth trajectory."""
    steps = []
    for t, pose in enumerate(trajectory.waypoints):
        obs = []
        for ap in ap_map:
            o = synthesize_rssi(plan, pose, ap, params, rng, step=t)
            if o is not None:
                obs.append(o)
        command = None if t == 0 else trajectory.commands[t - 1]
        steps.append(StepData(command=command, observations=tuple(obs), gt_pose=pose.copy()))
    return steps


@dataclass
class FilterRun:
    """Per-step outputs of one filter execution."""

    estimates: np.ndarray  # (T, 3)
    n_eff: np.ndarray  # (T,)
    gt: np.ndarray | None  # (T, 3) when ground truth was available
    collapse_steps: list[int]

    @property
    def errors(self) -> np.ndarray | None:
        if self.gt is None:
            return None
        return np.linalg.norm(self.estimates - self.gt, axis=1)


def _should_resample(particles: ParticleSet, cfg: FilterConfig) -> bool:
    if cfg.resample_every_step:
        return True
    return particles.n_eff() < cfg.resample_ess_frac * len(particles)


def run_particle_filter(
    plan: FloorPlan,
    ap_map: ApMap,
    source: Trajectory | Sequence[StepData],
    cfg: FilterConfig,
    classifier=None,
    *,
    seed: int | np.random.SeedSequence,
    params: PropagationParams | None = None,
) -> FilterRun:
    """Localize along a trajectory (observations synthesized) or a replayed log.

    The seed is split into independent substreams for initialization, motion
    noise, NLOS range draws, resampling, and channel synthesis, so runs are
    bit-reproducible and mode changes never shift unrelated draws.
    """
    if params is None:
        params = PropagationParams(sensing_range_m=cfg.sensing_range_m)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_s, motion_s, meas_s, resample_s, channel_s = (np.random.default_rng(c) for c in ss.spawn(5))

    if isinstance(source, Trajectory):
        steps = simulate_steps(plan, ap_map, source, params, channel_s)
    else:
        steps = list(source)

    particles = init_particles(cfg, plan, init_s)
    estimates = np.zeros((len(steps), 3))
    n_eff = np.zeros(len(steps))
    gt_rows = []
    collapse_steps: list[int] = []
    have_gt = all(s.gt_pose is not None for s in steps) and steps

    for t, step in enumerate(steps):
        if step.command is not None:
            particles.poses = _motion_batch(particles.poses, step.command, cfg.motion_noise_std, motion_s)
        diag = measurement_update(particles, step.observations, ap_map, cfg, classifier, meas_s, params)
        if diag.collapsed:
            collapse_steps.append(t)
        estimates[t] = estimate_pose(particles)
        n_eff[t] = particles.n_eff()
        if have_gt:
            gt_rows.append(step.gt_pose)
        if _should_resample(particles, cfg):
            resample(particles, resample_s, cfg.resample_kind)

    return FilterRun(
        estimates=estimates,
        n_eff=n_eff,
        gt=np.asarray(gt_rows) if have_gt else None,
        collapse_steps=collapse_steps,
    )

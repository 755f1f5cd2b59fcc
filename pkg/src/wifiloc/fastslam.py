"""FastSLAM: particle filter over poses with per-particle landmark EKFs.

Each particle carries its own Gaussian estimate (mean, covariance) of every
access point's position, updated by a range-only EKF. The importance weights
reuse the same three-mode residual model as the known-map filter, except the
map distance de is taken against the particle's own landmark mean. Whole
particles (pose plus landmark map) are copied together on resampling, which
is what lets the filter correct a perturbed prior map while localizing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .filters import (
    FilterConfig,
    FilterRun,
    MeasurementMode,
    StepData,
    _likelihood,
    _mode_dz,
    _motion_batch,
    _resample_indices,
    _should_resample,
    simulate_steps,
)
from .propagation import ApMap, PropagationParams, fspl_distance
from .world import FloorPlan, Trajectory, as_xyz

_MIN_RANGE = 1e-6  # below this the range Jacobian is undefined


@dataclass
class LandmarkEkf:
    """Gaussian estimate of one access point position."""

    ap_id: str
    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.cov = np.asarray(self.cov, dtype=float).reshape(3, 3)


@dataclass(frozen=True)
class SlamConfig:
    """FastSLAM-specific knobs on top of FilterConfig."""

    ap_location_noise_std: tuple[float, float, float] = (0.0, 0.0, 0.0)
    prior_var_floor: float = 1e-6  # m^2, keeps exact priors updatable but pinned
    ekf_range_std_m: float | None = 8.0  # None: reuse the per-AP likelihood sz
    gate_ekf_by_classification: bool = True
    ekf_los_belief_min: float = 0.5  # classification gate threshold for map updates
    ekf_innovation_gate_m: float | None = 5.0  # skip updates with |nu| above this
    ekf_warmup_spread_m: float | None = None  # optionally hold map updates until the cloud concentrates
    cov_eig_floor: float = 1e-12

    def __post_init__(self):
        if any(s < 0 for s in self.ap_location_noise_std):
            raise ConfigError("ap location noise stds must be >= 0")
        if self.ekf_range_std_m is not None and not self.ekf_range_std_m > 0:
            raise ConfigError("ekf_range_std_m must be > 0")
        if self.ekf_innovation_gate_m is not None and not self.ekf_innovation_gate_m > 0:
            raise ConfigError("ekf_innovation_gate_m must be > 0")
        if self.ekf_warmup_spread_m is not None and not self.ekf_warmup_spread_m > 0:
            raise ConfigError("ekf_warmup_spread_m must be > 0")


def init_landmark(
    prior_position,
    ap_location_noise_std,
    rng: np.random.Generator,
    *,
    ap_id: str = "",
    var_floor: float = 1e-6,
) -> LandmarkEkf:
    """Perturb a blueprint position into an initial landmark estimate.

    The mean is the prior plus per-axis Gaussian noise (the inaccurate map);
    the covariance is the diagonal of the squared stds, floored so that an
    exact prior still admits updates.
    """
    std = np.asarray(ap_location_noise_std, dtype=float).reshape(3)
    if np.any(std < 0):
        raise ConfigError("ap location noise stds must be >= 0")
    mean = as_xyz(prior_position) + rng.normal(size=3) * std
    cov = np.diag(np.maximum(std**2, var_floor))
    return LandmarkEkf(ap_id=ap_id, mean=mean, cov=cov)


def _repair_covs(covs: np.ndarray, eig_floor: float) -> np.ndarray:
    """Re-symmetrize; eigen-floor any covariance whose diagonal degenerated."""
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    diag = np.diagonal(covs, axis1=1, axis2=2)
    bad = np.flatnonzero(diag.min(axis=1) < eig_floor)
    if len(bad):
        vals, vecs = np.linalg.eigh(covs[bad])
        vals = np.clip(vals, eig_floor, None)
        covs[bad] = np.einsum("kij,kj,klj->kil", vecs, vals, vecs)
        covs[bad] = 0.5 * (covs[bad] + covs[bad].transpose(0, 2, 1))
    return covs


def _ekf_range_batch(means, covs, poses, dr, sz, eig_floor=1e-12, innovation_gate_m=None):
    """Range-only EKF update, vectorized over particles.

    h = |mean - pose|, H = (mean - pose)^T / h, S = H C H^T + sz^2,
    K = C H^T / S; rows with h < _MIN_RANGE are skipped (singular geometry),
    as are rows failing the optional |nu| <= innovation_gate_m consistency
    check. Returns (means, covs, innovations, skipped_mask).
    """
    delta = means - poses
    h = np.linalg.norm(delta, axis=1)
    ok = h >= _MIN_RANGE
    nu = np.where(ok, dr - h, 0.0)
    if innovation_gate_m is not None:
        ok &= np.abs(nu) <= innovation_gate_m
    out_means = means.copy()
    out_covs = covs.copy()
    if ok.any():
        hh = h[ok]
        H = delta[ok] / hh[:, None]
        CH = np.einsum("kij,kj->ki", covs[ok], H)
        S = np.einsum("ki,ki->k", H, CH) + sz * sz
        K = CH / S[:, None]
        out_means[ok] = means[ok] + K * nu[ok, None]
        out_covs[ok] = covs[ok] - np.einsum("ki,kj->kij", K, CH)
        out_covs[ok] = _repair_covs(out_covs[ok], eig_floor)
    return out_means, out_covs, nu, ~ok


@dataclass
class EkfUpdateInfo:
    innovation: float
    predicted_range: float
    skipped: bool


def ekf_range_update(lm: LandmarkEkf, pose, dr: float, sz: float) -> tuple[LandmarkEkf, EkfUpdateInfo]:
    """Single-landmark range update; delegates to the batched implementation."""
    if not sz > 0:
        raise ConfigError("sz must be > 0")
    pose_a = as_xyz(pose)
    means, covs, nus, skipped = _ekf_range_batch(
        lm.mean[None, :], lm.cov[None, :, :], pose_a[None, :], float(dr), float(sz)
    )
    h = float(np.linalg.norm(lm.mean - pose_a))
    return (
        LandmarkEkf(ap_id=lm.ap_id, mean=means[0], cov=covs[0]),
        EkfUpdateInfo(innovation=float(nus[0]), predicted_range=h, skipped=bool(skipped[0])),
    )


@dataclass
class SlamParticleSet:
    """Particle cloud where every particle owns a landmark map.

    Landmark slot j of every particle tracks ap_ids[j]; ``initialized[j]``
    is False until that AP has a prior or a first sighting.
    """

    poses: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)
    ap_ids: list[str]
    lm_means: np.ndarray  # (n, m, 3)
    lm_covs: np.ndarray  # (n, m, 3, 3)
    initialized: np.ndarray  # (m,) bool

    def __len__(self) -> int:
        return len(self.weights)

    def n_eff(self) -> float:
        s = float((self.weights**2).sum())
        return 1.0 / s if s > 0 else 0.0

    def slot(self, ap_id: str) -> int:
        return self.ap_ids.index(ap_id)

    def landmark(self, i: int, ap_id: str) -> LandmarkEkf:
        j = self.slot(ap_id)
        return LandmarkEkf(ap_id=ap_id, mean=self.lm_means[i, j].copy(), cov=self.lm_covs[i, j].copy())

    def add_slot(self, ap_id: str) -> int:
        n = len(self)
        self.ap_ids.append(ap_id)
        self.lm_means = np.concatenate([self.lm_means, np.zeros((n, 1, 3))], axis=1)
        self.lm_covs = np.concatenate([self.lm_covs, np.zeros((n, 1, 3, 3))], axis=1)
        self.initialized = np.append(self.initialized, False)
        return len(self.ap_ids) - 1


def init_slam_particles(
    cfg: FilterConfig,
    slam: SlamConfig,
    plan: FloorPlan,
    prior_map: ApMap,
    init_rng: np.random.Generator,
    landmark_rng: np.random.Generator,
) -> tuple[SlamParticleSet, dict[str, np.ndarray]]:
    """Particles from the pose prior plus one shared perturbed landmark prior.

    The prior perturbation is drawn once per AP (the blueprint is wrong the
    same way for everyone); per-particle estimates then diverge through their
    own EKF updates. Returns the particle set and the perturbed priors used.
    """
    from .filters import init_particles

    base = init_particles(cfg, plan, init_rng)
    n = len(base)
    m = len(prior_map)
    means = np.zeros((n, m, 3))
    covs = np.zeros((n, m, 3, 3))
    priors: dict[str, np.ndarray] = {}
    ap_ids = []
    for j, ap in enumerate(prior_map):
        lm = init_landmark(
            ap.position, slam.ap_location_noise_std, landmark_rng,
            ap_id=ap.ap_id, var_floor=slam.prior_var_floor,
        )
        means[:, j] = lm.mean
        covs[:, j] = lm.cov
        priors[ap.ap_id] = lm.mean.copy()
        ap_ids.append(ap.ap_id)
    return (
        SlamParticleSet(
            poses=base.poses, weights=base.weights, ap_ids=ap_ids,
            lm_means=means, lm_covs=covs, initialized=np.ones(m, dtype=bool),
        ),
        priors,
    )


def _bootstrap_landmark(particles: SlamParticleSet, j: int, dr: float, rng: np.random.Generator):
    """First sighting of an AP with no prior: ring sample around each particle."""
    n = len(particles)
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    particles.lm_means[:, j] = particles.poses + dr * direction
    particles.lm_covs[:, j] = np.eye(3) * (dr / 2.0) ** 2
    particles.initialized[j] = True


@dataclass
class SlamStepDiagnostics:
    collapsed: bool = False
    n_contributions: int = 0
    n_ekf_updates: int = 0


def fastslam_step(
    particles: SlamParticleSet,
    u,
    observations,
    ap_map: ApMap,
    cfg: FilterConfig,
    slam: SlamConfig,
    classifier=None,
    *,
    motion_rng: np.random.Generator,
    meas_rng: np.random.Generator,
    landmark_rng: np.random.Generator,
    params: PropagationParams | None = None,
) -> SlamStepDiagnostics:
    """One FastSLAM iteration: motion, per-AP weighting plus EKF, normalize.

    The weight update is the same Alg-style residual model as the known-map
    filter with de taken against each particle's own landmark mean. EKF
    updates are gated the same way the weight contributions are (always for
    NC, LOS-labeled for HC, p_LOS >= 0.5 for SC) unless gating is disabled.
    """
    if cfg.mode is not MeasurementMode.NC and classifier is None:
        raise ConfigError(f"mode {cfg.mode.value} requires a classifier")
    if params is None:
        params = PropagationParams(sensing_range_m=cfg.sensing_range_m)
    diag = SlamStepDiagnostics()
    if u is not None:
        particles.poses = _motion_batch(particles.poses, u, cfg.motion_noise_std, motion_rng)
    ekf_enabled = True
    if slam.ekf_warmup_spread_m is not None:
        center = particles.weights @ particles.poses
        spread = math.sqrt(
            float(particles.weights @ ((particles.poses - center) ** 2).sum(axis=1))
        )
        ekf_enabled = spread <= slam.ekf_warmup_spread_m
    for obs in observations:
        try:
            j = particles.slot(obs.ap_id)
        except ValueError:
            j = particles.add_slot(obs.ap_id)
        if obs.ap_id in ap_map.ids:
            ap = ap_map.get(obs.ap_id)
            tx, freq = ap.tx_power_dbm, ap.freq_mhz
        else:
            tx, freq = 0.0, 2400.0
        dr = fspl_distance(obs.rssi_dbm, tx, freq, params)
        if not particles.initialized[j]:
            _bootstrap_landmark(particles, j, dr, landmark_rng)
            continue
        de = np.linalg.norm(particles.lm_means[:, j] - particles.poses, axis=1)
        dz, contribute, los_belief = _mode_dz(
            de, dr, cfg.mode, classifier, cfg.sensing_range_m, cfg.nlos_range_std_m, meas_rng,
            cfg.sc_dn_per_step,
        )
        sz = cfg.sz_for(obs.ap_id)
        if contribute.any():
            particles.weights[contribute] *= _likelihood(dz[contribute], sz, cfg.likelihood_form)
            diag.n_contributions += int(contribute.sum())
        in_range = de <= cfg.sensing_range_m
        if slam.gate_ekf_by_classification:
            gate = in_range & (los_belief >= slam.ekf_los_belief_min)
        else:
            gate = in_range
        if not ekf_enabled:
            gate[:] = False
        if gate.any():
            ekf_sz = slam.ekf_range_std_m if slam.ekf_range_std_m is not None else sz
            means, covs, _, _ = _ekf_range_batch(
                particles.lm_means[gate, j], particles.lm_covs[gate, j],
                particles.poses[gate], dr, ekf_sz, slam.cov_eig_floor,
                slam.ekf_innovation_gate_m,
            )
            particles.lm_means[gate, j] = means
            particles.lm_covs[gate, j] = covs
            diag.n_ekf_updates += int(gate.sum())
    total = float(particles.weights.sum())
    if not math.isfinite(total) or total <= 0.0:
        particles.weights[:] = 1.0 / len(particles)
        diag.collapsed = True
    else:
        particles.weights /= total
    return diag


def resample_slam(particles: SlamParticleSet, rng: np.random.Generator, kind: str = "multinomial"):
    """Resample whole particles: pose and landmark map are copied together."""
    idx = _resample_indices(particles.weights, rng, kind)
    particles.poses = particles.poses[idx]
    particles.lm_means = particles.lm_means[idx]
    particles.lm_covs = particles.lm_covs[idx]
    particles.weights = np.full(len(particles), 1.0 / len(particles))
    return particles


@dataclass(frozen=True)
class MapEstimate:
    ap_id: str
    mean: np.ndarray
    spread_m: float  # weighted rms deviation of per-particle means
    trace_cov: float  # weighted mean EKF covariance trace


def map_estimate(particles: SlamParticleSet) -> dict[str, MapEstimate]:
    """Weighted mean of per-particle landmark means; unseen APs are absent."""
    out: dict[str, MapEstimate] = {}
    w = particles.weights
    for j, ap_id in enumerate(particles.ap_ids):
        if not particles.initialized[j]:
            continue
        means = particles.lm_means[:, j]
        est = w @ means
        spread = math.sqrt(float(w @ ((means - est) ** 2).sum(axis=1)))
        trace = float(w @ np.trace(particles.lm_covs[:, j], axis1=1, axis2=2))
        out[ap_id] = MapEstimate(ap_id=ap_id, mean=est, spread_m=spread, trace_cov=trace)
    return out


@dataclass
class ApReport:
    ap_id: str
    true_pos: np.ndarray | None
    est_pos: np.ndarray
    err_m: float
    initial_err_m: float
    trace_cov: float


@dataclass
class SlamRun(FilterRun):
    ap_reports: list[ApReport] = field(default_factory=list)

    @property
    def mean_initial_ap_error(self) -> float:
        return float(np.mean([r.initial_err_m for r in self.ap_reports]))

    @property
    def mean_final_ap_error(self) -> float:
        return float(np.mean([r.err_m for r in self.ap_reports]))


def run_fastslam(
    plan: FloorPlan,
    ap_map: ApMap,
    source: Trajectory | Sequence[StepData],
    cfg: FilterConfig,
    slam: SlamConfig,
    classifier=None,
    *,
    seed: int | np.random.SeedSequence,
    params: PropagationParams | None = None,
    prior_map: ApMap | None = None,
) -> SlamRun:
    """FastSLAM over a simulated trajectory or a replayed log.

    ``ap_map`` provides ground-truth AP positions (for observation synthesis
    and error reporting); the filter itself only ever sees the perturbed
    prior. ``prior_map`` overrides the prior positions (replay: blueprint
    entries), defaulting to the true map perturbed by the configured noise.
    Stream layout matches the known-map filter so degenerate configurations
    reproduce it step for step.
    """
    if params is None:
        params = PropagationParams(sensing_range_m=cfg.sensing_range_m)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_s, motion_s, meas_s, resample_s, channel_s, landmark_s = (
        np.random.default_rng(c) for c in ss.spawn(6)
    )
    if isinstance(source, Trajectory):
        steps = simulate_steps(plan, ap_map, source, params, channel_s)
    else:
        steps = list(source)

    particles, priors = init_slam_particles(
        cfg, slam, plan, prior_map if prior_map is not None else ap_map, init_s, landmark_s
    )
    estimates = np.zeros((len(steps), 3))
    n_eff = np.zeros(len(steps))
    gt_rows = []
    collapse_steps: list[int] = []
    have_gt = all(s.gt_pose is not None for s in steps) and steps

    for t, step in enumerate(steps):
        diag = fastslam_step(
            particles, step.command, step.observations, ap_map, cfg, slam, classifier,
            motion_rng=motion_s, meas_rng=meas_s, landmark_rng=landmark_s, params=params,
        )
        if diag.collapsed:
            collapse_steps.append(t)
        estimates[t] = particles.weights @ particles.poses
        n_eff[t] = particles.n_eff()
        if have_gt:
            gt_rows.append(step.gt_pose)
        if _should_resample(particles, cfg):
            resample_slam(particles, resample_s, cfg.resample_kind)

    final_map = map_estimate(particles)
    true_by_id = {ap.ap_id: ap.position for ap in ap_map}
    reports = []
    for ap_id, est in final_map.items():
        true_pos = true_by_id.get(ap_id)
        err = float(np.linalg.norm(est.mean - true_pos)) if true_pos is not None else float("nan")
        init_err = (
            float(np.linalg.norm(priors[ap_id] - true_pos))
            if ap_id in priors and true_pos is not None
            else float("nan")
        )
        reports.append(
            ApReport(ap_id=ap_id, true_pos=true_pos, est_pos=est.mean,
                     err_m=err, initial_err_m=init_err, trace_cov=est.trace_cov)
        )
    return SlamRun(
        estimates=estimates,
        n_eff=n_eff,
        gt=np.asarray(gt_rows) if have_gt else None,
        collapse_steps=collapse_steps,
        ap_reports=reports,
    )

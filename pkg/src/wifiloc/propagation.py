"""RSSI synthesis over a floor plan and FSPL range inversion.

The channel is a free-space log-distance model plus a fixed per-wall
attenuation and log-normal shadowing. It replaces a full ray tracer while
keeping the statistic that separates LOS from NLOS: obstructed links lose
extra power, so the range recovered by inverting the free-space formula
comes out longer than the true distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataAssociationError
from .world import FloorPlan, Trajectory, as_xyz, euclidean_distance, line_of_sight, random_walk, wall_crossings
from . import world as _world

FSPL_K_KM_MHZ = 32.44  # constant for distances in km and frequencies in MHz


@dataclass(frozen=True)
class AccessPoint:
    """A WiFi transmitter with a known identity and position."""

    ap_id: str
    position: np.ndarray  # (3,) meters
    tx_power_dbm: float = 0.0
    freq_mhz: float = 2400.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)
        if not self.ap_id:
            raise ConfigError("access point id must be a non-empty string")
        if not self.freq_mhz > 0:
            raise ConfigError(f"access point {self.ap_id}: freq_mhz must be > 0")


class ApMap:
    """A set of access points with pairwise-distinct ids."""

    def __init__(self, aps):
        aps = tuple(aps)
        ids = [ap.ap_id for ap in aps]
        if len(set(ids)) != len(ids):
            raise ConfigError("access point ids must be pairwise distinct")
        self.aps = aps
        self._by_id = {ap.ap_id: ap for ap in aps}

    @classmethod
    def from_plan(cls, plan: FloorPlan) -> "ApMap":
        return cls(
            AccessPoint(
                ap_id=e["id"],
                position=np.asarray(e["pos_m"], dtype=float),
                tx_power_dbm=e["tx_dbm"],
                freq_mhz=e["freq_mhz"],
            )
            for e in plan.ap_entries
        )

    def __iter__(self):
        return iter(self.aps)

    def __len__(self):
        return len(self.aps)

    def get(self, ap_id: str) -> AccessPoint:
        try:
            return self._by_id[ap_id]
        except KeyError:
            raise DataAssociationError(f"unknown access point id {ap_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return [ap.ap_id for ap in self.aps]

    def positions(self) -> np.ndarray:
        return np.stack([ap.position for ap in self.aps])


@dataclass(frozen=True)
class PropagationParams:
    """Channel constants; the defaults target 2.4 GHz indoor WiFi."""

    fspl_constant_k: float = FSPL_K_KM_MHZ
    wall_loss_db: float = 4.0
    shadowing_sigma_db: float = 3.0
    sensing_range_m: float = 15.0

    def __post_init__(self):
        if self.wall_loss_db < 0 or self.shadowing_sigma_db < 0:
            raise ConfigError("loss and shadowing terms must be non-negative")
        if not self.sensing_range_m > 0:
            raise ConfigError("sensing_range_m must be > 0")


@dataclass(frozen=True)
class RssiObservation:
    """One received-power report from one access point at one step."""

    ap_id: str
    rssi_dbm: float
    step: int = 0


@dataclass(frozen=True)
class LabeledSample:
    """Classifier training unit: true range, FSPL range, LOS(1)/NLOS(0)."""

    d_euc_m: float
    d_fspl_m: float
    label: int


def path_loss_db(distance_m: float, freq_mhz: float, params: PropagationParams, walls: int = 0) -> float:
    """Free-space path loss plus per-wall attenuation, in dB."""
    if not distance_m > 0:
        raise ValueError(f"distance_m must be > 0, got {distance_m}")
    if not freq_mhz > 0:
        raise ValueError(f"freq_mhz must be > 0, got {freq_mhz}")
    return (
        20.0 * math.log10(distance_m / 1000.0)
        + 20.0 * math.log10(freq_mhz)
        + params.fspl_constant_k
        + walls * params.wall_loss_db
    )


def fspl_distance(
    rssi_dbm: float,
    tx_power_dbm: float,
    freq_mhz: float,
    params: PropagationParams | None = None,
) -> float:
    """Invert the free-space formula: observed loss back to range in meters.

    Observed loss is ``tx_power_dbm - rssi_dbm``; with a 0 dBm transmitter
    this is |RSSI|. Wall losses are indistinguishable from distance here,
    which is exactly why NLOS links look longer than they are.
    """
    if params is None:
        params = PropagationParams()
    if not (math.isfinite(rssi_dbm) and math.isfinite(tx_power_dbm)):
        raise ValueError("rssi_dbm and tx_power_dbm must be finite")
    if not freq_mhz > 0:
        raise ValueError(f"freq_mhz must be > 0, got {freq_mhz}")
    loss_db = tx_power_dbm - rssi_dbm
    d_km = 10.0 ** ((loss_db - params.fspl_constant_k - 20.0 * math.log10(freq_mhz)) / 20.0)
    return d_km * 1000.0


def link_geometry(plan: FloorPlan, pose, ap: AccessPoint) -> tuple[float, int, bool]:
    """True distance, RF wall crossings, and LOS flag for one device-AP link."""
    d = euclidean_distance(pose, ap.position)
    walls = wall_crossings(plan, pose, ap.position)
    return d, walls, walls == 0


def _link_rssi(plan, pose, ap, params, shadow_db):
    """(rssi, d_euc, walls) for an audible link, or None beyond sensing range."""
    d = _world._dist3(pose if not hasattr(pose, "as_array") else pose.as_array(), ap.position)
    if d > params.sensing_range_m:
        return None
    walls = wall_crossings(plan, pose, ap.position)
    dc = max(d, 1e-3)  # co-located device and AP: clamp to 1 mm
    rssi = ap.tx_power_dbm - path_loss_db(dc, ap.freq_mhz, params, walls) - shadow_db
    return rssi, d, walls


def synthesize_rssi(
    plan: FloorPlan,
    pose,
    ap: AccessPoint,
    params: PropagationParams,
    rng: np.random.Generator,
    step: int = 0,
) -> RssiObservation | None:
    """Simulate one RSSI report; None when the AP is out of sensing range.

    The device-AP link always consumes one shadowing draw from ``rng`` so the
    stream stays aligned whether or not the AP is audible.
    """
    shadow = rng.normal(0.0, params.shadowing_sigma_db) if params.shadowing_sigma_db > 0 else 0.0
    link = _link_rssi(plan, pose, ap, params, shadow)
    if link is None:
        return None
    return RssiObservation(ap_id=ap.ap_id, rssi_dbm=link[0], step=step)


@dataclass(frozen=True)
class SampleRecord:
    """Provenance-rich companion to a LabeledSample."""

    path_index: int
    step: int
    pose: np.ndarray
    ap_id: str
    rssi_dbm: float
    d_euc_m: float
    d_fspl_m: float
    walls: int
    label: int


@dataclass
class DatasetResult:
    samples: list[LabeledSample]
    records: list[SampleRecord]
    n_paths: int
    n_walk_timeouts: int = 0

    @property
    def n_los(self) -> int:
        return sum(1 for s in self.samples if s.label == 1)

    @property
    def n_nlos(self) -> int:
        return len(self.samples) - self.n_los

    @property
    def los_fraction(self) -> float:
        return self.n_los / len(self.samples) if self.samples else float("nan")


def _sample_free_pose(plan: FloorPlan, rng: np.random.Generator, z_m: float | None) -> np.ndarray:
    layer = plan.z_layer_of(z_m) if z_m is not None else None
    cells = plan.free_motion_cells(z_layer=layer)
    if len(cells) == 0:
        raise ConfigError("no free cells available at the requested height")
    cell = cells[rng.integers(len(cells))]
    center = plan.cell_center(cell)
    jitter = rng.uniform(-0.5, 0.5, 2) * plan.resolution
    pose = center + np.array([jitter[0], jitter[1], 0.0])
    if z_m is not None:
        pose[2] = z_m
    return pose


def generate_dataset(
    plan: FloorPlan,
    ap_map: ApMap,
    n_paths: int,
    params: PropagationParams,
    rng: np.random.Generator,
    *,
    step_size: float = 2.0,
    z_m: float | None = 1.0,
    three_d: bool = False,
    goal_bias: float = 0.2,
    max_steps: int = 10_000,
) -> DatasetResult:
    """Random-walk the plan and emit one labeled sample per audible link.

    Each path draws its own RNG substream from ``rng`` so generation is
    reproducible and parallelizable per path. Walks that hit the step cap
    contribute their partial trajectory and are counted in the result.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if len(ap_map) == 0:
        raise ConfigError("dataset generation needs at least one access point")
    samples: list[LabeledSample] = []
    records: list[SampleRecord] = []
    timeouts = 0
    for path_idx, stream in enumerate(rng.spawn(n_paths)):
        start = _sample_free_pose(plan, stream, None if three_d else z_m)
        goal = _sample_free_pose(plan, stream, None if three_d else z_m)
        try:
            traj = random_walk(
                plan, start, goal, step_size, stream,
                goal_bias=goal_bias, max_steps=max_steps, three_d=three_d,
            )
        except _world.WalkTimeout as e:
            traj = e.trajectory
            timeouts += 1
        sigma = params.shadowing_sigma_db
        for step, pose in enumerate(traj.waypoints):
            for ap in ap_map:
                shadow = stream.normal(0.0, sigma) if sigma > 0 else 0.0
                link = _link_rssi(plan, pose, ap, params, shadow)
                if link is None:
                    continue
                rssi, d, walls = link
                d_fspl = fspl_distance(rssi, ap.tx_power_dbm, ap.freq_mhz, params)
                label = 1 if walls == 0 else 0
                samples.append(LabeledSample(d, d_fspl, label))
                records.append(
                    SampleRecord(
                        path_index=path_idx, step=step, pose=pose.copy(),
                        ap_id=ap.ap_id, rssi_dbm=rssi,
                        d_euc_m=d, d_fspl_m=d_fspl, walls=walls, label=label,
                    )
                )
    return DatasetResult(samples=samples, records=records, n_paths=n_paths, n_walk_timeouts=timeouts)


DATASET_HEADER = "d_euc_m,d_fspl_m,label"


def write_dataset(path, samples, meta: dict | None = None) -> None:
    """Write samples as CSV plus a YAML provenance sidecar (``<path>.meta.yaml``)."""
    path = Path(path)
    lines = [DATASET_HEADER]
    for s in samples:
        lines.append(f"{s.d_euc_m!r},{s.d_fspl_m!r},{s.label}")
    path.write_text("\n".join(lines) + "\n")
    if meta is not None:
        sidecar = path.with_name(path.name + ".meta.yaml")
        sidecar.write_text(yaml.safe_dump(meta, sort_keys=True))


def read_dataset(path) -> list[LabeledSample]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise ConfigError(f"{path}: expected dataset header '{DATASET_HEADER}'")
    samples = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            de, dr, label = line.split(",")
            samples.append(LabeledSample(float(de), float(dr), int(label)))
        except ValueError as e:
            raise ConfigError(f"{path}:{i}: bad dataset row {line!r}") from e
    return samples

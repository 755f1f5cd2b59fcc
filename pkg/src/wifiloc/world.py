"""Floor-plan world model: occupancy grid, line-of-sight tests, random-walk trajectories.

The floor plan is a 3D boolean occupancy grid (True = obstacle cell) at a
metric resolution (default 0.25 m/cell). Doors are obstacle cells flagged as
passable for motion; whether they block RF is a load-time option (default:
transparent). Visibility between two poses is decided by a 3D Bresenham
voxel walk over the grid, excluding the endpoint cells so that a transmitter
mounted inside a wall cell does not occlude itself.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from .errors import DegenerateMapError, OutOfBoundsError, PlanFormatError, WalkTimeout

Vec3Like = "Sequence[float] | np.ndarray | Pose"

PLAN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Pose:
    """A position in the global metric frame."""

    x: float
    y: float
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


def as_xyz(p) -> np.ndarray:
    """Coerce a Pose or 3-sequence to a float (3,) array."""
    if isinstance(p, Pose):
        return p.as_array()
    a = np.asarray(p, dtype=float).reshape(3)
    return a


@dataclass(frozen=True)
class MotionCommand:
    """Intended displacement for one trajectory step, in meters."""

    dx: float
    dy: float
    dz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """Ordered waypoints plus the per-step commands that connect them."""

    waypoints: np.ndarray  # (n, 3)
    commands: np.ndarray  # (n - 1, 3)

    def __post_init__(self):
        wps = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)
        cmds = np.asarray(self.commands, dtype=float).reshape(-1, 3)
        if len(cmds) != max(len(wps) - 1, 0):
            raise ValueError(
                f"trajectory has {len(wps)} waypoints but {len(cmds)} commands"
            )
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "commands", cmds)

    def __len__(self) -> int:
        return len(self.waypoints)

    def pose(self, i: int) -> Pose:
        x, y, z = self.waypoints[i]
        return Pose(float(x), float(y), float(z))

    def to_csv(self, path) -> None:
        lines = ["step,x,y,z"]
        for i, (x, y, z) in enumerate(self.waypoints):
            lines.append(f"{i},{x!r},{y!r},{z!r}")
        Path(path).write_text("\n".join(lines) + "\n")


class SightResult(NamedTuple):
    los: bool
    cells: np.ndarray  # (k, 3) int cell indices traversed, ordered a -> b


@dataclass(frozen=True)
class FloorPlan:
    """Immutable 3D occupancy grid with door metadata.

    ``grid`` marks obstacle cells. ``door_mask`` flags cells belonging to
    door volumes; those are always passable for motion and, unless
    ``rf_doors_opaque`` is set, treated as free space for RF as well.
    """

    grid: np.ndarray  # (nx, ny, nz) bool, True = obstacle
    resolution: float
    origin: np.ndarray  # (3,) meters
    door_mask: np.ndarray  # (nx, ny, nz) bool
    rf_doors_opaque: bool = False
    ap_entries: tuple = ()  # raw validated AP dicts from the plan document
    source_hash: str = ""
    motion_blocked: np.ndarray = field(init=False, repr=False)
    rf_blocked: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=bool)
        doors = np.ascontiguousarray(self.door_mask, dtype=bool)
        if grid.ndim != 3:
            raise PlanFormatError("occupancy grid must be 3-dimensional")
        if doors.shape != grid.shape:
            raise PlanFormatError("door mask shape does not match grid shape")
        if not self.resolution > 0:
            raise PlanFormatError(f"resolution must be > 0, got {self.resolution}")
        motion = grid & ~doors
        rf = grid.copy() if self.rf_doors_opaque else motion.copy()
        for arr in (grid, doors, motion, rf):
            arr.flags.writeable = False
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        origin.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "door_mask", doors)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "motion_blocked", motion)
        object.__setattr__(self, "rf_blocked", rf)
        # scalar caches for the hot cell-lookup path
        object.__setattr__(self, "_origin_t", tuple(float(v) for v in origin))
        object.__setattr__(self, "_dims_t", grid.shape)
        if not (~motion).any():
            raise DegenerateMapError("floor plan has no free cells")

    @property
    def dimensions(self) -> tuple[int, int, int]:
        return self.grid.shape

    @property
    def size_m(self) -> np.ndarray:
        return np.asarray(self.grid.shape) * self.resolution

    def _cell_unchecked(self, p) -> tuple[int, int, int]:
        if isinstance(p, Pose):
            px, py, pz = p.x, p.y, p.z
        else:
            px, py, pz = float(p[0]), float(p[1]), float(p[2])
        ox, oy, oz = self._origin_t
        r = self.resolution
        return (
            math.floor((px - ox) / r),
            math.floor((py - oy) / r),
            math.floor((pz - oz) / r),
        )

    def in_bounds(self, p) -> bool:
        i, j, k = self._cell_unchecked(p)
        nx, ny, nz = self._dims_t
        return 0 <= i < nx and 0 <= j < ny and 0 <= k < nz

    def cell_of(self, p) -> tuple[int, int, int]:
        cell = self._cell_unchecked(p)
        nx, ny, nz = self._dims_t
        if not (0 <= cell[0] < nx and 0 <= cell[1] < ny and 0 <= cell[2] < nz):
            raise OutOfBoundsError(f"pose {as_xyz(p).tolist()} outside plan extent")
        return cell

    def cell_center(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell, dtype=float) + 0.5) * self.resolution

    def is_free_for_motion(self, p) -> bool:
        return not self.motion_blocked[self.cell_of(p)]

    def free_motion_cells(self, z_layer: int | None = None) -> np.ndarray:
        """Indices of motion-free cells, optionally restricted to one z layer."""
        free = ~self.motion_blocked
        if z_layer is not None:
            mask = np.zeros_like(free)
            mask[:, :, z_layer] = free[:, :, z_layer]
            free = mask
        return np.argwhere(free)

    def z_layer_of(self, z_m: float) -> int:
        k = int(math.floor((z_m - self.origin[2]) / self.resolution))
        if k < 0 or k >= self.grid.shape[2]:
            raise OutOfBoundsError(f"height {z_m} m outside plan extent")
        return k


def _require(cond: bool, msg: str):
    if not cond:
        raise PlanFormatError(msg)


def _check_box(box, i: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    _require(
        isinstance(box, dict) and set(box) == {"min", "max"},
        f"{kind}[{i}] must be a mapping with exactly 'min' and 'max'",
    )
    try:
        lo = np.asarray(box["min"], dtype=float).reshape(3)
        hi = np.asarray(box["max"], dtype=float).reshape(3)
    except (TypeError, ValueError):
        raise PlanFormatError(f"{kind}[{i}] min/max must be 3-vectors of numbers")
    _require(bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))),
             f"{kind}[{i}] has non-finite coordinates")
    _require(bool(np.all(hi >= lo)), f"{kind}[{i}] has max < min")
    return lo, hi


def _rasterize_box(mask: np.ndarray, lo, hi, origin, res: float):
    # A cell is covered iff its center lies in [lo, hi); half-open so that
    # boxes sharing a face never double-claim a cell column.
    dims = np.asarray(mask.shape)
    lo_idx = np.ceil((lo - origin) / res - 0.5 - 1e-9).astype(int)
    hi_idx = np.ceil((hi - origin) / res - 0.5 - 1e-9).astype(int)  # exclusive
    lo_idx = np.maximum(lo_idx, 0)
    hi_idx = np.minimum(hi_idx, dims)
    if np.all(hi_idx > lo_idx):
        mask[lo_idx[0]:hi_idx[0], lo_idx[1]:hi_idx[1], lo_idx[2]:hi_idx[2]] = True


_PLAN_FIELDS = {"format", "resolution_m", "size_m", "walls", "doors", "aps"}


def load_floor_plan(source, *, rf_doors_opaque: bool = False) -> FloorPlan:
    """Load a floor plan from a YAML document (path, YAML string, or dict).

    Document schema (format 1): ``resolution_m``, ``size_m: [X, Y, Z]``,
    ``walls``/``doors`` as lists of axis-aligned boxes ``{min: [x,y,z],
    max: [x,y,z]}``, and ``aps`` as ``{id, pos_m, tx_dbm, freq_mhz}`` entries.
    """
    if isinstance(source, dict):
        doc = source
        raw = yaml.safe_dump(source, sort_keys=True).encode()
    else:
        text = Path(source).read_text()
        raw = text.encode()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise PlanFormatError(f"unparseable plan document: {e}") from e
    _require(isinstance(doc, dict), "plan document must be a mapping")
    unknown = set(doc) - _PLAN_FIELDS
    _require(not unknown, f"unknown plan fields: {sorted(unknown)}")
    _require(doc.get("format") == PLAN_FORMAT_VERSION,
             f"plan 'format' must be {PLAN_FORMAT_VERSION}")

    res = doc.get("resolution_m")
    _require(isinstance(res, (int, float)) and math.isfinite(res) and res > 0,
             "field 'resolution_m' must be a positive number")
    res = float(res)

    size = doc.get("size_m")
    _require(isinstance(size, (list, tuple)) and len(size) == 3,
             "field 'size_m' must be a 3-vector [X, Y, Z]")
    size = np.asarray(size, dtype=float)
    _require(bool(np.all(np.isfinite(size)) and np.all(size > 0)),
             "field 'size_m' entries must be positive")

    origin = np.zeros(3)
    dims = np.ceil(size / res - 1e-9).astype(int)
    grid = np.zeros(tuple(dims), dtype=bool)
    doors = np.zeros(tuple(dims), dtype=bool)

    walls = doc.get("walls", []) or []
    _require(isinstance(walls, list), "field 'walls' must be a list")
    for i, box in enumerate(walls):
        lo, hi = _check_box(box, i, "walls")
        _rasterize_box(grid, lo, hi, origin, res)

    door_boxes = doc.get("doors", []) or []
    _require(isinstance(door_boxes, list), "field 'doors' must be a list")
    for i, box in enumerate(door_boxes):
        lo, hi = _check_box(box, i, "doors")
        _rasterize_box(doors, lo, hi, origin, res)

    aps = doc.get("aps", []) or []
    _require(isinstance(aps, list), "field 'aps' must be a list")
    seen_ids = set()
    ap_entries = []
    for i, ap in enumerate(aps):
        _require(isinstance(ap, dict), f"aps[{i}] must be a mapping")
        _require(set(ap) <= {"id", "pos_m", "tx_dbm", "freq_mhz"},
                 f"aps[{i}] has unknown fields")
        ap_id = ap.get("id")
        _require(isinstance(ap_id, str) and ap_id != "", f"aps[{i}].id must be a non-empty string")
        _require(ap_id not in seen_ids, f"aps[{i}].id {ap_id!r} is duplicated")
        seen_ids.add(ap_id)
        pos = ap.get("pos_m")
        _require(isinstance(pos, (list, tuple)) and len(pos) == 3,
                 f"aps[{i}].pos_m must be a 3-vector")
        pos = [float(v) for v in pos]
        _require(all(math.isfinite(v) for v in pos), f"aps[{i}].pos_m must be finite")
        _require(all(origin[k] <= pos[k] < origin[k] + dims[k] * res for k in range(3)),
                 f"aps[{i}].pos_m lies outside the plan extent")
        tx = float(ap.get("tx_dbm", 0.0))
        freq = float(ap.get("freq_mhz", 2400.0))
        _require(freq > 0, f"aps[{i}].freq_mhz must be > 0")
        ap_entries.append({"id": ap_id, "pos_m": pos, "tx_dbm": tx, "freq_mhz": freq})

    return FloorPlan(
        grid=grid,
        resolution=res,
        origin=origin,
        door_mask=doors,
        rf_doors_opaque=rf_doors_opaque,
        ap_entries=tuple(ap_entries),
        source_hash=hashlib.sha256(raw).hexdigest(),
    )


def save_plan_document(doc: dict, path) -> None:
    """Write a plan document dict as canonical YAML."""
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def _bresenham3d(c0, c1) -> np.ndarray:
    """Integer 3D Bresenham walk, inclusive of both endpoint cells.

    Closed-form vectorization of the classic driving-axis loop: after t
    steps along the driving axis d, a secondary axis with delta e has
    advanced floor((2*e*t + d) / (2*d)) cells.
    """
    x0, y0, z0 = (int(v) for v in c0)
    x1, y1, z1 = (int(v) for v in c1)
    dx, dy, dz = abs(x1 - x0), abs(y1 - y0), abs(z1 - z0)
    sx = 1 if x1 >= x0 else -1
    sy = 1 if y1 >= y0 else -1
    sz = 1 if z1 >= z0 else -1
    n = max(dx, dy, dz)
    if n == 0:
        return np.array([[x0, y0, z0]], dtype=np.int64)
    t = np.arange(n + 1, dtype=np.int64)
    if dx >= dy and dx >= dz:
        xs = x0 + sx * t
        ys = y0 + sy * ((2 * dy * t + dx) // (2 * dx))
        zs = z0 + sz * ((2 * dz * t + dx) // (2 * dx))
    elif dy >= dx and dy >= dz:
        ys = y0 + sy * t
        xs = x0 + sx * ((2 * dx * t + dy) // (2 * dy))
        zs = z0 + sz * ((2 * dz * t + dy) // (2 * dy))
    else:
        zs = z0 + sz * t
        ys = y0 + sy * ((2 * dy * t + dz) // (2 * dz))
        xs = x0 + sx * ((2 * dx * t + dz) // (2 * dz))
    return np.stack([xs, ys, zs], axis=1)


def _traverse(plan: FloorPlan, a, b) -> tuple[np.ndarray, bool]:
    """Canonical-order Bresenham cells from a to b plus whether they were swapped.

    Traversal always starts from the lexicographically smaller cell so the
    visited set (and hence LOS) is symmetric in (a, b).
    """
    ca = plan.cell_of(a)
    cb = plan.cell_of(b)
    swapped = cb < ca
    if swapped:
        ca, cb = cb, ca
    cells = _bresenham3d(ca, cb)
    if swapped:
        cells = cells[::-1]
    return cells, swapped


def line_of_sight(plan: FloorPlan, a, b, *, for_motion: bool = False) -> SightResult:
    """Visibility between two in-bounds poses.

    Returns NLOS iff any traversed cell strictly between the endpoint cells
    is blocked. ``for_motion`` selects the motion occupancy (doors passable)
    instead of the RF occupancy.
    """
    cells, _ = _traverse(plan, a, b)
    blocked = plan.motion_blocked if for_motion else plan.rf_blocked
    interior = cells[1:-1]
    if len(interior) == 0:
        return SightResult(True, cells)
    hit = blocked[interior[:, 0], interior[:, 1], interior[:, 2]]
    return SightResult(not bool(hit.any()), cells)


def wall_crossings(plan: FloorPlan, a, b, *, for_motion: bool = False) -> int:
    """Number of distinct blocked runs crossed between a and b.

    Consecutive blocked cells along the traversal count as a single wall.
    """
    cells, _ = _traverse(plan, a, b)
    blocked = plan.motion_blocked if for_motion else plan.rf_blocked
    interior = cells[1:-1]
    if len(interior) == 0:
        return 0
    hit = blocked[interior[:, 0], interior[:, 1], interior[:, 2]]
    if not hit.any():
        return 0
    # count False -> True transitions, including a leading True
    return int(hit[0]) + int(np.count_nonzero(hit[1:] & ~hit[:-1]))


def _dist3(a, b) -> float:
    """Unvalidated scalar distance between two 3-sequences (hot path)."""
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    dz = float(a[2]) - float(b[2])
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def euclidean_distance(x, m) -> float:
    """Straight-line distance in meters between two positions."""
    a = as_xyz(x)
    b = as_xyz(m)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("euclidean_distance requires finite coordinates")
    return _dist3(a, b)


def _unit_direction(rng: np.random.Generator, three_d: bool) -> np.ndarray:
    if three_d:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        while n < 1e-12:
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
        return v / n
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([math.cos(theta), math.sin(theta), 0.0])


def random_walk(
    plan: FloorPlan,
    start,
    goal,
    step_size: float = 2.0,
    rng: np.random.Generator | None = None,
    *,
    goal_bias: float = 0.2,
    max_steps: int = 10_000,
    three_d: bool = False,
) -> Trajectory:
    """Collision-free random walk from start toward goal.

    Per step: with probability ``goal_bias`` head straight for the goal,
    otherwise pick a uniformly random direction; reject steps that leave the
    map, land in an obstacle, or cross a wall (doors are passable). The walk
    terminates by stepping onto the goal once it is within ``step_size`` and
    reachable, or raises WalkTimeout (carrying the partial trajectory) after
    ``max_steps`` proposal iterations.
    """
    if rng is None:
        raise ValueError("random_walk requires a seeded Generator")
    if not step_size > 0:
        raise ValueError("step_size must be > 0")
    start_a = as_xyz(start)
    goal_a = as_xyz(goal)
    for name, p in (("start", start_a), ("goal", goal_a)):
        if not plan.in_bounds(p):
            raise OutOfBoundsError(f"{name} pose {p.tolist()} outside plan extent")
        if not plan.is_free_for_motion(p):
            raise ValueError(f"{name} pose {p.tolist()} lies inside an obstacle")

    waypoints = [start_a.copy()]
    commands: list[np.ndarray] = []
    if np.array_equal(start_a, goal_a):
        return Trajectory(np.asarray(waypoints), np.zeros((0, 3)))

    cur = start_a.copy()
    for _ in range(max_steps):
        gap = goal_a - cur
        dist = float(np.linalg.norm(gap))
        if dist <= step_size and line_of_sight(plan, cur, goal_a, for_motion=True).los:
            commands.append(gap)
            waypoints.append(goal_a.copy())
            return Trajectory(np.asarray(waypoints), np.asarray(commands))
        if rng.random() < goal_bias:
            direction = gap / dist
            if not three_d:
                nxy = np.linalg.norm(direction[:2])
                direction = (
                    np.array([direction[0], direction[1], 0.0]) / nxy
                    if nxy > 1e-12
                    else _unit_direction(rng, three_d=False)
                )
        else:
            direction = _unit_direction(rng, three_d)
        cand = cur + direction * step_size
        if not plan.in_bounds(cand):
            continue
        if not plan.is_free_for_motion(cand):
            continue
        if not line_of_sight(plan, cur, cand, for_motion=True).los:
            continue
        commands.append(cand - cur)
        waypoints.append(cand.copy())
        cur = cand
    raise WalkTimeout(
        f"no route to goal within {max_steps} proposals",
        trajectory=Trajectory(np.asarray(waypoints), np.asarray(commands)),
    )

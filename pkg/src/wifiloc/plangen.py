"""Procedural floor-plan documents: a fixed office layout and randomized variants.

Plans are built as document dicts (the same schema ``load_floor_plan``
consumes): a corridor running the long axis, rooms on both sides separated
by partitions, and a 1 m door from each room onto the corridor.
"""
from __future__ import annotations

import numpy as np

WALL = 0.25  # wall thickness, one grid cell at default resolution
DOOR_WIDTH = 1.0
DOOR_HEIGHT = 2.25


def _box(lo, hi):
    return {"min": [float(v) for v in lo], "max": [float(v) for v in hi]}


def _rooms_layout(size_x, size_y, size_z, partitions_x, ap_specs, resolution):
    """Corridor-and-rooms document for a size_x by size_y footprint."""
    cy = size_y / 2.0
    corr_lo, corr_hi = cy - 1.0, cy + 1.0  # 2 m corridor
    walls = [
        _box((0, 0, 0), (size_x, WALL, size_z)),
        _box((0, size_y - WALL, 0), (size_x, size_y, size_z)),
        _box((0, 0, 0), (WALL, size_y, size_z)),
        _box((size_x - WALL, 0, 0), (size_x, size_y, size_z)),
        _box((0, corr_lo - WALL, 0), (size_x, corr_lo, size_z)),
        _box((0, corr_hi, 0), (size_x, corr_hi + WALL, size_z)),
    ]
    for x in partitions_x:
        walls.append(_box((x, WALL, 0), (x + WALL, corr_lo - WALL, size_z)))
        walls.append(_box((x, corr_hi + WALL, 0), (x + WALL, size_y - WALL, size_z)))

    doors = []
    edges = [WALL] + [x + WALL for x in partitions_x] + [size_x - WALL]
    for left, right in zip(edges[:-1], edges[1:]):
        cx = (left + right) / 2.0
        doors.append(_box((cx - DOOR_WIDTH / 2, corr_lo - WALL, 0),
                          (cx + DOOR_WIDTH / 2, corr_lo, DOOR_HEIGHT)))
        doors.append(_box((cx - DOOR_WIDTH / 2, corr_hi, 0),
                          (cx + DOOR_WIDTH / 2, corr_hi + WALL, DOOR_HEIGHT)))

    aps = [
        {"id": ap_id, "pos_m": [float(x), float(y), float(z)],
         "tx_dbm": 0.0, "freq_mhz": 2400.0}
        for ap_id, (x, y, z) in ap_specs
    ]
    return {
        "format": 1,
        "resolution_m": resolution,
        "size_m": [float(size_x), float(size_y), float(size_z)],
        "walls": walls,
        "doors": doors,
        "aps": aps,
    }


def office_plan(resolution: float = 0.25) -> dict:
    """A 52 m x 9.5 m office: central corridor, eight rooms per side, 8 APs."""
    size_x, size_y, size_z = 52.0, 9.5, 3.0
    partitions = [6.5 * k for k in range(1, 8)]
    # irregular spacing keeps the range posterior unimodal; a few corridor
    # APs give the walker regular LOS links, the room APs supply NLOS ones
    ap_specs = [
        ("ap-01", (2.5, 1.6, 2.5)),
        ("ap-02", (9.0, 4.1, 2.5)),
        ("ap-03", (17.5, 2.4, 2.5)),
        ("ap-04", (24.0, 5.4, 2.5)),
        ("ap-05", (30.5, 7.9, 2.5)),
        ("ap-06", (34.0, 1.5, 2.5)),
        ("ap-07", (41.5, 4.2, 2.5)),
        ("ap-08", (47.75, 3.0, 2.5)),
    ]
    return _rooms_layout(size_x, size_y, size_z, partitions, ap_specs, resolution)


def random_rooms_plan(seed: int, resolution: float = 0.25) -> dict:
    """A randomized corridor-and-rooms plan with 5-10 APs."""
    rng = np.random.default_rng(seed)
    size_x = float(rng.uniform(24.0, 56.0))
    size_y = float(rng.uniform(8.0, 14.0))
    size_z = 3.0
    partitions = []
    x = 0.0
    while True:
        x += float(rng.uniform(4.0, 8.0))
        if x >= size_x - 4.0:
            break
        partitions.append(round(x / resolution) * resolution)
    n_aps = int(rng.integers(5, 11))
    ap_specs = []
    cy = size_y / 2.0
    for i in range(n_aps):
        ax = float(rng.uniform(1.0, size_x - 1.0))
        # alternate between room bands and the corridor
        band = rng.integers(3)
        if band == 0:
            ay = float(rng.uniform(1.0, cy - 1.5))
        elif band == 1:
            ay = float(rng.uniform(cy + 1.5, size_y - 1.0))
        else:
            ay = cy
        ap_specs.append((f"ap-{i:02d}", (ax, ay, 2.5)))
    return _rooms_layout(size_x, size_y, size_z, partitions, ap_specs, resolution)

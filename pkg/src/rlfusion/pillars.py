"""Point-cloud pillarization for radar and LiDAR.

Points are binned into vertical columns over a square BEV grid and padded
to a fixed number of points per pillar.  Augmented channel layout is fixed:

    radar : [x, y, z, v_r, v_a, rcs, dx_c, dy_c, dz_c, dx_m, dy_m, dz_m]
    lidar : [x, y, z, intensity,     dx_c, dy_c, dz_c, dx_m, dy_m, dz_m]

where *_c are offsets to the pillar center and *_m offsets to the mean of
the points retained in the pillar.  The radar doppler/reflectivity triple
(v_r, v_a, rcs) is the indicative slice; the spatial feature excludes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

RADAR_COLS = ("x", "y", "z", "v_r", "v_a", "rcs")
LIDAR_COLS = ("x", "y", "z", "intensity")
INDICATIVE_CHANNELS = (3, 4, 5)       # v_r, v_a, rcs within the radar layout
RADAR_SPATIAL_DIM = 9                 # x,y,z + 6 offsets
LIDAR_SPATIAL_DIM = 10                # x,y,z,intensity + 6 offsets


@dataclass(frozen=True)
class GridConfig:
    """BEV grid geometry plus pillar capacity limits.

    Ranges must be integer multiples of pillar_size.  Rows index y,
    columns index x.
    """

    x_range: tuple[float, float] = (0.0, 25.6)
    y_range: tuple[float, float] = (-12.8, 12.8)
    z_range: tuple[float, float] = (-1.0, 3.0)
    pillar_size: float = 0.4
    max_pillars: int = 4096
    max_points_per_pillar: int = 16

    def __post_init__(self):
        if self.max_points_per_pillar < 1:
            raise ContractError("max_points_per_pillar must be >= 1")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.pillar_size
            if abs(n - round(n)) > 1e-9:
                raise ContractError("grid range must divide evenly by pillar_size")

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size))

    def cell_of(self, x, y):
        """(row, col) arrays for coordinate arrays; no range check."""
        col = np.floor((np.asarray(x) - self.x_range[0]) / self.pillar_size).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_range[0]) / self.pillar_size).astype(np.int64)
        return row, col

    def cell_center(self, row, col):
        """(cx, cy) of cell centers for row/col arrays or scalars."""
        cx = self.x_range[0] + (np.asarray(col, dtype=np.float64) + 0.5) * self.pillar_size
        cy = self.y_range[0] + (np.asarray(row, dtype=np.float64) + 0.5) * self.pillar_size
        return cx, cy


@dataclass
class PillarSet:
    """Padded per-pillar point features plus integer BEV coordinates.

    features: (num_pillars, P, C) float array, rows past num_points zeroed.
    coords:   (num_pillars, 2) int array of unique (row, col) cells.
    """

    features: np.ndarray
    coords: np.ndarray
    num_points: np.ndarray
    modality: str
    grid: GridConfig = field(repr=False, default=None)

    @property
    def num_pillars(self) -> int:
        return self.features.shape[0]

    def indicative_slice(self) -> np.ndarray:
        """Radar doppler/reflectivity channels, aligned with spatial_features."""
        if self.modality != "radar":
            raise ContractError("indicative_slice is defined for radar pillars only")
        return self.features[:, :, list(INDICATIVE_CHANNELS)]

    def spatial_features(self) -> np.ndarray:
        """Geometric channels: everything except the radar indicative triple."""
        if self.modality == "radar":
            keep = [c for c in range(self.features.shape[2]) if c not in INDICATIVE_CHANNELS]
            return self.features[:, :, keep]
        return self.features


def _in_range(pts: np.ndarray, grid: GridConfig) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return ((x >= grid.x_range[0]) & (x < grid.x_range[1])
            & (y >= grid.y_range[0]) & (y < grid.y_range[1])
            & (z >= grid.z_range[0]) & (z < grid.z_range[1]))


def build_pillars(points: np.ndarray, grid: GridConfig, modality: str,
                  seed: int = 0) -> PillarSet:
    """Bin points into pillars with offset-augmented features.

    points: (n, 6) radar rows [x,y,z,v_r,v_a,rcs] or (n, 4) lidar rows
    [x,y,z,intensity].  Out-of-range points are dropped.  Pillars holding
    more than P points are subsampled uniformly at random (seeded); when
    the pillar count exceeds max_pillars the sparsest pillars are dropped.
    """
    if modality not in ("radar", "lidar"):
        raise ContractError(f"unknown modality {modality!r}")
    raw_dim = len(RADAR_COLS) if modality == "radar" else len(LIDAR_COLS)
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        points = points.reshape(0, raw_dim)
    if points.ndim != 2 or points.shape[1] != raw_dim:
        raise ShapeError(f"{modality} points need {raw_dim} columns, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ContractError("points must be finite")

    feat_dim = raw_dim + 6
    p_cap = grid.max_points_per_pillar
    empty = PillarSet(np.zeros((0, p_cap, feat_dim)), np.zeros((0, 2), dtype=np.int64),
                      np.zeros((0,), dtype=np.int64), modality, grid)
    if points.shape[0] == 0:
        return empty

    keep = _in_range(points, grid)
    pts = points[keep]
    if pts.shape[0] == 0:
        return empty

    row, col = grid.cell_of(pts[:, 0], pts[:, 1])
    key = row * grid.width + col
    order = np.argsort(key, kind="stable")
    pts, key, row, col = pts[order], key[order], row[order], col[order]
    boundaries = np.flatnonzero(np.diff(key)) + 1
    groups = np.split(np.arange(pts.shape[0]), boundaries)

    rng = np.random.default_rng([seed, 0x9E3779B9])
    pillars = []
    for g in groups:
        r, c = int(row[g[0]]), int(col[g[0]])
        if len(g) > p_cap:
            g = np.sort(rng.choice(g, size=p_cap, replace=False))
        pillars.append((r, c, pts[g]))

    if len(pillars) > grid.max_pillars:
        pillars.sort(key=lambda t: (-t[2].shape[0], t[0], t[1]))
        pillars = pillars[:grid.max_pillars]
        pillars.sort(key=lambda t: (t[0], t[1]))

    n = len(pillars)
    features = np.zeros((n, p_cap, feat_dim))
    coords = np.zeros((n, 2), dtype=np.int64)
    counts = np.zeros((n,), dtype=np.int64)
    cz = 0.5 * (grid.z_range[0] + grid.z_range[1])
    for i, (r, c, p) in enumerate(pillars):
        k = p.shape[0]
        cx = grid.x_range[0] + (c + 0.5) * grid.pillar_size
        cy = grid.y_range[0] + (r + 0.5) * grid.pillar_size
        mean = p[:, :3].mean(axis=0)
        features[i, :k, :raw_dim] = p
        features[i, :k, raw_dim:raw_dim + 3] = p[:, :3] - np.array([cx, cy, cz])
        features[i, :k, raw_dim + 3:] = p[:, :3] - mean
        coords[i] = (r, c)
        counts[i] = k
    return PillarSet(features, coords, counts, modality, grid)

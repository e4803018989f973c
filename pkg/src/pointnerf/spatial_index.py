"""Perspective-space grid over neural points.

Points are registered into a uniform grid over ``(u, v, 1/z)`` of a reference
camera, so each cell is a depth-scaled ("spherical") voxel in world space.
The grid answers K-nearest queries restricted to the ``(2e+1)^3`` cells around
a query and tells the ray marcher which samples lie near occupied space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import CameraModel, Ray


@dataclass(frozen=True)
class QueryConfig:
    K: int = 8
    R: float = 0.1
    neighborhood_extent: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.neighborhood_extent < 0:
            raise ValueError("neighborhood_extent must be >= 0")


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)


class StaleIndexError(RuntimeError):
    pass


class PerspectiveGrid:
    def __init__(self, camera: CameraModel, cell_size, positions: np.ndarray,
                 generation: int = 0, extent: int = 1, world_cell: float | None = None):
        cell_size = np.asarray(cell_size, dtype=np.float64).reshape(3)
        if np.any(cell_size <= 0) or not np.all(np.isfinite(cell_size)):
            raise ValueError("cell size must be positive")
        self.camera = camera
        self.cell_size = cell_size
        self.extent = int(extent)
        self.generation = generation
        self.world_cell = world_cell
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.n_points = len(positions)

        cam = camera.to_camera(positions)
        visible = cam[:, 2] > 0
        self.visible = visible
        self.skipped = int((~visible).sum())
        self.point_ids = np.flatnonzero(visible)
        z = cam[visible, 2]
        persp = np.stack([camera.fx * cam[visible, 0] / z + camera.cx,
                          camera.fy * cam[visible, 1] / z + camera.cy,
                          1.0 / z], axis=1)
        self.persp = persp
        if len(persp):
            lo, hi = persp.min(axis=0), persp.max(axis=0)
            self.depth_range = (float(z.min()), float(z.max()))
        else:
            lo = hi = np.zeros(3)
            self.depth_range = (0.0, 0.0)
        self.origin = lo - self.extent * cell_size
        self.dims = np.floor((hi - self.origin) / cell_size).astype(np.int64) + 1 + self.extent
        self.bounds = (self.origin, self.origin + self.dims * cell_size)

        cells = self.cell_of(persp)
        self.point_cells = cells
        keys = self.key_of(cells)
        order = np.lexsort((self.point_ids, keys))
        self.sorted_ids = self.point_ids[order]
        sorted_keys = keys[order]
        self.cell_keys, self.cell_start, self.cell_count = np.unique(
            sorted_keys, return_index=True, return_counts=True)

        offsets = np.array(list(product(range(-self.extent, self.extent + 1), repeat=3)), dtype=np.int64)
        self.offsets = offsets
        if len(cells):
            occ = self.key_to_cell(self.cell_keys)
            near = (occ[:, None, :] + offsets[None]).reshape(-1, 3)
            inside = np.all((near >= 0) & (near < self.dims), axis=1)
            self.near_keys = np.unique(self.key_of(near[inside]))
        else:
            self.near_keys = np.zeros(0, dtype=np.int64)

    # -- cell bookkeeping -------------------------------------------------
    def cell_of(self, persp: np.ndarray) -> np.ndarray:
        return np.floor((persp - self.origin) / self.cell_size).astype(np.int64)

    def key_of(self, cells: np.ndarray) -> np.ndarray:
        ny, nz = self.dims[1], self.dims[2]
        return (cells[..., 0] * ny + cells[..., 1]) * nz + cells[..., 2]

    def key_to_cell(self, keys: np.ndarray) -> np.ndarray:
        ny, nz = self.dims[1], self.dims[2]
        return np.stack([keys // (ny * nz), (keys // nz) % ny, keys % nz], axis=-1)

    def inside(self, cells: np.ndarray) -> np.ndarray:
        return np.all((cells >= 0) & (cells < self.dims), axis=-1)

    @property
    def occupied_cells(self) -> dict[tuple[int, int, int], list[int]]:
        cells = self.key_to_cell(self.cell_keys)
        return {tuple(int(c) for c in cell): self.sorted_ids[s:s + n].tolist()
                for cell, s, n in zip(cells, self.cell_start, self.cell_count)}

    def occupancy_histogram(self) -> dict[int, int]:
        values, counts = np.unique(self.cell_count, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))

    def check_fresh(self, cloud) -> None:
        gen = getattr(cloud, "generation", None)
        if gen is not None and gen != self.generation:
            raise StaleIndexError("point cloud changed since the index was built")

    def perspective_of(self, x: np.ndarray):
        """Perspective coords and a mask of points in front of the camera."""
        cam = self.camera.to_camera(x)
        front = cam[..., 2] > 0
        z = np.where(front, cam[..., 2], 1.0)
        q = np.stack([self.camera.fx * cam[..., 0] / z + self.camera.cx,
                      self.camera.fy * cam[..., 1] / z + self.camera.cy, 1.0 / z], axis=-1)
        return q, front

    def near_occupied(self, x: np.ndarray) -> np.ndarray:
        """True where the cell of ``x`` has an occupied cell within its neighborhood."""
        q, front = self.perspective_of(x)
        cells = self.cell_of(q)
        ok = front & self.inside(cells)
        keys = self.key_of(np.where(ok[..., None], cells, 0))
        return ok & np.isin(keys, self.near_keys)


def build_index(cloud, camera: CameraModel, cell_size=None, extent: int = 1,
                points_per_cell: float = 4.0) -> PerspectiveGrid:
    """Register every point in front of ``camera``; ``cell_size`` defaults to ~4 points per cell."""
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    generation = getattr(cloud, "generation", 0)
    world_cell = None
    if cell_size is None:
        world_cell = default_world_cell(positions, camera, points_per_cell)
        cell_size = perspective_cell_size(positions, camera, world_cell)
    return PerspectiveGrid(camera, cell_size, positions, generation, extent, world_cell)


def perspective_cell_size(positions, camera: CameraModel, world_cell: float) -> np.ndarray:
    """Perspective cell whose world extent at the median depth is ``world_cell``."""
    z = camera.to_camera(positions)[:, 2]
    z = z[z > 0]
    zm = float(np.median(z)) if len(z) else 1.0
    return np.array([camera.fx * world_cell / zm, camera.fy * world_cell / zm, world_cell / zm ** 2])


def default_world_cell(positions, camera: CameraModel, points_per_cell: float = 4.0) -> float:
    positions = np.asarray(positions, dtype=np.float64)
    cam = camera.to_camera(positions)
    pos = positions[cam[:, 2] > 0]
    if len(pos) < 2:
        return 1.0
    span = float(np.max(pos.max(axis=0) - pos.min(axis=0))) or 1.0

    def mean_occupancy(h):
        grid = PerspectiveGrid(camera, perspective_cell_size(pos, camera, h), pos, extent=0)
        return len(pos) / len(grid.cell_keys)

    lo, hi = span * 1e-4, span
    for _ in range(40):
        mid = math.sqrt(lo * hi)
        if mean_occupancy(mid) < points_per_cell:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.01:
            break
    return math.sqrt(lo * hi)


def default_query_config(grid: PerspectiveGrid, K: int = 8) -> QueryConfig:
    """R defaults to the world-space diagonal of a cell at the median depth."""
    h = grid.world_cell if grid.world_cell is not None else 1.0
    return QueryConfig(K=K, R=h * math.sqrt(3.0), neighborhood_extent=grid.extent)


def query_neighbors_batch(grid: PerspectiveGrid, positions: np.ndarray, xs: np.ndarray, K: int, R: float):
    """K nearest candidates within R for many queries.

    Returns flat arrays ``(query_idx, point_idx, dist)`` ordered by query, then
    distance, then point index; at most K entries per query.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if len(xs) == 0 or len(grid.cell_keys) == 0:
        return empty
    q, front = grid.perspective_of(xs)
    base = grid.cell_of(q)
    ok = front & grid.inside(base)
    qids = np.flatnonzero(ok)
    if len(qids) == 0:
        return empty
    cells = base[qids][:, None, :] + grid.offsets[None]  # (Q, C, 3)
    valid = grid.inside(cells)
    keys = grid.key_of(np.where(valid[..., None], cells, 0))
    pos = np.searchsorted(grid.cell_keys, keys)
    pos = np.minimum(pos, len(grid.cell_keys) - 1)
    found = valid & (grid.cell_keys[pos] == keys)
    counts = np.where(found, grid.cell_count[pos], 0).ravel()
    starts = np.where(found, grid.cell_start[pos], 0).ravel()
    total = int(counts.sum())
    if total == 0:
        return empty
    owner = np.repeat(np.repeat(qids, cells.shape[1]), counts)
    seg_begin = np.cumsum(counts) - counts
    elem = np.arange(total) - np.repeat(seg_begin, counts) + np.repeat(starts, counts)
    pid = grid.sorted_ids[elem]
    dist = np.linalg.norm(xs[owner] - positions[pid], axis=1)
    keep = dist <= R
    owner, pid, dist = owner[keep], pid[keep], dist[keep]
    order = np.lexsort((pid, dist, owner))
    owner, pid, dist = owner[order], pid[order], dist[order]
    first = np.searchsorted(owner, owner, side="left")
    rank = np.arange(len(owner)) - first
    keep = rank < K
    return owner[keep], pid[keep], dist[keep]


def query_neighbors(grid: PerspectiveGrid, cloud, x, cfg: QueryConfig) -> NeighborSet:
    grid.check_fresh(cloud)
    if cfg.neighborhood_extent != grid.extent:
        raise ValueError("query neighborhood extent differs from the grid's")
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
    _, pid, dist = query_neighbors_batch(grid, positions, np.asarray(x, dtype=np.float64)[None], cfg.K, cfg.R)
    return NeighborSet(pid, dist)


def sample_ts(t_near: float, t_far: float, step: float) -> np.ndarray:
    """Midpoints of consecutive ``step``-long segments covering [t_near, t_far]."""
    if not step > 0:
        raise ValueError("step must be positive")
    n = max(int(math.ceil((t_far - t_near) / step - 1e-12)), 1)
    return t_near + (np.arange(n) + 0.5) * step


def place_shading_points(grid: PerspectiveGrid, ray: Ray, step: float):
    """Uniform samples kept only near occupied cells, as ``(x_j, delta_j)`` arrays.

    Every retained sample carries ``delta = step``: the segment it stands for,
    so that gaps of skipped empty space never inflate a sample's opacity.
    """
    ts = sample_ts(ray.t_near, ray.t_far, step)
    xs = ray.at(ts)
    keep = grid.near_occupied(xs)
    return xs[keep], np.full(int(keep.sum()), float(step))

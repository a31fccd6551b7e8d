"""Spatial substrate: lattice grid, travel times and k-means region partitions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import _kmeans
from .errors import InvalidArgument

if TYPE_CHECKING:
    from .incidents import IncidentTrace

CellId = int


@dataclass(frozen=True)
class Cell:
    id: CellId
    centroid_x: float
    centroid_y: float


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular lattice of cells with a dense travel-time matrix in seconds.

    Cell ``i`` sits at row ``i // cols`` and column ``i % cols``. ``overridden``
    is set when the travel matrix came from a file rather than the lattice.
    """

    rows: int
    cols: int
    cell_size_km: float
    speed_kmh: float
    cells: tuple[Cell, ...]
    travel_seconds: np.ndarray
    overridden: bool = False
    _travel_rows: list[list[float]] = field(default_factory=list, repr=False)
    _paths: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.travel_seconds.setflags(write=False)
        if not self._travel_rows:
            object.__setattr__(self, "_travel_rows", self.travel_seconds.tolist())

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def travel_rows(self) -> list[list[float]]:
        """Travel matrix as nested lists, for scalar-heavy inner loops."""
        return self._travel_rows

    @property
    def centroids(self) -> np.ndarray:
        return np.array([(c.centroid_x, c.centroid_y) for c in self.cells], dtype=float)

    def row_col(self, cell: CellId) -> tuple[int, int]:
        return divmod(cell, self.cols)

    def cell_at(self, row: int, col: int) -> CellId:
        return row * self.cols + col

    def neighbors4(self, cell: CellId) -> list[CellId]:
        r, c = self.row_col(cell)
        out = []
        for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.rows and 0 <= cc < self.cols:
                out.append(self.cell_at(rr, cc))
        return out

    def distance_km(self, a: CellId, b: CellId) -> float:
        ca, cb = self.cells[a], self.cells[b]
        return math.hypot(ca.centroid_x - cb.centroid_x, ca.centroid_y - cb.centroid_y)

    def manhattan_path(self, a: CellId, b: CellId) -> list[CellId]:
        """Lattice path from ``a`` to ``b``, columns first, then rows."""
        cached = self._paths.get((a, b))
        if cached is not None:
            return cached
        ra, ca = self.row_col(a)
        rb, cb = self.row_col(b)
        path = [a]
        step = 1 if cb >= ca else -1
        for c in range(ca + step, cb + step, step):
            path.append(self.cell_at(ra, c))
        step = 1 if rb >= ra else -1
        for r in range(ra + step, rb + step, step):
            path.append(self.cell_at(r, cb))
        self._paths[(a, b)] = path
        return path

    def position_along(self, origin: CellId, dest: CellId, fraction: float) -> CellId:
        """Cell nearest the point ``fraction`` of the way from origin to dest.

        Positions are rounded along the Manhattan path with ties toward the
        origin. Grids with an overridden travel matrix have no meaningful
        lattice path, so the midpoint splits origin from destination.
        """
        if fraction <= 0.0 or origin == dest:
            return origin
        if fraction >= 1.0:
            return dest
        if self.overridden:
            return origin if fraction <= 0.5 else dest
        path = self.manhattan_path(origin, dest)
        steps = len(path) - 1
        idx = math.ceil(fraction * steps - 0.5)
        return path[max(0, min(steps, idx))]


def build_grid(rows: int, cols: int, cell_size_km: float, speed_kmh: float) -> Grid:
    if rows < 1 or cols < 1:
        raise InvalidArgument(f"grid dimensions must be positive, got {rows}x{cols}")
    if not cell_size_km > 0 or not speed_kmh > 0:
        raise InvalidArgument("cell_size_km and speed_kmh must be positive")
    cells = tuple(
        Cell(r * cols + c, (c + 0.5) * cell_size_km, (r + 0.5) * cell_size_km)
        for r in range(rows)
        for c in range(cols)
    )
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    steps = np.abs(rr[:, None] - rr[None, :]) + np.abs(cc[:, None] - cc[None, :])
    travel = steps * cell_size_km / speed_kmh * 3600.0
    return Grid(rows, cols, float(cell_size_km), float(speed_kmh), cells, travel.astype(float))


def travel_time(grid: Grid, src: CellId, dst: CellId) -> float:
    n = grid.n
    if not (0 <= src < n and 0 <= dst < n):
        raise IndexError(f"cell id out of range for grid of {n} cells: {src}, {dst}")
    return float(grid.travel_seconds[src, dst])


def load_travel_override(grid: Grid, path: str | Path) -> Grid:
    """Replace the lattice travel matrix with an n-by-n headerless CSV of seconds."""
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    m = np.array(rows, dtype=float)
    if m.shape != (grid.n, grid.n):
        raise InvalidArgument(f"travel override must be {grid.n}x{grid.n}, got {m.shape}")
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise InvalidArgument("travel override entries must be finite and non-negative")
    if np.any(np.diag(m) != 0):
        raise InvalidArgument("travel override diagonal must be zero")
    return Grid(grid.rows, grid.cols, grid.cell_size_km, grid.speed_kmh, grid.cells, m, overridden=True)


def save_travel_matrix(grid: Grid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in grid.travel_seconds:
            w.writerow([repr(float(x)) for x in row])


@dataclass(frozen=True)
class RegionPartition:
    region_of: tuple[int, ...]
    region_centroids: tuple[tuple[float, float], ...]
    k: int
    wcss_history: tuple[float, ...] = ()

    def cells_in(self, region: int) -> list[CellId]:
        return [c for c, r in enumerate(self.region_of) if r == region]

    def sizes(self) -> list[int]:
        return [sum(1 for r in self.region_of if r == j) for j in range(self.k)]


def partition_regions(
    grid: Grid, trace: "IncidentTrace | None", k: int, seed: int = 0, max_iters: int = 100
) -> RegionPartition:
    """Split the grid into ``k`` regions by k-means on historical incidents.

    Every incident contributes one sample at its cell centroid, so areas with
    many incidents end up with smaller regions. With no incidents (or fewer
    distinct incident cells than ``k``) the cell centroids themselves are
    clustered instead.
    """
    if k < 1 or k > grid.n:
        raise InvalidArgument(f"k must be in [1, {grid.n}], got {k}")
    cents = grid.centroids
    counts = np.zeros(grid.n)
    if trace is not None:
        for inc in trace.incidents:
            counts[inc.cell] += 1
    used = np.flatnonzero(counts > 0)
    if len(used) >= k:
        points, weights = cents[used], counts[used]
    else:
        points, weights = cents, np.ones(grid.n)
    result = _kmeans.lloyd(points, weights, k, seed, max_iters)
    labels, centers = _kmeans.assign_nonempty(cents, result.centers)
    return RegionPartition(
        region_of=tuple(int(x) for x in labels),
        region_centroids=tuple((float(x), float(y)) for x, y in centers),
        k=k,
        wcss_history=result.wcss_history,
    )

"""Fixed greedy p-median stationing, the baseline every planner starts from."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import InvalidArgument
from ..geo import CellId, Grid
from ..sim import Allocation, Snapshot


def weighted_cost(grid: Grid, rates: np.ndarray, sites: Sequence[CellId]) -> float:
    """Rate-weighted travel time from every cell to its nearest site."""
    if not sites:
        return float("inf")
    nearest = grid.travel_seconds[:, list(sites)].min(axis=1)
    return float(np.dot(rates, nearest))


def plan_static(
    rates: np.ndarray,
    grid: Grid,
    num_responders: int,
    waiting_cells: Sequence[CellId],
    capacity: int | None = None,
) -> Allocation:
    """Greedy weighted p-median placement.

    Responders are placed one at a time at the waiting cell that most lowers
    the rate-weighted travel time to the nearest placed responder. Ties go to
    the cell holding fewer responders, then to the lower cell id.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (grid.n,):
        raise InvalidArgument(f"need one rate per cell ({grid.n}), got shape {rates.shape}")
    cells = sorted(set(waiting_cells))
    if not cells:
        raise InvalidArgument("no waiting cells")
    T = grid.travel_seconds
    best_tt = np.full(grid.n, np.inf)
    counts = {c: 0 for c in cells}
    targets: list[CellId] = []
    for _ in range(num_responders):
        choice = None
        for c in cells:
            if capacity is not None and counts[c] >= capacity:
                continue
            cost = float(np.dot(rates, np.minimum(best_tt, T[:, c]))) if targets else float(np.dot(rates, T[:, c]))
            key = (cost, counts[c], c)
            if choice is None or key < choice:
                choice = key
        if choice is None:
            raise InvalidArgument("waiting-cell capacity cannot hold the fleet")
        c = choice[2]
        targets.append(c)
        counts[c] += 1
        best_tt = np.minimum(best_tt, T[:, c])
    return Allocation(tuple(targets))


class StaticPlanner:
    name = "static"
    local = False

    def __init__(self, allocation: Allocation):
        self.allocation = allocation

    def initial_allocation(self) -> Allocation:
        return self.allocation

    def plan(self, snapshot: Snapshot) -> Allocation:
        return self.allocation

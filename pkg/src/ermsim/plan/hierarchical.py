"""Two-level planner: queueing-based region quotas, then per-region MCTS."""
from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..geo import CellId, RegionPartition
from ..sim import EN_ROUTE, SERVICING, Allocation, Snapshot
from .mcts import MCTSConfig, movable, plan_centralized_mcts
from .model import PlanningModel
from .queueing import estimate_wait


@dataclasses.dataclass(frozen=True)
class QueueEstimate:
    lam: float
    mu: float
    servers: int
    wait_h: float


def region_service_rate(model: PlanningModel, cells: Sequence[CellId]) -> float:
    """Services per hour: one over (mean travel between region cells + mean on-scene time).

    The travel mean runs over all ordered pairs of region cells, the
    diagonal included.
    """
    idx = np.asarray(cells, dtype=int)
    travel = float(model.grid.travel_seconds[np.ix_(idx, idx)].mean())
    return 3600.0 / (travel + model.service.mean_s)


def _gain(lam: float, mu: float, c: int) -> tuple[int, float]:
    """Sort key for adding a server to a region; larger is better."""
    now = estimate_wait(lam, mu, c)
    nxt = estimate_wait(lam, mu, c + 1)
    if math.isinf(now):
        # unstable queue: rank by load per server after the addition
        return (1, lam / ((c + 1) * mu))
    return (0, lam * (now - nxt))


def allocate_counts(lams: Sequence[float], mus: Sequence[float], total: int) -> list[int]:
    """Responders per region by greedy marginal reduction of lambda-weighted wait.

    Every region first gets one responder (highest rate first when there are
    fewer responders than regions); the rest go one at a time where
    ``lam * W_q`` drops the most. Ties go to the lower region index.
    """
    k = len(lams)
    counts = [0] * k
    order = sorted(range(k), key=lambda r: (-lams[r], r))
    for r in order[:min(total, k)]:
        counts[r] = 1
    for _ in range(total - sum(counts)):
        best, best_key = 0, None
        for r in range(k):
            key = _gain(lams[r], mus[r], counts[r])
            if best_key is None or key > best_key:
                best, best_key = r, key
        counts[best] += 1
    return counts


def _retarget(view, cell: CellId, clock: float, T) -> object:
    if view.status in (EN_ROUTE, SERVICING):
        return dataclasses.replace(view, waiting_cell=cell, dest=cell, arrive=view.depart + T[view.origin][cell])
    here = view.location
    return dataclasses.replace(view, waiting_cell=cell, origin=here, dest=cell, depart=clock, arrive=clock + T[here][cell])


class HierarchicalPlanner:
    name = "hier"
    local = False

    def __init__(self, model: PlanningModel, partition: RegionPartition, mcts: MCTSConfig,
                 initial: Allocation | None = None):
        self.model = model
        self.partition = partition
        self.mcts = mcts
        self.initial = initial
        self.region_cells = [partition.cells_in(r) for r in range(partition.k)]
        self.region_waiting = [sorted({c for c in model.waiting_cells if partition.region_of[c] == r})
                               for r in range(partition.k)]
        for r, wc in enumerate(self.region_waiting):
            if not wc:
                raise ConfigError(f"region {r} has no waiting cells")
        self.mus = [region_service_rate(model, cells) for cells in self.region_cells]
        self.last_estimates: list[QueueEstimate] = []

    def initial_allocation(self) -> Allocation | None:
        return self.initial

    def high_level(self, snapshot: Snapshot) -> tuple[list, list[list[int]]]:
        """Move responders between regions toward the queueing quotas."""
        T = self.model.grid.travel_rows
        region_of = self.partition.region_of
        views = list(snapshot.responders)
        rates = np.asarray(self.model.demand.rates(snapshot.clock), dtype=float)
        lams = [float(rates[cells].sum()) for cells in self.region_cells]
        quota = allocate_counts(lams, self.mus, len(views))
        self.last_estimates = [QueueEstimate(l, m, c, estimate_wait(l, m, c)) for l, m, c in zip(lams, self.mus, quota)]
        have = [0] * self.partition.k
        for v in views:
            have[region_of[v.waiting_cell]] += 1
        cap = self.model.capacity
        while True:
            deficits = [r for r in range(self.partition.k) if have[r] < quota[r]]
            if not deficits:
                break
            g = max(deficits, key=lambda r: (quota[r] - have[r], -r))
            load = {w: sum(1 for v in views if v.waiting_cell == w) for w in self.region_waiting[g]}
            free = [w for w in self.region_waiting[g] if cap is None or load[w] < cap]
            if not free:
                break
            cells = self.region_cells[g]
            cost = {w: float(np.dot(rates[cells], self.model.grid.travel_seconds[cells, w])) for w in free}
            site = min(free, key=lambda w: (load[w], cost[w], w))
            donors = [v for v in views if have[region_of[v.waiting_cell]] > quota[region_of[v.waiting_cell]]
                      and v.comms_ok]
            if not donors:
                break
            d = min(donors, key=lambda v: (not movable(v), T[v.location][site], v.id))
            have[region_of[d.waiting_cell]] -= 1
            have[g] += 1
            views[d.id] = _retarget(d, site, snapshot.clock, T)
        members = [[v.id for v in views if region_of[v.waiting_cell] == r] for r in range(self.partition.k)]
        return views, members

    def plan(self, snapshot: Snapshot) -> Allocation:
        views, members = self.high_level(snapshot)
        snap = dataclasses.replace(snapshot, responders=tuple(views))
        targets = list(snap.allocation.targets)
        for r in range(self.partition.k):
            sub = plan_centralized_mcts(snap, self.model, self.mcts, responders=members[r],
                                        waiting_cells=self.region_waiting[r], cells=self.region_cells[r], unit=r)
            for i in members[r]:
                targets[i] = sub[i]
        return Allocation(tuple(targets))

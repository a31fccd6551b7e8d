"""Generative model used by the online planners.

Responder state inside the model is a plain list for speed:
``[free_at, origin, dest, depart, arrive, waiting]``. A responder can be
dispatched from ``free_at`` on and moves from ``origin`` to ``dest`` over
``[depart, arrive]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..geo import CellId, Grid
from ..incidents import RateSchedule, ServiceDist
from ..sim import ResponderView

FREE, ORIGIN, DEST, DEPART, ARRIVE, WAITING = range(6)


class DemandModel(Protocol):
    def rates(self, t: float) -> np.ndarray:
        """Expected incidents per hour for every cell at scenario time ``t`` seconds."""
        ...


@dataclass(frozen=True, eq=False)
class ConstantDemand:
    per_cell: np.ndarray

    def rates(self, t: float) -> np.ndarray:
        return self.per_cell


@dataclass(eq=False)
class ScheduleDemand:
    """Demand read from a rate schedule; the planners' forecast of the environment."""

    schedule: RateSchedule
    _cache: dict = field(default_factory=dict, repr=False)

    def rates(self, t: float) -> np.ndarray:
        hour = t / 3600.0
        key = tuple(_segment(bps, hour) for bps in self.schedule.breakpoints)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.schedule.rates_at(hour)
            hit.setflags(write=False)
            self._cache[key] = hit
        return hit


def _segment(bps, hour: float) -> int:
    idx = 0
    for i, (start, _) in enumerate(bps):
        if start > hour:
            break
        idx = i
    return idx


@dataclass(frozen=True, eq=False)
class PlanningModel:
    grid: Grid
    demand: DemandModel
    service: ServiceDist
    waiting_cells: tuple[CellId, ...]
    epoch_seconds: float = 1800.0
    capacity: int | None = None


def state_from_views(views: Sequence[ResponderView], clock: float) -> list[list]:
    out = []
    for v in views:
        free = max(v.free_at, clock) if v.status in ("en_route", "servicing") else min(v.free_at, clock)
        out.append([free, v.origin, v.dest, v.depart, v.arrive, v.waiting_cell])
    return out


def position(grid: Grid, st: list, t: float) -> CellId:
    if t >= st[ARRIVE] or st[ORIGIN] == st[DEST]:
        return st[DEST]
    if t <= st[DEPART]:
        return st[ORIGIN]
    return grid.position_along(st[ORIGIN], st[DEST], (t - st[DEPART]) / (st[ARRIVE] - st[DEPART]))


def apply_move(grid: Grid, T: list[list[float]], st: list, cell: CellId, t: float) -> None:
    st[WAITING] = cell
    if st[FREE] <= t:
        here = position(grid, st, t)
        st[ORIGIN], st[DEST], st[DEPART], st[ARRIVE] = here, cell, t, t + T[here][cell]
    else:
        st[DEST] = cell
        st[ARRIVE] = st[DEPART] + T[st[ORIGIN]][cell]


def simulate_epoch(
    grid: Grid,
    T: list[list[float]],
    state: list[list],
    incidents: Sequence[tuple[float, int, float]],
    epoch_end: float,
    epoch_seconds: float,
    pending: Sequence[tuple[float, int, float]] = (),
    clock: float = 0.0,
) -> float:
    """Greedy-dispatch the epoch's incidents in place; return the epoch reward.

    The reward is minus the mean response time of the epoch's incidents. An
    incident still waiting for a responder at the epoch end counts as
    ``epoch_seconds``. ``pending`` incidents were reported before ``clock``
    and are served first, in order; their response is counted from ``clock``
    so that rewards stay bounded.
    """
    total = 0.0
    count = 0
    for batch, is_pending in ((pending, True), (incidents, False)):
        for reported, cell, service in batch:
            t = clock if is_pending else reported
            best = -1
            best_tt = math.inf
            for i, st in enumerate(state):
                if st[FREE] <= t:
                    p = position(grid, st, t)
                    tt = T[p][cell]
                    if tt < best_tt:
                        best_tt = tt
                        best = i
            if best < 0:
                best = min(range(len(state)), key=lambda i: (state[i][FREE], i))
                st = state[best]
                d = st[FREE]
                best_tt = T[position(grid, st, d)][cell]
            else:
                st = state[best]
                d = t
            done = d + best_tt + service
            home = st[WAITING]
            st[FREE], st[ORIGIN], st[DEST], st[DEPART], st[ARRIVE] = done, cell, home, done, done + T[cell][home]
            total += (d - t + best_tt) if d < epoch_end else epoch_seconds
            count += 1
    return -total / count if count else 0.0


@dataclass(frozen=True)
class ScenarioSamples:
    """Pre-drawn incidents: ``per_depth[d][i]`` is iteration ``i``'s epoch-``d`` list."""

    per_depth: list[list[list[tuple[float, int, float]]]]


def sample_incidents(
    model: PlanningModel,
    clock: float,
    horizon_epochs: int,
    iterations: int,
    rng: np.random.Generator,
    cells: Sequence[CellId] | None = None,
) -> ScenarioSamples:
    """Draw every iteration's incident stream up front, depth by depth."""
    E = model.epoch_seconds
    lo = model.service.mean_s - model.service.jitter_s
    hi = model.service.mean_s + model.service.jitter_s
    cell_ids = np.arange(model.grid.n) if cells is None else np.asarray(cells, dtype=int)
    per_depth = []
    for d in range(horizon_epochs):
        t0 = clock + d * E
        lam = np.asarray(model.demand.rates(t0), dtype=float)[cell_ids]
        total_rate = float(lam.sum())
        if total_rate <= 0 or len(cell_ids) == 0:
            per_depth.append([[] for _ in range(iterations)])
            continue
        counts = rng.poisson(total_rate * E / 3600.0, iterations)
        n = int(counts.sum())
        times = t0 + rng.random(n) * E
        cum = np.cumsum(lam)
        picks = np.minimum(np.searchsorted(cum, rng.random(n) * total_rate, side="right"), len(lam) - 1)
        chosen = cell_ids[picks]
        services = rng.uniform(lo, hi, n)
        owner = np.repeat(np.arange(iterations), counts)
        order = np.lexsort((times, owner))
        rows = list(zip(times[order].tolist(), chosen[order].tolist(), services[order].tolist()))
        bounds = np.concatenate([[0], np.cumsum(counts)]).tolist()
        per_depth.append([rows[bounds[i]:bounds[i + 1]] for i in range(iterations)])
    return ScenarioSamples(per_depth)

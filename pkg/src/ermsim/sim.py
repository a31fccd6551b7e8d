"""Discrete-event simulator with greedy dispatch and planner-driven relocation."""
from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import statistics
import time as _time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .errors import InvalidArgument
from .geo import CellId, Grid
from .incidents import Incident, IncidentTrace

log = logging.getLogger(__name__)

IDLE, EN_ROUTE, SERVICING, RELOCATING = "idle", "en_route", "servicing", "relocating"

# same-time events resolve in this order
_OUTAGE, _ARRIVE, _DONE, _RELOC, _INCIDENT, _EPOCH = range(6)


@dataclass(frozen=True)
class Outage:
    start_s: float
    end_s: float
    responders: tuple[int, ...]


def merge_outages(outages: Sequence[Outage], num_responders: int) -> dict[int, list[tuple[float, float]]]:
    """Per-responder outage intervals with overlapping or touching windows merged."""
    per: dict[int, list[tuple[float, float]]] = {r: [] for r in range(num_responders)}
    for o in outages:
        if o.end_s < o.start_s:
            raise InvalidArgument(f"outage window ends before it starts: {o}")
        for r in o.responders:
            if not 0 <= r < num_responders:
                raise InvalidArgument(f"outage names unknown responder {r}")
            per[r].append((o.start_s, o.end_s))
    for r, spans in per.items():
        spans.sort()
        merged: list[tuple[float, float]] = []
        for s, e in spans:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        per[r] = merged
    return per


@dataclass(frozen=True)
class SimConfig:
    num_responders: int
    waiting_cells: tuple[CellId, ...]
    epoch_seconds: float = 1800.0
    outages: tuple[Outage, ...] = ()
    capacity: int | None = None
    replan_on_dispatch: bool = False
    planner_budget_s: float | None = None
    queue_policy: str = "fifo"

    def validate(self, grid: Grid) -> None:
        if not self.epoch_seconds > 0:
            raise InvalidArgument("epoch_seconds must be positive")
        if self.num_responders < 1:
            raise InvalidArgument("need at least one responder")
        if not self.waiting_cells:
            raise InvalidArgument("need at least one waiting cell")
        for c in self.waiting_cells:
            if not 0 <= c < grid.n:
                raise InvalidArgument(f"waiting cell {c} outside grid")
        if self.capacity is not None and self.capacity * len(set(self.waiting_cells)) < self.num_responders:
            raise InvalidArgument("waiting-cell capacity cannot hold the fleet")
        if self.queue_policy != "fifo":
            raise InvalidArgument("only the fifo queue policy is supported")
        merge_outages(self.outages, self.num_responders)


@dataclass(frozen=True)
class Allocation:
    """Waiting cell per responder, indexed by responder id."""

    targets: tuple[CellId, ...]

    def __getitem__(self, rid: int) -> CellId:
        return self.targets[rid]

    def __len__(self) -> int:
        return len(self.targets)

    def as_dict(self) -> dict[int, CellId]:
        return dict(enumerate(self.targets))

    def with_move(self, rid: int, cell: CellId) -> "Allocation":
        t = list(self.targets)
        t[rid] = cell
        return Allocation(tuple(t))

    def validate(self, num_responders: int, waiting_cells: Sequence[CellId], capacity: int | None = None) -> None:
        if len(self.targets) != num_responders:
            raise InvalidArgument(f"allocation maps {len(self.targets)} responders, fleet has {num_responders}")
        allowed = set(waiting_cells)
        for rid, c in enumerate(self.targets):
            if c not in allowed:
                raise InvalidArgument(f"responder {rid} assigned to non-waiting cell {c}")
        if capacity is not None:
            for c in allowed:
                if sum(1 for t in self.targets if t == c) > capacity:
                    raise InvalidArgument(f"waiting cell {c} over capacity {capacity}")


@dataclass(frozen=True)
class ResponderView:
    """What a planner knows about one responder.

    A responder can be dispatched from ``free_at`` on; from then it travels
    ``origin`` -> ``dest`` over ``[depart, arrive]`` (a zero-length leg when idle).
    """

    id: int
    waiting_cell: CellId
    location: CellId
    status: str
    free_at: float
    origin: CellId
    dest: CellId
    depart: float
    arrive: float
    comms_ok: bool
    as_of: float


@dataclass(frozen=True)
class Snapshot:
    clock: float
    epoch: int
    seed: int
    responders: tuple[ResponderView, ...]
    pending: tuple[tuple[float, CellId], ...]
    stale: frozenset[int] = frozenset()

    @property
    def allocation(self) -> Allocation:
        return Allocation(tuple(v.waiting_cell for v in self.responders))


@dataclass(frozen=True)
class LocalSnapshot:
    """A responder's own fresh state plus its last-known view of peers."""

    clock: float
    epoch: int
    seed: int
    self_id: int
    responders: tuple[ResponderView, ...]
    pending: tuple[tuple[float, CellId], ...]
    stale_peers: frozenset[int] = frozenset()


class Planner(Protocol):
    name: str
    local: bool

    def initial_allocation(self) -> Allocation | None: ...

    def plan(self, snapshot: Snapshot) -> Allocation: ...


class LocalPlanner(Protocol):
    name: str
    local: bool

    def initial_allocation(self) -> Allocation | None: ...

    def plan_responder(self, snapshot: LocalSnapshot) -> CellId: ...


@dataclass(frozen=True)
class Scenario:
    grid: Grid
    trace: IncidentTrace
    config: SimConfig
    initial_allocation: Allocation | None = None


@dataclass(frozen=True)
class IncidentRecord:
    incident: int
    cell: CellId
    report_time: float
    dispatch_time: float
    arrival_time: float
    responder: int
    from_cell: CellId
    travel_s: float
    queued: bool

    @property
    def response_s(self) -> float:
        return self.arrival_time - self.report_time


@dataclass(frozen=True)
class DispatchCheck:
    """Travel time of every responder available at a dispatch decision."""

    time: float
    incident: int
    responder: int
    options: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class DecisionRecord:
    epoch: int
    time: float
    planner: str
    wall_ms: float
    stale: bool
    blocked: bool
    moves: tuple[tuple[int, CellId, CellId], ...]


@dataclass
class SimReport:
    planner: str
    seed: int
    horizon_s: float
    num_responders: int
    incidents: list[IncidentRecord]
    n_generated: int
    n_pending_at_end: int
    busy_seconds: float
    queued_count: int
    epochs: int
    stale_decision_epochs: int
    relocations: int
    decisions: list[DecisionRecord]
    dispatch_checks: list[DispatchCheck]
    events: list[tuple[float, str, int, int, int]]

    @property
    def responses(self) -> list[float]:
        return [r.response_s for r in self.incidents]

    @property
    def mean_response(self) -> float:
        rs = self.responses
        return statistics.fmean(rs) if rs else math.nan

    @property
    def median_response(self) -> float:
        rs = self.responses
        return statistics.median(rs) if rs else math.nan

    @property
    def p90_response(self) -> float:
        rs = sorted(self.responses)
        if not rs:
            return math.nan
        # nearest-rank percentile
        return rs[max(0, math.ceil(0.9 * len(rs)) - 1)]

    @property
    def utilization(self) -> float:
        return self.busy_seconds / (self.num_responders * self.horizon_s) if self.horizon_s > 0 else 0.0

    @property
    def stale_fraction(self) -> float:
        return self.stale_decision_epochs / self.epochs if self.epochs else 0.0

    def planner_wall_ms(self) -> dict[str, float]:
        w = [d.wall_ms for d in self.decisions]
        if not w:
            return {"count": 0, "mean": math.nan, "max": math.nan, "total": 0.0}
        return {"count": len(w), "mean": statistics.fmean(w), "max": max(w), "total": sum(w)}

    def summary(self, include_timing: bool = False) -> dict:
        def num(x: float):
            return "NA" if math.isnan(x) else x

        out = {
            "planner": self.planner,
            "seed": self.seed,
            "incidents": self.n_generated,
            "served": len(self.incidents),
            "pending_at_end": self.n_pending_at_end,
            "mean_response_s": num(self.mean_response),
            "median_response_s": num(self.median_response),
            "p90_response_s": num(self.p90_response),
            "utilization": self.utilization,
            "queued": self.queued_count,
            "epochs": self.epochs,
            "stale_decision_epochs": self.stale_decision_epochs,
            "relocations": self.relocations,
        }
        if include_timing:
            out["planner_wall_ms"] = self.planner_wall_ms()
        return out

    def to_json(self, include_timing: bool = False) -> str:
        body = {
            "summary": self.summary(include_timing),
            "incidents": [
                {
                    "incident": r.incident, "cell": r.cell, "report_time": r.report_time,
                    "dispatch_time": r.dispatch_time, "arrival_time": r.arrival_time,
                    "responder": r.responder, "queued": r.queued,
                }
                for r in self.incidents
            ],
            "decisions": [
                {
                    "epoch": d.epoch, "time": d.time, "stale": d.stale, "blocked": d.blocked,
                    "moves": [list(m) for m in d.moves],
                    **({"wall_ms": d.wall_ms} if include_timing else {}),
                }
                for d in self.decisions
            ],
        }
        return json.dumps(body, sort_keys=True)

    EVENT_COLUMNS = ("time_s", "kind", "responder", "incident", "cell")

    def write_event_log(self, path: str | Path) -> None:
        """CSV event log; -1 marks a column that does not apply to the event."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.EVENT_COLUMNS)
            for t, kind, rid, iid, cell in self.events:
                w.writerow([repr(t), kind, rid, iid, cell])

    DECISION_COLUMNS = ("epoch", "planner", "wall_ms", "stale", "moves")

    def write_decision_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.DECISION_COLUMNS)
            for d in self.decisions:
                moves = ";".join(f"{r}:{a}->{b}" for r, a, b in d.moves)
                w.writerow([d.epoch, d.planner, f"{d.wall_ms:.3f}", int(d.stale), moves])


class _Responder:
    __slots__ = ("id", "waiting", "status", "location", "busy_until", "comms_ok",
                 "origin", "dest", "depart", "arrive", "incident", "version")

    def __init__(self, rid: int, cell: CellId):
        self.id = rid
        self.waiting = cell
        self.status = IDLE
        self.location = cell
        self.busy_until = 0.0
        self.comms_ok = True
        self.origin = self.dest = cell
        self.depart = self.arrive = 0.0
        self.incident: Incident | None = None
        self.version = 0


class Simulator:
    """Event loop for one (scenario, planner, seed) run.

    Events: incident arrival, arrival on scene, service completion,
    relocation completion, decision epoch, outage start and end.
    """

    def __init__(self, scenario: Scenario, planner, seed: int = 0, record_events: bool = True):
        self.grid = scenario.grid
        self.trace = scenario.trace
        self.cfg = scenario.config
        self.cfg.validate(self.grid)
        self.planner = planner
        self.seed = seed
        self.record_events = record_events
        self.T = self.grid.travel_rows
        self.horizon = self.trace.horizon_seconds

        init = scenario.initial_allocation
        if init is None and hasattr(planner, "initial_allocation"):
            init = planner.initial_allocation()
        if init is None:
            wc = self.cfg.waiting_cells
            init = Allocation(tuple(wc[i % len(wc)] for i in range(self.cfg.num_responders)))
        init.validate(self.cfg.num_responders, self.cfg.waiting_cells, self.cfg.capacity)
        self.resp = [_Responder(i, c) for i, c in enumerate(init.targets)]

        self.clock = 0.0
        self.queue: list[tuple[Incident, float]] = []
        self.heap: list = []
        self.seq = 0
        self.records: list[IncidentRecord] = []
        self.checks: list[DispatchCheck] = []
        self.decisions: list[DecisionRecord] = []
        self.events: list[tuple[float, str, int, int, int]] = []
        self.busy_seconds = 0.0
        self.queued_count = 0
        self.epochs = 0
        self.stale_epochs = 0
        self.relocations = 0
        self.local = bool(getattr(planner, "local", False))
        n = self.cfg.num_responders
        # central planner's last-known view; for local planners, each responder's view of every peer
        self.known = [self._view(r) for r in self.resp]
        self.peer_known = [list(self.known) for _ in range(n)]
        self.outages = merge_outages(self.cfg.outages, n)

    # -- helpers -------------------------------------------------------------------
    def _push(self, t: float, prio: int, kind: str, payload) -> None:
        heapq.heappush(self.heap, (t, prio, self.seq, kind, payload))
        self.seq += 1

    def _log(self, kind: str, rid: int = -1, iid: int = -1, cell: int = -1) -> None:
        if self.record_events:
            self.events.append((self.clock, kind, rid, iid, cell))

    def position(self, r: _Responder, t: float) -> CellId:
        if r.status != RELOCATING:
            return r.location
        span = r.arrive - r.depart
        frac = 1.0 if span <= 0 else (t - r.depart) / span
        return self.grid.position_along(r.origin, r.dest, frac)

    def _view(self, r: _Responder) -> ResponderView:
        t = self.clock
        if r.status in (EN_ROUTE, SERVICING):
            inc_cell = r.incident.cell
            back = self.T[inc_cell][r.waiting]
            return ResponderView(r.id, r.waiting, r.location, r.status, r.busy_until, inc_cell, r.waiting,
                                 r.busy_until, r.busy_until + back, r.comms_ok, t)
        if r.status == RELOCATING:
            return ResponderView(r.id, r.waiting, self.position(r, t), r.status, t, r.origin, r.dest,
                                 r.depart, r.arrive, r.comms_ok, t)
        return ResponderView(r.id, r.waiting, r.location, r.status, t, r.location, r.location, t, t, r.comms_ok, t)

    def _start_relocation(self, r: _Responder, dest: CellId) -> None:
        here = self.position(r, self.clock)
        r.version += 1
        if here == dest:
            r.status = IDLE
            r.location = dest
            return
        r.status = RELOCATING
        r.origin, r.dest = here, dest
        r.depart = self.clock
        r.arrive = self.clock + self.T[here][dest]
        r.location = here
        self._push(r.arrive, _RELOC, "reloc_done", (r.id, r.version))
        self._log("relocate", r.id, -1, dest)

    def _dispatch(self, r: _Responder, inc: Incident, reported: float, queued: bool, frm: CellId) -> None:
        travel = self.T[frm][inc.cell]
        r.version += 1
        r.status = EN_ROUTE
        r.location = frm
        r.incident = inc
        arrival = self.clock + travel
        r.busy_until = arrival + inc.service_seconds
        self.busy_seconds += r.busy_until - self.clock
        self.records.append(IncidentRecord(inc.id, inc.cell, reported, self.clock, arrival, r.id, frm, travel, queued))
        self._push(arrival, _ARRIVE, "arrive", r.id)
        self._log("dispatch", r.id, inc.id, inc.cell)

    def dispatch_greedy(self, inc: Incident) -> int | None:
        """Send the nearest idle or relocating responder; ties go to the lowest id."""
        best = None
        options = []
        for r in self.resp:
            if r.status in (IDLE, RELOCATING):
                frm = self.position(r, self.clock)
                tt = self.T[frm][inc.cell]
                options.append((r.id, tt))
                if best is None or tt < best[0]:
                    best = (tt, r, frm)
        if best is None:
            return None
        _, r, frm = best
        self.checks.append(DispatchCheck(self.clock, inc.id, r.id, tuple(options)))
        self._dispatch(r, inc, inc.time, False, frm)
        return r.id

    # -- planning ------------------------------------------------------------------
    def _refresh_knowledge(self) -> None:
        fresh = [self._view(r) for r in self.resp]
        for r in self.resp:
            if r.comms_ok:
                self.known[r.id] = fresh[r.id]
        for i, ri in enumerate(self.resp):
            for j, rj in enumerate(self.resp):
                if i == j or (ri.comms_ok and rj.comms_ok):
                    self.peer_known[i][j] = fresh[j]

    def _apply_target(self, r: _Responder, cell: CellId) -> bool:
        if cell == r.waiting:
            return False
        if cell not in self.cfg.waiting_cells:
            raise InvalidArgument(f"planner sent responder {r.id} to non-waiting cell {cell}")
        r.waiting = cell
        self.relocations += 1
        if r.status in (IDLE, RELOCATING):
            self._start_relocation(r, cell)
        return True

    def _decide(self, epoch: int, tick: bool = True) -> None:
        self._refresh_knowledge()
        pending = tuple((rep, inc.cell) for inc, rep in self.queue)
        before = [r.waiting for r in self.resp]
        t0 = _time.perf_counter()
        budget = self.cfg.planner_budget_s
        if self.local:
            proposals = {}
            stale_inputs = False
            for r in self.resp:
                stale_peers = frozenset(j for j in range(len(self.resp)) if j != r.id and not (r.comms_ok and self.resp[j].comms_ok))
                stale_inputs |= bool(stale_peers)
                snap = LocalSnapshot(self.clock, epoch, self.seed, r.id, tuple(self.peer_known[r.id]), pending, stale_peers)
                proposals[r.id] = self.planner.plan_responder(snap)
            wall = (_time.perf_counter() - t0) * 1000.0
            blocked = False
            if budget is not None and wall > budget * 1000.0:
                log.warning("planner %s exceeded %.3fs budget at epoch %d; keeping allocation", self.planner.name, budget, epoch)
            else:
                self._apply_local(proposals)
        else:
            stale_ids = frozenset(r.id for r in self.resp if not r.comms_ok)
            snap = Snapshot(self.clock, epoch, self.seed, tuple(self.known), pending, stale_ids)
            alloc = self.planner.plan(snap)
            wall = (_time.perf_counter() - t0) * 1000.0
            stale_inputs = bool(stale_ids)
            blocked = bool(stale_ids)
            if budget is not None and wall > budget * 1000.0:
                log.warning("planner %s exceeded %.3fs budget at epoch %d; keeping allocation", self.planner.name, budget, epoch)
            else:
                alloc.validate(len(self.resp), self.cfg.waiting_cells, None)
                for r in self.resp:
                    if r.comms_ok:
                        self._apply_target(r, alloc[r.id])
        if blocked and tick:
            self.stale_epochs += 1
        moves = tuple((r.id, b, r.waiting) for r, b in zip(self.resp, before) if r.waiting != b)
        self.decisions.append(DecisionRecord(epoch, self.clock, self.planner.name, wall, stale_inputs, blocked, moves))
        self._log("epoch", -1, -1, epoch)

    def _apply_local(self, proposals: dict[int, CellId]) -> None:
        cap = self.cfg.capacity
        for rid in sorted(proposals):
            cell = proposals[rid]
            if cap is not None and cell != self.resp[rid].waiting:
                if sum(1 for r in self.resp if r.waiting == cell) >= cap:
                    continue
            self._apply_target(self.resp[rid], cell)

    # -- main loop -------------------------------------------------------------------
    def run(self) -> SimReport:
        for inc in self.trace.incidents:
            self._push(inc.time, _INCIDENT, "incident", inc)
        for rid, spans in self.outages.items():
            for s, e in spans:
                self._push(s, _OUTAGE, "outage_start", rid)
                self._push(e, _OUTAGE, "outage_end", rid)
        self._push(0.0, _EPOCH, "epoch", 0)

        while self.heap:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            if t < self.clock:
                raise RuntimeError("event scheduled in the past")
            self.clock = t
            if kind == "incident":
                self._log("incident", -1, payload.id, payload.cell)
                rid = self.dispatch_greedy(payload)
                if rid is None:
                    self.queue.append((payload, payload.time))
                    self.queued_count += 1
                    self._log("queued", -1, payload.id, payload.cell)
                elif self.cfg.replan_on_dispatch:
                    self._decide(max(0, self.epochs - 1), tick=False)
            elif kind == "arrive":
                r = self.resp[payload]
                r.status = SERVICING
                r.location = r.incident.cell
                self._push(r.busy_until, _DONE, "done", r.id)
                self._log("arrive", r.id, r.incident.id, r.location)
            elif kind == "done":
                r = self.resp[payload]
                self._log("complete", r.id, r.incident.id, r.location)
                r.incident = None
                if self.queue:
                    inc, rep = self.queue.pop(0)
                    self.checks.append(DispatchCheck(self.clock, inc.id, r.id, ((r.id, self.T[r.location][inc.cell]),)))
                    self._dispatch(r, inc, rep, True, r.location)
                else:
                    r.status = IDLE
                    self._start_relocation(r, r.waiting)
            elif kind == "reloc_done":
                rid, version = payload
                r = self.resp[rid]
                if r.version == version and r.status == RELOCATING:
                    r.status = IDLE
                    r.location = r.dest
                    self._log("relocated", r.id, -1, r.location)
            elif kind == "outage_start":
                self.resp[payload].comms_ok = False
                self._log("outage_start", payload)
            elif kind == "outage_end":
                self.resp[payload].comms_ok = True
                self._log("outage_end", payload)
            elif kind == "epoch":
                self.epochs += 1
                self._decide(payload)
                nxt = (payload + 1) * self.cfg.epoch_seconds
                if nxt < self.horizon:
                    self._push(nxt, _EPOCH, "epoch", payload + 1)

        return SimReport(
            planner=self.planner.name,
            seed=self.seed,
            horizon_s=self.horizon,
            num_responders=len(self.resp),
            incidents=sorted(self.records, key=lambda r: r.incident),
            n_generated=len(self.trace.incidents),
            n_pending_at_end=len(self.queue),
            busy_seconds=self.busy_seconds,
            queued_count=self.queued_count,
            epochs=self.epochs,
            stale_decision_epochs=self.stale_epochs,
            relocations=self.relocations,
            decisions=self.decisions,
            dispatch_checks=self.checks,
            events=self.events,
        )


def run(scenario: Scenario, planner, seed: int = 0, record_events: bool = True) -> SimReport:
    return Simulator(scenario, planner, seed, record_events).run()

"""Crowdsourced-report incident detection and its Pareto evaluation.

Reports are scored per cell by a decayed count over the cell and its four
neighbours. Detections are matched to ground truth under a spatial radius
and a temporal window, and parameter sweeps are reduced to their Pareto
frontier over (F1, mean lead time, radius).
"""
from __future__ import annotations

import bisect
import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .geo import CellId, Grid
from .incidents import IncidentTrace

NEIGHBOR_WEIGHT = 0.5


@dataclass(frozen=True)
class Report:
    time: float
    cell: CellId
    source_incident: int | None = None  # evaluator only; never read by the detector


@dataclass(frozen=True)
class ReportGenConfig:
    reports_per_incident_mean: float = 3.0
    report_delay_mean_s: float = 60.0
    spatial_noise_cells: int = 1
    false_rate_per_hour: float = 0.5
    official_delay_mean_s: float = 360.0

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise InvalidArgument(f"{k} must be non-negative")


@dataclass(frozen=True)
class ReportStream:
    reports: tuple[Report, ...]
    official_times: dict[int, float]
    horizon_s: float

    def save(self, path: str | Path) -> None:
        """JSON Lines of ``{time_s, cell}``; provenance is deliberately left out."""
        with open(path, "w") as fh:
            for r in self.reports:
                fh.write(json.dumps({"time_s": r.time, "cell": r.cell}) + "\n")

    def save_official(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({str(k): v for k, v in sorted(self.official_times.items())}, fh, sort_keys=True)


def load_reports(path: str | Path) -> list[Report]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(Report(float(d["time_s"]), int(d["cell"])))
    return out


def _diamond(grid: Grid, cell: CellId, radius: int, cache: dict) -> list[CellId]:
    hit = cache.get(cell)
    if hit is None:
        r0, c0 = grid.row_col(cell)
        hit = [grid.cell_at(r, c)
               for r in range(max(0, r0 - radius), min(grid.rows, r0 + radius + 1))
               for c in range(max(0, c0 - radius), min(grid.cols, c0 + radius + 1))
               if abs(r - r0) + abs(c - c0) <= radius]
        cache[cell] = hit
    return hit


def generate_reports(trace: IncidentTrace, grid: Grid, gen: ReportGenConfig, seed: int) -> ReportStream:
    """Synthetic crowdsourced reports plus the official (call-in) report time of each incident."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    horizon = trace.horizon_seconds
    cache: dict = {}
    reports: list[Report] = []
    official: dict[int, float] = {}
    for inc in trace.incidents:
        official[inc.id] = inc.time + (rng.exponential(gen.official_delay_mean_s) if gen.official_delay_mean_s > 0 else 0.0)
        n = rng.poisson(gen.reports_per_incident_mean)
        for _ in range(n):
            delay = rng.exponential(gen.report_delay_mean_s) if gen.report_delay_mean_s > 0 else 0.0
            near = _diamond(grid, inc.cell, gen.spatial_noise_cells, cache)
            cell = near[int(rng.integers(len(near)))]
            t = inc.time + delay
            if t <= horizon:
                reports.append(Report(float(t), int(cell), inc.id))
    n_false = rng.poisson(gen.false_rate_per_hour * horizon / 3600.0)
    times = rng.uniform(0.0, horizon, n_false)
    cells = rng.integers(0, grid.n, n_false)
    reports.extend(Report(float(t), int(c), None) for t, c in zip(times, cells))
    reports.sort(key=lambda r: (r.time, r.cell))
    return ReportStream(tuple(reports), official, horizon)


@dataclass(frozen=True)
class ScoreEvent:
    time: float
    cell: CellId
    score: float
    own: bool  # the triggering report fell in this cell rather than a neighbour


def score_cells(
    reports: Sequence[Report], grid: Grid, window_s: float | None = None, half_life_s: float | None = None
) -> list[ScoreEvent]:
    """Decayed weighted report counts, evaluated at every report arrival.

    A report adds weight 1 to its own cell and 0.5 to each 4-neighbour, and
    each contribution halves every ``half_life_s`` seconds. Contributions
    older than ``window_s`` are dropped. ``None`` disables either effect.
    """
    times = [r.time for r in reports]
    if any(b < a for a, b in zip(times, times[1:])):
        raise InvalidArgument("reports must be time-sorted")
    hist: dict[CellId, deque] = {}
    out: list[ScoreEvent] = []
    decay = 0.0 if not half_life_s or math.isinf(half_life_s) else math.log(2.0) / half_life_s
    for rep in reports:
        t = rep.time
        touched = [(rep.cell, 1.0, True)] + [(n, NEIGHBOR_WEIGHT, False) for n in grid.neighbors4(rep.cell)]
        for cell, w, own in touched:
            q = hist.setdefault(cell, deque())
            q.append((t, w))
            if window_s is not None:
                while q and q[0][0] <= t - window_s:
                    q.popleft()
            score = math.fsum(wi * math.exp(-decay * (t - ti)) for ti, wi in q) if decay else math.fsum(wi for _, wi in q)
            out.append(ScoreEvent(t, cell, score, own))
    return out


@dataclass(frozen=True)
class Detection:
    time: float
    cell: CellId
    score: float


def detect(scores: Iterable[ScoreEvent], theta: float, refractory_s: float = 0.0) -> list[Detection]:
    """Alerts from a score stream, at most one per activity episode per cell.

    Only events caused by a report in the cell itself can alert. A cell's
    episode ends once ``refractory_s`` passes without such an event; inside
    an episode the first event scoring at least ``theta`` raises the alert.
    Episodes do not depend on ``theta``, so raising it can only delay or
    drop an alert.
    """
    if theta < 0:
        raise InvalidArgument("theta must be non-negative")
    last_own: dict[CellId, float] = {}
    fired: dict[CellId, bool] = {}
    out = []
    for ev in scores:
        if not ev.own:
            continue
        prev = last_own.get(ev.cell)
        if prev is None or ev.time - prev > refractory_s:
            fired[ev.cell] = False
        last_own[ev.cell] = ev.time
        if not fired[ev.cell] and ev.score >= theta:
            fired[ev.cell] = True
            out.append(Detection(ev.time, ev.cell, ev.score))
    return out


@dataclass(frozen=True)
class DetectorParams:
    theta: float
    radius_km: float
    window_min: float

    def __post_init__(self) -> None:
        if self.theta < 0 or not self.radius_km > 0 or not self.window_min > 0:
            raise InvalidArgument(f"invalid detector parameters: {self}")


@dataclass(frozen=True)
class MatchResult:
    precision: float
    recall: float
    f1: float
    mean_lead_s: float
    early_fraction: float  # share of all incidents detected before their official report
    leads: dict[int, float] = field(default_factory=dict)


def match(
    detections: Sequence[Detection],
    trace: IncidentTrace,
    official_times: Mapping[int, float],
    grid: Grid,
    params: DetectorParams,
) -> MatchResult:
    """Greedy one-to-one matching in detection-time order.

    Each detection takes the earliest unmatched incident within
    ``radius_km`` (centroid distance) and ``window_min`` either side of it.
    Undefined ratios are reported as 0.
    """
    incs = sorted(trace.incidents, key=lambda i: (i.time, i.id))
    times = [i.time for i in incs]
    window = params.window_min * 60.0
    used = [False] * len(incs)
    leads: dict[int, float] = {}
    for det in sorted(detections, key=lambda d: (d.time, d.cell)):
        lo = bisect.bisect_left(times, det.time - window)
        hi = bisect.bisect_right(times, det.time + window)
        for j in range(lo, hi):
            if not used[j] and grid.distance_km(det.cell, incs[j].cell) <= params.radius_km:
                used[j] = True
                leads[incs[j].id] = official_times[incs[j].id] - det.time
                break
    tp = len(leads)
    precision = tp / len(detections) if detections else 0.0
    recall = tp / len(incs) if incs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    mean_lead = math.fsum(leads.values()) / tp if tp else 0.0
    early = sum(1 for v in leads.values() if v > 0) / len(incs) if incs else 0.0
    return MatchResult(precision, recall, f1, mean_lead, early, leads)


@dataclass(frozen=True)
class ParetoPoint:
    params: DetectorParams
    f1: float
    mean_lead_s: float
    precision: float = 0.0
    recall: float = 0.0
    early_fraction: float = 0.0

    @property
    def radius_km(self) -> float:
        return self.params.radius_km

    def objective(self, name: str) -> float:
        return getattr(self, name)


SENSES = {"f1": "max", "mean_lead_s": "max", "radius_km": "min"}


def dominates(p, q, senses: Mapping[str, str] = SENSES) -> bool:
    """True when ``p`` is at least as good as ``q`` everywhere and strictly better somewhere."""
    strict = False
    for name, sense in senses.items():
        a, b = p.objective(name), q.objective(name)
        if sense == "min":
            a, b = -a, -b
        if a < b:
            return False
        if a > b:
            strict = True
    return strict


def pareto_front(points: Sequence, senses: Mapping[str, str] = SENSES) -> list:
    """Nondominated subset of ``points`` in input order."""
    if not points:
        raise InvalidArgument("pareto_front needs at least one point")
    return [p for p in points if not any(dominates(q, p, senses) for q in points if q is not p)]


@dataclass(frozen=True)
class SweepGrid:
    thetas: tuple[float, ...]
    radii_km: tuple[float, ...]
    windows_min: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (self.thetas and self.radii_km and self.windows_min):
            raise InvalidArgument("parameter grid must be non-empty in every axis")

    def params(self) -> list[DetectorParams]:
        return [DetectorParams(t, r, w) for t, r, w in product(self.thetas, self.radii_km, self.windows_min)]


def sweep(
    stream: ReportStream,
    trace: IncidentTrace,
    grid: Grid,
    params: Sequence[DetectorParams],
    score_window_s: float | None = 900.0,
    half_life_s: float | None = 300.0,
) -> list[ParetoPoint]:
    """Evaluate every parameter point; the temporal window also sets the refractory period."""
    scores = score_cells(stream.reports, grid, score_window_s, half_life_s)
    dets: dict[tuple[float, float], list[Detection]] = {}
    out = []
    for p in params:
        key = (p.theta, p.window_min)
        if key not in dets:
            dets[key] = detect(scores, p.theta, p.window_min * 60.0)
        m = match(dets[key], trace, stream.official_times, grid, p)
        out.append(ParetoPoint(p, m.f1, m.mean_lead_s, m.precision, m.recall, m.early_fraction))
    return out


PARETO_COLUMNS = ("theta", "radius_km", "window_min", "f1", "mean_lead_s")


def write_pareto(points: Sequence[ParetoPoint], csv_path: str | Path, frontier_path: str | Path) -> list[ParetoPoint]:
    front = pareto_front(points)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_COLUMNS + ("precision", "recall", "early_fraction"))
        for p in points:
            w.writerow([repr(p.params.theta), repr(p.params.radius_km), repr(p.params.window_min),
                        repr(p.f1), repr(p.mean_lead_s), repr(p.precision), repr(p.recall), repr(p.early_fraction)])
    with open(frontier_path, "w") as fh:
        json.dump([{**asdict(p.params), "f1": p.f1, "mean_lead_s": p.mean_lead_s, "precision": p.precision,
                    "recall": p.recall, "early_fraction": p.early_fraction} for p in front], fh, indent=1, sort_keys=True)
    return front

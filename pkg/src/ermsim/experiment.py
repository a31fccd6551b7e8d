"""Assemble scenarios, planners and pipelines from a scenario file."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import detect as det
from .config import ScenarioFile, build_schedule
from .errors import ConfigError
from .forecast import (ForecastMetrics, ForecastModel, evaluate, fit_frequency, fit_logistic, fit_zip, predict)
from .geo import Grid, build_grid, load_travel_override, partition_regions
from .incidents import (ClusterAssignment, Dataset, IncidentTrace, RateSchedule, ServiceDist, build_dataset,
                        cluster_cells, generate_trace, plan_resample, resample, sparsity, split_chronological)
from .plan import (CentralizedPlanner, DecentralizedPlanner, HierarchicalPlanner, MCTSConfig, PlanningModel,
                   ScheduleDemand, StaticPlanner, plan_static)
from .sim import Outage, Scenario, SimConfig, SimReport, run

PLANNERS = ("static", "central", "decentral", "hier")


def make_grid(spec: ScenarioFile) -> Grid:
    g = spec.grid
    grid = build_grid(g.rows, g.cols, g.cell_size_km, g.speed_kmh)
    if g.travel_override:
        grid = load_travel_override(grid, spec.resolve(g.travel_override))
    return grid


def service_of(spec: ScenarioFile) -> ServiceDist:
    return ServiceDist(spec.service.mean_s, spec.service.jitter_s)


def sim_config(spec: ScenarioFile, grid: Grid) -> SimConfig:
    s = spec.sim
    if s is None:
        raise ConfigError("sim: section required for simulation")
    wc = tuple(range(grid.n)) if s.waiting_cells == "all" else tuple(s.waiting_cells)
    if any(not 0 <= c < grid.n for c in wc):
        raise ConfigError("sim.waiting_cells: cell outside the grid")
    outages = []
    for o in s.outages:
        if o.end_h < o.start_h:
            raise ConfigError("sim.outages: end_h before start_h")
        who = tuple(range(s.num_responders)) if o.responders == "all" else tuple(o.responders)
        if any(not 0 <= r < s.num_responders for r in who):
            raise ConfigError("sim.outages.responders: unknown responder id")
        outages.append(Outage(o.start_h * 3600.0, o.end_h * 3600.0, who))
    if s.capacity is not None and s.capacity * len(set(wc)) < s.num_responders:
        raise ConfigError("sim.capacity: waiting cells cannot hold the fleet")
    return SimConfig(s.num_responders, wc, s.epoch_seconds, tuple(outages), s.capacity,
                     s.replan_on_dispatch, s.planner_budget_s)


@dataclass(frozen=True, eq=False)
class World:
    """Everything a scenario file determines before a seed is chosen."""

    spec: ScenarioFile
    grid: Grid
    schedule: RateSchedule
    service: ServiceDist

    @classmethod
    def from_spec(cls, spec: ScenarioFile) -> "World":
        grid = make_grid(spec)
        return cls(spec, grid, build_schedule(spec, grid), service_of(spec))

    def trace(self, seed: int) -> IncidentTrace:
        return generate_trace(self.schedule, self.grid, seed, self.service)


def planning_model(world: World, config: SimConfig) -> PlanningModel:
    return PlanningModel(world.grid, ScheduleDemand(world.schedule), world.service, config.waiting_cells,
                         config.epoch_seconds, config.capacity)


def make_planner(world: World, name: str, config: SimConfig):
    """Planner by name; every planner starts from the static allocation."""
    spec = world.spec.planner
    initial = plan_static(world.schedule.rates_at(0.0), world.grid, config.num_responders,
                          config.waiting_cells, config.capacity)
    if name == "static":
        return StaticPlanner(initial)
    model = planning_model(world, config)
    m = spec.mcts
    central = MCTSConfig(m.iterations, m.uct_c, m.horizon_epochs, m.gamma, m.seed)
    local = MCTSConfig(m.local_iterations, m.uct_c, m.horizon_epochs, m.gamma, m.seed)
    if name == "central":
        return CentralizedPlanner(model, central, initial)
    if name == "decentral":
        return DecentralizedPlanner(model, local, initial)
    if name == "hier":
        # regions come from a history drawn at the horizon-average rates, the same for every seed
        hist_sched = RateSchedule.constant(world.schedule.mean_rates(), spec.history_hours)
        history = generate_trace(hist_sched, world.grid, spec.history_seed, world.service)
        k = min(spec.regions, world.grid.n)
        part = partition_regions(world.grid, history, k, seed=spec.history_seed)
        return HierarchicalPlanner(model, part, local, initial)
    raise ConfigError(f"unknown planner {name!r}")


def simulate_one(spec: ScenarioFile, planner: str, seed: int, record_events: bool = False) -> SimReport:
    world = _world(spec)
    config = sim_config(spec, world.grid)
    scen = Scenario(world.grid, world.trace(seed), config)
    return run(scen, make_planner(world, planner, config), seed, record_events)


@lru_cache(maxsize=8)
def _world_cached(key: str) -> World:
    return World.from_spec(ScenarioFile.model_validate_json(key))


def _world(spec: ScenarioFile) -> World:
    return _world_cached(spec.model_dump_json()) if spec.base_dir is None else World.from_spec(spec)


def _job(args) -> tuple[str, int, dict]:
    spec, planner, seed = args
    return planner, seed, simulate_one(spec, planner, seed).summary()


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("ERM_SIM_JOBS", "1")))
    except ValueError:
        return 1


def run_matrix(spec: ScenarioFile, planners: Sequence[str], seeds: Sequence[int], jobs: int = 1) -> list[dict]:
    """One summary row per (planner, seed), sorted by planner then seed."""
    tasks = [(spec, p, s) for p in planners for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    rows = [summary for _, _, summary in results]
    return sorted(rows, key=lambda r: (r["planner"], r["seed"]))


# -- forecasting -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForecastRun:
    model: ForecastModel
    metrics: ForecastMetrics
    train: Dataset
    test: Dataset
    clusters: ClusterAssignment
    sparsity: float
    downstream_mean_response_s: float = math.nan


def train_model(kind: str, train: Dataset, clusters: ClusterAssignment, spec: ScenarioFile, seed: int) -> ForecastModel:
    f = spec.forecast
    if kind == "freq":
        return fit_frequency(train, clusters)
    if kind == "logit":
        return fit_logistic(train, lr=f.lr, epochs=f.epochs, l2=f.l2, seed=seed)
    if kind == "zip":
        return fit_zip(train, epochs=f.zip_epochs, seed=seed)
    raise ConfigError(f"unknown forecast model {kind!r}")


def forecast_rates(model: ForecastModel, data: Dataset, clusters: ClusterAssignment, n_cells: int) -> np.ndarray:
    """Per-cell incidents per hour implied by the model's expected counts on ``data``."""
    _, counts = model.predict_many(data.features, data.cells, clusters)
    total = np.bincount(data.cells, weights=counts, minlength=n_cells)
    rows = np.bincount(data.cells, minlength=n_cells)
    return np.where(rows > 0, total / np.maximum(rows, 1), 0.0) / data.window_hours


def run_forecast(spec: ScenarioFile, kind: str, use_resample: bool, seed: int, downstream: bool = False) -> ForecastRun:
    world = _world(spec)
    f = spec.forecast
    trace = world.trace(seed)
    ds = build_dataset(trace, world.grid, f.window_hours)
    sp = sparsity(ds)
    train, test = split_chronological(ds, f.train_fraction)
    clusters = cluster_cells(train, min(f.clusters, world.grid.n), seed=seed)
    fit_on = resample(train, clusters, seed=seed, k_neighbors=f.k_neighbors) if use_resample else train
    model = train_model(kind, fit_on, clusters, spec, seed)
    metrics = evaluate(model, test, clusters, threshold=f.threshold)
    resp = math.nan
    if downstream and spec.sim is not None:
        resp = downstream_response(world, model, train, test, clusters, seed)
    return ForecastRun(model, metrics, fit_on, test, clusters, sp, resp)


def downstream_response(world: World, model: ForecastModel, train: Dataset, test: Dataset,
                        clusters: ClusterAssignment, seed: int) -> float:
    """Mean response over the test period with responders stationed on the model's rates."""
    config = sim_config(world.spec, world.grid)
    rates = forecast_rates(model, test, clusters, world.grid.n)
    alloc = plan_static(rates, world.grid, config.num_responders, config.waiting_cells, config.capacity)
    trace = world.trace(seed)
    start = float(test.windows.min()) * test.window_hours * 3600.0 if len(test) else 0.0
    tail = trace.window(start, trace.horizon_seconds)
    report = run(Scenario(world.grid, tail, config, alloc), StaticPlanner(alloc), seed, False)
    return report.mean_response


def ratio_preserved(train: Dataset, clusters: ClusterAssignment, out: Dataset) -> bool:
    """Resampled data keeps every cluster's frequency ratio to the anchor, to within one row.

    The anchor cluster must come out balanced and each other cluster's
    positive count must sit within one row of the count that preserves its
    original frequency ratio to the anchor.
    """
    plan = plan_resample(train, clusters)
    rc = clusters.row_clusters(out.cells)
    pos = out.binary_labels
    got_pos = {c: int(pos[rc == c].sum()) for c in plan.target_pos}
    got_rows = {c: int((rc == c).sum()) for c in plan.target_pos}
    a = plan.anchor
    if abs(got_pos[a] - (got_rows[a] - got_pos[a])) > 1:
        return False
    anchor_freq = got_pos[a] / got_rows[a]
    for c in plan.target_pos:
        if c == a:
            continue
        want = got_rows[c] * anchor_freq * plan.original_freq(c) / plan.original_freq(a)
        if abs(got_pos[c] - want) > 1 + 1e-9 and got_pos[c] != 1:
            return False
    return True


# -- detection -------------------------------------------------------------------


def detect_sweep(spec: ScenarioFile, seed: int, params: Sequence[det.DetectorParams] | None = None):
    world = _world(spec)
    d = spec.detect
    trace = world.trace(seed)
    r = d.reports
    gen = det.ReportGenConfig(r.reports_per_incident_mean, r.report_delay_mean_s, r.spatial_noise_cells,
                              r.false_rate_per_hour, r.official_delay_mean_s)
    stream = det.generate_reports(trace, world.grid, gen, seed)
    if params is None:
        params = det.SweepGrid(tuple(d.grid.thetas), tuple(d.grid.radii_km), tuple(d.grid.windows_min)).params()
    points = det.sweep(stream, trace, world.grid, params, d.score_window_s, d.half_life_s)
    return trace, stream, points


__all__ = [
    "PLANNERS", "World", "ForecastRun", "default_jobs", "detect_sweep", "make_planner", "predict", "run_forecast",
    "run_matrix", "sim_config", "simulate_one",
]

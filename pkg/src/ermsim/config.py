"""Scenario files: schema, loading and the rate-schedule builder."""
from __future__ import annotations

import math
from importlib import resources
from pathlib import Path
from typing import Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .geo import Grid
from .incidents import RateSchedule


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    rows: int = Field(gt=0)
    cols: int = Field(gt=0)
    cell_size_km: float = Field(1.0, gt=0)
    speed_kmh: float = Field(40.0, gt=0)
    travel_override: str | None = None


class Hotspot(_Strict):
    row: int = Field(ge=0)
    col: int = Field(ge=0)
    rate_per_hour: float = Field(ge=0)
    width_cells: float = Field(1.0, gt=0)
    start_h: float = Field(0.0, ge=0)
    end_h: float | None = None


class Corridor(_Strict):
    row: int | None = None
    col: int | None = None
    multiplier: float = Field(gt=0)

    @model_validator(mode="after")
    def _one_axis(self):
        if (self.row is None) == (self.col is None):
            raise ValueError("corridor needs exactly one of row or col")
        return self


class RatesSpec(_Strict):
    """Either a schedule file or a generative description of the rates."""

    file: str | None = None
    base_per_hour: float = Field(0.0, ge=0)
    heterogeneity_sigma: float = Field(0.0, ge=0)
    heterogeneity_seed: int = 0
    corridors: list[Corridor] = []
    hotspots: list[Hotspot] = []
    daily_profile: list[float] | None = None

    @field_validator("daily_profile")
    @classmethod
    def _profile(cls, v):
        if v is not None:
            if not v or 24 % len(v) != 0:
                raise ValueError("daily_profile length must divide 24")
            if any(x < 0 for x in v):
                raise ValueError("daily_profile entries must be non-negative")
        return v


class ServiceSpec(_Strict):
    mean_s: float = Field(1800.0, gt=0)
    jitter_s: float = Field(600.0, ge=0)


class OutageSpec(_Strict):
    start_h: float = Field(ge=0)
    end_h: float = Field(ge=0)
    responders: Union[Literal["all"], list[int]] = "all"


class SimSpec(_Strict):
    num_responders: int = Field(gt=0)
    waiting_cells: Union[Literal["all"], list[int]] = "all"
    epoch_seconds: float = Field(1800.0, gt=0)
    capacity: int | None = Field(None, gt=0)
    outages: list[OutageSpec] = []
    planner_budget_s: float | None = Field(None, gt=0)
    replan_on_dispatch: bool = False


class MCTSSpec(_Strict):
    iterations: int = Field(5000, ge=1)
    local_iterations: int = Field(1000, ge=1)
    uct_c: float = Field(math.sqrt(2.0), gt=0)
    horizon_epochs: int = Field(4, ge=1)
    gamma: float = Field(1.0, gt=0, le=1)
    seed: int = 0


class PlannerSpec(_Strict):
    name: Literal["static", "central", "decentral", "hier"] = "hier"
    regions: int = Field(3, ge=1)
    history_hours: float = Field(168.0, gt=0)
    history_seed: int = 0
    mcts: MCTSSpec = MCTSSpec()


class ForecastSpec(_Strict):
    window_hours: float = Field(4.0, gt=0)
    train_fraction: float = Field(0.7, gt=0, lt=1)
    clusters: int = Field(3, ge=1)
    model: Literal["freq", "logit", "zip"] = "logit"
    resample: bool = True
    k_neighbors: int = Field(5, ge=1)
    lr: float = Field(0.5, gt=0)
    epochs: int = Field(300, ge=1)
    l2: float = Field(0.0, ge=0)
    zip_epochs: int = Field(50, ge=1)
    threshold: float = Field(0.5, ge=0, le=1)


class ReportSpec(_Strict):
    reports_per_incident_mean: float = Field(3.0, ge=0)
    report_delay_mean_s: float = Field(60.0, ge=0)
    spatial_noise_cells: int = Field(1, ge=0)
    false_rate_per_hour: float = Field(0.5, ge=0)
    official_delay_mean_s: float = Field(360.0, ge=0)


class DetectGridSpec(_Strict):
    thetas: list[float] = [0.0, 1.0, 1.5, 2.0]
    radii_km: list[float] = [0.5, 1.0, 2.0]
    windows_min: list[float] = [5.0, 10.0, 20.0]


class DetectSpec(_Strict):
    reports: ReportSpec = ReportSpec()
    score_window_s: float | None = Field(900.0, gt=0)
    half_life_s: float | None = Field(300.0, gt=0)
    grid: DetectGridSpec = DetectGridSpec()


class ScenarioFile(_Strict):
    name: str = "scenario"
    horizon_hours: float = Field(gt=0)
    seeds: list[int] = [1]
    grid: GridSpec
    rates: RatesSpec
    service: ServiceSpec = ServiceSpec()
    sim: SimSpec | None = None
    planner: PlannerSpec = PlannerSpec()
    forecast: ForecastSpec = ForecastSpec()
    detect: DetectSpec = DetectSpec()

    # directory of the file, for resolving relative paths
    base_dir: str | None = Field(None, exclude=True)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p


PRESETS = ("tn-sparse", "metro-30", "shift", "outage", "detect")


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_scenario(data: dict, base_dir: str | None = None) -> ScenarioFile:
    if not isinstance(data, dict):
        raise ConfigError("scenario file must be a mapping at the top level")
    if "base_dir" in data:
        raise ConfigError("base_dir: extra inputs are not permitted")
    try:
        return ScenarioFile(**data, base_dir=base_dir)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from None


def load_scenario(path: str | Path) -> ScenarioFile:
    """Load a scenario YAML file, or a shipped preset by name."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        text = resources.files("ermsim").joinpath("scenarios", f"{path}.yaml").read_text()
        base = None
    else:
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read scenario file {path}: {e}") from None
        base = str(p.parent)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"scenario file is not valid YAML: {e}") from None
    return parse_scenario(data or {}, base)


def _kernel(grid: Grid, row: float, col: float, width: float) -> np.ndarray:
    rc = np.array([grid.row_col(c) for c in range(grid.n)], dtype=float)
    w = np.exp(-((rc[:, 0] - row) ** 2 + (rc[:, 1] - col) ** 2) / (2.0 * width ** 2))
    return w / w.sum()


def build_schedule(spec: ScenarioFile, grid: Grid) -> RateSchedule:
    """Piecewise-constant per-cell rates from the scenario's rate description."""
    rs = spec.rates
    H = spec.horizon_hours
    if rs.file:
        sched = RateSchedule.load(spec.resolve(rs.file), grid.n)
        if sched.horizon_hours != H:
            sched = RateSchedule(H, sched.breakpoints)
        return sched
    rng = np.random.default_rng(rs.heterogeneity_seed)
    base = np.exp(rng.normal(0.0, rs.heterogeneity_sigma, grid.n)) if rs.heterogeneity_sigma > 0 else np.ones(grid.n)
    # a cell on several corridors takes the largest multiplier, not the product
    boost = np.ones(grid.n)
    for cor in rs.corridors:
        for c in range(grid.n):
            r, k = grid.row_col(c)
            if (cor.row is not None and r == cor.row) or (cor.col is not None and k == cor.col):
                boost[c] = max(boost[c], cor.multiplier)
    base = base * boost
    base = rs.base_per_hour * base / base.sum()
    for h in rs.hotspots:
        if h.row >= grid.rows or h.col >= grid.cols:
            raise ConfigError(f"rates.hotspots: ({h.row}, {h.col}) outside the grid")
    kernels = [_kernel(grid, h.row, h.col, h.width_cells) * h.rate_per_hour for h in rs.hotspots]

    starts = {0.0}
    for h in rs.hotspots:
        starts.add(h.start_h)
        if h.end_h is not None:
            starts.add(h.end_h)
    if rs.daily_profile:
        step = 24.0 / len(rs.daily_profile)
        starts.update(np.arange(0.0, H, step).tolist())
    starts = sorted(s for s in starts if s < H)

    bps: list[list[tuple[float, float]]] = [[] for _ in range(grid.n)]
    for s in starts:
        rate = base.copy()
        for h, k in zip(rs.hotspots, kernels):
            if h.start_h <= s and (h.end_h is None or s < h.end_h):
                rate += k
        if rs.daily_profile:
            rate *= rs.daily_profile[int((s % 24.0) // (24.0 / len(rs.daily_profile)))]
        for c in range(grid.n):
            v = float(rate[c])
            if not bps[c] or bps[c][-1][1] != v:
                bps[c].append((float(s), v))
    return RateSchedule(H, tuple(tuple(b) for b in bps))

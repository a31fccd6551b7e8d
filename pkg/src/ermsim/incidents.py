"""Incident generation, dataset construction, cell clustering and resampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import _kmeans
from .errors import InvalidArgument, UnresamplableCluster
from .geo import CellId, Grid

FEATURE_NAMES = (
    "prev_window_count",
    "same_window_prev_day",
    "prev_day_total",
    "hour_sin",
    "hour_cos",
    "cell_base_freq",
)


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant incident rate per cell, in incidents per hour.

    ``breakpoints[c]`` is a sequence of ``(start_hour, rate)`` pairs; the first
    starts at hour 0 and each rate holds until the next start (or the horizon).
    """

    horizon_hours: float
    breakpoints: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self) -> None:
        if not self.horizon_hours > 0:
            raise InvalidArgument("horizon_hours must be positive")
        for c, bps in enumerate(self.breakpoints):
            if not bps or bps[0][0] != 0:
                raise InvalidArgument(f"cell {c}: first breakpoint must start at hour 0")
            starts = [s for s, _ in bps]
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise InvalidArgument(f"cell {c}: breakpoints must be strictly increasing")
            if any(r < 0 or not math.isfinite(r) for _, r in bps):
                raise InvalidArgument(f"cell {c}: rates must be finite and non-negative")

    @property
    def n_cells(self) -> int:
        return len(self.breakpoints)

    @classmethod
    def constant(cls, rates: Sequence[float], horizon_hours: float) -> "RateSchedule":
        return cls(float(horizon_hours), tuple(((0.0, float(r)),) for r in rates))

    def rate_at(self, cell: CellId, hour: float) -> float:
        bps = self.breakpoints[cell]
        rate = bps[0][1]
        for start, r in bps:
            if start > hour:
                break
            rate = r
        return rate

    def rates_at(self, hour: float) -> np.ndarray:
        return np.array([self.rate_at(c, hour) for c in range(self.n_cells)])

    def max_rate(self, cell: CellId) -> float:
        return max(r for _, r in self.breakpoints[cell])

    def expected_count(self, cell: CellId) -> float:
        """Integral of the cell's rate over the horizon."""
        bps = self.breakpoints[cell]
        total = 0.0
        for i, (start, r) in enumerate(bps):
            if start >= self.horizon_hours:
                break
            end = bps[i + 1][0] if i + 1 < len(bps) else self.horizon_hours
            total += r * (min(end, self.horizon_hours) - start)
        return total

    def mean_rates(self, start_hour: float = 0.0, end_hour: float | None = None) -> np.ndarray:
        """Time-averaged rate per cell over ``[start_hour, end_hour)``."""
        end = self.horizon_hours if end_hour is None else end_hour
        out = np.zeros(self.n_cells)
        for c, bps in enumerate(self.breakpoints):
            total = 0.0
            for i, (s, r) in enumerate(bps):
                e = bps[i + 1][0] if i + 1 < len(bps) else math.inf
                lo, hi = max(s, start_hour), min(e, end)
                if hi > lo:
                    total += r * (hi - lo)
            out[c] = total / (end - start_hour)
        return out

    def to_json(self) -> dict:
        return {
            "horizon_hours": self.horizon_hours,
            "cells": [
                {"cell": c, "breakpoints": [[s, r] for s, r in bps]} for c, bps in enumerate(self.breakpoints)
            ],
        }

    @classmethod
    def from_json(cls, data: dict, n_cells: int | None = None) -> "RateSchedule":
        """Cells absent from ``data`` get a zero rate when ``n_cells`` is given."""
        entries = {int(e["cell"]): e["breakpoints"] for e in data["cells"]}
        n = n_cells if n_cells is not None else (max(entries) + 1 if entries else 0)
        if entries and max(entries) >= n:
            raise InvalidArgument(f"rate schedule names cell {max(entries)} but grid has {n} cells")
        bps = tuple(
            tuple((float(s), float(r)) for s, r in entries.get(c, [[0.0, 0.0]])) for c in range(n)
        )
        return cls(float(data["horizon_hours"]), bps)

    @classmethod
    def load(cls, path: str | Path, n_cells: int | None = None) -> "RateSchedule":
        with open(path) as fh:
            return cls.from_json(json.load(fh), n_cells)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


@dataclass(frozen=True)
class Incident:
    id: int
    cell: CellId
    time: float
    service_seconds: float


@dataclass(frozen=True)
class IncidentTrace:
    incidents: tuple[Incident, ...]
    horizon_hours: float

    def __len__(self) -> int:
        return len(self.incidents)

    def __iter__(self) -> Iterator[Incident]:
        return iter(self.incidents)

    @property
    def horizon_seconds(self) -> float:
        return self.horizon_hours * 3600.0

    def window(self, start_s: float, end_s: float) -> "IncidentTrace":
        """Incidents in ``[start_s, end_s)`` with times shifted to start at zero."""
        picked = [
            Incident(i, inc.cell, inc.time - start_s, inc.service_seconds)
            for i, inc in enumerate(x for x in self.incidents if start_s <= x.time < end_s)
        ]
        return IncidentTrace(tuple(picked), (end_s - start_s) / 3600.0)

    def save(self, path: str | Path) -> None:
        """JSON Lines: a header ``{"horizon_hours": ...}`` then one incident per line."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"horizon_hours": self.horizon_hours}) + "\n")
            for inc in self.incidents:
                rec = {"id": inc.id, "cell": inc.cell, "time_s": inc.time, "service_s": inc.service_seconds}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path, horizon_hours: float | None = None) -> "IncidentTrace":
        incidents = []
        horizon = horizon_hours
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "horizon_hours" in rec:
                    horizon = float(rec["horizon_hours"])
                    continue
                incidents.append(Incident(int(rec["id"]), int(rec["cell"]), float(rec["time_s"]), float(rec["service_s"])))
        if horizon is None:
            raise InvalidArgument(f"{path}: no horizon header and none supplied")
        incidents.sort(key=lambda i: (i.time, i.id))
        if len({i.id for i in incidents}) != len(incidents):
            raise InvalidArgument(f"{path}: duplicate incident ids")
        return cls(tuple(incidents), horizon)


@dataclass(frozen=True)
class ServiceDist:
    mean_s: float = 1800.0
    jitter_s: float = 600.0

    def __post_init__(self) -> None:
        if not self.mean_s - self.jitter_s > 0 or self.jitter_s < 0:
            raise InvalidArgument("service times need mean_s > jitter_s >= 0")


def generate_trace(schedule: RateSchedule, grid: Grid, seed: int, service: ServiceDist = ServiceDist()) -> IncidentTrace:
    """Sample a nonhomogeneous Poisson trace by thinning, one substream per cell.

    Candidates come from a homogeneous process at the cell's peak rate and are
    kept with probability rate(t) / peak, so cells are independent of each
    other and of the order they are generated in.
    """
    if schedule.n_cells != grid.n:
        raise InvalidArgument(f"schedule covers {schedule.n_cells} cells, grid has {grid.n}")
    horizon = schedule.horizon_hours
    children = np.random.SeedSequence(seed).spawn(grid.n)
    records: list[tuple[float, int, float]] = []
    for cell, ss in enumerate(children):
        peak = schedule.max_rate(cell)
        if peak <= 0:
            continue
        rng = np.random.default_rng(ss)
        n_cand = rng.poisson(peak * horizon)
        hours = np.sort(rng.uniform(0.0, horizon, n_cand))
        starts = np.array([s for s, _ in schedule.breakpoints[cell]])
        rates = np.array([r for _, r in schedule.breakpoints[cell]])
        lam = rates[np.searchsorted(starts, hours, side="right") - 1]
        keep = rng.uniform(size=n_cand) * peak < lam
        kept = hours[keep]
        svc = rng.uniform(service.mean_s - service.jitter_s, service.mean_s + service.jitter_s, len(kept))
        records.extend((float(h) * 3600.0, cell, float(s)) for h, s in zip(kept, svc))
    records.sort(key=lambda r: (r[0], r[1]))
    incidents = tuple(Incident(i, c, t, s) for i, (t, c, s) in enumerate(records) if t < horizon * 3600.0)
    return IncidentTrace(incidents, horizon)


@dataclass(frozen=True)
class FeatureRow:
    cell: CellId
    window: int
    features: tuple[float, ...]
    label: int

    @property
    def binary_label(self) -> int:
        return int(self.label > 0)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled (cell, window) rows stored column-wise.

    ``source`` and ``mix`` record provenance: an original row ``i`` has source
    ``(i, i)`` and mix 0; a synthetic row interpolates the features of source
    rows ``a`` and ``b`` of the parent dataset as ``x[a] + mix * (x[b] - x[a])``.
    """

    features: np.ndarray
    cells: np.ndarray
    windows: np.ndarray
    labels: np.ndarray
    window_hours: float
    feature_names: tuple[str, ...] = FEATURE_NAMES
    synthetic: np.ndarray | None = None
    source: np.ndarray | None = None
    mix: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.labels)
        if self.features.shape != (n, len(self.feature_names)):
            raise InvalidArgument(f"features shape {self.features.shape} does not match {n} rows x {len(self.feature_names)} names")
        if self.synthetic is None:
            object.__setattr__(self, "synthetic", np.zeros(n, dtype=bool))
        if self.source is None:
            idx = np.arange(n)
            object.__setattr__(self, "source", np.stack([idx, idx], axis=1))
        if self.mix is None:
            object.__setattr__(self, "mix", np.zeros(n))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def binary_labels(self) -> np.ndarray:
        return (self.labels > 0).astype(int)

    @property
    def arity(self) -> int:
        return self.features.shape[1]

    def rows(self) -> Iterator[FeatureRow]:
        for i in range(len(self)):
            yield FeatureRow(int(self.cells[i]), int(self.windows[i]), tuple(self.features[i]), int(self.labels[i]))

    def subset(self, mask_or_idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[mask_or_idx],
            self.cells[mask_or_idx],
            self.windows[mask_or_idx],
            self.labels[mask_or_idx],
            self.window_hours,
            self.feature_names,
        )


def window_counts(trace: IncidentTrace, n_cells: int, window_hours: float) -> np.ndarray:
    """Incident counts per (cell, window); trailing partial windows are dropped."""
    n_windows = int(math.floor(trace.horizon_hours / window_hours + 1e-9))
    counts = np.zeros((n_cells, n_windows), dtype=int)
    for inc in trace.incidents:
        w = int(inc.time // (window_hours * 3600.0))
        if w < n_windows:
            counts[inc.cell, w] += 1
    return counts


def build_dataset(trace: IncidentTrace, grid: Grid, window_hours: float = 4.0) -> Dataset:
    """One row per (cell, window) with lag features; windows without a day lag are dropped.

    ``cell_base_freq`` is the cell's fraction of positive windows strictly
    before the row's window, so no row sees its own label.
    """
    if not window_hours > 0:
        raise InvalidArgument("window_hours must be positive")
    per_day = 24.0 / window_hours
    if abs(per_day - round(per_day)) > 1e-9:
        raise InvalidArgument(f"window of {window_hours} h does not divide a day")
    per_day = int(round(per_day))
    counts = window_counts(trace, grid.n, window_hours)
    n_cells, n_windows = counts.shape
    if n_windows <= per_day:
        empty = np.zeros((0, len(FEATURE_NAMES)))
        z = np.zeros(0, dtype=int)
        return Dataset(empty, z, z.copy(), z.copy(), window_hours)

    wins = np.arange(per_day, n_windows)
    positive = (counts > 0).astype(float)
    cum_pos = np.concatenate([np.zeros((n_cells, 1)), np.cumsum(positive, axis=1)], axis=1)
    cum_cnt = np.concatenate([np.zeros((n_cells, 1), dtype=int), np.cumsum(counts, axis=1)], axis=1)

    prev = counts[:, wins - 1]
    lag_day = counts[:, wins - per_day]
    day_total = cum_cnt[:, wins] - cum_cnt[:, wins - per_day]
    base = cum_pos[:, wins] / wins
    hours = (wins * window_hours) % 24.0
    ang = 2.0 * math.pi * hours / 24.0
    sin = np.broadcast_to(np.sin(ang), prev.shape)
    cos = np.broadcast_to(np.cos(ang), prev.shape)

    feats = np.stack([prev, lag_day, day_total, sin, cos, base], axis=-1).reshape(-1, len(FEATURE_NAMES))
    cells = np.repeat(np.arange(n_cells), len(wins))
    windows = np.tile(wins, n_cells)
    labels = counts[:, wins].reshape(-1)
    return Dataset(feats.astype(float), cells, windows, labels, window_hours)


def sparsity(dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InvalidArgument("sparsity of an empty dataset is undefined")
    return float(np.mean(dataset.labels == 0))


def split_chronological(dataset: Dataset, train_fraction: float = 0.7) -> tuple[Dataset, Dataset]:
    """Split by window index: the earliest ``train_fraction`` of windows train."""
    wins = np.unique(dataset.windows)
    cut = wins[int(math.floor(len(wins) * train_fraction))] if len(wins) else 0
    train = dataset.windows < cut
    return dataset.subset(train), dataset.subset(~train)


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_of: dict[int, int]
    m: int

    def members(self, cluster: int) -> list[int]:
        return sorted(c for c, k in self.cluster_of.items() if k == cluster)

    def row_clusters(self, cells: np.ndarray) -> np.ndarray:
        return np.array([self.cluster_of[int(c)] for c in cells], dtype=int)

    def to_json(self) -> dict:
        return {"m": self.m, "cluster_of": {str(c): k for c, k in sorted(self.cluster_of.items())}}

    @classmethod
    def from_json(cls, data: dict) -> "ClusterAssignment":
        return cls({int(c): int(k) for c, k in data["cluster_of"].items()}, int(data["m"]))


def cell_signatures(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell (mean, variance, mean per hour-of-day bucket) of the count label."""
    cells = np.unique(dataset.cells)
    per_day = int(round(24.0 / dataset.window_hours))
    sig = np.zeros((len(cells), 2 + per_day))
    for i, c in enumerate(cells):
        m = dataset.cells == c
        lab = dataset.labels[m].astype(float)
        bucket = dataset.windows[m] % per_day
        sig[i, 0] = lab.mean()
        sig[i, 1] = lab.var()
        for b in range(per_day):
            sel = bucket == b
            sig[i, 2 + b] = lab[sel].mean() if sel.any() else 0.0
    return cells, sig


def cluster_cells(dataset: Dataset, m: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    cells, sig = cell_signatures(dataset)
    if m < 1 or m > len(cells):
        raise InvalidArgument(f"m must be in [1, {len(cells)}], got {m}")
    result = _kmeans.lloyd(sig, np.ones(len(cells)), m, seed, max_iters)
    labels, _ = _kmeans.assign_nonempty(sig, result.centers)
    return ClusterAssignment({int(c): int(k) for c, k in zip(cells, labels)}, m)


@dataclass(frozen=True)
class ResamplePlan:
    """Per-cluster row targets; ``freq`` is positives / rows."""

    anchor: int
    original_pos: dict[int, int]
    original_rows: dict[int, int]
    target_pos: dict[int, int]
    target_neg: dict[int, int]

    def original_freq(self, c: int) -> float:
        return self.original_pos[c] / self.original_rows[c]

    def target_freq(self, c: int) -> float:
        return self.target_pos[c] / (self.target_pos[c] + self.target_neg[c])


def plan_resample(dataset: Dataset, clusters: ClusterAssignment) -> ResamplePlan:
    row_cl = clusters.row_clusters(dataset.cells)
    pos = dataset.binary_labels == 1
    present = sorted(set(row_cl.tolist()))
    n_pos = {c: int(np.sum(pos & (row_cl == c))) for c in present}
    n_rows = {c: int(np.sum(row_cl == c)) for c in present}
    for c in present:
        if n_pos[c] == 0:
            raise UnresamplableCluster(c)
    freq = {c: n_pos[c] / n_rows[c] for c in present}
    anchor = max(present, key=lambda c: (freq[c], -c))

    t_pos, t_neg = {}, {}
    a_neg = n_rows[anchor] - n_pos[anchor]
    if n_pos[anchor] <= a_neg:
        half = n_rows[anchor] // 2
        t_pos[anchor] = t_neg[anchor] = half
    else:
        t_pos[anchor] = t_neg[anchor] = a_neg
    anchor_freq = t_pos[anchor] / (t_pos[anchor] + t_neg[anchor])
    for c in present:
        if c == anchor:
            continue
        f = anchor_freq * freq[c] / freq[anchor]
        n_neg = n_rows[c] - n_pos[c]
        p = max(1, int(round(n_rows[c] * f)))
        if n_rows[c] - p <= n_neg:
            t_pos[c], t_neg[c] = p, n_rows[c] - p
        else:
            # hitting the target at the original size would need invented negatives
            t_pos[c] = max(1, int(round(n_neg * f / (1.0 - f))))
            t_neg[c] = n_neg
    return ResamplePlan(anchor, n_pos, n_rows, t_pos, t_neg)


def _knn(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    k = min(k, len(points) - 1)
    out = np.zeros((len(points), max(k, 0)), dtype=int)
    if k <= 0:
        return out
    for lo in range(0, len(points), chunk):
        hi = min(lo + chunk, len(points))
        d = _kmeans.sq_dists(points[lo:hi], points)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def resample(dataset: Dataset, clusters: ClusterAssignment, seed: int = 0, k_neighbors: int = 5) -> Dataset:
    """Balance the highest-frequency cluster and keep cross-cluster frequency ratios.

    The anchor cluster (highest positive frequency) is brought to equal
    positives and negatives; every other cluster keeps its row count and moves
    its positive count so that its frequency relative to the anchor matches
    the original ratio. Extra positives are interpolated between a positive
    row and one of its ``k_neighbors`` nearest positive rows from the same
    cluster; surplus rows are dropped uniformly. Negatives are never invented.
    """
    plan = plan_resample(dataset, clusters)
    row_cl = clusters.row_clusters(dataset.cells)
    pos = dataset.binary_labels == 1
    rng = np.random.default_rng(seed)
    X = dataset.features

    keep_idx: list[np.ndarray] = []
    synth_src: list[np.ndarray] = []
    synth_mix: list[np.ndarray] = []
    for c in sorted(plan.target_pos):
        p_idx = np.flatnonzero(pos & (row_cl == c))
        n_idx = np.flatnonzero(~pos & (row_cl == c))
        tp, tn = plan.target_pos[c], plan.target_neg[c]
        if tp <= len(p_idx):
            keep_idx.append(np.sort(rng.choice(p_idx, tp, replace=False)) if tp < len(p_idx) else p_idx)
        else:
            keep_idx.append(p_idx)
            extra = tp - len(p_idx)
            nbrs = _knn(X[p_idx], k_neighbors)
            base = rng.integers(0, len(p_idx), extra)
            if nbrs.shape[1] == 0:
                other = base
            else:
                other = nbrs[base, rng.integers(0, nbrs.shape[1], extra)]
            u = rng.uniform(0.0, 1.0, extra)
            synth_src.append(np.stack([p_idx[base], p_idx[other]], axis=1))
            synth_mix.append(u)
        keep_idx.append(np.sort(rng.choice(n_idx, tn, replace=False)) if tn < len(n_idx) else n_idx)

    kept = np.sort(np.concatenate(keep_idx)) if keep_idx else np.zeros(0, dtype=int)
    src = np.concatenate(synth_src) if synth_src else np.zeros((0, 2), dtype=int)
    mix = np.concatenate(synth_mix) if synth_mix else np.zeros(0)
    a, b = src[:, 0], src[:, 1]
    synth_X = X[a] + mix[:, None] * (X[b] - X[a])
    synth_lab = np.maximum(1, np.rint(dataset.labels[a] + mix * (dataset.labels[b] - dataset.labels[a]))).astype(int)

    return Dataset(
        features=np.concatenate([X[kept], synth_X]),
        cells=np.concatenate([dataset.cells[kept], dataset.cells[a]]),
        windows=np.concatenate([dataset.windows[kept], dataset.windows[a]]),
        labels=np.concatenate([dataset.labels[kept], synth_lab]),
        window_hours=dataset.window_hours,
        feature_names=dataset.feature_names,
        synthetic=np.concatenate([np.zeros(len(kept), dtype=bool), np.ones(len(a), dtype=bool)]),
        source=np.concatenate([np.stack([kept, kept], axis=1), src]).astype(int),
        mix=np.concatenate([np.zeros(len(kept)), mix]),
    )

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ermsim import _kmeans
from ermsim.errors import InvalidArgument
from ermsim.geo import (build_grid, load_travel_override, partition_regions, save_travel_matrix,
                        travel_time)
from ermsim.incidents import Incident, IncidentTrace


def trace_of(cells_times, horizon=24.0):
    incs = tuple(Incident(i, c, t, 600.0) for i, (c, t) in enumerate(cells_times))
    return IncidentTrace(incs, horizon)


def test_single_cell_grid():
    g = build_grid(1, 1, 1.0, 60)
    assert g.n == 1
    assert g.travel_seconds.tolist() == [[0.0]]


def test_two_cells_one_km_at_60kmh():
    g = build_grid(1, 2, 1.0, 60)
    assert travel_time(g, 0, 1) == pytest.approx(60.0)


def test_corner_to_corner_3x3():
    g = build_grid(3, 3, 2.0, 40)
    # (4 + 4) km at 40 km/h
    assert travel_time(g, 0, 8) == pytest.approx(720.0)


@pytest.mark.parametrize("args", [(0, 2, 1.0, 60), (2, -1, 1.0, 60), (2, 2, 0.0, 60), (2, 2, 1.0, 0)])
def test_build_grid_rejects_bad_dims(args):
    with pytest.raises(InvalidArgument):
        build_grid(*args)


def test_travel_time_out_of_range():
    g = build_grid(2, 2, 1.0, 60)
    assert travel_time(g, 3, 3) == 0
    with pytest.raises(IndexError):
        travel_time(g, 0, 4)
    with pytest.raises(IndexError):
        travel_time(g, -1, 0)


def test_travel_matrix_read_only():
    g = build_grid(2, 2, 1.0, 60)
    with pytest.raises(ValueError):
        g.travel_seconds[0, 1] = 5


def test_override_round_trip(tmp_path):
    g = build_grid(1, 3, 1.0, 60)
    path = tmp_path / "tt.csv"
    path.write_text("0,17.5,40\n19,0,3\n41,2.25,0\n")
    o = load_travel_override(g, path)
    assert travel_time(o, 0, 1) == 17.5
    assert travel_time(o, 1, 0) == 19.0
    assert o.overridden
    save_travel_matrix(o, tmp_path / "out.csv")
    again = load_travel_override(g, tmp_path / "out.csv")
    assert np.array_equal(again.travel_seconds, o.travel_seconds)


@pytest.mark.parametrize("text", ["0,1\n1,0\n", "0,1,2\n1,0,1\n2,1,-1\n", "1,1,2\n1,0,1\n2,1,0\n"])
def test_override_rejects_bad_files(tmp_path, text):
    g = build_grid(1, 3, 1.0, 60)
    path = tmp_path / "tt.csv"
    path.write_text(text)
    with pytest.raises(InvalidArgument):
        load_travel_override(g, path)


def test_position_along_rounding():
    g = build_grid(1, 5, 1.0, 60)
    assert g.manhattan_path(0, 4) == [0, 1, 2, 3, 4]
    assert g.position_along(0, 4, 0.0) == 0
    assert g.position_along(0, 4, 0.125) == 0  # exactly half a step: tie goes to the origin
    assert g.position_along(0, 4, 0.13) == 1
    assert g.position_along(0, 4, 0.5) == 2
    assert g.position_along(0, 4, 1.0) == 4
    g2 = build_grid(2, 2, 1.0, 60)
    assert g2.manhattan_path(0, 3) == [0, 1, 3]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_lattice_metric_properties(rows, cols, data):
    g = build_grid(rows, cols, 1.5, 30)
    n = g.n
    a, b, c = (data.draw(st.integers(0, n - 1)) for _ in range(3))
    T = g.travel_seconds
    assert T[a, a] == 0
    assert T[a, b] == T[b, a] >= 0
    assert T[a, c] <= T[a, b] + T[b, c] + 1e-9


def test_partition_empty_trace_single_region():
    g = build_grid(3, 4, 1.0, 60)
    p = partition_regions(g, trace_of([]), 1)
    assert set(p.region_of) == {0}


def test_partition_two_cells_two_regions():
    g = build_grid(1, 2, 1.0, 60)
    p = partition_regions(g, trace_of([(0, 1.0), (1, 2.0), (0, 3.0), (1, 4.0)]), 2)
    assert p.region_of[0] != p.region_of[1]


def test_partition_rejects_bad_k():
    g = build_grid(2, 2, 1.0, 60)
    for k in (0, 5):
        with pytest.raises(InvalidArgument):
            partition_regions(g, trace_of([]), k)


def _lloyd_from(points, weights, centers, iters=100):
    for _ in range(iters):
        lab = _kmeans.nearest(points, centers)
        new = centers.copy()
        for j in range(len(centers)):
            m = lab == j
            if m.any():
                new[j] = np.average(points[m], axis=0, weights=weights[m])
        if np.allclose(new, centers):
            break
        centers = new
    return centers


def test_partition_two_corners_matches_exhaustive_kmeans():
    g = build_grid(3, 3, 1.0, 60)
    events = [(0, float(i)) for i in range(50)] + [(8, float(i)) for i in range(50)]
    p = partition_regions(g, trace_of(events, 100.0), 2, seed=3)
    cents = g.centroids
    pts, w = cents[[0, 8]], np.array([50.0, 50.0])
    best = None
    for i, j in itertools.combinations(range(9), 2):
        c = _lloyd_from(pts, w, cents[[i, j]].copy())
        cost = _kmeans.wcss(pts, w, c, _kmeans.nearest(pts, c))
        if best is None or cost < best[0] - 1e-12:
            best = (cost, c)
    labels = _kmeans.nearest(cents, best[1])
    ours = np.array(p.region_of)
    # same partition up to label permutation
    assert len({(a, b) for a, b in zip(ours, labels)}) == 2
    assert ours[0] != ours[8]
    # contiguous halves: cells of each region form a connected set
    for r in range(2):
        cells = set(p.cells_in(r))
        seen, todo = set(), [min(cells)]
        while todo:
            c = todo.pop()
            if c in seen:
                continue
            seen.add(c)
            todo.extend(n for n in g.neighbors4(c) if n in cells)
        assert seen == cells


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(1, 6), st.integers(0, 10_000), st.lists(st.integers(0, 24), min_size=0, max_size=60))
def test_partition_invariants(rows, cols, k, seed, cells):
    g = build_grid(rows, cols, 1.0, 60)
    k = min(k, g.n)
    tr = trace_of([(c % g.n, float(i)) for i, c in enumerate(cells)], 100.0)
    p = partition_regions(g, tr, k, seed=seed)
    assert len(p.region_of) == g.n
    assert all(0 <= r < k for r in p.region_of)
    assert all(s > 0 for s in p.sizes())
    cents = g.centroids
    rc = np.array(p.region_centroids)
    for c in range(g.n):
        d = np.hypot(*(rc - cents[c]).T)
        assert d[p.region_of[c]] <= d.min() + 1e-9
    assert all(b <= a + 1e-9 for a, b in zip(p.wcss_history, p.wcss_history[1:]))
    assert partition_regions(g, tr, k, seed=seed) == p


def test_empty_region_repair_moves_farthest_cell():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    centers = np.array([[1.0, 0.0], [50.0, 50.0]])
    labels, new_centers = _kmeans.assign_nonempty(pts, centers)
    assert sorted(np.bincount(labels, minlength=2).tolist()) == [1, 2]
    assert np.all(np.isfinite(new_centers))


def test_kmeans_pp_degenerate_points():
    pts = np.zeros((4, 2))
    init = _kmeans.kmeans_pp_init(pts, np.ones(4), 3, np.random.default_rng(0))
    assert init.shape == (3, 2)
    assert math.isclose(float(np.abs(init).sum()), 0.0)

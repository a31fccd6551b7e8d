import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ermsim.detect import (Detection, DetectorParams, ParetoPoint, Report, ReportGenConfig, ScoreEvent,
                           SweepGrid, detect, dominates, generate_reports, load_reports, match, pareto_front,
                           score_cells, sweep, write_pareto)
from ermsim.errors import InvalidArgument
from ermsim.geo import build_grid
from ermsim.incidents import Incident, IncidentTrace, RateSchedule, generate_trace


def trace_of(items, horizon_h=10.0):
    return IncidentTrace(tuple(Incident(i, c, t, 600.0) for i, (c, t) in enumerate(items)), horizon_h)


# -- report generation -----------------------------------------------------------


def test_empty_stream():
    g = build_grid(3, 3, 1.0, 60)
    tr = trace_of([(4, 100.0), (0, 900.0)])
    s = generate_reports(tr, g, ReportGenConfig(0.0, 60.0, 1, 0.0, 300.0), 1)
    assert s.reports == ()
    assert set(s.official_times) == {0, 1}


def test_noiseless_reports_at_incident():
    g = build_grid(3, 3, 1.0, 60)
    tr = trace_of([(4, 100.0), (0, 900.0)])
    s = generate_reports(tr, g, ReportGenConfig(5.0, 0.0, 0, 0.0, 300.0), 2)
    by_inc = {0: (4, 100.0), 1: (0, 900.0)}
    assert s.reports
    for r in s.reports:
        assert (r.cell, r.time) == by_inc[r.source_incident]


def test_true_report_total_within_three_sigma():
    g = build_grid(5, 5, 1.0, 60)
    tr = trace_of([(i % 25, float(i)) for i in range(10_000)], 10.0)
    s = generate_reports(tr, g, ReportGenConfig(3.0, 0.0, 0, 0.0, 0.0), 3)
    n = sum(1 for r in s.reports if r.source_incident is not None)
    assert abs(n - 30_000) <= 3 * math.sqrt(30_000)


def test_report_invariants_and_determinism(tmp_path):
    g = build_grid(4, 4, 0.5, 30)
    tr = generate_trace(RateSchedule.constant(np.full(16, 0.3), 24.0), g, 5)
    gen = ReportGenConfig(3.0, 60.0, 1, 2.0, 360.0)
    a = generate_reports(tr, g, gen, 7)
    b = generate_reports(tr, g, gen, 7)
    assert a == b
    times = [r.time for r in a.reports]
    assert times == sorted(times)
    assert all(0 <= t <= a.horizon_s for t in times)
    cells = {i.id: i.cell for i in tr}
    for r in a.reports:
        if r.source_incident is not None:
            assert len(g.manhattan_path(r.cell, cells[r.source_incident])) <= 2
    a.save(tmp_path / "r.jsonl")
    line = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert set(line) == {"time_s", "cell"}
    assert [(r.time, r.cell) for r in load_reports(tmp_path / "r.jsonl")] == [(r.time, r.cell) for r in a.reports]


def test_negative_generator_param():
    with pytest.raises(InvalidArgument):
        ReportGenConfig(false_rate_per_hour=-1.0)


# -- scoring ---------------------------------------------------------------------


def test_no_reports_no_scores():
    assert score_cells([], build_grid(2, 2, 1.0, 60)) == []


def test_single_report_weights():
    g = build_grid(3, 3, 1.0, 60)
    ev = score_cells([Report(10.0, 4)], g)
    by_cell = {e.cell: e for e in ev}
    assert by_cell[4].score == 1.0 and by_cell[4].own
    for n in (1, 3, 5, 7):
        assert by_cell[n].score == 0.5 and not by_cell[n].own
    assert set(by_cell) == {1, 3, 4, 5, 7}


def test_half_life_arithmetic():
    g = build_grid(1, 1, 1.0, 60)
    ev = score_cells([Report(0.0, 0), Report(60.0, 0)], g, half_life_s=60.0)
    assert ev[-1].score == pytest.approx(1.5, abs=1e-12)


def test_window_eviction():
    g = build_grid(1, 1, 1.0, 60)
    ev = score_cells([Report(0.0, 0), Report(100.0, 0), Report(200.0, 0)], g, window_s=150.0)
    assert [e.score for e in ev] == [1.0, 2.0, 2.0]


def test_unsorted_reports_rejected():
    with pytest.raises(InvalidArgument):
        score_cells([Report(5.0, 0), Report(1.0, 0)], build_grid(1, 1, 1.0, 60))


# -- detection -------------------------------------------------------------------


def test_theta_zero_one_alert_per_report():
    g = build_grid(3, 3, 1.0, 60)
    reps = [Report(float(t), c) for t, c in [(0, 4), (10, 4), (20, 0), (30, 8), (40, 4)]]
    dets = detect(score_cells(reps, g), 0.0)
    assert [(d.time, d.cell) for d in dets] == [(r.time, r.cell) for r in reps]


def test_theta_above_max_no_alerts():
    g = build_grid(3, 3, 1.0, 60)
    ev = score_cells([Report(float(t), 4) for t in range(5)], g)
    assert detect(ev, max(e.score for e in ev) + 1e-9) == []


def test_scripted_two_crossings():
    ev = [ScoreEvent(t, 0, s, True) for t, s in [(0, 0.5), (10, 1.2), (20, 1.4), (400, 0.3), (410, 1.1)]]
    dets = detect(ev, 1.0, refractory_s=300.0)
    assert [(d.time, d.score) for d in dets] == [(10, 1.2), (410, 1.1)]
    assert all(d.score >= 1.0 for d in dets)


def test_neighbour_events_do_not_alert():
    ev = [ScoreEvent(0.0, 1, 5.0, False)]
    assert detect(ev, 0.0) == []


# -- matching --------------------------------------------------------------------


def test_perfect_detections_lead_equals_delay():
    g = build_grid(3, 3, 1.0, 60)
    tr = trace_of([(0, 100.0), (8, 5000.0), (4, 9000.0)])
    official = {i.id: i.time + 300.0 for i in tr}
    dets = [Detection(i.time, i.cell, 1.0) for i in tr]
    m = match(dets, tr, official, g, DetectorParams(0.0, 1.0, 5.0))
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    assert m.mean_lead_s == 300.0


def test_no_detections_zero_convention():
    g = build_grid(3, 3, 1.0, 60)
    tr = trace_of([(0, 100.0)])
    m = match([], tr, {0: 400.0}, g, DetectorParams(1.0, 1.0, 5.0))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)


def test_radius_excludes_far_detection():
    g = build_grid(1, 3, 1.0, 60)
    tr = trace_of([(0, 100.0)])
    m = match([Detection(100.0, 2, 3.0)], tr, {0: 400.0}, g, DetectorParams(1.0, 1.0, 5.0))
    assert m.precision == 0.0 and m.recall == 0.0


def test_pipeline_zero_noise_leads_equal_official_delay():
    g = build_grid(4, 4, 0.5, 30)
    tr = generate_trace(RateSchedule.constant(np.full(16, 0.05), 48.0), g, 3)
    stream = generate_reports(tr, g, ReportGenConfig(3.0, 0.0, 0, 0.0, 300.0), 3)
    dets = detect(score_cells(stream.reports, g, 900.0, 300.0), 0.0, 60.0)
    m = match(dets, tr, stream.official_times, g, DetectorParams(0.0, 0.1, 1.0))
    assert m.leads
    for iid, lead in m.leads.items():
        inc = tr.incidents[iid]
        assert lead == pytest.approx(stream.official_times[iid] - inc.time, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 1.0, 2.0]), st.sampled_from([5.0, 10.0, 20.0]))
def test_match_one_to_one_and_deterministic(seed, radius, window):
    g = build_grid(5, 5, 0.5, 30)
    tr = generate_trace(RateSchedule.constant(np.full(25, 0.1), 24.0), g, seed)
    gen = ReportGenConfig(2.0, 60.0, 1, 1.0, 360.0)
    stream = generate_reports(tr, g, gen, seed)
    dets = detect(score_cells(stream.reports, g, 900.0, 300.0), 1.0, window * 60.0)
    m = match(dets, tr, stream.official_times, g, DetectorParams(1.0, radius, window))
    assert len(m.leads) <= min(len(dets), len(tr))
    assert m.precision == (len(m.leads) / len(dets) if dets else 0.0)
    again = generate_reports(tr, g, gen, seed)
    dets2 = detect(score_cells(again.reports, g, 900.0, 300.0), 1.0, window * 60.0)
    assert match(dets2, tr, again.official_times, g, DetectorParams(1.0, radius, window)) == m


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_alerts_monotone_in_theta(seed, noise_rate):
    # raising theta can only drop or delay an episode's alert
    g = build_grid(5, 5, 0.5, 30)
    tr = generate_trace(RateSchedule.constant(np.full(25, 0.1), 24.0), g, seed)
    stream = generate_reports(tr, g, ReportGenConfig(3.0, 60.0, 0, float(noise_rate), 360.0), seed)
    scores = score_cells(stream.reports, g, 900.0, 300.0)
    prev = None
    for theta in (0.0, 0.5, 1.0, 1.5, 2.0, 3.0):
        dets = detect(scores, theta, 600.0)
        if prev is not None:
            assert len(dets) <= len(prev)
        prev = dets


def test_recall_non_increasing_in_theta_on_preset_stream():
    from ermsim.config import load_scenario
    from ermsim.experiment import detect_sweep

    spec = load_scenario("detect")
    params = [DetectorParams(t, 1.0, 10.0) for t in (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)]
    _, _, points = detect_sweep(spec, 1, params)
    recalls = [p.recall for p in points]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


# -- Pareto ----------------------------------------------------------------------


def pt(f1, lead, radius, theta=0.0):
    return ParetoPoint(DetectorParams(theta, radius, 5.0), f1, lead)


def test_pareto_single_and_dominated():
    a = pt(0.5, 100.0, 1.0)
    assert pareto_front([a]) == [a]
    b = pt(0.6, 120.0, 0.5)
    assert pareto_front([a, b]) == [b]
    with pytest.raises(InvalidArgument):
        pareto_front([])


def _oracle(points):
    out = []
    for p in points:
        dominated = False
        for q in points:
            ge = (q.f1 >= p.f1 and q.mean_lead_s >= p.mean_lead_s and q.radius_km <= p.radius_km)
            gt = (q.f1 > p.f1 or q.mean_lead_s > p.mean_lead_s or q.radius_km < p.radius_km)
            if ge and gt:
                dominated = True
        if not dominated:
            out.append(p)
    return out


def test_pareto_random_matches_oracle():
    rnd = random.Random(0)
    pts = [pt(rnd.choice([0.1, 0.2, 0.3, 0.5]), rnd.choice([0.0, 60.0, 120.0]), rnd.choice([0.5, 1.0, 2.0]), i)
           for i in range(100)]
    assert pareto_front(pts) == _oracle(pts)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-500, 500), st.sampled_from([0.5, 1.0, 2.0])),
                min_size=1, max_size=40))
def test_pareto_nondominance(rows):
    pts = [pt(f, l, r, i) for i, (f, l, r) in enumerate(rows)]
    front = pareto_front(pts)
    assert front == _oracle(pts)
    assert front
    for p in front:
        assert not any(dominates(q, p) for q in pts)


def test_sweep_and_write(tmp_path):
    g = build_grid(4, 4, 0.5, 30)
    tr = generate_trace(RateSchedule.constant(np.full(16, 0.2), 24.0), g, 1)
    stream = generate_reports(tr, g, ReportGenConfig(3.0, 60.0, 0, 1.0, 360.0), 1)
    params = SweepGrid((0.0, 1.5), (0.5, 1.0), (5.0, 10.0)).params()
    pts = sweep(stream, tr, g, params)
    assert len(pts) == 8
    front = write_pareto(pts, tmp_path / "p.csv", tmp_path / "f.json")
    header = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["theta", "radius_km", "window_min", "f1", "mean_lead_s"]
    assert len(json.loads((tmp_path / "f.json").read_text())) == len(front)
    assert all(math.isfinite(p.f1) and math.isfinite(p.mean_lead_s) for p in pts)


def test_detector_params_validation():
    with pytest.raises(InvalidArgument):
        DetectorParams(-0.1, 1.0, 5.0)
    with pytest.raises(InvalidArgument):
        DetectorParams(0.0, 0.0, 5.0)
    with pytest.raises(InvalidArgument):
        SweepGrid((), (1.0,), (5.0,))

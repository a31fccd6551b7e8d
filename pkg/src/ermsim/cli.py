"""Command-line entry point: ``ermsim gen|simulate|forecast|detect``.

Exit codes: 0 success, 1 usage error, 2 scenario schema error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

from .config import ScenarioFile, load_scenario
from .errors import ConfigError, ErmError

log = logging.getLogger("ermsim")

EXIT_OK, EXIT_USAGE, EXIT_SCHEMA, EXIT_RUNTIME = 0, 1, 2, 3

SIM_COLUMNS = ("planner", "seed", "incidents", "served", "pending_at_end", "mean_response_s", "median_response_s",
               "p90_response_s", "utilization", "queued", "epochs", "stale_decision_epochs", "relocations")
FORECAST_COLUMNS = ("model", "resample", "seed", "accuracy", "precision", "recall", "f1", "spatial_correlation",
                    "sparsity", "downstream_mean_response_s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("parameter grid axis is empty")
    return out


def _run_dir(root: str, command: str) -> Path:
    """Fresh timestamped directory under ``root``; never reuses an existing one."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{command}-{stamp}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _fmt(v):
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return v


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _json_safe(v):
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    return v


def _seeds(spec: ScenarioFile, arg) -> list[int]:
    return list(arg) if arg else list(spec.seeds)


def cmd_gen(args) -> int:
    from .detect import ReportGenConfig, generate_reports
    from .experiment import World

    spec = load_scenario(args.scenario)
    world = World.from_spec(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    r = spec.detect.reports
    gen = ReportGenConfig(r.reports_per_incident_mean, r.report_delay_mean_s, r.spatial_noise_cells,
                          r.false_rate_per_hour, r.official_delay_mean_s)
    for seed in _seeds(spec, args.seeds):
        trace = world.trace(seed)
        trace.save(out / f"trace_seed{seed}.jsonl")
        stream = generate_reports(trace, world.grid, gen, seed)
        stream.save(out / f"reports_seed{seed}.jsonl")
        stream.save_official(out / f"official_seed{seed}.json")
    world.schedule.save(out / "rates.json")
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .experiment import _world, run_matrix, simulate_one

    spec = load_scenario(args.scenario)
    planners = args.planner or [spec.planner.name]
    seeds = _seeds(spec, args.seeds)
    _world(spec)  # fail fast on rate or grid problems
    out = _run_dir(args.out, "simulate")
    rows = run_matrix(spec, planners, seeds, args.jobs)
    _write_rows(out / "results.csv", SIM_COLUMNS, rows)
    with open(out / "results.json", "w") as fh:
        json.dump({"scenario": spec.name, "rows": rows}, fh, indent=1, sort_keys=True)
    if args.logs:
        for p in planners:
            for s in seeds:
                rep = simulate_one(spec, p, s, record_events=True)
                rep.write_event_log(out / f"events_{p}_seed{s}.csv")
                rep.write_decision_log(out / f"decisions_{p}_seed{s}.csv")
    for r in rows:
        print(f"{r['planner']:>9} seed={r['seed']:<4} mean_response_s={_fmt(r['mean_response_s'])}")
    print(out)
    return EXIT_OK


def cmd_forecast(args) -> int:
    from .experiment import run_forecast

    spec = load_scenario(args.scenario)
    models = ["freq", "logit", "zip"] if args.model == "all" else [args.model or spec.forecast.model]
    if args.resample == "both":
        modes = [False, True]
    elif args.resample is None:
        modes = [spec.forecast.resample]
    else:
        modes = [args.resample == "on"]
    out = _run_dir(args.out, "forecast")
    rows = []
    for kind in models:
        for use in modes:
            for seed in _seeds(spec, args.seeds):
                res = run_forecast(spec, kind, use, seed, downstream=args.downstream)
                tag = f"{kind}_{'on' if use else 'off'}_seed{seed}"
                res.model.save(out / f"model_{tag}.json")
                rows.append({"model": kind, "resample": "on" if use else "off", "seed": seed,
                             **res.metrics.as_dict(), "sparsity": res.sparsity,
                             "downstream_mean_response_s": res.downstream_mean_response_s})
    _write_rows(out / "metrics.csv", FORECAST_COLUMNS, rows)
    with open(out / "metrics.json", "w") as fh:
        json.dump(_json_safe(rows), fh, indent=1, sort_keys=True)
    for r in rows:
        print(f"{r['model']:>5} resample={r['resample']:<3} seed={r['seed']:<4} "
              f"recall={r['recall']:.3f} f1={r['f1']:.3f} corr={r['spatial_correlation']:.3f}")
    print(out)
    return EXIT_OK


def cmd_detect(args) -> int:
    from .detect import SweepGrid, write_pareto
    from .experiment import detect_sweep

    spec = load_scenario(args.scenario)
    g = spec.detect.grid
    try:
        grid = SweepGrid(tuple(args.thetas or g.thetas), tuple(args.radii or g.radii_km),
                         tuple(args.windows or g.windows_min))
        params = grid.params()
    except ErmError as e:
        raise UsageError(str(e)) from None
    out = _run_dir(args.out, "detect")
    for seed in _seeds(spec, args.seeds):
        _, _, points = detect_sweep(spec, seed, params)
        front = write_pareto(points, out / f"pareto_seed{seed}.csv", out / f"frontier_seed{seed}.json")
        print(f"seed={seed} points={len(points)} frontier={len(front)}")
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .experiment import PLANNERS, default_jobs

    p = _Parser(prog="ermsim", description="Emergency response simulation, planning, forecasting and detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write incident traces and report streams")
    g.add_argument("scenario", help="scenario YAML file or preset name")
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", type=_int_list)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("simulate", help="run planners over seeds")
    s.add_argument("scenario")
    s.add_argument("--planner", choices=PLANNERS, action="append",
                   help="repeat to compare planners; defaults to the scenario's planner")
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--jobs", type=int, default=default_jobs())
    s.add_argument("--out", default="runs")
    s.add_argument("--logs", action="store_true", help="also write per-run event and decision logs")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("forecast", help="train and evaluate an incident model")
    f.add_argument("scenario")
    f.add_argument("--model", choices=("freq", "logit", "zip", "all"))
    f.add_argument("--resample", choices=("on", "off", "both"))
    f.add_argument("--seeds", type=_int_list)
    f.add_argument("--downstream", action="store_true",
                   help="also simulate responders stationed on the forecast over the test period")
    f.add_argument("--out", default="runs")
    f.set_defaults(func=cmd_forecast)

    d = sub.add_parser("detect", help="sweep detector parameters and report the Pareto frontier")
    d.add_argument("scenario")
    d.add_argument("--thetas", type=_float_list)
    d.add_argument("--radii", type=_float_list)
    d.add_argument("--windows", type=_float_list)
    d.add_argument("--seeds", type=_int_list)
    d.add_argument("--out", default="runs")
    d.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ermsim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"ermsim: config error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except ErmError as e:
        print(f"ermsim: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"ermsim: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

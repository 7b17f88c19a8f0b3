"""``loopsim`` command line: run, sweep, compare and analyze."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import bench
from .errors import ConfigError, LoopsimError, SchemaError
from .scene import analyze_graph, load, read_document


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: $LOOPSIM_OUT or ./loopsim_out)")
    p.add_argument("--seed", type=int, help="perturbation seed")
    p.add_argument("--dt", type=float, help="time step in seconds")
    p.add_argument("--mode", choices=["pgs", "direct"], help="solver mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write CSV logs")
    p.add_argument("scenario", help="scenario file or packaged scenario name")
    _common(p)

    p = sub.add_parser("sweep", help="precision or cfm sweep")
    p.add_argument("kind", choices=["precision", "cfm"])
    p.add_argument("scenario")
    p.add_argument("--values", type=float, nargs="+", help="sweep values (default: from scenario)")
    p.add_argument("--conventions", nargs="+", choices=["world_frame", "chained_frame"])
    _common(p)

    p = sub.add_parser("compare", help="pgs_cfm against eliminate_direct at the critical joint")
    p.add_argument("scenario")
    _common(p)

    p = sub.add_parser("analyze", help="print the body-joint graph report of a scene")
    p.add_argument("scene", help="scene document, scenario file or packaged scenario name")
    return parser


def _out_dir(args, name: str, suffix: str = "") -> Path:
    base = Path(args.out) if args.out else bench.default_out_dir() / name
    return base / suffix if suffix else base


def _scenario(args) -> bench.Scenario:
    sc = bench.load_scenario(args.scenario)
    return bench.with_overrides(sc, seed=args.seed, dt=args.dt, mode=args.mode)


def cmd_run(args) -> int:
    sc = _scenario(args)
    res = bench.run_scenario(sc, _out_dir(args, sc.name))
    o = res.outcome
    line = f"{sc.name}: {o.status} after {o.steps} steps"
    if o.status == "failed":
        line += f" ({o.error_kind} at step {o.failed_step}: {o.message})"
    print(line)
    for a in res.assertions:
        print(f"  {'PASS' if a['passed'] else 'FAIL'} {a['metric']} = {a['value']}")
    print(f"  wrote {res.out_dir}")
    return res.exit_status


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    sweep = sc.sweep or {}
    values = args.values or sweep.get("values")
    if not values:
        raise ConfigError("no sweep values given")
    start = time.perf_counter()
    if args.kind == "precision":
        convs = args.conventions or sweep.get("conventions") or ["world_frame", "chained_frame"]
        results = bench.run_precision_sweep(sc, values, convs)
    else:
        results = {"pgs_cfm": bench.run_cfm_sweep(sc, values)}
    checks = bench.check_expectations(sweep.get("expect", []) if sweep.get("kind") == args.kind else [],
                                      results)
    out = _out_dir(args, sc.name)
    bench.write_sweep(results, out, f"{args.kind}_sweep", sc, checks, time.perf_counter() - start)
    for label, res in results.items():
        for p in res.points:
            extra = f" {p.error_kind} at step {p.failed_step}" if p.status == "failed" else ""
            print(f"{label:14s} {res.axis}={p.value:.3g}: {p.status}{extra}, "
                  f"peak violation {p.peak_violation:.3e} m")
    for c in checks:
        print(f"  {'PASS' if c['passed'] else 'FAIL'} {c['label']} {c['value']:g} expected {c['outcome']}")
    print(f"  wrote {out}")
    return bench.EXIT_OK if all(c["passed"] for c in checks) else bench.EXIT_ASSERTION


def cmd_compare(args) -> int:
    sc = _scenario(args)
    start = time.perf_counter()
    rep = bench.compare_modes(sc)
    out = _out_dir(args, sc.name, "compare")
    bench.write_compare(rep, out, sc, time.perf_counter() - start)
    print(f"{sc.name} joint {rep.joint}: max force difference {rep.max_difference:.3e} N, "
          f"rms {rep.rms_difference:.3e} N, tolerance {rep.tolerance:g} N -> "
          f"{'PASS' if rep.passed else 'FAIL'}")
    print(f"  max joint-coordinate difference {rep.max_angle_difference:.3e}; runs {rep.statuses}")
    print(f"  wrote {out}")
    if any(s != "stable" for s in rep.statuses.values()):
        return bench.EXIT_SIMULATION
    return bench.EXIT_OK if rep.passed else bench.EXIT_ASSERTION


def cmd_analyze(args) -> int:
    path = Path(args.scene)
    if path.exists():
        doc = read_document(path)
        if "scene" in doc and "duration" in doc:
            doc = bench.scene_document(bench.scenario_from_dict(doc, path.parent))
    else:
        doc = bench.scene_document(bench.load_scenario(args.scene))
    report = analyze_graph(load(doc))
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return bench.EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "analyze": cmd_analyze}
    try:
        return handler[args.command](args)
    except (ConfigError, SchemaError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG
    except LoopsimError as exc:
        print(f"simulation error: {exc.kind}: {exc}", file=sys.stderr)
        return bench.EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 best plan has hard violations, 2 bad arguments or
unreadable files, 3 unroutable edge or depot cut off by preprocessing.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from gritplan import __version__
from gritplan.assignment import Assignment, encode_features, write_assignment
from gritplan.fileio import atomic_write_csv, atomic_write_text
from gritplan.fleet import FleetError, FleetSpec, load_fleet, write_fleet
from gritplan.network import (
    DepotUnreachableError,
    NetworkError,
    PathCache,
    RoadNetwork,
    load_instance_network,
    network_stats,
    preprocess,
    write_network,
)
from gritplan.routing import (
    DEADHEAD,
    SELECTIONS,
    Plan,
    UnroutableEdgeError,
    read_routes,
    solve_assignment,
    step_profile,
    write_plan_summary,
    write_routes,
)

log = logging.getLogger("gritplan")

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_UNROUTABLE = 3

OUT_ENV = "GRITPLAN_OUT"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "gritplan_out")) / sub


def _load_instance(instance: str, fleet_path: str | None) -> tuple[RoadNetwork, FleetSpec]:
    d = Path(instance)
    if not d.is_dir():
        raise ConfigError(f"instance directory not found: {d}")
    fp = Path(fleet_path) if fleet_path else d / "fleet.json"
    if not fp.is_file():
        raise ConfigError(f"fleet file not found: {fp}")
    net = load_instance_network(d)
    fleet = load_fleet(fp)
    for dep in fleet.depots:
        if dep.node not in net.nodes:
            raise ConfigError(f"depot {dep.id} sits on unknown node {dep.node}")
    return net, fleet


def _write_json(path: Path, data) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0 or math.isinf(v):
        raise argparse.ArgumentTypeError(f"expected a finite value >= 0, got {text}")
    return v


def _count(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


# ---------------------------------------------------------------- generate / preprocess


def cmd_generate(args) -> int:
    from gritplan.bench import GeneratorConfig, generate_instance, write_instance

    cfg = GeneratorConfig(
        seed=args.seed, nodes=args.nodes, treated_fraction=args.treated, depots=args.depots, max_vehicles=args.max_vehicles
    )
    net, fleet = generate_instance(cfg)
    out = Path(args.out) if args.out else _default_out("instance")
    write_instance(out, net, fleet, cfg)
    print(f"wrote {out} nodes={len(net.nodes)} edges={len(net.edges)} required={len(net.required_edges)}")
    return EXIT_OK


def preprocess_instance(net: RoadNetwork, fleet: FleetSpec, out: Path) -> tuple[RoadNetwork, dict]:
    before = network_stats(net)
    t0 = time.perf_counter()
    small = preprocess(net, fleet.depot_nodes)
    stats = {"before": before, "after": network_stats(small), "seconds": round(time.perf_counter() - t0, 3)}
    write_network(small, out)
    write_fleet(fleet, out / "fleet.json")
    _write_json(out / "stats.json", {"before": stats["before"], "after": stats["after"]})
    return small, stats


def cmd_preprocess(args) -> int:
    net, fleet = _load_instance(args.instance, args.fleet)
    out = Path(args.out) if args.out else _default_out("preprocessed")
    _, stats = preprocess_instance(net, fleet, out)
    b, a = stats["before"], stats["after"]
    print(f"nodes {b['nodes']} -> {a['nodes']}, directed edges {b['directed_edges']} -> {a['directed_edges']}")
    print(f"treated km {a['treated_km']:.3f}, lane-km {a['treated_lane_km']:.3f}, one-way {a['oneway_fraction']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- plan


def _train_config(args):
    from gritplan.policy import TrainConfig

    return TrainConfig(
        iterations=args.iterations,
        w1=args.w1,
        w2=args.w2,
        penalty_weight=args.penalty,
        selection=args.selection,
        depot_capacity=args.depot_capacity,
    )


def run_plan(net: RoadNetwork, fleet: FleetSpec, args, out: Path) -> Plan:
    """Baseline or full training; persists every artifact under ``out``."""
    from gritplan.policy import config_dict, train_loop, write_training_log

    cfg = _train_config(args)
    paths = PathCache(net)
    iter_dir = out / "iterations"

    def persist(it: int, assign: Assignment, plan: Plan | None) -> None:
        write_assignment(assign, iter_dir / f"iter_{it:03d}_assignment.csv")

    result = train_loop(net, fleet, args.iterations, args.seed, cfg, paths, on_iteration=persist)
    plan = result.best_plan
    write_assignment(result.best_assignment, out / "assignment.csv")
    write_routes(plan, out / "routes", net, fleet.vehicle)
    write_training_log(result.log, out / "training_log.csv")
    extra = {
        "seed": args.seed,
        "iterations": args.iterations,
        "best_iteration": result.best_iteration,
        "warm_agreement": result.warm_agreement,
        "reference": {"Z1_min": result.reference[0], "Z2_kg": result.reference[1]},
        "baseline": {"Z1_min": result.baseline_plan.Z1_minutes, "Z2_kg": result.baseline_plan.Z2_kg, "NoV": result.baseline_plan.NoV},
        "config": config_dict(cfg),
        "feature_scaler": encode_features(net, fleet.depots)[2].as_dict(),
        "depot_capacity": args.depot_capacity,
        "version": __version__,
    }
    write_plan_summary(plan, out / "plan.json", fleet, extra)
    if result.model is not None:
        result.model.save(out / "policy.json")
    if not args.no_figures:
        from gritplan.plotting import training_curve

        training_curve(result.log, out / "figures" / "training_curve.png", title=net.name)
    return plan


def _report_plan(plan: Plan, out: Path) -> int:
    print(f"Z1={plan.Z1_minutes:.3f} min  Z2={plan.Z2_kg:.3f} kg  NoV={plan.NoV}")
    for v in plan.soft_violations:
        print(f"soft violation: {v.message}")
    for v in plan.hard_violations:
        print(f"hard violation [{v.rule}]: {v.message}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_VIOLATIONS if plan.hard_violations else EXIT_OK


def cmd_plan(args) -> int:
    net, fleet = _load_instance(args.instance, args.fleet)
    out = Path(args.out) if args.out else _default_out("plan")
    return _report_plan(run_plan(net, fleet, args, out), out)


def cmd_run(args) -> int:
    """Preprocess, plan and export in one go."""
    net, fleet = _load_instance(args.instance, args.fleet)
    out = Path(args.out) if args.out else _default_out("run")
    small, stats = preprocess_instance(net, fleet, out / "instance")
    print(f"preprocessed: {stats['before']['directed_edges']} -> {stats['after']['directed_edges']} directed edges")
    plan = run_plan(small, fleet, args, out / "plan")
    export_geojson(small, fleet, plan, out / "plan" / "routes.geojson")
    return _report_plan(plan, out)


# ---------------------------------------------------------------- geojson


def route_feature(route_id: int, route, network: RoadNetwork, vehicle) -> dict:
    coords: list[list[float]] = []
    segments = []
    fallback = False
    prof = step_profile(route.steps, network, vehicle)
    for step, (hours, km, _salt) in zip(route.steps, prof):
        line, real = network.polyline(step.edge)
        fallback |= not real
        pts = [list(map(float, p)) for p in line]
        if coords and coords[-1] == pts[0]:
            pts = pts[1:]
        coords.extend(pts)
        segments.append(
            {
                "edge_id": step.edge,
                "mode": step.mode,
                "length_km": network.edges[step.edge].length_km,
                "cum_km": km,
                "cum_min": hours * 60.0,
                "straight_fallback": not real,
            }
        )
    if len(coords) == 1:
        coords.append(list(coords[0]))
    return {
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": coords},
        "properties": {
            "route_id": route_id,
            "depot_id": route.depot,
            "duration_min": route.duration_minutes,
            "distance_km": route.distance_km,
            "salt_lane_km": route.salt_used_lane_km,
            "co2_kg": route.emissions_kg,
            "treated_edges": sum(1 for s in route.steps if s.mode != DEADHEAD),
            "geometry_fallback": fallback,
            "segments": segments,
        },
    }


def plan_geojson(network: RoadNetwork, fleet: FleetSpec, routes) -> dict:
    feats = []
    for d in fleet.depots:
        x, y = network.nodes[d.node]
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(x), float(y)]},
                "properties": {"depot_id": d.id, "node": d.node, "name": d.name, "max_vehicles": d.max_vehicles},
            }
        )
    for i, r in enumerate(routes, start=1):
        if r.steps:
            feats.append(route_feature(i, r, network, fleet.vehicle))
    return {"type": "FeatureCollection", "features": feats}


def export_geojson(network: RoadNetwork, fleet: FleetSpec, plan: Plan, path: Path) -> Path:
    _write_json(path, plan_geojson(network, fleet, plan.routes))
    return path


def cmd_export_geojson(args) -> int:
    net, fleet = _load_instance(args.instance, args.fleet)
    plan_dir = Path(args.plan)
    routes_dir = plan_dir / "routes"
    if not plan_dir.is_dir():
        raise ConfigError(f"plan directory not found: {plan_dir}")
    routes = read_routes(routes_dir, net, fleet.vehicle) if routes_dir.is_dir() else []
    out = Path(args.out) if args.out else plan_dir / "routes.geojson"
    _write_json(out, plan_geojson(net, fleet, routes))
    print(f"wrote {out} ({len(routes)} routes)")
    return EXIT_OK


# ---------------------------------------------------------------- oracle / bench


def cmd_oracle(args) -> int:
    from gritplan.bench import brute_force_oracle, checker_agreement, micro_instance

    rows, gaps = [], []
    agree = total = 0
    dominated = True
    for k in range(args.count):
        seed = args.seed + k
        n_req = 1 + seed % args.max_edges
        net, fleet = micro_instance(seed, n_req)
        depot = fleet.depots[0]
        paths = PathCache(net)
        required = sorted(net.required_edges)
        orc = brute_force_oracle(net, depot, required, fleet.vehicle, "hard", paths)
        plan = solve_assignment(net, Assignment({e: depot.id for e in required}), fleet, "nearest", paths, "soft")
        rep = checker_agreement(net, fleet, required, paths)
        agree += rep.routes_checked + rep.plans_checked - rep.route_disagreements - rep.plan_disagreements
        total += rep.routes_checked + rep.plans_checked
        gap = (plan.Z1_minutes - orc.Z1_minutes) / orc.Z1_minutes if orc.feasible and orc.Z1_minutes > 0 else 0.0
        dominated &= (not orc.feasible) or orc.Z1_minutes <= plan.Z1_minutes + 1e-9
        gaps.append(gap)
        rows.append([seed, n_req, orc.feasible, repr(orc.Z1_minutes), repr(plan.Z1_minutes), repr(gap), rep.rate])
    out = Path(args.out) if args.out else _default_out("oracle")
    atomic_write_csv(out / "oracle.csv", ["seed", "required", "feasible", "oracle_Z1", "heuristic_Z1", "gap", "agreement"], rows)
    rate = agree / total if total else 1.0
    mean_gap = sum(gaps) / len(gaps) if gaps else 0.0
    print(f"instances={args.count} agreement={rate:.4f} oracle<=heuristic={dominated} mean_gap={mean_gap:.4f}")
    print(f"wrote {out / 'oracle.csv'}")
    return EXIT_OK if rate == 1.0 and dominated else EXIT_VIOLATIONS


def cmd_bench(args) -> int:
    from gritplan.bench import BASELINE, BILEVEL, run_comparison, synthetic_suite, write_report

    cfg = _train_config(args)
    suite = synthetic_suite(args.count, args.seed, (args.min_nodes, args.max_nodes))
    report = run_comparison([(n, net, fl) for n, net, fl, _ in suite], args.iterations, args.seed, cfg)
    out = Path(args.out) if args.out else _default_out("bench")
    write_report(report, out / "report.csv")
    agg = report.aggregate()
    _write_json(out / "summary.json", {"aggregate": agg, "seed": args.seed, "iterations": args.iterations,
                                        "instances": {n: c.digest() for n, _, _, c in suite}})
    pairs = list(report.pairs(BASELINE, BILEVEL))
    better = sum(1 for a, b in pairs if b.objective <= a.objective * 0.99)
    for a in agg:
        print(f"{a['method']:>14}  Z1={a['Z1_min']:.2f}  Z2={a['Z2_kg']:.2f}  NoV={a['NoV']:.2f}  hard={a['hard_violations']}")
    print(f"bi-level >=1% better on {better}/{len(pairs)} instances")
    if not args.no_figures and agg:
        from gritplan.plotting import comparison_chart, training_curve

        comparison_chart(agg, out / "figures" / "comparison.png")
        for name, rows in report.logs.items():
            training_curve(rows, out / "figures" / f"training_{name}.png", title=name)
    print(f"wrote {out}")
    return EXIT_VIOLATIONS if any(a["hard_violations"] for a in agg) else EXIT_OK


# ---------------------------------------------------------------- parser


def _add_instance(p, required=True):
    p.add_argument("--instance", required=required, help="instance directory (nodes.csv, edges.csv, fleet.json)")
    p.add_argument("--fleet", help="fleet JSON (default: <instance>/fleet.json)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")


def _add_planning(p):
    p.add_argument("--iterations", type=_count, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w1", type=_nonneg, default=1.0, help="makespan weight")
    p.add_argument("--w2", type=_nonneg, default=1.0, help="emissions weight")
    p.add_argument("--penalty", type=_nonneg, default=1.0, help="depot-capacity overrun penalty weight")
    p.add_argument("--selection", choices=SELECTIONS, default="nearest")
    p.add_argument("--depot-capacity", choices=("soft", "hard"), default="soft")
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gritplan", description="Depot assignment and gritter route planning.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic instance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=400)
    p.add_argument("--treated", type=float, default=0.12, help="treated-edge fraction")
    p.add_argument("--depots", type=int, default=3)
    p.add_argument("--max-vehicles", type=int, default=12)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="largest SCC plus chain compression")
    _add_instance(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("plan", help="baseline or bi-level planning on a preprocessed instance")
    _add_instance(p)
    _add_planning(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="preprocess, plan and export GeoJSON")
    _add_instance(p)
    _add_planning(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export-geojson", help="routes as a GeoJSON FeatureCollection")
    _add_instance(p)
    p.add_argument("--plan", required=True, help="plan output directory")
    p.set_defaults(func=cmd_export_geojson)

    p = sub.add_parser("oracle", help="brute-force check on micro-instances")
    p.add_argument("--count", type=_count, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-edges", type=int, default=8, choices=range(1, 9), metavar="{1..8}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="baseline vs bi-level on synthetic instances")
    _add_planning(p)
    p.add_argument("--count", type=_count, default=20)
    p.add_argument("--min-nodes", type=int, default=250)
    p.add_argument("--max-nodes", type=int, default=650)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UnroutableEdgeError, DepotUnreachableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNROUTABLE
    except (ConfigError, NetworkError, FleetError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

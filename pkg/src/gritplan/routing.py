"""Per-depot route construction, plan metrics, and the feasibility checker.

Route time charges treated edges at the vehicle's spreading speed and every
other traversal at the posted limit.  Emissions charge every traversed km.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from gritplan.assignment import Assignment
from gritplan.fleet import Depot, FleetSpec, VehicleClass, effective_speed
from gritplan.network import PathCache, RoadNetwork

TREAT = "treat"
DEADHEAD = "deadhead"
SELECTIONS = ("nearest", "farthest")

# slack for float noise when comparing against route limits
LIMIT_EPS = 1e-9

HARD_RULES = ("coverage", "continuity", "start_end", "duration", "distance", "capacity", "unknown_edge", "unknown_depot")


class UnroutableEdgeError(RuntimeError):
    def __init__(self, edge_ids: Sequence[int], depot_id: int):
        self.edge_ids = list(edge_ids)
        self.depot_id = depot_id
        super().__init__(
            f"edge {self.edge_ids[0]} cannot be served from depot {depot_id} even as a single-task route"
            + (f" ({len(self.edge_ids) - 1} more)" if len(self.edge_ids) > 1 else "")
        )


class RouteStep(NamedTuple):
    edge: int
    mode: str


@dataclass
class Route:
    depot: int
    steps: list[RouteStep]
    duration_minutes: float = 0.0
    distance_km: float = 0.0
    salt_used_lane_km: float = 0.0
    emissions_kg: float = 0.0

    @property
    def treated(self) -> list[int]:
        return [s.edge for s in self.steps if s.mode == TREAT]


@dataclass
class Violation:
    rule: str
    route: int | None
    edge: int | None
    quantity: float
    limit: float | None
    hard: bool = True
    message: str = ""


@dataclass
class Plan:
    routes: list[Route]
    Z1_minutes: float = 0.0
    Z2_kg: float = 0.0
    vehicles_used: dict[int, int] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    @property
    def NoV(self) -> int:
        return len(self.routes)

    @property
    def hard_violations(self) -> list[Violation]:
        return [v for v in self.violations if v.hard]

    @property
    def soft_violations(self) -> list[Violation]:
        return [v for v in self.violations if not v.hard]


def step_profile(steps: Iterable[RouteStep], network: RoadNetwork, vehicle: VehicleClass):
    """Yield cumulative (hours, km, lane_km) after each step."""
    hours = km = salt = 0.0
    for s in steps:
        e = network.edges[s.edge]
        if s.mode == TREAT:
            hours += e.length_km / network.kmh(effective_speed(vehicle, e))
            salt += e.length_km * e.lanes
        else:
            hours += e.length_km / network.kmh(e.speed)
        km += e.length_km
        yield hours, km, salt


def route_metrics(steps: Sequence[RouteStep], network: RoadNetwork, vehicle: VehicleClass) -> tuple[float, float, float, float]:
    """(minutes, km, lane_km, kg_co2) of a step sequence."""
    hours = km = salt = 0.0
    for hours, km, salt in step_profile(steps, network, vehicle):
        pass
    return hours * 60.0, km, salt, km * vehicle.kg_co2_per_km


def build_route(depot_id: int, steps: Sequence[RouteStep], network: RoadNetwork, vehicle: VehicleClass) -> Route:
    minutes, km, salt, kg = route_metrics(steps, network, vehicle)
    return Route(depot_id, list(steps), minutes, km, salt, kg)


def evaluate_Z1(plan: Plan, network: RoadNetwork, vehicle: VehicleClass) -> float:
    """Makespan in minutes; 0 for an empty plan."""
    return max((route_metrics(r.steps, network, vehicle)[0] for r in plan.routes), default=0.0)


def evaluate_Z2(plan: Plan, network: RoadNetwork, vehicle: VehicleClass) -> float:
    """Fleet CO2 in kg over every traversed edge."""
    return sum(route_metrics(r.steps, network, vehicle)[3] for r in plan.routes)


def check_feasibility(
    plan: Plan,
    assignment: Assignment,
    network: RoadNetwork,
    fleet: FleetSpec,
    depot_capacity: str = "soft",
) -> list[Violation]:
    """All constraint violations of ``plan``; empty iff feasible.

    Depot vehicle-count overruns are reported with ``hard=False`` unless
    ``depot_capacity == "hard"``.
    """
    vehicle = fleet.vehicle
    depots = {d.id: d for d in fleet.depots}
    out: list[Violation] = []
    treated = Counter()
    per_depot = Counter()
    for ri, r in enumerate(plan.routes):
        depot = depots.get(r.depot)
        if depot is None:
            out.append(Violation("unknown_depot", ri, None, r.depot, None, message=f"route {ri}: unknown depot {r.depot}"))
            continue
        per_depot[r.depot] += 1
        if not r.steps:
            out.append(Violation("start_end", ri, None, 0, None, message=f"route {ri} has no steps"))
            continue
        bad = [s.edge for s in r.steps if s.edge not in network.edges or s.mode not in (TREAT, DEADHEAD)]
        if bad:
            out.append(Violation("unknown_edge", ri, bad[0], len(bad), None, message=f"route {ri}: unknown edge or mode at edge {bad[0]}"))
            continue
        edges = [network.edges[s.edge] for s in r.steps]
        if edges[0].tail != depot.node:
            out.append(Violation("start_end", ri, edges[0].id, edges[0].tail, depot.node, message=f"route {ri} starts at node {edges[0].tail}, depot is {depot.node}"))
        if edges[-1].head != depot.node:
            out.append(Violation("start_end", ri, edges[-1].id, edges[-1].head, depot.node, message=f"route {ri} ends at node {edges[-1].head}, depot is {depot.node}"))
        for a, b in zip(edges, edges[1:]):
            if a.head != b.tail:
                out.append(Violation("continuity", ri, b.id, b.tail, a.head, message=f"route {ri}: edge {b.id} does not continue from edge {a.id}"))
        for s, e in zip(r.steps, edges):
            if s.mode != TREAT:
                continue
            treated[s.edge] += 1
            if not e.treat:
                out.append(Violation("coverage", ri, e.id, 1, 0, message=f"edge {e.id} treated but not in the required set"))
            elif assignment.mapping.get(e.id) != r.depot:
                out.append(Violation("coverage", ri, e.id, r.depot, assignment.mapping.get(e.id), message=f"edge {e.id} treated by depot {r.depot}, assigned to {assignment.mapping.get(e.id)}"))
        minutes, km, salt, _ = route_metrics(r.steps, network, vehicle)
        if minutes > vehicle.max_route_minutes + LIMIT_EPS:
            out.append(Violation("duration", ri, None, minutes, vehicle.max_route_minutes, message=f"route {ri}: {minutes:.3f} min exceeds {vehicle.max_route_minutes:g}"))
        if km > vehicle.max_route_km + LIMIT_EPS:
            out.append(Violation("distance", ri, None, km, vehicle.max_route_km, message=f"route {ri}: {km:.3f} km exceeds {vehicle.max_route_km:g}"))
        if salt > vehicle.capacity_lane_km + LIMIT_EPS:
            out.append(Violation("capacity", ri, None, salt - vehicle.capacity_lane_km, vehicle.capacity_lane_km, message=f"route {ri}: salt {salt:.3f} lane-km exceeds capacity by {salt - vehicle.capacity_lane_km:.3f}"))
    for eid in assignment.mapping:
        n = treated.get(eid, 0)
        if n == 0:
            out.append(Violation("coverage", None, eid, 0, 1, message=f"edge {eid} never treated"))
        elif n > 1:
            out.append(Violation("coverage", None, eid, n, 1, message=f"edge {eid} treated {n} times"))
    for did, n in sorted(per_depot.items()):
        d = depots[did]
        if n > d.max_vehicles:
            out.append(
                Violation(
                    "depot_capacity",
                    None,
                    None,
                    n,
                    d.max_vehicles,
                    hard=depot_capacity == "hard",
                    message=f"depot {did} uses {n} vehicles, capacity {d.max_vehicles}",
                )
            )
    return out


def assemble_plan(
    routes: list[Route],
    assignment: Assignment,
    network: RoadNetwork,
    fleet: FleetSpec,
    depot_capacity: str = "soft",
) -> Plan:
    plan = Plan(routes)
    plan.Z1_minutes = max((r.duration_minutes for r in routes), default=0.0)
    plan.Z2_kg = sum(r.emissions_kg for r in routes)
    counts = Counter(r.depot for r in routes)
    plan.vehicles_used = {d.id: counts.get(d.id, 0) for d in fleet.depots}
    plan.violations = check_feasibility(plan, assignment, network, fleet, depot_capacity)
    return plan


def solve_depot(
    network: RoadNetwork,
    depot: Depot,
    assigned_edges: Iterable[int],
    vehicle: VehicleClass,
    selection: str = "nearest",
    paths: PathCache | None = None,
) -> list[Route]:
    """Constructive routes for one depot.

    Each route seeds with the untreated edge farthest (deadhead time) from
    the depot, then keeps appending the nearest (or farthest, per
    ``selection``) untreated edge whose deadhead, treatment, and return legs
    stay within duration, distance and salt limits.  Ties go to the lowest
    edge id.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    paths = paths or PathCache(network)
    eids = np.array(sorted(set(assigned_edges)), dtype=np.int64)
    if eids.size == 0:
        return []
    edges = [network.edges[int(k)] for k in eids]
    idx = network.index
    tails = np.array([idx[e.tail] for e in edges])
    heads = np.array([e.head for e in edges])
    treat_h = np.array([e.length_km / network.kmh(effective_speed(vehicle, e)) for e in edges])
    treat_km = np.array([e.length_km for e in edges])
    load = np.array([e.length_km * e.lanes for e in edges])
    home = paths.tree(depot.node)
    out_h, out_km = home.hours[tails], home.km[tails]
    if not np.all(np.isfinite(out_h)):
        raise UnroutableEdgeError([int(k) for k in eids[~np.isfinite(out_h)]], depot.id)
    dep_i = idx[depot.node]
    ret_h = np.array([paths.tree(h).hours[dep_i] for h in heads])
    ret_km = np.array([paths.tree(h).km[dep_i] for h in heads])
    if not np.all(np.isfinite(ret_h)):
        raise UnroutableEdgeError([int(k) for k in eids[~np.isfinite(ret_h)]], depot.id)

    max_h = vehicle.max_route_minutes / 60.0
    max_km = vehicle.max_route_km
    cap = vehicle.capacity_lane_km
    solo_bad = (
        (out_h + treat_h + ret_h > max_h)
        | (out_km + treat_km + ret_km > max_km)
        | (load > cap)
    )
    if solo_bad.any():
        raise UnroutableEdgeError([int(k) for k in eids[solo_bad]], depot.id)

    remaining = np.ones(eids.size, dtype=bool)
    routes: list[Route] = []
    while remaining.any():
        seed = int(np.argmax(np.where(remaining, out_h, -np.inf)))
        steps = [RouteStep(k, DEADHEAD) for k in home.path_to(network.edges[int(eids[seed])].tail)]
        steps.append(RouteStep(int(eids[seed]), TREAT))
        remaining[seed] = False
        t = out_h[seed] + treat_h[seed]
        km = out_km[seed] + treat_km[seed]
        salt = load[seed]
        cur = int(heads[seed])
        while remaining.any():
            tree = paths.tree(cur)
            dh_h, dh_km = tree.hours[tails], tree.km[tails]
            ok = (
                remaining
                & (t + dh_h + treat_h + ret_h <= max_h)
                & (km + dh_km + treat_km + ret_km <= max_km)
                & (salt + load <= cap)
            )
            if not ok.any():
                break
            if selection == "nearest":
                j = int(np.argmin(np.where(ok, dh_h, np.inf)))
            else:
                j = int(np.argmax(np.where(ok, dh_h, -np.inf)))
            nxt = network.edges[int(eids[j])]
            steps.extend(RouteStep(k, DEADHEAD) for k in tree.path_to(nxt.tail))
            steps.append(RouteStep(nxt.id, TREAT))
            remaining[j] = False
            t += dh_h[j] + treat_h[j]
            km += dh_km[j] + treat_km[j]
            salt += load[j]
            cur = nxt.head
        steps.extend(RouteStep(k, DEADHEAD) for k in paths.tree(cur).path_to(depot.node))
        routes.append(build_route(depot.id, steps, network, vehicle))
    return routes


def serviceable_mask(network: RoadNetwork, fleet: FleetSpec, edge_ids: Sequence[int], paths: PathCache | None = None) -> np.ndarray:
    """Boolean (edge, depot) matrix: can the depot serve the edge as a single-task route?"""
    paths = paths or PathCache(network)
    v = fleet.vehicle
    max_h = v.max_route_minutes / 60.0
    out = np.zeros((len(edge_ids), len(fleet.depots)), dtype=bool)
    for j, depot in enumerate(fleet.depots):
        home = paths.tree(depot.node)
        for i, eid in enumerate(edge_ids):
            e = network.edges[eid]
            back = paths.tree(e.head)
            h = home.time_to(e.tail) + e.length_km / network.kmh(effective_speed(v, e)) + back.time_to(depot.node)
            km = home.km_to(e.tail) + e.length_km + back.km_to(depot.node)
            out[i, j] = h <= max_h and km <= v.max_route_km and e.length_km * e.lanes <= v.capacity_lane_km
    return out


def solve_assignment(
    network: RoadNetwork,
    assignment: Assignment,
    fleet: FleetSpec,
    selection: str = "nearest",
    paths: PathCache | None = None,
    depot_capacity: str = "soft",
) -> Plan:
    """Route every depot's share and assemble the evaluated plan."""
    paths = paths or PathCache(network)
    routes: list[Route] = []
    for depot in fleet.depots:
        mine = assignment.edges_of(depot.id)
        routes.extend(solve_depot(network, depot, mine, fleet.vehicle, selection, paths))
    return assemble_plan(routes, assignment, network, fleet, depot_capacity)


# ---------------------------------------------------------------- artifacts

ROUTE_COLUMNS = ["route_id", "depot_id", "seq", "edge_id", "mode", "cum_km", "cum_min", "cum_kg_co2"]


def route_rows(route_id: int, route: Route, network: RoadNetwork, vehicle: VehicleClass) -> list[list]:
    rows = []
    for seq, (s, (hours, km, _)) in enumerate(zip(route.steps, step_profile(route.steps, network, vehicle)), start=1):
        rows.append([route_id, route.depot, seq, s.edge, s.mode, repr(km), repr(hours * 60.0), repr(km * vehicle.kg_co2_per_km)])
    return rows


def write_routes(plan: Plan, directory: str | Path, network: RoadNetwork, vehicle: VehicleClass) -> list[Path]:
    """One CSV per vehicle route, ``route_001.csv`` ..."""
    from gritplan.fileio import atomic_write_csv

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("route_*.csv"):
        old.unlink()
    written = []
    for i, r in enumerate(plan.routes, start=1):
        p = d / f"route_{i:03d}.csv"
        atomic_write_csv(p, ROUTE_COLUMNS, route_rows(i, r, network, vehicle))
        written.append(p)
    return written


def read_routes(directory: str | Path, network: RoadNetwork, vehicle: VehicleClass) -> list[Route]:
    routes = []
    for p in sorted(Path(directory).glob("route_*.csv")):
        with open(p, newline="", encoding="utf-8") as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: int(r["seq"]))
        if not rows:
            continue
        steps = [RouteStep(int(r["edge_id"]), r["mode"]) for r in rows]
        routes.append(build_route(int(rows[0]["depot_id"]), steps, network, vehicle))
    return routes


def plan_summary(plan: Plan, fleet: FleetSpec | None = None) -> dict:
    out = {
        "Z1_min": plan.Z1_minutes,
        "Z2_kg": plan.Z2_kg,
        "NoV": plan.NoV,
        "vehicles_per_depot": {str(k): v for k, v in sorted(plan.vehicles_used.items())},
        "total_km": sum(r.distance_km for r in plan.routes),
        "violations": [asdict(v) for v in plan.violations],
    }
    if fleet is not None:
        v = fleet.vehicle
        out["fleet"] = {
            "op_cost_per_km": v.op_cost_per_km,
            "weight_kg": v.weight_kg,
            "operating_cost": v.op_cost_per_km * out["total_km"],
        }
    return out


def write_plan_summary(plan: Plan, path: str | Path, fleet: FleetSpec | None = None, extra: dict | None = None) -> None:
    from gritplan.fileio import atomic_write_text

    data = plan_summary(plan, fleet)
    if extra:
        data.update(extra)
    atomic_write_text(path, json.dumps(data, indent=2, allow_nan=False) + "\n")


def read_plan_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))

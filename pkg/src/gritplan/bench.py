"""Synthetic instances, the exhaustive micro-instance oracle, and the
baseline-vs-policy comparison harness."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gritplan.assignment import Assignment, nearest_depot_assignment
from gritplan.fleet import Depot, FleetSpec, VehicleClass, effective_speed, write_fleet
from gritplan.network import (
    PathCache,
    RoadEdge,
    RoadNetwork,
    expand_row,
    largest_scc,
    preprocess,
    write_network,
)
from gritplan.policy import TrainConfig, objective, train_loop
from gritplan.routing import (
    DEADHEAD,
    LIMIT_EPS,
    TREAT,
    Route,
    RouteStep,
    UnroutableEdgeError,
    assemble_plan,
    build_route,
    solve_assignment,
)

log = logging.getLogger(__name__)


class GenerationError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    seed: int = 0
    nodes: int = 400
    oneway_fraction: float = 0.122
    speed_tiers: tuple[float, ...] = (10, 20, 30, 40, 50, 60, 70)
    # probability per tier for local roads; arterials draw from the top three
    speed_weights: tuple[float, ...] = (0.04, 0.10, 0.20, 0.26, 0.40, 0.0, 0.0)
    lane_weights: tuple[float, ...] = (0.62, 0.33, 0.05)
    treated_fraction: float = 0.12
    depots: int = 3
    extent: float = 60000.0
    speed_unit: str = "mph"
    max_vehicles: int = 12
    arterial_every: int = 4
    subdivide_fraction: float = 0.15
    shortcut_fraction: float = 0.05

    def __post_init__(self):
        for name in ("oneway_fraction", "treated_fraction", "subdivide_fraction", "shortcut_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"{name} must lie in [0, 1], got {v}")
        if self.depots < 1:
            raise GenerationError("at least one depot required")
        if self.nodes < 4:
            raise GenerationError("need at least 4 nodes to build a connected road grid")
        if len(self.speed_weights) != len(self.speed_tiers):
            raise GenerationError("speed_weights must match speed_tiers")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generate_instance(config: GeneratorConfig) -> tuple[RoadNetwork, FleetSpec]:
    """Perturbed grid with arterial corridors, one-way links, chains and shortcuts.

    Treatment is placed on arterial links first, mirroring a strategic
    network threaded through local roads.  Depots sit at the strongly
    connected nodes nearest to points spread on a circle around the centre.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    side = max(2, int(math.ceil(math.sqrt(cfg.nodes))))
    spacing = cfg.extent / (side - 1)
    nodes: dict[int, tuple[float, float]] = {}
    grid = {}
    nid = 1
    for r in range(side):
        for c in range(side):
            jx, jy = rng.uniform(-0.2, 0.2, size=2) * spacing
            nodes[nid] = (float(c * spacing + jx), float(r * spacing + jy))
            grid[(r, c)] = nid
            nid += 1

    links = []  # (a, b, arterial)
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                links.append((grid[(r, c)], grid[(r, c + 1)], r % cfg.arterial_every == 0))
            if r + 1 < side:
                links.append((grid[(r, c)], grid[(r + 1, c)], c % cfg.arterial_every == 0))
    for r in range(side - 1):
        for c in range(side - 1):
            if rng.random() < cfg.shortcut_fraction:
                links.append((grid[(r, c)], grid[(r + 1, c + 1)], False))
    if not links:
        raise GenerationError("configuration yields no links")

    n_treat = int(round(cfg.treated_fraction * len(links)))
    arterial = [i for i, l in enumerate(links) if l[2]]
    local = [i for i, l in enumerate(links) if not l[2]]
    rng.shuffle(arterial)
    rng.shuffle(local)
    treated = set((arterial + local)[:n_treat])

    tiers = np.asarray(cfg.speed_tiers, dtype=float)
    local_w = np.asarray(cfg.speed_weights, dtype=float)
    local_w = local_w / local_w.sum()
    top = np.argsort(tiers)[-3:]
    art_w = np.zeros_like(tiers)
    art_w[top] = (0.3, 0.3, 0.4)
    lane_w = np.asarray(cfg.lane_weights, dtype=float)
    lane_w = lane_w / lane_w.sum()

    edges: list[RoadEdge] = []
    eid = 1
    for i, (a, b, is_art) in enumerate(links):
        speed = float(tiers[rng.choice(len(tiers), p=art_w if is_art else local_w)])
        lanes = int(rng.choice(len(lane_w), p=lane_w)) + 1 + (1 if is_art else 0)
        oneway = bool(rng.random() < cfg.oneway_fraction)
        if oneway and rng.random() < 0.5:
            a, b = b, a
        detour = float(rng.uniform(1.0, 1.15))
        pa, pb = nodes[a], nodes[b]
        pieces = 1
        if rng.random() < cfg.subdivide_fraction:
            pieces = int(rng.integers(2, 4))
        chain = [a]
        pts = [pa]
        for k in range(1, pieces):
            t = k / pieces
            off = rng.uniform(-0.05, 0.05, size=2) * spacing
            p = (float(pa[0] + t * (pb[0] - pa[0]) + off[0]), float(pa[1] + t * (pb[1] - pa[1]) + off[1]))
            nodes[nid] = p
            chain.append(nid)
            pts.append(p)
            nid += 1
        chain.append(b)
        pts.append(pb)
        for (u, v), (p, q) in zip(zip(chain, chain[1:]), zip(pts, pts[1:])):
            length = max(1e-3, math.dist(p, q) / 1000.0 * detour)
            edges.extend(expand_row(eid, u, v, float(length), speed, lanes, oneway, i in treated, (p, q)))
            eid += 1

    net = RoadNetwork(nodes, edges, speed_unit=cfg.speed_unit, name=f"synthetic-{cfg.seed}")
    core = largest_scc(net)
    if len(core.nodes) < cfg.depots:
        raise GenerationError("strongly connected core too small for the requested depots")
    cx = cy = cfg.extent / 2.0
    radius = cfg.extent / 4.0
    phase = rng.uniform(0, 2 * math.pi)
    core_ids = np.array(core.node_ids)
    core_xy = np.array([core.nodes[n] for n in core.node_ids])
    chosen: list[int] = []
    depots = []
    for k in range(cfg.depots):
        ang = phase + 2 * math.pi * k / cfg.depots
        target = np.array([cx + radius * math.cos(ang), cy + radius * math.sin(ang)]) if cfg.depots > 1 else np.array([cx, cy])
        d2 = ((core_xy - target) ** 2).sum(axis=1)
        for j in np.argsort(d2, kind="stable"):
            if int(core_ids[j]) not in chosen:
                chosen.append(int(core_ids[j]))
                break
        depots.append(Depot(k + 1, chosen[-1], cfg.max_vehicles, f"depot-{k + 1}"))
    return net, FleetSpec(tuple(depots), VehicleClass())


def generate_preprocessed(config: GeneratorConfig) -> tuple[RoadNetwork, FleetSpec]:
    net, fleet = generate_instance(config)
    return preprocess(net, fleet.depot_nodes), fleet


def write_instance(directory: str | Path, network: RoadNetwork, fleet: FleetSpec, config: GeneratorConfig | None = None) -> None:
    from gritplan.fileio import atomic_write_text

    d = Path(directory)
    write_network(network, d)
    write_fleet(fleet, d / "fleet.json")
    if config is not None:
        meta = {"generator": asdict(config), "config_hash": config.digest()}
        atomic_write_text(d / "generator.json", json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------- micro instances


def micro_instance(
    seed: int, n_required: int, side: int = 4, generous: bool = True, oneway_fraction: float = 0.122
) -> tuple[RoadNetwork, FleetSpec]:
    """Small one-depot instance for exhaustive checks.

    Links follow an alternating Manhattan orientation (strongly connected
    for even ``side``); all but ``oneway_fraction`` of them are then made
    two-way, which keeps the grid strongly connected.  ``n_required`` directed
    edges need treatment; two-way links are required in both directions.
    """
    if side < 2 or side % 2:
        raise GenerationError("micro grid side must be even and >= 2")
    rng = np.random.default_rng(seed)
    spacing = 1000.0
    nodes = {}
    g = {}
    nid = 1
    for r in range(side):
        for c in range(side):
            nodes[nid] = (c * spacing + float(rng.uniform(-150, 150)), r * spacing + float(rng.uniform(-150, 150)))
            g[(r, c)] = nid
            nid += 1
    rows = []
    for r in range(side):
        for c in range(side - 1):
            a, b = g[(r, c)], g[(r, c + 1)]
            rows.append((a, b) if r % 2 == 0 else (b, a))
    for c in range(side):
        for r in range(side - 1):
            a, b = g[(r, c)], g[(r + 1, c)]
            # even columns run north so the perimeter closes into a cycle
            rows.append((b, a) if c % 2 == 0 else (a, b))
    n_oneway = int(round(oneway_fraction * len(rows)))
    oneway = set(rng.choice(len(rows), size=n_oneway, replace=False).tolist())
    twoway = set(range(len(rows))) - oneway
    units = list(range(len(rows)))
    rng.shuffle(units)
    picked, count = set(), 0
    for u in units:
        size = 2 if u in twoway else 1
        if count + size <= n_required:
            picked.add(u)
            count += size
        if count == n_required:
            break
    edges = []
    speeds = (20.0, 30.0, 40.0, 50.0, 60.0, 70.0)
    for i, (a, b) in enumerate(rows):
        length = math.dist(nodes[a], nodes[b]) / 1000.0 * float(rng.uniform(1.0, 1.2))
        edges.extend(
            expand_row(i + 1, a, b, float(length), float(rng.choice(speeds)), int(rng.integers(1, 3)), i not in twoway, i in picked)
        )
    net = RoadNetwork(nodes, edges, "kmh", f"micro-{seed}")
    depot = Depot(1, int(rng.choice(net.node_ids)), 1)
    if generous:
        vehicle = VehicleClass(max_route_minutes=1e6, max_route_km=1e6, capacity_lane_km=1e6)
    else:
        vehicle = VehicleClass()
    return net, FleetSpec((depot,), vehicle)


# ---------------------------------------------------------------- oracle


@dataclass
class OracleResult:
    feasible: bool
    Z1_minutes: float
    Z2_kg: float
    routes: list[Route]
    scalarized: float
    scalarized_routes: list[Route]
    sequences: int
    partitions: int
    depot_capacity: str


def set_partitions(items: int):
    """All partitions of {0..items-1} as lists of bitmasks."""

    def rec(rest: int):
        if rest == 0:
            yield []
            return
        low = rest & -rest
        others = rest ^ low
        sub = others
        while True:
            block = low | sub
            for tail in rec(rest ^ block):
                yield [block] + tail
            if sub == 0:
                break
            sub = (sub - 1) & others

    yield from rec((1 << items) - 1)


def enumerate_routes(network: RoadNetwork, depot: Depot, required: Sequence[int], vehicle: VehicleClass, paths: PathCache | None = None):
    """Every ordering of every nonempty subset of ``required``.

    Yields (mask, order, minutes, km, lane_km, feasible).  Times are summed
    leg by leg, independently of the step-level metrics.
    """
    paths = paths or PathCache(network)
    edges = [network.edges[k] for k in required]
    treat_h = [e.length_km / network.kmh(effective_speed(vehicle, e)) for e in edges]
    load = [e.length_km * e.lanes for e in edges]

    def leg(a, b):
        h, km, _ = paths.leg(a, b)
        return h, km

    back = [leg(e.head, depot.node) for e in edges]
    n = len(edges)

    def dfs(mask, order, node, hours, km, salt):
        for i in range(n):
            if mask >> i & 1:
                continue
            lh, lk = leg(node, edges[i].tail)
            h2 = hours + lh + treat_h[i]
            k2 = km + lk + edges[i].length_km
            s2 = salt + load[i]
            o2 = order + (i,)
            m2 = mask | (1 << i)
            total_h = h2 + back[i][0]
            total_km = k2 + back[i][1]
            minutes = total_h * 60.0
            ok = (
                minutes <= vehicle.max_route_minutes + LIMIT_EPS
                and total_km <= vehicle.max_route_km + LIMIT_EPS
                and s2 <= vehicle.capacity_lane_km + LIMIT_EPS
            )
            yield m2, o2, minutes, total_km, s2, ok
            yield from dfs(m2, o2, edges[i].head, h2, k2, s2)

    yield from dfs(0, (), depot.node, 0.0, 0.0, 0.0)


def route_from_order(network: RoadNetwork, depot: Depot, required: Sequence[int], order: Sequence[int], vehicle: VehicleClass, paths: PathCache) -> Route:
    steps: list[RouteStep] = []
    cur = depot.node
    for i in order:
        e = network.edges[required[i]]
        steps.extend(RouteStep(k, DEADHEAD) for k in paths.leg(cur, e.tail)[2])
        steps.append(RouteStep(e.id, TREAT))
        cur = e.head
    steps.extend(RouteStep(k, DEADHEAD) for k in paths.leg(cur, depot.node)[2])
    return build_route(depot.id, steps, network, vehicle)


def brute_force_oracle(
    network: RoadNetwork,
    depot: Depot,
    required: Sequence[int],
    vehicle: VehicleClass,
    depot_capacity: str = "hard",
    paths: PathCache | None = None,
    reference: tuple[float, float] | None = None,
) -> OracleResult:
    """Exact lexicographic (Z1, Z2) optimum over all partitions and orderings.

    ``depot_capacity="hard"`` limits the number of routes to the depot's
    ``max_vehicles``.  ``reference`` normalizes the scalarized optimum
    (default: raw minutes + kg).
    """
    required = list(required)
    if len(required) > 8:
        raise ValueError("oracle is limited to 8 required edges")
    paths = paths or PathCache(network)
    kg_km = vehicle.kg_co2_per_km
    r1, r2 = reference or (1.0, 1.0)
    if not required:
        return OracleResult(True, 0.0, 0.0, [], 0.0, [], 0, 1, depot_capacity)

    # per subset: feasible (minutes, km, order) Pareto front
    fronts: dict[int, list[tuple[float, float, tuple[int, ...]]]] = {}
    count = 0
    for mask, order, minutes, km, _, ok in enumerate_routes(network, depot, required, vehicle, paths):
        count += 1
        if ok:
            fronts.setdefault(mask, []).append((minutes, km, order))
    for mask, pts in fronts.items():
        pts.sort()
        pareto, best_km = [], math.inf
        for m, k, o in pts:
            if k < best_km - 1e-15:
                pareto.append((m, k, o))
                best_km = k
        fronts[mask] = pareto

    limit = depot.max_vehicles if depot_capacity == "hard" else len(required)
    best_lex = None
    best_scalar = None
    n_parts = 0
    for part in set_partitions(len(required)):
        n_parts += 1
        if len(part) > limit or any(b not in fronts for b in part):
            continue
        z1 = max(fronts[b][0][0] for b in part)
        thresholds = sorted({p[0] for b in part for p in fronts[b] if p[0] >= z1})
        for t in thresholds:
            pick = []
            for b in part:
                cands = [p for p in fronts[b] if p[0] <= t]
                pick.append(min(cands, key=lambda p: (p[1], p[0])))
            zt1 = max(p[0] for p in pick)
            zt2 = sum(p[1] for p in pick) * kg_km
            if t == thresholds[0]:
                key = (zt1, zt2)
                if best_lex is None or key < best_lex[0]:
                    best_lex = (key, part, pick)
            f = zt1 / r1 + zt2 / r2
            if best_scalar is None or f < best_scalar[0]:
                best_scalar = (f, part, pick)
    if best_lex is None:
        return OracleResult(False, math.inf, math.inf, [], math.inf, [], count, n_parts, depot_capacity)

    def build(pick):
        return [route_from_order(network, depot, required, p[2], vehicle, paths) for p in pick]

    return OracleResult(
        True,
        best_lex[0][0],
        best_lex[0][1],
        build(best_lex[2]),
        best_scalar[0],
        build(best_scalar[2]),
        count,
        n_parts,
        depot_capacity,
    )


@dataclass
class AgreementReport:
    routes_checked: int = 0
    route_disagreements: int = 0
    plans_checked: int = 0
    plan_disagreements: int = 0
    examples: list[str] = field(default_factory=list)

    @property
    def rate(self) -> float:
        total = self.routes_checked + self.plans_checked
        bad = self.route_disagreements + self.plan_disagreements
        return 1.0 if total == 0 else 1.0 - bad / total


def checker_agreement(
    network: RoadNetwork,
    fleet: FleetSpec,
    required: Sequence[int],
    paths: PathCache | None = None,
    depot_capacity: str = "hard",
) -> AgreementReport:
    """Compare the oracle's own feasibility verdicts with ``check_feasibility``.

    Every enumerated route is checked as a one-route plan over its own
    edges; every set partition is checked as a full plan built from the
    first-enumerated ordering of each block.
    """
    depot = fleet.depots[0]
    vehicle = fleet.vehicle
    paths = paths or PathCache(network)
    required = list(required)
    rep = AgreementReport()
    first_order: dict[int, tuple[tuple[int, ...], bool]] = {}
    for mask, order, _, _, _, ok in enumerate_routes(network, depot, required, vehicle, paths):
        first_order.setdefault(mask, (order, ok))
        route = route_from_order(network, depot, required, order, vehicle, paths)
        sub = Assignment({required[i]: depot.id for i in order})
        plan = assemble_plan([route], sub, network, fleet, depot_capacity)
        checker_ok = not plan.hard_violations
        rep.routes_checked += 1
        if checker_ok != ok:
            rep.route_disagreements += 1
            if len(rep.examples) < 5:
                rep.examples.append(f"route {order}: oracle={ok} checker={checker_ok}")
    full = Assignment({e: depot.id for e in required})
    limit = depot.max_vehicles if depot_capacity == "hard" else math.inf
    for part in set_partitions(len(required)):
        routes, ok = [], len(part) <= limit
        for b in part:
            order, b_ok = first_order[b]
            ok = ok and b_ok
            routes.append(route_from_order(network, depot, required, order, vehicle, paths))
        checker_ok = not assemble_plan(routes, full, network, fleet, depot_capacity).hard_violations
        rep.plans_checked += 1
        if checker_ok != ok:
            rep.plan_disagreements += 1
            if len(rep.examples) < 5:
                rep.examples.append(f"partition {part}: oracle={ok} checker={checker_ok}")
    return rep


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    instance: str
    method: str
    Z1_min: float
    Z2_kg: float
    NoV: int
    objective: float
    seconds: float
    hard_violations: int
    soft_violations: int
    status: str = "ok"
    best_iteration: int = 0


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow] = field(default_factory=list)
    seed: int = 0
    iterations: int = 0
    logs: dict[str, list] = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def aggregate(self) -> list[dict]:
        out = []
        for m in self.methods():
            rs = [r for r in self.rows if r.method == m and r.status == "ok"]
            if not rs:
                continue
            out.append(
                {
                    "method": m,
                    "instances": len(rs),
                    "Z1_min": float(np.mean([r.Z1_min for r in rs])),
                    "Z2_kg": float(np.mean([r.Z2_kg for r in rs])),
                    "NoV": float(np.mean([r.NoV for r in rs])),
                    "objective": float(np.mean([r.objective for r in rs])),
                    "seconds": float(np.mean([r.seconds for r in rs])),
                    "hard_violations": int(sum(r.hard_violations for r in rs)),
                    "soft_violations": int(sum(r.soft_violations for r in rs)),
                }
            )
        return out

    def pairs(self, a: str = "KDTree+NN", b: str = "KDTree-PPO+NN"):
        by = {(r.instance, r.method): r for r in self.rows}
        for inst in dict.fromkeys(r.instance for r in self.rows):
            ra, rb = by.get((inst, a)), by.get((inst, b))
            if ra and rb and ra.status == rb.status == "ok":
                yield ra, rb


REPORT_COLUMNS = [
    "instance",
    "method",
    "Z1_min",
    "Z2_kg",
    "NoV",
    "objective",
    "seconds",
    "hard_violations",
    "soft_violations",
    "status",
    "best_iteration",
]

BASELINE = "KDTree+NN"
BILEVEL = "KDTree-PPO+NN"


def run_comparison(
    instances: Sequence[tuple[str, RoadNetwork, FleetSpec]],
    iterations: int = 10,
    seed: int = 0,
    config: TrainConfig | None = None,
) -> ComparisonReport:
    """Run both planners on each instance with the same router and checker."""
    cfg = config or TrainConfig()
    report = ComparisonReport(seed=seed, iterations=iterations)
    for k, (name, net, fleet) in enumerate(instances):
        paths = PathCache(net)
        t0 = time.perf_counter()
        try:
            assign = nearest_depot_assignment(net, fleet.depots) if net.required_edges else Assignment({})
            base = solve_assignment(net, assign, fleet, cfg.selection, paths, cfg.depot_capacity)
        except UnroutableEdgeError as exc:
            log.warning("instance %s failed: %s", name, exc)
            for m in (BASELINE, BILEVEL):
                report.rows.append(ComparisonRow(name, m, math.nan, math.nan, 0, math.nan, 0.0, 0, 0, "failed"))
            continue
        t_base = time.perf_counter() - t0
        ref = (base.Z1_minutes, base.Z2_kg) if cfg.normalize else None
        report.rows.append(
            ComparisonRow(
                name, BASELINE, base.Z1_minutes, base.Z2_kg, base.NoV,
                objective(base, ref, cfg.w1, cfg.w2, cfg.penalty_weight), t_base,
                len(base.hard_violations), len(base.soft_violations),
            )
        )
        t0 = time.perf_counter()
        try:
            res = train_loop(net, fleet, iterations, seed + k, cfg, paths)
        except UnroutableEdgeError as exc:
            log.warning("instance %s bi-level arm failed: %s", name, exc)
            report.rows.append(ComparisonRow(name, BILEVEL, math.nan, math.nan, 0, math.nan, 0.0, 0, 0, "failed"))
            continue
        t_bi = time.perf_counter() - t0
        p = res.best_plan
        report.rows.append(
            ComparisonRow(
                name, BILEVEL, p.Z1_minutes, p.Z2_kg, p.NoV,
                objective(p, ref, cfg.w1, cfg.w2, cfg.penalty_weight), t_bi,
                len(p.hard_violations), len(p.soft_violations), best_iteration=res.best_iteration,
            )
        )
        report.logs[name] = res.log
    return report


def write_report(report: ComparisonReport, path: str | Path) -> None:
    from gritplan.fileio import atomic_write_csv

    rows = [[getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c)) for c in REPORT_COLUMNS] for r in report.rows]
    atomic_write_csv(path, REPORT_COLUMNS, rows)


def synthetic_suite(count: int, seed: int = 0, nodes: tuple[int, int] = (250, 650), treated: tuple[float, float] = (0.08, 0.16)) -> list[tuple[str, RoadNetwork, FleetSpec, GeneratorConfig]]:
    """``count`` preprocessed instances with sizes drawn from the given ranges."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        cfg = GeneratorConfig(
            seed=int(rng.integers(2**31)),
            nodes=int(rng.integers(nodes[0], nodes[1] + 1)),
            treated_fraction=float(rng.uniform(*treated)),
        )
        net, fleet = generate_preprocessed(cfg)
        out.append((f"syn-{i:03d}", net, fleet, cfg))
    return out

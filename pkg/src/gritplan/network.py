"""Directed road graph: ingestion, SCC pruning, chain compression, shortest paths.

Two-way source rows with id ``k`` expand to a forward edge ``k`` and a
reverse edge ``-k``; the pair is recovered from the sign, so edge rows
must carry positive ids.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KMH_PER_UNIT = {"kmh": 1.0, "mph": 1.609344}

Point = tuple[float, float]


class NetworkError(ValueError):
    """Malformed network input."""


class UnreachableError(RuntimeError):
    """No directed path between the requested nodes."""


class DepotUnreachableError(RuntimeError):
    def __init__(self, node: int, depot_id=None):
        self.node = node
        self.depot_id = depot_id
        label = f"depot {depot_id} (node {node})" if depot_id is not None else f"node {node}"
        super().__init__(f"{label} is outside the largest strongly connected component")


@dataclass(frozen=True, slots=True)
class RoadEdge:
    id: int
    tail: int
    head: int
    length_km: float
    speed: float
    lanes: int
    oneway: bool
    treat: bool = False
    geometry: tuple[Point, ...] | None = None

    def attrs(self) -> tuple:
        return (self.oneway, self.speed, self.lanes, self.treat)


class RoadNetwork:
    """Immutable directed multigraph.

    ``speed_unit`` applies to every ``RoadEdge.speed``; lengths are km and
    all travel times are reported in hours.
    """

    def __init__(
        self,
        nodes: dict[int, Point],
        edges: Iterable[RoadEdge],
        speed_unit: str = "kmh",
        name: str = "",
    ):
        if speed_unit not in KMH_PER_UNIT:
            raise NetworkError(f"unknown speed_unit {speed_unit!r}")
        self.speed_unit = speed_unit
        self.name = name
        self.kmh_factor = KMH_PER_UNIT[speed_unit]
        self.nodes: dict[int, Point] = {int(k): (float(v[0]), float(v[1])) for k, v in sorted(nodes.items())}
        edge_map: dict[int, RoadEdge] = {}
        for e in sorted(edges, key=lambda e: e.id):
            if e.id in edge_map:
                raise NetworkError(f"duplicate edge id {e.id}")
            for end in (e.tail, e.head):
                if end not in self.nodes:
                    raise NetworkError(f"edge {e.id} references unknown node {end}")
            _validate_edge(e)
            edge_map[e.id] = e
        self.edges: dict[int, RoadEdge] = edge_map
        self.out_edges: dict[int, list[int]] = {n: [] for n in self.nodes}
        self.in_edges: dict[int, list[int]] = {n: [] for n in self.nodes}
        for e in self.edges.values():
            self.out_edges[e.tail].append(e.id)
            self.in_edges[e.head].append(e.id)
        self.node_ids: list[int] = list(self.nodes)
        self.index: dict[int, int] = {n: i for i, n in enumerate(self.node_ids)}
        self._csr = None

    def __repr__(self) -> str:
        return f"RoadNetwork({self.name!r}, nodes={len(self.nodes)}, edges={len(self.edges)})"

    @property
    def required_edges(self) -> list[int]:
        return [k for k, e in self.edges.items() if e.treat]

    def successors(self, node: int) -> list[int]:
        return [self.edges[k].head for k in self.out_edges[node]]

    def kmh(self, speed: float) -> float:
        return speed * self.kmh_factor

    def travel_hours(self, edge: RoadEdge) -> float:
        """Free-flow traversal time at the posted limit."""
        return edge.length_km / (edge.speed * self.kmh_factor)

    def twin(self, edge_id: int) -> int | None:
        e = self.edges[edge_id]
        if e.oneway or -edge_id not in self.edges:
            return None
        return -edge_id

    def polyline(self, edge_id: int) -> tuple[tuple[Point, ...], bool]:
        """Edge polyline and whether it came from stored geometry."""
        e = self.edges[edge_id]
        if e.geometry:
            return e.geometry, True
        return (self.nodes[e.tail], self.nodes[e.head]), False

    def midpoint(self, edge_id: int) -> Point:
        line, _ = self.polyline(edge_id)
        return polyline_midpoint(line)

    def arrays(self):
        """Index-based adjacency used by the Dijkstra kernels (cached)."""
        if self._csr is None:
            out = [[] for _ in self.node_ids]
            inc = [[] for _ in self.node_ids]
            for e in self.edges.values():
                u, v = self.index[e.tail], self.index[e.head]
                w = self.travel_hours(e)
                out[u].append((v, w, e.id))
                inc[v].append((u, w, e.id))
            self._csr = (out, inc)
        return self._csr


def _validate_edge(e: RoadEdge) -> None:
    if not (e.length_km > 0 and math.isfinite(e.length_km)):
        raise NetworkError(f"edge {e.id}: length_km must be positive, got {e.length_km}")
    if not (e.speed > 0 and math.isfinite(e.speed)):
        raise NetworkError(f"edge {e.id}: speed must be positive, got {e.speed}")
    if e.lanes < 1:
        raise NetworkError(f"edge {e.id}: lanes must be >= 1, got {e.lanes}")


def polyline_length(line: Sequence[Point]) -> float:
    return sum(math.dist(a, b) for a, b in zip(line, line[1:]))


def polyline_midpoint(line: Sequence[Point]) -> Point:
    """Point halfway along the polyline by arc length."""
    total = polyline_length(line)
    if total == 0:
        return (float(line[0][0]), float(line[0][1]))
    half = total / 2.0
    run = 0.0
    for a, b in zip(line, line[1:]):
        seg = math.dist(a, b)
        if run + seg >= half and seg > 0:
            t = (half - run) / seg
            return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        run += seg
    return (float(line[-1][0]), float(line[-1][1]))


# ---------------------------------------------------------------- file io

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise NetworkError(f"not a boolean: {text!r}")


def parse_wkt_linestring(text: str) -> tuple[Point, ...] | None:
    s = (text or "").strip()
    if not s:
        return None
    head, _, body = s.partition("(")
    if head.strip().upper() != "LINESTRING" or not body.endswith(")"):
        raise NetworkError(f"unsupported geometry {s[:40]!r}")
    pts = []
    for pair in body[:-1].split(","):
        x, y = pair.split()[:2]
        pts.append((float(x), float(y)))
    if len(pts) < 2:
        raise NetworkError("LINESTRING needs at least two points")
    return tuple(pts)


def format_wkt_linestring(line: Sequence[Point] | None) -> str:
    if not line:
        return ""
    return "LINESTRING (" + ", ".join(f"{x!r} {y!r}" for x, y in line) + ")"


def expand_row(
    edge_id: int,
    tail: int,
    head: int,
    length_km: float,
    speed: float,
    lanes: int,
    oneway: bool,
    treat: bool,
    geometry: tuple[Point, ...] | None = None,
) -> list[RoadEdge]:
    """One source row -> one or two directed edges."""
    if edge_id < 1:
        raise NetworkError(f"edge ids must be positive, got {edge_id}")
    fwd = RoadEdge(edge_id, tail, head, length_km, speed, lanes, oneway, treat, geometry)
    if oneway:
        return [fwd]
    rev_geom = tuple(reversed(geometry)) if geometry else None
    return [fwd, RoadEdge(-edge_id, head, tail, length_km, speed, lanes, False, treat, rev_geom)]


def load_network(nodes_source, edges_source, header: dict | None = None) -> RoadNetwork:
    """Build a network from node and edge records.

    Sources may be paths to CSV files or iterables of dict rows with the
    ``nodes.csv`` / ``edges.csv`` columns.
    """
    header = header or {}
    node_rows = _rows(nodes_source)
    edge_rows = _rows(edges_source)
    nodes: dict[int, Point] = {}
    for r in node_rows:
        nid = int(r["node_id"])
        if nid in nodes:
            raise NetworkError(f"duplicate node id {nid}")
        nodes[nid] = (float(r["x"]), float(r["y"]))
    edges: list[RoadEdge] = []
    for r in edge_rows:
        eid = int(r["edge_id"])
        tail, head = int(r["from"]), int(r["to"])
        for end in (tail, head):
            if end not in nodes:
                raise NetworkError(f"edge {eid} references unknown node {end}")
        try:
            lanes = int(r["lanes"])
        except ValueError:
            raise NetworkError(f"edge {eid}: lanes must be an integer, got {r['lanes']!r}") from None
        edges.extend(
            expand_row(
                eid,
                tail,
                head,
                float(r["length_km"]),
                float(r["speed"]),
                lanes,
                parse_bool(r["oneway"]),
                parse_bool(r.get("treat", False)),
                parse_wkt_linestring(r.get("geometry") or ""),
            )
        )
    return RoadNetwork(nodes, edges, speed_unit=header.get("speed_unit", "kmh"), name=header.get("name", ""))


def _rows(source) -> list[dict]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    return [dict(r) for r in source]


def load_instance_network(directory: str | Path) -> RoadNetwork:
    d = Path(directory)
    header = {}
    if (d / "instance.json").exists():
        header = json.loads((d / "instance.json").read_text(encoding="utf-8"))
    return load_network(d / "nodes.csv", d / "edges.csv", header)


def network_rows(network: RoadNetwork) -> tuple[list[list], list[list]]:
    """Rows for ``nodes.csv`` and ``edges.csv``; two-way pairs collapse to one row."""
    nodes = [[n, repr(x), repr(y)] for n, (x, y) in network.nodes.items()]
    edges = []
    for e in network.edges.values():
        if e.id < 0 and not e.oneway and -e.id in network.edges:
            continue
        edges.append(
            [
                e.id,
                e.tail,
                e.head,
                repr(e.length_km),
                repr(e.speed),
                e.lanes,
                "true" if e.oneway else "false",
                "true" if e.treat else "false",
                format_wkt_linestring(e.geometry),
            ]
        )
    return nodes, edges


NODE_COLUMNS = ["node_id", "x", "y"]
EDGE_COLUMNS = ["edge_id", "from", "to", "length_km", "speed", "lanes", "oneway", "treat", "geometry"]


def write_network(network: RoadNetwork, directory: str | Path) -> None:
    from gritplan.fileio import atomic_write_csv, atomic_write_text

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nodes, edges = network_rows(network)
    atomic_write_csv(d / "nodes.csv", NODE_COLUMNS, nodes)
    atomic_write_csv(d / "edges.csv", EDGE_COLUMNS, edges)
    header = {"speed_unit": network.speed_unit, "name": network.name}
    atomic_write_text(d / "instance.json", json.dumps(header, indent=2) + "\n")


# ---------------------------------------------------------------- SCC


def strongly_connected_components(network: RoadNetwork) -> list[list[int]]:
    """Tarjan's algorithm, iterative to survive long chains."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in network.nodes:
        if root in index:
            continue
        work = [(root, iter(network.successors(root)))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(network.successors(w))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(sorted(comp))
    return comps


def subgraph(network: RoadNetwork, keep: Iterable[int]) -> RoadNetwork:
    keep = set(keep)
    nodes = {n: xy for n, xy in network.nodes.items() if n in keep}
    edges = [e for e in network.edges.values() if e.tail in keep and e.head in keep]
    return RoadNetwork(nodes, edges, network.speed_unit, network.name)


def largest_scc(network: RoadNetwork, required_nodes: dict | Iterable[int] = ()) -> RoadNetwork:
    """Restrict to the maximum-cardinality SCC.

    Ties go to the component holding the smallest node id.
    ``required_nodes`` (node ids, or a mapping depot_id -> node) must all
    survive, otherwise :class:`DepotUnreachableError` is raised.
    """
    if not network.nodes:
        raise NetworkError("empty network")
    comps = strongly_connected_components(network)
    best = min(comps, key=lambda c: (-len(c), c[0]))
    keep = set(best)
    labelled = required_nodes.items() if isinstance(required_nodes, dict) else ((None, n) for n in required_nodes)
    for depot_id, node in labelled:
        if node not in keep:
            raise DepotUnreachableError(node, depot_id)
    if len(keep) == len(network.nodes):
        return network
    return subgraph(network, keep)


# ---------------------------------------------------------------- compression


def _join_lines(parts: Sequence[Sequence[Point]]) -> tuple[Point, ...]:
    out: list[Point] = list(parts[0])
    for p in parts[1:]:
        out.extend(p[1:] if out and tuple(p[0]) == tuple(out[-1]) else p)
    return tuple(out)


def compress_chains(network: RoadNetwork, protected: Iterable[int] = ()) -> RoadNetwork:
    """Merge pass-through nodes whose chain edges share oneway/speed/lanes/treat.

    A pass-through node has one in- and one out-edge (one-way chain) or
    two reciprocal two-way pairs.  Merges that would create a self-loop
    are skipped so no traversable length is ever dropped.
    """
    protected = set(protected)
    edges: dict[int, RoadEdge] = dict(network.edges)
    out_e: dict[int, set[int]] = {n: set(v) for n, v in network.out_edges.items()}
    in_e: dict[int, set[int]] = {n: set(v) for n, v in network.in_edges.items()}
    nodes = dict(network.nodes)

    def line(e: RoadEdge) -> tuple[Point, ...]:
        return e.geometry or (nodes[e.tail], nodes[e.head])

    def merged(eid: int, a: RoadEdge, b: RoadEdge) -> RoadEdge:
        return RoadEdge(
            eid,
            a.tail,
            b.head,
            a.length_km + b.length_km,
            a.speed,
            a.lanes,
            a.oneway,
            a.treat,
            _join_lines([line(a), line(b)]),
        )

    def drop(e: RoadEdge) -> None:
        del edges[e.id]
        out_e[e.tail].discard(e.id)
        in_e[e.head].discard(e.id)

    def add(e: RoadEdge) -> None:
        edges[e.id] = e
        out_e[e.tail].add(e.id)
        in_e[e.head].add(e.id)

    def try_merge(v: int) -> list[int] | None:
        ins, outs = in_e[v], out_e[v]
        if len(ins) == 1 and len(outs) == 1:
            e1, e2 = edges[next(iter(ins))], edges[next(iter(outs))]
            if not (e1.oneway and e2.oneway) or e1.attrs() != e2.attrs():
                return None
            if e1.tail in (v, e2.head) or e2.head == v:
                return None
            drop(e1)
            drop(e2)
            add(merged(e1.id, e1, e2))
            return [e1.tail, e2.head]
        if len(ins) == 2 and len(outs) == 2:
            a, b = (edges[k] for k in sorted(outs))
            if a.oneway or b.oneway or {-a.id, -b.id} != ins:
                return None
            u, w = a.head, b.head
            if u == w or v in (u, w) or a.attrs() != b.attrs():
                return None
            a_in, b_in = edges[-a.id], edges[-b.id]
            k = min(abs(a.id), abs(b.id))
            # u -> v -> w uses (a_in, b); w -> v -> u uses (b_in, a)
            uw_ids = {a_in.id, b.id}
            uw_id = k if k in uw_ids else -k
            fwd = merged(uw_id, a_in, b)
            rev = RoadEdge(
                -uw_id,
                w,
                u,
                fwd.length_km,
                fwd.speed,
                fwd.lanes,
                False,
                fwd.treat,
                tuple(reversed(fwd.geometry)),
            )
            for e in (a, b, a_in, b_in):
                drop(e)
            add(fwd)
            add(rev)
            return [u, w]
        return None

    work = sorted(n for n in nodes if n not in protected)
    pending = set(work)
    while work:
        v = work.pop()
        pending.discard(v)
        if v not in nodes:
            continue
        touched = try_merge(v)
        if touched is None:
            continue
        del nodes[v]
        del out_e[v]
        del in_e[v]
        for n in touched:
            if n not in protected and n not in pending:
                pending.add(n)
                work.append(n)
    if len(nodes) == len(network.nodes):
        return network
    return RoadNetwork(nodes, edges.values(), network.speed_unit, network.name)


def preprocess(network: RoadNetwork, depots: dict[int, int] | None = None) -> RoadNetwork:
    """Largest SCC then chain compression with depot nodes protected."""
    depots = depots or {}
    net = largest_scc(network, depots)
    return compress_chains(net, set(depots.values()))


def network_stats(network: RoadNetwork) -> dict:
    links = [e for e in network.edges.values() if e.oneway or e.id > 0 or -e.id not in network.edges]
    treated = [e for e in network.edges.values() if e.treat]
    in_deg = {n: len(v) for n, v in network.in_edges.items()}
    out_deg = {n: len(v) for n, v in network.out_edges.items()}
    undirected_deg = {n: len(set(network.successors(n)) | {network.edges[k].tail for k in network.in_edges[n]}) for n in network.nodes}
    return {
        "nodes": len(network.nodes),
        "directed_edges": len(network.edges),
        "links": len(links),
        "total_km": sum(e.length_km for e in network.edges.values()),
        "treated_edges": len(treated),
        "treated_km": sum(e.length_km for e in treated),
        "treated_lane_km": sum(e.length_km * e.lanes for e in treated),
        "oneway_fraction": (sum(1 for e in links if e.oneway) / len(links)) if links else 0.0,
        "high_degree_nodes": sum(1 for d in undirected_deg.values() if d >= 4),
        "max_degree": max(undirected_deg.values(), default=0),
        "max_in_degree": max(in_deg.values(), default=0),
        "max_out_degree": max(out_deg.values(), default=0),
    }


# ---------------------------------------------------------------- shortest paths

_NO_PRED = -(2**62)


@dataclass
class PathTree:
    """Lexicographically tie-broken shortest-time tree from one source."""

    network: RoadNetwork
    source: int
    hours: np.ndarray
    km: np.ndarray
    pred: list[int]
    _paths: dict[int, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def time_to(self, node: int) -> float:
        return float(self.hours[self.network.index[node]])

    def km_to(self, node: int) -> float:
        return float(self.km[self.network.index[node]])

    def path_to(self, node: int) -> tuple[int, ...]:
        i = self.network.index[node]
        if not math.isfinite(self.hours[i]):
            raise UnreachableError(f"node {node} unreachable from {self.source}")
        cached = self._paths.get(i)
        if cached is not None:
            return cached
        path = _trace(self.network, self.pred, i)
        self._paths[i] = path
        return path


def _trace(network: RoadNetwork, pred: list[int], i: int) -> tuple[int, ...]:
    out = []
    while pred[i] != _NO_PRED:
        eid = pred[i]
        out.append(eid)
        i = network.index[network.edges[eid].tail]
    return tuple(reversed(out))


def shortest_path_tree(network: RoadNetwork, source: int) -> PathTree:
    out, inc = network.arrays()
    n = len(network.node_ids)
    s = network.index[source]
    dist = [math.inf] * n
    dist[s] = 0.0
    heap = [(0.0, s)]
    order = []
    done = [False] * n
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        order.append(u)
        for v, w, _ in out[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))

    # second pass: among time-optimal predecessors keep the lexicographically
    # smallest edge-id path; times/lengths are re-accumulated along it
    pred = [_NO_PRED] * n
    hours = np.full(n, math.inf)
    km = np.full(n, math.inf)
    hours[s] = 0.0
    km[s] = 0.0
    edges = network.edges
    for v in order:
        if v == s:
            continue
        tol = 1e-12 * max(1.0, dist[v])
        tight = [(u, w, eid) for u, w, eid in inc[v] if done[u] and u != v and abs(dist[u] + w - dist[v]) <= tol]
        if len(tight) == 1:
            u, w, eid = tight[0]
        else:
            best = None
            for cand in tight:
                key = _trace(network, pred, cand[0]) + (cand[2],)
                if best is None or key < best[0]:
                    best = (key, cand)
            u, w, eid = best[1]
        pred[v] = eid
        hours[v] = hours[u] + w
        km[v] = km[u] + edges[eid].length_km
    return PathTree(network, source, hours, km, pred)


def shortest_travel_time(network: RoadNetwork, source: int, target: int) -> tuple[float, float, tuple[int, ...]]:
    """(hours, km, edge ids) of the fastest path; ties break on edge-id sequence."""
    for n in (source, target):
        if n not in network.nodes:
            raise NetworkError(f"unknown node {n}")
    if source == target:
        return 0.0, 0.0, ()
    tree = shortest_path_tree(network, source)
    if not math.isfinite(tree.time_to(target)):
        raise UnreachableError(f"node {target} unreachable from {source}")
    return tree.time_to(target), tree.km_to(target), tree.path_to(target)


class PathCache:
    """Per-source shortest-path trees; results never depend on fill order."""

    def __init__(self, network: RoadNetwork):
        self.network = network
        self._trees: dict[int, PathTree] = {}

    def tree(self, source: int) -> PathTree:
        t = self._trees.get(source)
        if t is None:
            t = shortest_path_tree(self.network, source)
            self._trees[source] = t
        return t

    def leg(self, source: int, target: int) -> tuple[float, float, tuple[int, ...]]:
        if source == target:
            return 0.0, 0.0, ()
        t = self.tree(source)
        h = t.time_to(target)
        if not math.isfinite(h):
            raise UnreachableError(f"node {target} unreachable from {source}")
        return h, t.km_to(target), t.path_to(target)

    def __len__(self) -> int:
        return len(self._trees)

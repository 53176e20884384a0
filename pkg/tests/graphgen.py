"""Random road graphs and independent oracles shared by the test modules."""
from __future__ import annotations

import numpy as np

from gritplan.network import RoadEdge, RoadNetwork, expand_row


def road_graph(seed: int, junctions: int = 12, max_chain: int = 3, stubs: int = 2, speed_unit: str = "kmh") -> RoadNetwork:
    """Ring of junctions plus chords; every link is subdivided into a chain.

    Chains mostly keep one attribute set so they compress, but now and
    then a segment gets a different lane count to block merging.  One-way
    links get a random direction and dangling one-way stubs are added, so
    the result is usually not strongly connected.
    """
    rng = np.random.default_rng(seed)
    nodes: dict[int, tuple[float, float]] = {}
    nid = 1
    for _ in range(junctions):
        nodes[nid] = (float(rng.uniform(0, 20000)), float(rng.uniform(0, 20000)))
        nid += 1
    links = [(i, i % junctions + 1) for i in range(1, junctions + 1)]
    for _ in range(max(1, junctions // 2)):
        a, b = rng.choice(junctions, size=2, replace=False) + 1
        links.append((int(a), int(b)))
    for _ in range(stubs):
        a = int(rng.integers(1, junctions + 1))
        nodes[nid] = (nodes[a][0] + 500.0, nodes[a][1] + 500.0)
        links.append((a, nid) if rng.random() < 0.5 else (nid, a))
        nid += 1
    edges: list[RoadEdge] = []
    eid = 1
    for a, b in links:
        oneway = bool(rng.random() < 0.3)
        if oneway and rng.random() < 0.5:
            a, b = b, a
        speed = float(rng.choice([20, 30, 40, 50, 60, 70]))
        lanes = int(rng.integers(1, 3))
        treat = bool(rng.random() < 0.4)
        k = int(rng.integers(0, max_chain + 1))
        chain = [a]
        for _ in range(k):
            ax, ay = nodes[a]
            bx, by = nodes[b]
            t = float(rng.uniform(0.2, 0.8))
            nodes[nid] = (ax + t * (bx - ax) + float(rng.normal(0, 50)), ay + t * (by - ay) + float(rng.normal(0, 50)))
            chain.append(nid)
            nid += 1
        chain.append(b)
        for u, v in zip(chain, chain[1:]):
            seg_lanes = lanes if rng.random() > 0.1 else lanes + 1
            length = max(0.05, float(np.hypot(*np.subtract(nodes[u], nodes[v]))) / 1000.0)
            geom = (nodes[u], nodes[v])
            edges.extend(expand_row(eid, u, v, length, speed, seg_lanes, oneway, treat, geom))
            eid += 1
    return RoadNetwork(nodes, edges, speed_unit=speed_unit, name=f"road-{seed}")


def floyd_warshall(network: RoadNetwork) -> np.ndarray:
    """All-pairs free-flow hours, indexed by ``network.index``."""
    n = len(network.nodes)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for e in network.edges.values():
        i, j = network.index[e.tail], network.index[e.head]
        d[i, j] = min(d[i, j], e.length_km / (e.speed * network.kmh_factor))
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def reach_matrix(network: RoadNetwork) -> np.ndarray:
    """Boolean transitive closure (reflexive)."""
    n = len(network.nodes)
    r = np.eye(n, dtype=bool)
    for e in network.edges.values():
        r[network.index[e.tail], network.index[e.head]] = True
    for k in range(n):
        r |= r[:, k : k + 1] & r[k : k + 1, :]
    return r


def brute_force_sccs(network: RoadNetwork) -> list[set[int]]:
    """Components as classes of mutual reachability."""
    r = reach_matrix(network)
    mutual = r & r.T
    seen: set[int] = set()
    comps = []
    for i, n in enumerate(network.node_ids):
        if n in seen:
            continue
        comp = {network.node_ids[j] for j in np.flatnonzero(mutual[i])}
        seen |= comp
        comps.append(comp)
    return comps


def network_from_arcs(n_nodes: int, arcs, speed: float = 50.0) -> RoadNetwork:
    """One-way unit-length edges from (tail, head) pairs on nodes 1..n."""
    nodes = {i: (float(i), 0.0) for i in range(1, n_nodes + 1)}
    edges = [RoadEdge(k, a, b, 1.0, speed, 1, True) for k, (a, b) in enumerate(arcs, start=1)]
    return RoadNetwork(nodes, edges)

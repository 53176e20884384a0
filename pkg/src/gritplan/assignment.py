"""Depot k-d tree, nearest-depot baseline assignment, and segment features."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from gritplan.fleet import Depot
from gritplan.network import RoadNetwork


class KdTree:
    """Static 2-d tree over a point list.

    ``nearest`` returns the index of the closest point; equidistant points
    resolve to the lowest index, matching a linear scan with ``<``.
    """

    __slots__ = ("points", "_root")

    def __init__(self, points: Sequence[Sequence[float]]):
        if len(points) == 0:
            raise ValueError("KdTree needs at least one point")
        self.points = [(float(p[0]), float(p[1])) for p in points]
        self._root = self._build(list(range(len(self.points))), 0)

    def _build(self, idx: list[int], depth: int):
        if not idx:
            return None
        axis = depth % 2
        idx.sort(key=lambda i: (self.points[i][axis], i))
        mid = len(idx) // 2
        return (idx[mid], axis, self._build(idx[:mid], depth + 1), self._build(idx[mid + 1 :], depth + 1))

    def nearest(self, q: Sequence[float]) -> int:
        qx, qy = float(q[0]), float(q[1])
        best = [math.inf, -1]

        def visit(node):
            if node is None:
                return
            i, axis, lo, hi = node
            px, py = self.points[i]
            d2 = (px - qx) ** 2 + (py - qy) ** 2
            if d2 < best[0] or (d2 == best[0] and i < best[1]):
                best[0], best[1] = d2, i
            diff = (qx - px) if axis == 0 else (qy - py)
            near, far = (lo, hi) if diff < 0 else (hi, lo)
            visit(near)
            # <= keeps equidistant candidates (lower index) reachable
            if diff * diff <= best[0]:
                visit(far)

        visit(self._root)
        return best[1]

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Assignment:
    """Required edge id -> depot id."""

    mapping: dict[int, int]

    def __post_init__(self):
        self.mapping = dict(sorted(self.mapping.items()))

    def edges_of(self, depot_id: int) -> list[int]:
        return [e for e, d in self.mapping.items() if d == depot_id]

    def __len__(self) -> int:
        return len(self.mapping)

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and self.mapping == other.mapping

    def hamming(self, other: "Assignment") -> int:
        return sum(1 for e, d in self.mapping.items() if other.mapping.get(e) != d)

    def validate(self, network: RoadNetwork, depots: Sequence[Depot]) -> None:
        required = set(network.required_edges)
        known = {d.id for d in depots}
        missing = required - set(self.mapping)
        if missing:
            raise ValueError(f"assignment misses required edges {sorted(missing)[:5]}")
        extra = set(self.mapping) - required
        if extra:
            raise ValueError(f"assignment covers non-required edges {sorted(extra)[:5]}")
        bad = {d for d in self.mapping.values() if d not in known}
        if bad:
            raise ValueError(f"assignment references unknown depots {sorted(bad)}")


def write_assignment(assignment: Assignment, path: str | Path) -> None:
    from gritplan.fileio import atomic_write_csv

    atomic_write_csv(path, ["edge_id", "depot_id"], assignment.mapping.items())


def read_assignment(path: str | Path) -> Assignment:
    with open(path, newline="", encoding="utf-8") as fh:
        return Assignment({int(r["edge_id"]): int(r["depot_id"]) for r in csv.DictReader(fh)})


def nearest_depot_assignment(network: RoadNetwork, depots: Sequence[Depot]) -> Assignment:
    """Assign each required edge to the depot nearest its midpoint (straight line)."""
    if not depots:
        raise ValueError("at least one depot required")
    ordered = sorted(depots, key=lambda d: d.id)
    tree = KdTree([network.nodes[d.node] for d in ordered])
    return Assignment({e: ordered[tree.nearest(network.midpoint(e))].id for e in network.required_edges})


@dataclass(frozen=True)
class FeatureScaler:
    """Per-instance min/max for each feature group."""

    x: tuple[float, float]
    y: tuple[float, float]
    length: tuple[float, float]
    speed: tuple[float, float]
    lanes: tuple[float, float]
    depot_distance: tuple[float, float]

    def as_dict(self) -> dict:
        return {k: list(v) for k, v in self.__dict__.items()}


def _minmax(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros_like(values, dtype=float)
    return (values - lo) / (hi - lo)


def encode_features(network: RoadNetwork, depots: Sequence[Depot]) -> tuple[np.ndarray, list[int], FeatureScaler]:
    """Feature matrix with one row per required edge (ascending edge id).

    Columns: midpoint x, midpoint y, length, speed, lanes, then one
    straight-line distance per depot (ascending depot id).  Depot
    distances share one min/max so columns stay comparable.
    """
    ordered = sorted(depots, key=lambda d: d.id)
    edge_ids = sorted(network.required_edges)
    n, k = len(edge_ids), len(ordered)
    if n == 0:
        empty = (0.0, 0.0)
        return np.zeros((0, 5 + k)), [], FeatureScaler(empty, empty, empty, empty, empty, empty)
    mids = np.array([network.midpoint(e) for e in edge_ids], dtype=float)
    length = np.array([network.edges[e].length_km for e in edge_ids], dtype=float)
    speed = np.array([network.edges[e].speed for e in edge_ids], dtype=float)
    lanes = np.array([network.edges[e].lanes for e in edge_ids], dtype=float)
    depot_xy = np.array([network.nodes[d.node] for d in ordered], dtype=float)
    dist = np.sqrt(((mids[:, None, :] - depot_xy[None, :, :]) ** 2).sum(axis=2))

    def rng(v):
        return (float(v.min()), float(v.max()))

    scaler = FeatureScaler(rng(mids[:, 0]), rng(mids[:, 1]), rng(length), rng(speed), rng(lanes), rng(dist))
    cols = [
        _minmax(mids[:, 0], *scaler.x),
        _minmax(mids[:, 1], *scaler.y),
        _minmax(length, *scaler.length),
        _minmax(speed, *scaler.speed),
        _minmax(lanes, *scaler.lanes),
    ]
    feats = np.column_stack(cols + [_minmax(dist, *scaler.depot_distance)])
    return np.clip(feats, 0.0, 1.0), edge_ids, scaler

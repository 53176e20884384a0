"""Depots, vehicle parameters, and the two per-edge fleet formulas."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from gritplan.network import RoadEdge

# Operational spreading-speed cap, in the instance speed unit.
DEFAULT_OP_SPEED_CAP = 50.0
# Salt capacity per vehicle load, lane-km.
DEFAULT_CAPACITY_LANE_KM = 166.0
# Diesel, kg CO2 per litre.
DEFAULT_EMISSION_FACTOR = 2.51
DEFAULT_MAX_ROUTE_MINUTES = 120.0
DEFAULT_MAX_ROUTE_KM = 630.0
DEFAULT_FUEL_RATE = 0.35
DEFAULT_MAX_VEHICLES = 12


class FleetError(ValueError):
    pass


@dataclass(frozen=True)
class Depot:
    id: int
    node: int
    max_vehicles: int = DEFAULT_MAX_VEHICLES
    name: str = ""

    def __post_init__(self):
        if self.max_vehicles < 1:
            raise FleetError(f"depot {self.id}: max_vehicles must be >= 1")


@dataclass(frozen=True)
class VehicleClass:
    op_speed_cap: float = DEFAULT_OP_SPEED_CAP
    capacity_lane_km: float = DEFAULT_CAPACITY_LANE_KM
    fuel_rate_l_per_km: float = DEFAULT_FUEL_RATE
    emission_factor_kg_per_l: float = DEFAULT_EMISSION_FACTOR
    max_route_minutes: float = DEFAULT_MAX_ROUTE_MINUTES
    max_route_km: float = DEFAULT_MAX_ROUTE_KM
    # carried for reporting only; no objective uses them
    op_cost_per_km: float = 0.0
    weight_kg: float = 0.0

    def __post_init__(self):
        for name in (
            "op_speed_cap",
            "capacity_lane_km",
            "fuel_rate_l_per_km",
            "emission_factor_kg_per_l",
            "max_route_minutes",
            "max_route_km",
        ):
            if not getattr(self, name) > 0:
                raise FleetError(f"{name} must be positive")
        if self.op_cost_per_km < 0 or self.weight_kg < 0:
            raise FleetError("op_cost_per_km and weight_kg must be nonnegative")

    @property
    def kg_co2_per_km(self) -> float:
        return self.fuel_rate_l_per_km * self.emission_factor_kg_per_l


@dataclass(frozen=True)
class FleetSpec:
    depots: tuple[Depot, ...]
    vehicle: VehicleClass = field(default_factory=VehicleClass)

    def __post_init__(self):
        object.__setattr__(self, "depots", tuple(sorted(self.depots, key=lambda d: d.id)))
        ids = [d.id for d in self.depots]
        if len(set(ids)) != len(ids):
            raise FleetError("duplicate depot ids")
        if not ids:
            raise FleetError("at least one depot required")

    def depot(self, depot_id: int) -> Depot:
        for d in self.depots:
            if d.id == depot_id:
                return d
        raise KeyError(depot_id)

    @property
    def depot_nodes(self) -> dict[int, int]:
        return {d.id: d.node for d in self.depots}


def effective_speed(vehicle: VehicleClass, edge: RoadEdge) -> float:
    """Spreading speed on ``edge``: the posted limit capped at the vehicle's cap."""
    return min(edge.speed, vehicle.op_speed_cap)


def salt_load(edge: RoadEdge) -> float:
    """Lane-km of salt needed to treat ``edge``."""
    if not edge.treat:
        raise ValueError(f"edge {edge.id} does not require treatment")
    return edge.length_km * edge.lanes


# json keys follow fleet.json; "emission_factor" is the short form
_VEHICLE_KEYS = {
    "op_speed_cap": "op_speed_cap",
    "capacity_lane_km": "capacity_lane_km",
    "fuel_rate_l_per_km": "fuel_rate_l_per_km",
    "emission_factor": "emission_factor_kg_per_l",
    "emission_factor_kg_per_l": "emission_factor_kg_per_l",
    "max_route_minutes": "max_route_minutes",
    "max_route_km": "max_route_km",
    "op_cost_per_km": "op_cost_per_km",
    "weight_kg": "weight_kg",
}


def fleet_from_dict(data: dict) -> FleetSpec:
    try:
        depots = [
            Depot(int(d["id"]), int(d["node"]), int(d.get("max_vehicles", DEFAULT_MAX_VEHICLES)), str(d.get("name", "")))
            for d in data["depots"]
        ]
    except KeyError as exc:
        raise FleetError(f"depot record missing {exc}") from None
    vehicle_kw = {}
    for k, v in (data.get("vehicle") or {}).items():
        if k not in _VEHICLE_KEYS:
            raise FleetError(f"unknown vehicle field {k!r}")
        vehicle_kw[_VEHICLE_KEYS[k]] = float(v)
    return FleetSpec(tuple(depots), VehicleClass(**vehicle_kw))


def fleet_to_dict(fleet: FleetSpec) -> dict:
    v = asdict(fleet.vehicle)
    v["emission_factor"] = v.pop("emission_factor_kg_per_l")
    depots = []
    for d in fleet.depots:
        rec = {"id": d.id, "node": d.node, "max_vehicles": d.max_vehicles}
        if d.name:
            rec["name"] = d.name
        depots.append(rec)
    return {"depots": depots, "vehicle": v}


def load_fleet(path: str | Path) -> FleetSpec:
    return fleet_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_fleet(fleet: FleetSpec, path: str | Path) -> None:
    from gritplan.fileio import atomic_write_text

    atomic_write_text(path, json.dumps(fleet_to_dict(fleet), indent=2) + "\n")

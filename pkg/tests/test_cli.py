import csv
import filecmp
import json
import math

import pytest

from gritplan.cli import EXIT_CONFIG, EXIT_OK, EXIT_UNROUTABLE, EXIT_VIOLATIONS, main, plan_geojson
from gritplan.fleet import Depot, FleetSpec, VehicleClass, load_fleet, write_fleet
from gritplan.network import RoadEdge, RoadNetwork, load_instance_network, network_stats, write_network
from gritplan.routing import DEADHEAD, TREAT, Plan, RouteStep, build_route, read_plan_summary, read_routes
from gritplan.policy import objective


@pytest.fixture(scope="module")
def instance(tmp_path_factory):
    root = tmp_path_factory.mktemp("inst")
    assert main(["generate", "--seed", "5", "--nodes", "250", "--out", str(root / "raw")]) == EXIT_OK
    assert main(["preprocess", "--instance", str(root / "raw"), "--out", str(root / "pre")]) == EXIT_OK
    return root


def tree_files(d):
    return sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file())


def test_preprocess_stats_and_idempotence(instance, tmp_path):
    stats = json.loads((instance / "pre" / "stats.json").read_text())
    assert stats["after"]["nodes"] <= stats["before"]["nodes"]
    assert stats["after"]["treated_km"] <= stats["before"]["treated_km"] + 1e-9
    assert main(["preprocess", "--instance", str(instance / "pre"), "--out", str(tmp_path / "again")]) == EXIT_OK
    again = json.loads((tmp_path / "again" / "stats.json").read_text())
    assert again["before"] == again["after"] == stats["after"]
    for name in ("nodes.csv", "edges.csv"):
        assert filecmp.cmp(instance / "pre" / name, tmp_path / "again" / name, shallow=False)


def test_plan_is_reproducible(instance, tmp_path):
    args = ["plan", "--instance", str(instance / "pre"), "--iterations", "10", "--seed", "7", "--no-figures"]
    assert main(args + ["--out", str(tmp_path / "a")]) in (EXIT_OK, EXIT_VIOLATIONS)
    assert main(args + ["--out", str(tmp_path / "b")]) in (EXIT_OK, EXIT_VIOLATIONS)
    files = tree_files(tmp_path / "a")
    assert files == tree_files(tmp_path / "b")
    assert "assignment.csv" in files and "training_log.csv" in files and "routes/route_001.csv" in files
    assert len([f for f in files if f.startswith("iterations/")]) == 11
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not errors and mismatch == []
    with open(tmp_path / "a" / "training_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 11 and [int(r["iter"]) for r in rows] == list(range(11))


def test_plan_writes_figure(instance, tmp_path):
    assert main(["plan", "--instance", str(instance / "pre"), "--iterations", "2", "--out", str(tmp_path)]) in (EXIT_OK, EXIT_VIOLATIONS)
    png = tmp_path / "figures" / "training_curve.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_artifacts_reevaluate_exactly(instance, tmp_path):
    assert main(["plan", "--instance", str(instance / "pre"), "--iterations", "3", "--no-figures", "--out", str(tmp_path)]) in (
        EXIT_OK,
        EXIT_VIOLATIONS,
    )
    net = load_instance_network(instance / "pre")
    fleet = load_fleet(instance / "pre" / "fleet.json")
    summary = read_plan_summary(tmp_path / "plan.json")
    routes = read_routes(tmp_path / "routes", net, fleet.vehicle)
    assert max(r.duration_minutes for r in routes) == pytest.approx(summary["Z1_min"], abs=1e-9)
    assert sum(r.emissions_kg for r in routes) == pytest.approx(summary["Z2_kg"], abs=1e-9)
    ref = summary["reference"]
    plan = Plan(routes, summary["Z1_min"], summary["Z2_kg"])
    f = objective(plan, (ref["Z1_min"], ref["Z2_kg"]))
    assert f <= 2.0 + 1e-9


def test_hard_depot_capacity_violation_exits_nonzero(tmp_path, capsys):
    raw = tmp_path / "raw"
    assert main(["generate", "--seed", "2", "--nodes", "300", "--treated", "0.3", "--max-vehicles", "1", "--out", str(raw)]) == EXIT_OK
    capsys.readouterr()
    code = main(["run", "--instance", str(raw), "--iterations", "0", "--depot-capacity", "hard", "--no-figures", "--out", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == EXIT_VIOLATIONS
    assert "depot_capacity" in err


def test_missing_instance_is_config_error(tmp_path, capsys):
    assert main(["plan", "--instance", str(tmp_path / "nope")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err
    assert main(["plan", "--instance", str(tmp_path), "--iterations", "-1"]) == EXIT_CONFIG
    assert main(["oracle", "--max-edges", "9"]) == EXIT_CONFIG


def test_unroutable_edge_exit_code(instance, tmp_path, capsys):
    net = load_instance_network(instance / "pre")
    fleet = load_fleet(instance / "pre" / "fleet.json")
    write_network(net, tmp_path)
    write_fleet(FleetSpec(fleet.depots, VehicleClass(max_route_minutes=1.0)), tmp_path / "fleet.json")
    assert main(["plan", "--instance", str(tmp_path), "--iterations", "0", "--no-figures", "--out", str(tmp_path / "o")]) == EXIT_UNROUTABLE
    assert "edge" in capsys.readouterr().err


# ---------------------------------------------------------------- geojson


def line_net():
    nodes = {1: (0.0, 0.0), 2: (1000.0, 0.0), 3: (2000.0, 0.0), 4: (3000.0, 0.0)}
    edges = [
        RoadEdge(1, 1, 2, 1.0, 50, 1, True, True, ((0.0, 0.0), (500.0, 50.0), (1000.0, 0.0))),
        RoadEdge(2, 2, 3, 1.0, 50, 1, True, True),
        RoadEdge(3, 3, 4, 1.0, 50, 1, True, True),
        RoadEdge(4, 4, 1, 3.2, 50, 1, True, False),
    ]
    return RoadNetwork(nodes, edges)


def test_geojson_empty_plan_has_only_depots():
    net = line_net()
    fleet = FleetSpec((Depot(1, 1, 2), Depot(2, 3, 2)))
    gj = plan_geojson(net, fleet, [])
    assert [f["geometry"]["type"] for f in gj["features"]] == ["Point", "Point"]


def test_geojson_route_segments():
    net = line_net()
    fleet = FleetSpec((Depot(1, 1, 2),))
    steps = [RouteStep(1, TREAT), RouteStep(2, TREAT), RouteStep(3, TREAT), RouteStep(4, DEADHEAD)]
    route = build_route(1, steps, net, fleet.vehicle)
    gj = json.loads(json.dumps(plan_geojson(net, fleet, [route])))
    feat = gj["features"][1]
    props = feat["properties"]
    assert feat["geometry"]["type"] == "LineString"
    coords = feat["geometry"]["coordinates"]
    assert coords[0] == [0.0, 0.0] and coords[-1] == [0.0, 0.0]
    # no duplicated joints
    assert all(a != b for a, b in zip(coords, coords[1:]))
    assert props["treated_edges"] == 3
    assert props["geometry_fallback"] is True
    assert [s["straight_fallback"] for s in props["segments"]] == [False, True, True, True]
    total = sum(s["length_km"] for s in props["segments"])
    assert math.isclose(total, props["distance_km"], abs_tol=1e-6)
    assert props["segments"][-1]["cum_km"] == pytest.approx(props["distance_km"], abs=1e-9)
    assert props["segments"][-1]["cum_min"] == pytest.approx(props["duration_min"], abs=1e-9)


def test_export_geojson_command(instance, tmp_path):
    plan = tmp_path / "plan"
    assert main(["plan", "--instance", str(instance / "pre"), "--iterations", "0", "--no-figures", "--out", str(plan)]) in (EXIT_OK, EXIT_VIOLATIONS)
    assert main(["export-geojson", "--instance", str(instance / "pre"), "--plan", str(plan)]) == EXIT_OK
    gj = json.loads((plan / "routes.geojson").read_text())
    summary = read_plan_summary(plan / "plan.json")
    lines = [f for f in gj["features"] if f["geometry"]["type"] == "LineString"]
    assert len(lines) == summary["NoV"]
    for f in lines:
        p = f["properties"]
        assert sum(s["length_km"] for s in p["segments"]) == pytest.approx(p["distance_km"], abs=1e-6)


def test_stats_of_written_instance_match(instance):
    net = load_instance_network(instance / "pre")
    stats = json.loads((instance / "pre" / "stats.json").read_text())
    live = network_stats(net)
    for k in ("nodes", "directed_edges", "treated_edges"):
        assert live[k] == stats["after"][k]

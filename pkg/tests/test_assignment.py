import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gritplan.assignment import (
    Assignment,
    KdTree,
    encode_features,
    nearest_depot_assignment,
    read_assignment,
    write_assignment,
)
from gritplan.fleet import Depot
from gritplan.network import RoadEdge, RoadNetwork


def linear_scan(points, q):
    d = [(p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 for p in points]
    return int(np.argmin(d))  # first minimum = lowest index


def test_kdtree_examples():
    assert KdTree([(3.0, 4.0)]).nearest((100.0, -7.0)) == 0
    t = KdTree([(0, 0), (10, 0), (0, 10)])
    assert t.nearest((2, 1)) == 0
    assert t.nearest((5, 0)) == 0
    with pytest.raises(ValueError):
        KdTree([])


def test_kdtree_equals_linear_scan_on_1000_sets():
    rng = np.random.default_rng(0)
    for k in range(1000):
        n = int(rng.integers(1, 40))
        # integer grid makes exact ties common
        pts = rng.integers(0, 8, size=(n, 2)).astype(float) if k % 2 else rng.uniform(-1e4, 1e4, size=(n, 2))
        tree = KdTree(pts.tolist())
        for q in rng.uniform(-2, 10, size=(5, 2)) if k % 2 else rng.uniform(-1e4, 1e4, size=(5, 2)):
            if k % 4 == 1:
                q = np.round(q * 2) / 2
            assert tree.nearest(q) == linear_scan(pts, q)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=1, max_size=20), st.tuples(st.integers(-6, 6), st.integers(-6, 6)))
def test_kdtree_ties_property(points, q):
    assert KdTree(points).nearest(q) == linear_scan(points, q)


def line_network(mid_xs, lengths=None, extra=None):
    nodes, edges = {}, []
    for i, x in enumerate(mid_xs):
        a, b = 2 * i + 1, 2 * i + 2
        nodes[a], nodes[b] = (x - 1.0, 0.0), (x + 1.0, 0.0)
        length = lengths[i] if lengths else 1.0
        edges.append(RoadEdge(i + 1, a, b, length, 30 + 10 * i, 1 + i % 2, True, True))
    for n, xy in (extra or {}).items():
        nodes[n] = xy
    return RoadNetwork(nodes, edges)


def test_single_depot_takes_everything():
    net = line_network([0.0, 50.0, 90.0])
    a = nearest_depot_assignment(net, [Depot(4, 1)])
    assert set(a.mapping.values()) == {4}


def test_two_depots_split_by_midpoint():
    net = line_network([10.0, 90.0], extra={100: (0.0, 0.0), 101: (100.0, 0.0)})
    a = nearest_depot_assignment(net, [Depot(1, 100), Depot(2, 101)])
    assert a.mapping == {1: 1, 2: 2}


def test_midpoint_tie_goes_to_lowest_depot_id_regardless_of_order():
    net = line_network([50.0], extra={100: (0.0, 0.0), 101: (100.0, 0.0)})
    for depots in ([Depot(1, 100), Depot(2, 101)], [Depot(2, 101), Depot(1, 100)], [Depot(2, 100), Depot(1, 101)]):
        assert nearest_depot_assignment(net, depots).mapping == {1: 1}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1000, 1000), min_size=1, max_size=8), st.permutations(range(3)))
def test_assignment_is_order_invariant(xs, perm):
    net = line_network(xs, extra={100: (-500.0, 3.0), 101: (0.0, -3.0), 102: (500.0, 3.0)})
    depots = [Depot(1, 100), Depot(2, 101), Depot(3, 102)]
    shuffled = [depots[i] for i in perm]
    assert nearest_depot_assignment(net, depots) == nearest_depot_assignment(net, shuffled)


def test_features_shape_and_minmax():
    net = line_network([0.0, 10.0], lengths=[1.0, 3.0], extra={100: (0, 0), 101: (5, 5), 102: (9, 9)})
    X, ids, scaler = encode_features(net, [Depot(1, 100), Depot(2, 101), Depot(3, 102)])
    assert X.shape == (2, 8)
    assert ids == [1, 2]
    assert X[:, 2].tolist() == [0.0, 1.0]
    assert scaler.length == (1.0, 3.0)
    assert ((X >= 0) & (X <= 1)).all()


def test_constant_feature_maps_to_zero():
    net = line_network([0.0, 10.0, 20.0], lengths=[2.0, 2.0, 2.0], extra={100: (0, 0)})
    X, _, _ = encode_features(net, [Depot(1, 100)])
    assert (X[:, 2] == 0).all()
    assert X.shape[1] == 6


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e5, 1e5), st.floats(-1e5, 1e5))
def test_features_translation_invariant(dx, dy):
    net = line_network([0.0, 37.0, 80.0], lengths=[1.0, 2.0, 4.0], extra={100: (0, 5), 101: (60, -5)})
    depots = [Depot(1, 100), Depot(2, 101)]
    moved = RoadNetwork({n: (x + dx, y + dy) for n, (x, y) in net.nodes.items()}, net.edges.values())
    a, _, _ = encode_features(net, depots)
    b, _, _ = encode_features(moved, depots)
    assert np.allclose(a, b, atol=1e-9)


def test_assignment_csv_roundtrip_and_validation(tmp_path):
    net = line_network([0.0, 10.0], extra={100: (0, 0)})
    a = Assignment({2: 1, 1: 1})
    write_assignment(a, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == "edge_id,depot_id\n1,1\n2,1\n"
    assert read_assignment(tmp_path / "a.csv") == a
    a.validate(net, [Depot(1, 100)])
    with pytest.raises(ValueError):
        Assignment({1: 1}).validate(net, [Depot(1, 100)])
    with pytest.raises(ValueError):
        Assignment({1: 1, 2: 5}).validate(net, [Depot(1, 100)])
    assert a.hamming(Assignment({1: 1, 2: 2})) == 1

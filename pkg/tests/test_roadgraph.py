import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progd import autodiff as ad
from progd.roadgraph import RoadGCN, build_road_graph, dfs_candidate_lanes
from progd.scenario import LanePolyline, ScenarioValidationError


def lane(lid, x0, x1, y=0.0, n=5, succ=(), pred=()):
    pts = np.stack([np.linspace(x0, x1, n), np.full(n, y)], axis=1)
    return LanePolyline(lid, pts, succ, pred)


def chain(k=3, length=20.0):
    ids = [chr(ord("A") + i) for i in range(k)]
    return [lane(ids[i], i * length, (i + 1) * length, succ=(ids[i + 1],) if i + 1 < k else ())
            for i in range(k)]


def test_single_lane_chain_edges():
    g = build_road_graph([lane("A", 0, 8)])
    und = {tuple(sorted(e)) for e in g.point_edge_set()}
    assert und == {(0, 1), (1, 2), (2, 3), (3, 4)}


def test_successor_links_last_to_first():
    g = build_road_graph(chain(2))
    assert (4, 5) in g.point_edge_set() and (5, 4) in g.point_edge_set()
    assert len(g.point_edges) == 2 * (4 + 4 + 1)


def test_y_junction_edges():
    lanes = [lane("P", 0, 10, succ=("L", "R")), lane("L", 10, 20, y=2), lane("R", 10, 20, y=-2)]
    g = build_road_graph(lanes)
    und = {tuple(sorted(e)) for e in g.point_edge_set()}
    expected = {(i, i + 1) for s in (0, 5, 10) for i in range(s, s + 4)} | {(4, 5), (4, 10)}
    assert und == expected


def test_edges_symmetric_and_points_owned_once():
    lanes = [lane("P", 0, 10, succ=("L",)), lane("L", 10, 20, pred=("P",)), lane("Q", -5, 5, y=4)]
    g = build_road_graph(lanes)
    edges = g.point_edge_set()
    assert all((b, a) in edges for a, b in edges)
    assert np.bincount(g.point_lane).tolist() == [5, 5, 5]


def test_dangling_successor_rejected():
    with pytest.raises(ScenarioValidationError):
        build_road_graph([lane("A", 0, 1, succ=("nope",))])


def test_dfs_examples():
    g = build_road_graph(chain(4))
    assert dfs_candidate_lanes((1.0, 0.0), g, seed_radius=2.0, depth=2) == {"A", "B", "C"}
    assert dfs_candidate_lanes((30.0, 0.0), g, seed_radius=2.0, depth=0) == {"B"}
    assert dfs_candidate_lanes((1000.0, 1000.0), g, seed_radius=20.0, depth=4) == set()
    with pytest.raises(ValueError):
        dfs_candidate_lanes((0.0, 0.0), g, depth=-1)


def test_dfs_adds_merge_siblings():
    lanes = [lane("P", 0, 10, succ=("L", "R")), lane("L", 10, 30, y=8), lane("R", 10, 30, y=-8)]
    g = build_road_graph(lanes)
    assert dfs_candidate_lanes((25.0, 8.0), g, seed_radius=1.0, depth=1) == {"L", "R"}
    assert dfs_candidate_lanes((25.0, 8.0), g, seed_radius=1.0, depth=0) == {"L"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0, 60), st.floats(0, 30))
def test_dfs_monotone(seed, radius, extra):
    rng = np.random.default_rng(seed)
    k = 6
    ids = [str(i) for i in range(k)]
    lanes = []
    for i in range(k):
        succ = tuple(ids[j] for j in rng.choice(k, size=rng.integers(0, 3), replace=False) if j != i)
        lanes.append(lane(ids[i], *rng.uniform(-50, 50, 2), y=rng.uniform(-50, 50), succ=succ))
    g = build_road_graph(lanes)
    pos = rng.uniform(-50, 50, 2)
    prev = set()
    for depth in range(5):
        cur = dfs_candidate_lanes(pos, g, radius, depth)
        assert prev <= cur
        prev = cur
    assert dfs_candidate_lanes(pos, g, radius, 2) <= dfs_candidate_lanes(pos, g, radius + extra, 2)


def gcn(seed=0, d=8):
    return RoadGCN(d, np.random.default_rng(seed))


def test_gcn_isolated_lane_locality():
    a, b = lane("A", 0, 10), lane("B", 0, 10, y=30)
    model = gcn()
    alone = model(build_road_graph([a])).data
    with_b = model(build_road_graph([a, b])).data
    np.testing.assert_allclose(with_b[0], alone[0], atol=1e-12)


def test_gcn_lane_order_equivariance():
    lanes = [lane("P", 0, 10, succ=("L",)), lane("L", 10, 20), lane("Q", -5, 5, y=4, n=3)]
    model = gcn()
    ref = model(build_road_graph(lanes)).data
    perm = [2, 0, 1]
    out = model(build_road_graph([lanes[i] for i in perm])).data
    np.testing.assert_allclose(out, ref[perm], atol=1e-12)
    assert np.isfinite(ref).all() and ref.shape == (3, 8)


def test_gcn_gradient_two_lanes():
    g = build_road_graph([lane("A", 0, 10, succ=("B",)), lane("B", 10, 20, n=4)])
    model = gcn(d=6)
    w = np.random.default_rng(1).standard_normal((2, 6))

    def loss():
        return (model(g) * w).sum()

    model.zero_grad()
    ad.backward(loss())
    for name, p in model.named_parameters():
        num = ad.numerical_gradient(loss, p)
        # key biases get an exactly-zero gradient (softmax shift invariance); floor absorbs FD noise
        assert ad.relative_error(p.grad, num, floor=1e-6) <= 1e-4, name

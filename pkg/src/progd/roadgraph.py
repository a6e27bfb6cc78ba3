"""Lane graph over centerline points, the multi-scale road GCN and DFS reachability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import MLP, Module, TransformerLayer
from .scenario import LanePolyline, ScenarioValidationError


@dataclass(frozen=True)
class RoadGraph:
    """Point-level lane graph plus the lane-level topology it was built from.

    Attributes:
        lane_ids: lane id per lane index.
        point_xy: ``(Np, 2)`` centerline points, lanes stored contiguously.
        point_lane: ``(Np,)`` owning lane index of every point.
        lane_slices: ``(L, 2)`` ``[start, stop)`` point range of every lane.
        point_edges: ``(E, 2)`` undirected point links, both directions listed.
        successors / predecessors: lane-index adjacency lists.
        lane_edges: ``(F, 2)`` lane-level links (both directions).
    """

    lane_ids: tuple
    point_xy: np.ndarray
    point_lane: np.ndarray
    lane_slices: np.ndarray
    point_edges: np.ndarray
    successors: tuple
    predecessors: tuple
    lane_edges: np.ndarray

    @property
    def num_lanes(self) -> int:
        return len(self.lane_ids)

    @property
    def num_points(self) -> int:
        return self.point_xy.shape[0]

    def lane_index(self, lane_id) -> int:
        return self.lane_ids.index(lane_id)

    def lane_points(self, idx: int) -> np.ndarray:
        a, b = self.lane_slices[idx]
        return self.point_xy[a:b]

    def lane_centers(self) -> np.ndarray:
        if self.num_lanes == 0:
            return np.zeros((0, 2))
        return np.stack([self.lane_points(i).mean(axis=0) for i in range(self.num_lanes)])

    def point_edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.point_edges}


def build_road_graph(lanes: list[LanePolyline]) -> RoadGraph:
    """Chain each lane's points and link lanes at their successor/predecessor junctions."""
    ids = tuple(l.lane_id for l in lanes)
    index = {lid: i for i, lid in enumerate(ids)}
    succ: list[set[int]] = [set() for _ in lanes]
    pred: list[set[int]] = [set() for _ in lanes]
    for i, lane in enumerate(lanes):
        for ref in lane.successor_ids:
            if ref not in index:
                raise ScenarioValidationError(f"lane {lane.lane_id!r}: dangling successor {ref!r}")
            succ[i].add(index[ref])
            pred[index[ref]].add(i)
        for ref in lane.predecessor_ids:
            if ref not in index:
                raise ScenarioValidationError(f"lane {lane.lane_id!r}: dangling predecessor {ref!r}")
            pred[i].add(index[ref])
            succ[index[ref]].add(i)

    slices, points, owner = [], [], []
    start = 0
    for i, lane in enumerate(lanes):
        n = lane.centerline.shape[0]
        slices.append((start, start + n))
        points.append(lane.centerline)
        owner.extend([i] * n)
        start += n
    edges: set[tuple[int, int]] = set()
    for a, b in slices:
        for p in range(a, b - 1):
            edges.add((p, p + 1))
            edges.add((p + 1, p))
    lane_links: set[tuple[int, int]] = set()
    for i in range(len(lanes)):
        for j in succ[i]:
            tail, head = slices[i][1] - 1, slices[j][0]
            edges.add((tail, head))
            edges.add((head, tail))
            lane_links.add((i, j))
            lane_links.add((j, i))
    return RoadGraph(
        lane_ids=ids,
        point_xy=np.concatenate(points) if points else np.zeros((0, 2)),
        point_lane=np.asarray(owner, dtype=np.int64),
        lane_slices=np.asarray(slices, dtype=np.int64).reshape(-1, 2),
        point_edges=np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2),
        successors=tuple(tuple(sorted(s)) for s in succ),
        predecessors=tuple(tuple(sorted(p)) for p in pred),
        lane_edges=np.asarray(sorted(lane_links), dtype=np.int64).reshape(-1, 2),
    )


def dfs_candidate_lanes(agent_position, g: RoadGraph, seed_radius: float = 20.0,
                        depth: int = 4) -> set:
    """Lanes an agent may drive into.

    Seeds are lanes with a centerline point within ``seed_radius`` of the
    agent. From the seeds, successor links are followed for up to ``depth``
    hops. For ``depth >= 1`` the sibling lanes of each seed (other successors
    of its predecessors) are added too, covering adjacent merge/split lanes.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return {g.lane_ids[i] for i in _candidate_indices(np.asarray(agent_position, float), g,
                                                         seed_radius, depth)}


def _candidate_indices(pos: np.ndarray, g: RoadGraph, seed_radius: float, depth: int) -> set[int]:
    if g.num_points == 0:
        return set()
    dist = np.linalg.norm(g.point_xy - pos, axis=1)
    seeds = sorted(set(g.point_lane[dist <= seed_radius].tolist()))
    found = set(seeds)
    if depth >= 1:
        for s in seeds:
            for p in g.predecessors[s]:
                found.update(g.successors[p])
    best: dict[int, int] = {}
    stack = [(s, depth) for s in seeds]
    while stack:
        lane, remaining = stack.pop()
        if best.get(lane, -1) >= remaining:
            continue
        best[lane] = remaining
        found.add(lane)
        if remaining > 0:
            stack.extend((nxt, remaining - 1) for nxt in g.successors[lane])
    return found


def point_features(g: RoadGraph, pos_scale: float = 50.0) -> np.ndarray:
    """Per-point ``[x/s, y/s, ux, uy]`` with ``u`` the unit direction along the lane."""
    feats = np.zeros((g.num_points, 4))
    for a, b in g.lane_slices:
        pts = g.point_xy[a:b]
        d = np.diff(pts, axis=0)
        d = np.vstack([d, d[-1:]])
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        feats[a:b, 2:] = d / np.where(norm > 0, norm, 1.0)
    feats[:, :2] = g.point_xy / pos_scale
    return feats


class RoadGCN(Module):
    """Point-level and polyline-level graph Transformer layers with pool/unpool.

    Pipeline: point layers -> mean-pool to polylines -> polyline layers over
    lane adjacency -> broadcast back to points, added to the point features
    -> mean-pool into one embedding per lane segment.
    """

    def __init__(self, d: int, rng: np.random.Generator, point_layers: int = 2,
                 polyline_layers: int = 2, pos_scale: float = 50.0):
        self.pos_scale = pos_scale
        self.embed = MLP([4, d, d], rng)
        self.point_layers = [TransformerLayer(d, 1, rng) for _ in range(point_layers)]
        self.polyline_layers = [TransformerLayer(d, 1, rng) for _ in range(polyline_layers)]

    def __call__(self, g: RoadGraph) -> ad.Tensor:
        if g.num_points == 0:
            raise ValueError("road graph is empty")
        n, lanes = g.num_points, g.num_lanes
        point_mask = np.eye(n, dtype=bool)
        if len(g.point_edges):
            point_mask[g.point_edges[:, 1], g.point_edges[:, 0]] = True
        lane_mask = np.eye(lanes, dtype=bool)
        if len(g.lane_edges):
            lane_mask[g.lane_edges[:, 1], g.lane_edges[:, 0]] = True
        pool = np.zeros((lanes, n))
        for i, (a, b) in enumerate(g.lane_slices):
            pool[i, a:b] = 1.0 / (b - a)

        x = self.embed(point_features(g, self.pos_scale)).reshape(1, n, -1)
        for layer in self.point_layers:
            x = layer(x, point_mask[None])
        point_feats = x.reshape(n, -1)
        y = ad.matmul(pool, point_feats).reshape(1, lanes, -1)
        for layer in self.polyline_layers:
            y = layer(y, lane_mask[None])
        fused = point_feats + ad.gather_rows(y.reshape(lanes, -1), g.point_lane)
        return ad.matmul(pool, fused)

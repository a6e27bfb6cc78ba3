"""Progressive snapshots of the future-scene graph.

A snapshot covers one interval of ``tau`` seconds. Agent-to-agent edges form
the complete directed graph over interesting agents; lane-to-agent edges link
a DFS-candidate lane to an agent when the L1 distance from the agent's
coordinate to the lane center is strictly below ``eps``. Setting ``aa_eps``
gates agent-to-agent edges the same way instead of connecting all pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class SnapshotError(ValueError):
    """Positions required to build or update a snapshot are missing or invalid."""


def l1_distance(a, b) -> float:
    return abs(float(a[0]) - float(b[0])) + abs(float(a[1]) - float(b[1]))


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One time slice of the dynamic graph for a single modality.

    ``e0`` holds agent->agent pairs ``(src, dst)``; ``e1`` holds
    lane->agent pairs ``(lane, agent)``. Indices are local to this snapshot.
    """

    index: int
    agent_ids: tuple
    agent_xy: np.ndarray
    lane_ids: tuple
    lane_xy: np.ndarray
    e0: np.ndarray
    e1: np.ndarray
    candidates: tuple
    eps: float
    lane_edges: bool = True
    updated: bool = False
    agent_edges: bool = True
    aa_eps: float | None = None

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (self.index == other.index and self.agent_ids == other.agent_ids
                and np.array_equal(self.agent_xy, other.agent_xy)
                and self.lane_ids == other.lane_ids
                and np.array_equal(self.lane_xy, other.lane_xy)
                and np.array_equal(self.e0, other.e0) and np.array_equal(self.e1, other.e1))

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "updated": self.updated,
            "agents": [{"id": a, "xy": list(map(float, xy))} for a, xy in zip(self.agent_ids, self.agent_xy)],
            "lanes": [{"id": l, "xy": list(map(float, xy))} for l, xy in zip(self.lane_ids, self.lane_xy)],
            "agent2agent": self.e0.tolist(),
            "lane2agent": self.e1.tolist(),
        }


def _lane_edges(agent_xy: np.ndarray, lane_xy: np.ndarray, candidates, eps: float) -> np.ndarray:
    pairs = []
    for i, cands in enumerate(candidates):
        for lane in sorted(cands):
            if np.abs(agent_xy[i] - lane_xy[lane]).sum() < eps:
                pairs.append((lane, i))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _agent_edges(agent_xy: np.ndarray, aa_eps: float | None) -> np.ndarray:
    n = len(agent_xy)
    pairs = [(j, i) for i in range(n) for j in range(n)
             if i != j and (aa_eps is None or np.abs(agent_xy[i] - agent_xy[j]).sum() < aa_eps)]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _check_positions(positions, n: int) -> np.ndarray:
    xy = np.asarray(positions, dtype=np.float64)
    if xy.shape != (n, 2):
        raise SnapshotError(f"need positions for {n} agents, got array of shape {xy.shape}")
    if not np.all(np.isfinite(xy)):
        raise SnapshotError("agent positions contain non-finite values")
    return xy


def construct_snapshot(p: int, positions, candidates, lane_xy, eps: float = 15.0,
                       agent_ids=None, lane_ids=None, agent_edges: bool = True,
                       lane_edges: bool = True, aa_eps: float | None = None) -> Snapshot:
    """Build snapshot ``p`` from agent positions at the end of interval ``p - 1``.

    Args:
        p: 1-based snapshot index.
        positions: ``(n, 2)`` interesting-agent positions.
        candidates: per agent, an iterable of candidate lane indices.
        lane_xy: ``(L, 2)`` lane center coordinates.
        eps: L1 threshold for lane-to-agent edges.
        agent_edges / lane_edges: disable an edge family (ablation switches).
        aa_eps: optional L1 threshold for agent-to-agent edges; None keeps them
            fully connected.
    """
    if p < 1:
        raise SnapshotError("snapshot index starts at 1")
    n = len(candidates)
    xy = _check_positions(positions, n)
    lane_xy = np.asarray(lane_xy, dtype=np.float64).reshape(-1, 2)
    e0 = _agent_edges(xy, aa_eps) if agent_edges else np.zeros((0, 2), dtype=np.int64)
    cands = tuple(frozenset(int(c) for c in cs) for cs in candidates)
    e1 = _lane_edges(xy, lane_xy, cands, eps) if lane_edges else np.zeros((0, 2), dtype=np.int64)
    return Snapshot(
        index=p,
        agent_ids=tuple(agent_ids) if agent_ids is not None else tuple(range(n)),
        agent_xy=xy.copy(),
        lane_ids=tuple(lane_ids) if lane_ids is not None else tuple(range(len(lane_xy))),
        lane_xy=lane_xy,
        e0=e0,
        e1=e1,
        candidates=cands,
        eps=float(eps),
        lane_edges=lane_edges,
        agent_edges=agent_edges,
        aa_eps=None if aa_eps is None else float(aa_eps),
    )


def update_snapshot(s: Snapshot, coarse_positions) -> Snapshot:
    """Move agent nodes to their coarse end-of-interval positions and relink lanes."""
    xy = _check_positions(coarse_positions, len(s.agent_ids))
    e1 = _lane_edges(xy, s.lane_xy, s.candidates, s.eps) if s.lane_edges else s.e1
    e0 = _agent_edges(xy, s.aa_eps) if s.agent_edges and s.aa_eps is not None else s.e0
    return replace(s, agent_xy=xy.copy(), e0=e0, e1=e1, updated=True)

"""Scenario encoder: agent motion Transformer and static heterogeneous graph layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import MLP, HeteroConv, Module, Relation, TransformerLayer
from .roadgraph import RoadGraph
from .scenario import AGENT_TYPES, AgentTrack, ScenarioValidationError

STATE_FEATURES = 8 + len(AGENT_TYPES)


@dataclass(frozen=True)
class AgentInputs:
    """Observation tensors for ``N`` agents on a ``T``-step grid ending at t=0."""

    agent_ids: tuple
    feats: np.ndarray  # (N, T, F)
    mask: np.ndarray  # (N, T) observed steps
    last_index: np.ndarray  # (N,) grid index of the last observed step
    position: np.ndarray  # (N, 2) position at the last observed step
    yaw: np.ndarray  # (N,)


def track_features(tracks: list[AgentTrack], obs_steps: int, pos_scale: float = 10.0,
                   vel_scale: float = 10.0) -> AgentInputs:
    """Per-step state vectors, positions taken relative to the last observation."""
    n = len(tracks)
    feats = np.zeros((n, obs_steps, STATE_FEATURES))
    mask = np.zeros((n, obs_steps), dtype=bool)
    last = np.zeros(n, dtype=np.int64)
    pos = np.zeros((n, 2))
    yaw = np.zeros(n)
    for i, track in enumerate(tracks):
        rows = [s for s in track.observed() if s.t > -obs_steps]
        if not rows:
            raise ScenarioValidationError(f"agent {track.agent_id!r}: no observed state")
        ref = rows[-1]
        pos[i] = (ref.x, ref.y)
        yaw[i] = ref.yaw
        last[i] = ref.t + obs_steps - 1
        onehot = np.zeros(len(AGENT_TYPES))
        onehot[AGENT_TYPES.index(track.agent_type)] = 1.0
        for s in rows:
            k = s.t + obs_steps - 1
            mask[i, k] = True
            feats[i, k, :8] = (
                (s.x - ref.x) / pos_scale, (s.y - ref.y) / pos_scale,
                s.vx / vel_scale, s.vy / vel_scale,
                np.cos(s.yaw), np.sin(s.yaw), s.length / 5.0, s.width / 5.0,
            )
            feats[i, k, 8:] = onehot
    return AgentInputs(tuple(t.agent_id for t in tracks), feats, mask, last, pos, yaw)


class AgentTransformer(Module):
    """State MLP followed by full self-attention over the observed steps."""

    def __init__(self, d: int, heads: int, layers: int, rng: np.random.Generator):
        self.embed = MLP([STATE_FEATURES, d, d], rng)
        self.layers = [TransformerLayer(d, heads, rng) for _ in range(layers)]

    def __call__(self, inputs: AgentInputs) -> ad.Tensor:
        n, t, _ = inputs.feats.shape
        x = self.embed(inputs.feats)
        attend = np.broadcast_to(inputs.mask[:, None, :], (n, t, t))
        for layer in self.layers:
            x = layer(x, attend)
        rows = np.arange(n) * t + inputs.last_index
        return ad.gather_rows(x.reshape(n * t, -1), rows)


def agent_transformer_encode(track: AgentTrack, model: AgentTransformer, obs_steps: int) -> ad.Tensor:
    """Motion feature ``(d,)`` of one track at its last observed step."""
    if not track.observed():
        raise ScenarioValidationError(f"agent {track.agent_id!r}: empty track")
    return model(track_features([track], obs_steps)).reshape(-1)


@dataclass(frozen=True)
class StaticHeteroGraph:
    """Observed-scene graph: agents, lane segments and three edge types.

    Edges are ``(src, dst)`` index pairs; ``aa`` over agents, ``al`` from
    lane to agent, ``ll`` between lanes.
    """

    agent_xy: np.ndarray
    lane_xy: np.ndarray
    aa: np.ndarray
    al: np.ndarray
    ll: np.ndarray
    candidates: tuple  # per agent, frozenset of lane indices


def _pairs(edges) -> np.ndarray:
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def build_static_graph(agent_xy: np.ndarray, road: RoadGraph, dfs_sets: list[set[int]],
                       radius: float = 15.0) -> StaticHeteroGraph:
    """Connect agents within ``radius`` (Euclidean), DFS-candidate lanes to
    their agent, and lanes along road topology."""
    agent_xy = np.asarray(agent_xy, dtype=np.float64).reshape(-1, 2)
    n = agent_xy.shape[0]
    aa = [
        (j, i) for i in range(n) for j in range(n)
        if i != j and np.hypot(*(agent_xy[j] - agent_xy[i])) < radius
    ]
    al = [(lane, i) for i in range(n) for lane in sorted(dfs_sets[i])]
    return StaticHeteroGraph(
        agent_xy=agent_xy,
        lane_xy=road.lane_centers(),
        aa=_pairs(aa),
        al=_pairs(al),
        ll=_pairs(road.lane_edges),
        candidates=tuple(frozenset(s) for s in dfs_sets),
    )


class HeteroEncoder(Module):
    """Stacked heterogeneous layers with residual updates; lanes update from
    lanes, agents from both."""

    def __init__(self, d: int, layers: int, rng: np.random.Generator, coord_scale: float = 10.0):
        self.agent_convs = [HeteroConv(d, ["agent", "lane"], rng, coord_scale) for _ in range(layers)]
        self.lane_convs = [HeteroConv(d, ["lane"], rng, coord_scale) for _ in range(layers)]

    def __call__(self, g: StaticHeteroGraph, agent_feats: ad.Tensor, lane_feats: ad.Tensor):
        """Returns ``(H, lane features)`` after the last layer."""
        h, lanes = agent_feats, lane_feats
        for agent_conv, lane_conv in zip(self.agent_convs, self.lane_convs):
            new_h = agent_conv(h, g.agent_xy, {
                "agent": Relation(h, g.agent_xy, g.aa[:, 0], g.aa[:, 1]),
                "lane": Relation(lanes, g.lane_xy, g.al[:, 0], g.al[:, 1]),
            })
            lanes = lanes + lane_conv(lanes, g.lane_xy, {
                "lane": Relation(lanes, g.lane_xy, g.ll[:, 0], g.ll[:, 1]),
            })
            h = h + new_h
        return h, lanes


def hetero_encode(g: StaticHeteroGraph, encoder: HeteroEncoder, agent_feats, lane_feats) -> ad.Tensor:
    return encoder(g, agent_feats, lane_feats)[0]

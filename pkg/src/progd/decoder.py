"""Progressive multi-scale decoder over per-modality dynamic graphs.

All ``K`` modalities are decoded together: agent rows are laid out
modality-major, row ``k * n + i`` holding agent ``i`` in modality ``k``.
Each modality keeps its own snapshots because its predicted positions differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dyngraph import Snapshot, construct_snapshot, update_snapshot
from .nn import MLP, HeteroConv, Linear, Module, Relation, TransformerLayer, sinusoidal_embedding


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 32
    modes: int = 6
    fut_steps: int = 30
    stage_steps: int = 10
    heads: int = 8
    eps: float = 15.0
    vel_scale: float = 10.0
    hz: float = 10.0
    coord_scale: float = 10.0
    temporal_module: bool = True
    dyn_aa_edges: bool = True
    dyn_aa_eps: float | None = None  # None: fully connected agent2agent edges
    dyn_al_edges: bool = True
    multiscale: bool = True
    static_future_graph: bool = False

    @property
    def stages(self) -> int:
        if self.fut_steps % self.stage_steps:
            raise ValueError(f"{self.stage_steps} steps per snapshot do not divide {self.fut_steps}")
        return self.fut_steps // self.stage_steps

    @property
    def mid_step(self) -> int:
        """1-based step inside a stage at which the coarse midpoint is placed."""
        return max(1, self.stage_steps // 2)


@dataclass
class StageTrace:
    """Instrumentation of one decoding stage across all modalities."""

    stage: int
    first_layer: int
    second_layer: int
    construct_xy: np.ndarray  # (K, n, 2)
    snapshots: list[Snapshot]
    updated: list[Snapshot]
    coarse_end: np.ndarray | None  # (K, n, 2)
    joint_end: np.ndarray  # (K, n, 2)


@dataclass
class DecodeOutput:
    joint: Tensor  # (K, n, T, 2)
    marginal: Tensor  # (K, n, T, 2)
    coarse: Tensor | None  # (K, n, P, 2, 2): [midpoint, endpoint]
    log_probs: Tensor  # (K,)
    trace: list[StageTrace] = field(default_factory=list)

    def prediction(self, agent_ids) -> "JointPrediction":
        coarse = None
        if self.coarse is not None:
            coarse = np.transpose(self.coarse.data, (1, 2, 3, 0, 4)).copy()
        return JointPrediction(
            agent_ids=tuple(agent_ids),
            positions=np.transpose(self.joint.data, (1, 2, 0, 3)).copy(),
            probs=np.exp(self.log_probs.data),
            marginal=np.transpose(self.marginal.data, (1, 2, 0, 3)).copy(),
            coarse=coarse,
        )


@dataclass
class JointPrediction:
    """Numpy view of a decode: ``positions[i, t, k]`` is agent i at step t+1 in modality k."""

    agent_ids: tuple
    positions: np.ndarray  # (n, T, K, 2)
    probs: np.ndarray  # (K,)
    marginal: np.ndarray | None = None  # (n, T, K, 2)
    coarse: np.ndarray | None = None  # (n, P, 2, K, 2)

    @property
    def modes(self) -> int:
        return self.positions.shape[2]

    def by_mode(self) -> np.ndarray:
        """``(K, n, T, 2)`` layout."""
        return np.transpose(self.positions, (2, 0, 1, 3))


class ModalityEmbedding(Module):
    def __init__(self, modes: int, d: int, rng: np.random.Generator, std: float = 0.02):
        if modes < 1:
            raise ValueError("need at least one modality")
        self.weight = Tensor(rng.normal(0.0, std, size=(modes, d)), requires_grad=True)


def modality_bias(h: Tensor, m: Tensor) -> Tensor:
    """``h_{i,k} = h_i + m_k`` as ``(K * n, d)`` rows, modality-major."""
    n, k = h.shape[0], m.shape[0]
    agents = np.tile(np.arange(n), k)
    modes = np.repeat(np.arange(k), n)
    return ad.gather_rows(h, agents) + ad.gather_rows(m, modes)


class TemporalModule(Module):
    """Per-step latents from one agent vector, then attention across future steps."""

    def __init__(self, d: int, steps: int, heads: int, rng: np.random.Generator):
        self.steps = steps
        self.expand = Linear(d, steps * d, rng)  # kernel-size-1 convolution per output step
        self.attention = TransformerLayer(d, heads, rng)
        self.position = sinusoidal_embedding(steps, d)

    def expand_temporal(self, h: Tensor) -> Tensor:
        rows, d = h.shape
        return self.expand(h).reshape(rows, self.steps, d)

    def cross_time_attention(self, x: Tensor) -> Tensor:
        return self.attention(x + self.position[: x.shape[1]])


def expand_temporal(h: Tensor, module: TemporalModule) -> Tensor:
    return module.expand_temporal(h)


def cross_time_attention(x: Tensor, module: TemporalModule) -> Tensor:
    return module.cross_time_attention(x)


def _relations(snapshots: list[Snapshot], feats, coords, lane_feats, lane_xy) -> dict[str, Relation]:
    n = len(snapshots[0].agent_ids)
    src0, dst0, src1, dst1 = [], [], [], []
    for k, snap in enumerate(snapshots):
        off = k * n
        src0.append(snap.e0[:, 0] + off)
        dst0.append(snap.e0[:, 1] + off)
        src1.append(snap.e1[:, 0])
        dst1.append(snap.e1[:, 1] + off)
    return {
        "agent": Relation(feats, coords, np.concatenate(src0), np.concatenate(dst0)),
        "lane": Relation(lane_feats, lane_xy, np.concatenate(src1), np.concatenate(dst1)),
    }


def hetero_conv(snapshots, agent_feats: Tensor, lane_feats: Tensor, conv: HeteroConv,
                coords=None) -> Tensor:
    """Apply one heterogeneous layer to agent nodes of one or more snapshots.

    Args:
        snapshots: a :class:`Snapshot` or a list of them (one per modality).
        agent_feats: ``(K * n, d)`` agent features, modality-major.
        lane_feats: ``(L, d)`` lane features shared by all modalities.
        conv: the layer.
        coords: ``(K * n, 2)`` agent coordinates; defaults to the snapshot
            coordinates as constants.
    """
    if isinstance(snapshots, Snapshot):
        snapshots = [snapshots]
    if coords is None:
        coords = np.concatenate([s.agent_xy for s in snapshots])
    lane_xy = snapshots[0].lane_xy
    return conv(agent_feats, coords, _relations(snapshots, agent_feats, coords, lane_feats, lane_xy))


class ProgressiveDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, stages = cfg.d, cfg.stages
        self.modality = ModalityEmbedding(cfg.modes, d, rng)
        self.temporal = TemporalModule(d, cfg.fut_steps, cfg.heads, rng)
        self.marginal_header = MLP([d, d, 2], rng)
        # one layer per stage in each graph-conv module, weights unshared
        self.first_convs = [HeteroConv(d, ["agent", "lane"], rng, cfg.coord_scale) for _ in range(stages)]
        self.second_convs = [HeteroConv(d, ["agent", "lane"], rng, cfg.coord_scale) for _ in range(stages)]
        self.coarse_header = MLP([d, d, 4], rng)
        self.joint_header = MLP([d, d, d, 2 * cfg.stage_steps], rng)
        self.probability_header = Linear(d, 1, rng)

    @property
    def step_scale(self) -> float:
        """Meters per unit of a per-step displacement output."""
        return self.cfg.vel_scale / self.cfg.hz

    @property
    def coarse_scale(self) -> float:
        return self.cfg.vel_scale * self.cfg.stage_steps / self.cfg.hz

    def marginal(self, x: Tensor, start: Tensor) -> Tensor:
        rows, steps, _ = x.shape
        disp = self.marginal_header(x) * self.step_scale
        return ad.cumsum(disp, axis=1) + ad.expand(start.reshape(rows, 1, 2), 1, steps)

    def coarse(self, z: Tensor, anchor: Tensor) -> tuple[Tensor, Tensor]:
        off = self.coarse_header(z) * self.coarse_scale
        return anchor + off[:, 0:2], anchor + off[:, 2:4]

    def joint(self, z: Tensor, anchor: Tensor) -> Tensor:
        rows, s = z.shape[0], self.cfg.stage_steps
        disp = self.joint_header(z).reshape(rows, s, 2) * self.step_scale
        return ad.cumsum(disp, axis=1) + ad.expand(anchor.reshape(rows, 1, 2), 1, s)

    def probabilities(self, z: Tensor, n: int) -> Tensor:
        k = self.cfg.modes
        pooled = ad.set_mean(z.reshape(k, n, -1), axis=1)
        return ad.log_softmax_lastdim(self.probability_header(pooled).reshape(k))

    def __call__(self, h: Tensor, start_xy: np.ndarray, lane_feats: Tensor, lane_xy: np.ndarray,
                 candidates, trace: bool = False) -> DecodeOutput:
        """Decode ``K`` joint futures for ``n`` agents.

        Args:
            h: ``(n, d)`` encoder embeddings of the interesting agents.
            start_xy: ``(n, 2)`` positions at t=0.
            lane_feats: ``(L, d)`` lane embeddings.
            lane_xy: ``(L, 2)`` lane centers.
            candidates: per agent, candidate lane indices.
            trace: record per-stage instrumentation.
        """
        cfg = self.cfg
        n, k, s = h.shape[0], cfg.modes, cfg.stage_steps
        rows = k * n
        start_xy = np.asarray(start_xy, dtype=np.float64)
        start = Tensor(np.tile(start_xy, (k, 1)))

        x = self.temporal.expand_temporal(modality_bias(h, self.modality.weight))
        if cfg.temporal_module:
            x = self.temporal.cross_time_attention(x)
        marginal = self.marginal(x, start)

        def build(p, xy):
            return [construct_snapshot(p, xy[m], candidates, lane_xy, cfg.eps,
                                       agent_edges=cfg.dyn_aa_edges, lane_edges=cfg.dyn_al_edges,
                                       aa_eps=cfg.dyn_aa_eps)
                    for m in range(k)]

        anchor, carry = start, None
        static = build(1, start_xy[None].repeat(k, 0)) if cfg.static_future_graph else None
        stages, mids, ends, traces = [], [], [], []
        for p in range(1, cfg.stages + 1):
            xin = x[:, p * s - 1, :]
            if carry is not None:
                xin = xin + carry
            positions = anchor.data.reshape(k, n, 2)
            if static is not None:
                snaps, coords = static, start
            else:
                snaps, coords = build(p, positions), anchor
            z = hetero_conv(snaps, xin, lane_feats, self.first_convs[p - 1], coords)
            coarse_end = None
            if cfg.multiscale:
                mid, end = self.coarse(z, anchor)
                mids.append(mid)
                ends.append(end)
                coarse_end = end.data.reshape(k, n, 2)
                if static is None:
                    snaps2 = [update_snapshot(sn, coarse_end[m]) for m, sn in enumerate(snaps)]
                    coords2 = end
                else:
                    snaps2, coords2 = snaps, coords
            else:
                snaps2, coords2 = snaps, coords
            z2 = hetero_conv(snaps2, z, lane_feats, self.second_convs[p - 1], coords2)
            traj = self.joint(z2, anchor)
            stages.append(traj)
            anchor = traj[:, s - 1, :]
            carry = z2
            if trace:
                traces.append(StageTrace(
                    stage=p, first_layer=p - 1, second_layer=p - 1,
                    construct_xy=positions.copy(), snapshots=snaps, updated=snaps2,
                    coarse_end=None if coarse_end is None else coarse_end.copy(),
                    joint_end=anchor.data.reshape(k, n, 2).copy()))

        joint = ad.concat(stages, axis=1).reshape(k, n, cfg.fut_steps, 2)
        coarse = None
        if mids:
            pts = [ad.concat([m.reshape(rows, 1, 2), e.reshape(rows, 1, 2)], axis=1).reshape(rows, 1, 2, 2)
                   for m, e in zip(mids, ends)]
            coarse = ad.concat(pts, axis=1).reshape(k, n, cfg.stages, 2, 2)
        return DecodeOutput(
            joint=joint,
            marginal=marginal.reshape(k, n, cfg.fut_steps, 2),
            coarse=coarse,
            log_probs=self.probabilities(carry, n),
            trace=traces,
        )


def progressive_decode(decoder: ProgressiveDecoder, h, start_xy, lane_feats, lane_xy, candidates,
                       trace: bool = False) -> DecodeOutput:
    return decoder(h, start_xy, lane_feats, lane_xy, candidates, trace=trace)

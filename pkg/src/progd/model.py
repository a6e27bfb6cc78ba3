"""End-to-end forecaster: scene preparation, encoder stack and progressive decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import DecodeOutput, DecoderConfig, JointPrediction, ProgressiveDecoder
from .encoder import AgentInputs, AgentTransformer, HeteroEncoder, StaticHeteroGraph, build_static_graph, track_features
from .nn import Module
from .roadgraph import RoadGCN, RoadGraph, _candidate_indices, build_road_graph
from .scenario import Horizon, Scenario, ScenarioValidationError


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    modes: int = 6
    heads: int = 8
    tau: float = 1.0
    eps: float = 15.0
    aa_radius: float = 15.0
    seed_radius: float = 20.0
    dfs_depth: int = 4
    hetero_layers: int = 3
    agent_layers: int = 0  # 0: 2 layers for <= 1 s of history, else 4
    road_point_layers: int = 2
    road_polyline_layers: int = 2
    temporal_module: bool = True
    dyn_aa_edges: bool = True
    dyn_aa_eps: float | None = None
    dyn_al_edges: bool = True
    multiscale: bool = True
    static_future_graph: bool = False

    def __post_init__(self):
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} must divide d={self.d}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def history_layers(self, horizon: Horizon) -> int:
        if self.agent_layers:
            return self.agent_layers
        return 2 if horizon.t_obs_s <= 1.0 + 1e-9 else 4

    def decoder_config(self, horizon: Horizon) -> DecoderConfig:
        stage = self.tau * horizon.hz
        if abs(stage - round(stage)) > 1e-9 or round(stage) < 1:
            raise ValueError(f"tau={self.tau} s is not a whole number of {horizon.hz} Hz steps")
        cfg = DecoderConfig(
            d=self.d, modes=self.modes, fut_steps=horizon.fut_steps, stage_steps=int(round(stage)),
            heads=self.heads, eps=self.eps, hz=horizon.hz,
            temporal_module=self.temporal_module, dyn_aa_edges=self.dyn_aa_edges, dyn_aa_eps=self.dyn_aa_eps,
            dyn_al_edges=self.dyn_al_edges, multiscale=self.multiscale,
            static_future_graph=self.static_future_graph,
        )
        cfg.stages  # raises when tau does not divide the horizon
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(values) - known)
        if extra:
            raise KeyError(f"unknown model config key {extra[0]!r}")
        return cls(**values)


@dataclass(frozen=True)
class PreparedScene:
    """Everything about one scenario that does not depend on parameters."""

    scenario: Scenario
    inputs: AgentInputs
    road: RoadGraph
    static: StaticHeteroGraph
    interesting: np.ndarray  # rows of ``inputs`` holding interesting agents
    start_xy: np.ndarray  # (n, 2) t=0 positions
    candidates: tuple  # per interesting agent, lane indices
    lane_xy: np.ndarray
    gt: np.ndarray | None

    @property
    def agent_ids(self) -> tuple:
        return self.scenario.interesting_ids


def prepare(scn: Scenario, cfg: ModelConfig) -> PreparedScene:
    horizon = scn.horizon
    tracks = [t for t in scn.tracks if any(-horizon.obs_steps < s.t <= 0 for s in t.states)]
    ids = [t.agent_id for t in tracks]
    missing = [a for a in scn.interesting_ids if a not in ids]
    if missing:
        raise ScenarioValidationError(f"{scn.scenario_id}: interesting agent {missing[0]!r} has no history")
    if not scn.lanes:
        raise ScenarioValidationError(f"{scn.scenario_id}: scenario has no lanes")
    inputs = track_features(tracks, horizon.obs_steps)
    road = build_road_graph(list(scn.lanes))
    dfs = [_candidate_indices(inputs.position[i], road, cfg.seed_radius, cfg.dfs_depth) for i in range(len(tracks))]
    static = build_static_graph(inputs.position, road, dfs, cfg.aa_radius)
    rows = np.array([ids.index(a) for a in scn.interesting_ids], dtype=np.int64)
    start = np.array([[s.x, s.y] for s in (scn.track(a).state_at(0) for a in scn.interesting_ids)])
    return PreparedScene(
        scenario=scn,
        inputs=inputs,
        road=road,
        static=static,
        interesting=rows,
        start_xy=start,
        candidates=tuple(static.candidates[r] for r in rows),
        lane_xy=static.lane_xy,
        gt=scn.ground_truth() if scn.is_labeled() else None,
    )


class ProgD(Module):
    """Agent Transformer + road GCN + heterogeneous encoder + progressive decoder."""

    def __init__(self, cfg: ModelConfig, horizon: Horizon, seed: int = 0):
        self.cfg = cfg
        self.horizon = horizon
        self.decoder_cfg = cfg.decoder_config(horizon)
        rng = np.random.default_rng(seed)
        self.agent_encoder = AgentTransformer(cfg.d, cfg.heads, cfg.history_layers(horizon), rng)
        self.road_encoder = RoadGCN(cfg.d, rng, cfg.road_point_layers, cfg.road_polyline_layers)
        self.scene_encoder = HeteroEncoder(cfg.d, cfg.hetero_layers, rng)
        self.decoder = ProgressiveDecoder(self.decoder_cfg, rng)

    def check_horizon(self, scn: Scenario) -> None:
        for key in ("t_obs_s", "t_fut_s", "hz"):
            want, got = getattr(self.horizon, key), getattr(scn.horizon, key)
            if abs(want - got) > 1e-9:
                raise ValueError(f"horizon.{key} mismatch: model {want}, scenario {scn.scenario_id} {got}")

    def encode(self, prep: PreparedScene) -> tuple[Tensor, Tensor]:
        """Interesting-agent embeddings ``(n, d)`` and lane embeddings ``(L, d)``."""
        motion = self.agent_encoder(prep.inputs)
        lanes = self.road_encoder(prep.road)
        h, lanes = self.scene_encoder(prep.static, motion, lanes)
        return ad.gather_rows(h, prep.interesting), lanes

    def __call__(self, prep: PreparedScene, trace: bool = False) -> DecodeOutput:
        h, lanes = self.encode(prep)
        return self.decoder(h, prep.start_xy, lanes, prep.lane_xy, prep.candidates, trace=trace)

    def predict(self, prep: PreparedScene) -> JointPrediction:
        with ad.no_grad():
            return self(prep).prediction(prep.agent_ids)

    def meta(self) -> dict:
        return {"model": self.cfg.to_dict(), "horizon": asdict(self.horizon)}


def model_from_meta(meta: dict, seed: int = 0) -> ProgD:
    try:
        cfg = ModelConfig.from_dict(meta["model"])
        horizon = Horizon(**meta["horizon"])
    except KeyError as e:
        raise KeyError(f"checkpoint meta lacks key {e.args[0]!r}") from None
    return ProgD(cfg, horizon, seed)


def save_model(model: ProgD, path, extra: dict | None = None) -> None:
    meta = model.meta()
    if extra:
        meta.update(extra)
    ad.save_parameters(model.named_parameters(), path, meta)


def load_model(path) -> tuple[ProgD, dict]:
    arrays, meta = ad.load_parameters(path)
    model = model_from_meta(meta)
    model.load_state_dict(arrays)
    return model, meta

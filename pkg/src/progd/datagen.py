"""Synthetic interactive scenarios and the constant-velocity baseline.

Agents ride lane centerlines by arclength. Straight and curve layouts use
constant speed; crossing agents carry a constant acceleration so that
extrapolating the last velocity is not already optimal; merge agents on the
ramp curve into the main road. Every scenario is rejection-sampled until no
two agents (boxes inflated by ``clearance``) overlap at any step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import pathlib

import numpy as np

from .decoder import JointPrediction
from .metrics import OrientedBox, obb_collision
from .scenario import (AgentState, AgentTrack, Frame, Horizon, LanePolyline, Scenario, normalize,
                       save_jsonl)

LAYOUTS = ("straight", "curve", "crossing", "merge")
POINT_SPACING = 2.0
SEGMENT_LENGTH = 20.0
PATH_RANGE = (-80.0, 100.0)  # arclength span of every lane path
DENSE_STEP = 0.05


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_scenarios: int = 100
    agents_min: int = 2
    agents_max: int = 4
    layouts: tuple = LAYOUTS
    speed_min: float = 4.0
    speed_max: float = 12.0
    noise_sigma: float = 0.0
    accel_min: float = -1.5
    accel_max: float = 1.0
    lane_spacing: float = 3.5
    clearance: float = 1.0
    horizon: Horizon = Horizon()

    def __post_init__(self):
        object.__setattr__(self, "layouts", tuple(self.layouts))
        if not self.layouts or any(l not in LAYOUTS for l in self.layouts):
            raise ValueError(f"layouts must be a non-empty subset of {LAYOUTS}, got {self.layouts}")
        if not 1 <= self.agents_min <= self.agents_max:
            raise ValueError("need 1 <= agents_min <= agents_max")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("need 0 <= speed_min <= speed_max")
        if self.accel_min > self.accel_max:
            raise ValueError("need accel_min <= accel_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_scenarios < 0:
            raise ValueError("n_scenarios must be >= 0")


class LanePath:
    """Arclength-parameterized polyline, extended linearly past both ends."""

    def __init__(self, points: np.ndarray, s_start: float = 0.0):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = s_start + np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def span(self) -> tuple[float, float]:
        return float(self.s[0]), float(self.s[-1])

    def _segment(self, s: float) -> int:
        return int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2))

    def tangent(self, s: float) -> np.ndarray:
        i = self._segment(s)
        d = self.points[i + 1] - self.points[i]
        return d / np.linalg.norm(d)

    def position(self, s: float) -> np.ndarray:
        i = self._segment(s)
        return self.points[i] + (s - self.s[i]) * self.tangent(s)

    def sample(self, s_lo: float, s_hi: float, spacing: float) -> np.ndarray:
        count = int(round((s_hi - s_lo) / spacing))
        return np.array([self.position(s_lo + k * (s_hi - s_lo) / count) for k in range(count + 1)])


def line_path(origin, heading: float, s_range=PATH_RANGE) -> LanePath:
    u = np.array([math.cos(heading), math.sin(heading)])
    o = np.asarray(origin, dtype=np.float64)
    return LanePath(np.array([o + s_range[0] * u, o + s_range[1] * u]), s_range[0])


def arc_path(radius: float, turn: int, offset: float, s_range=PATH_RANGE) -> LanePath:
    """Arc through the origin heading +x, turning left (``turn=1``) or right (-1).

    ``offset`` shifts the lane laterally (positive = left); arclength is
    measured along the reference arc of ``radius``.
    """
    r_lane = radius - turn * offset
    center = np.array([0.0, turn * radius])
    count = int(math.ceil((s_range[1] - s_range[0]) / DENSE_STEP))
    s = np.linspace(s_range[0], s_range[1], count + 1)
    ang = s / radius
    pts = np.stack([center[0] + r_lane * np.sin(ang), center[1] - turn * r_lane * np.cos(ang)], axis=1)
    return LanePath(pts, s_range[0])


def ramp_path(lateral: float, length: float = 60.0) -> LanePath:
    """Quadratic Bezier from ``(-length, -lateral)`` joining the x axis at the origin,
    then continuing along +x."""
    p0, p1, p2 = np.array([-length, -lateral]), np.array([-length / 2, -lateral]), np.zeros(2)
    u = np.linspace(0.0, 1.0, int(length / DENSE_STEP) + 1)[:, None]
    curve = (1 - u) ** 2 * p0 + 2 * (1 - u) * u * p1 + u ** 2 * p2
    lead = np.array([p0 + (PATH_RANGE[0] + length) * np.array([1.0, 0.0])])
    tail = np.array([[PATH_RANGE[1], 0.0]])
    pts = np.concatenate([lead, curve, tail])
    # arclength 0 at the junction
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    junction = float(np.cumsum(seg)[len(curve) - 1])
    return LanePath(pts, -junction)


def segment_lanes(path: LanePath, prefix: str, s_lo: float, s_hi: float) -> list[LanePolyline]:
    """Cut ``[s_lo, s_hi]`` into ~``SEGMENT_LENGTH`` lanes chained by succ/pred."""
    count = max(1, int(round((s_hi - s_lo) / SEGMENT_LENGTH)))
    bounds = np.linspace(s_lo, s_hi, count + 1)
    ids = [f"{prefix}{k}" for k in range(count)]
    lanes = []
    for k in range(count):
        lanes.append(LanePolyline(
            lane_id=ids[k],
            centerline=path.sample(bounds[k], bounds[k + 1], POINT_SPACING),
            successor_ids=(ids[k + 1],) if k + 1 < count else (),
            predecessor_ids=(ids[k - 1],) if k > 0 else (),
        ))
    return lanes


def _link(lanes: list[LanePolyline], src: str, dst: str) -> list[LanePolyline]:
    out = []
    for lane in lanes:
        if lane.lane_id == src:
            lane = LanePolyline(lane.lane_id, lane.centerline, lane.successor_ids + (dst,), lane.predecessor_ids)
        elif lane.lane_id == dst:
            lane = LanePolyline(lane.lane_id, lane.centerline, lane.successor_ids, lane.predecessor_ids + (src,))
        out.append(lane)
    return out


@dataclass
class _Motion:
    path: LanePath
    s0: float
    speed: float
    accel: float
    length: float
    width: float

    def arclength(self, t: float) -> float:
        if self.speed + self.accel * t < 0:
            # never reverse: hold the point where speed reaches zero
            t = -self.speed / self.accel
        return self.s0 + self.speed * t + 0.5 * self.accel * t * t

    def velocity(self, t: float) -> float:
        return max(0.0, self.speed + self.accel * t)

    def state(self, step: int, hz: float) -> AgentState:
        t = step / hz
        s = self.arclength(t)
        p, u = self.path.position(s), self.path.tangent(s)
        v = self.velocity(t)
        return AgentState(step, float(p[0]), float(p[1]), float(v * u[0]), float(v * u[1]),
                          math.atan2(u[1], u[0]), self.length, self.width)


def _layout(rng: np.random.Generator, layout: str, cfg: GenConfig):
    """Lanes plus the paths agents may be placed on."""
    w = cfg.lane_spacing
    lo, hi = PATH_RANGE
    if layout == "straight":
        count = int(rng.integers(2, 4))
        paths = [line_path((0.0, k * w), 0.0) for k in range(count)]
        lanes = [l for k, p in enumerate(paths) for l in segment_lanes(p, f"s{k}_", lo, hi)]
        return lanes, paths
    if layout == "curve":
        radius = float(rng.uniform(30.0, 80.0))
        turn = int(rng.choice([-1, 1]))
        # keep the arc well under a half turn
        span = (max(lo, -radius * 1.5), min(hi, radius * 2.5))
        paths = [arc_path(radius, turn, k * w, span) for k in range(2)]
        lanes = [l for k, p in enumerate(paths) for l in segment_lanes(p, f"c{k}_", *p.span)]
        return lanes, paths
    if layout == "crossing":
        a = line_path((0.0, 0.0), float(rng.choice([0.0, math.pi])))
        b = line_path((0.0, 0.0), float(rng.choice([0.5 * math.pi, -0.5 * math.pi])))
        lanes = segment_lanes(a, "a", lo, hi) + segment_lanes(b, "b", lo, hi)
        return lanes, [a, b]
    if layout == "merge":
        main = line_path((0.0, 0.0), 0.0)
        ramp = ramp_path(lateral=float(rng.uniform(6.0, 12.0)))
        ramp_lo = ramp.span[0]
        lanes = segment_lanes(main, "m", lo, 0.0) + segment_lanes(main, "d", 0.0, hi)
        lanes += segment_lanes(ramp, "r", ramp_lo, 0.0)
        ramp_last = [l.lane_id for l in lanes if l.lane_id.startswith("r")][-1]
        lanes = _link(lanes, ramp_last, "d0")
        upstream_last = [l.lane_id for l in lanes if l.lane_id.startswith("m")][-1]
        lanes = _link(lanes, upstream_last, "d0")
        return lanes, [main, ramp]
    raise ValueError(f"unknown layout {layout!r}")


def _boxes(m: _Motion, steps, hz: float, clearance: float) -> list[OrientedBox]:
    out = []
    for k in steps:
        st = m.state(k, hz)
        out.append(OrientedBox((st.x, st.y), st.yaw, st.length + clearance, st.width + clearance))
    return out


def _sample_motion(rng, layout: str, paths, slot: int, cfg: GenConfig) -> _Motion:
    path = paths[slot % len(paths)] if layout == "crossing" else paths[int(rng.integers(len(paths)))]
    speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    accel = float(rng.uniform(cfg.accel_min, cfg.accel_max)) if layout == "crossing" else 0.0
    if layout == "crossing":
        # approach the junction so paths actually interact within the horizon
        s0 = float(rng.uniform(-max(speed * cfg.horizon.t_fut_s, 25.0), -2.0))
    else:
        s0 = float(rng.uniform(-30.0, 20.0))
    return _Motion(path, s0, speed, accel, float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.7, 2.0)))


def _place_agents(rng, layout: str, paths, n: int, steps, cfg: GenConfig, max_tries: int):
    """Sample agents one at a time; ``None`` when some agent cannot be placed."""
    motions: list[_Motion] = []
    boxes: list[list[OrientedBox]] = []
    for slot in range(n):
        for _ in range(max_tries):
            m = _sample_motion(rng, layout, paths, slot, cfg)
            mb = _boxes(m, steps, cfg.horizon.hz, cfg.clearance)
            if not any(any(obb_collision(a, b) for a, b in zip(mb, other)) for other in boxes):
                motions.append(m)
                boxes.append(mb)
                break
        else:
            return None
    return motions


def generate_one(rng: np.random.Generator, layout: str, cfg: GenConfig, scenario_id: str,
                 max_tries: int = 50, max_restarts: int = 100) -> Scenario:
    hz = cfg.horizon.hz
    steps = range(-cfg.horizon.obs_steps + 1, cfg.horizon.fut_steps + 1)
    lanes, paths = _layout(rng, layout, cfg)
    n = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
    for _ in range(max_restarts):
        motions = _place_agents(rng, layout, paths, n, steps, cfg, max_tries)
        if motions is not None:
            break
    else:
        raise RuntimeError(f"{scenario_id}: could not place {n} agents without collisions")

    tracks = []
    for i, m in enumerate(motions):
        states = []
        for k in steps:
            st = m.state(k, hz)
            if k <= 0 and cfg.noise_sigma > 0:
                dx, dy = rng.normal(0.0, cfg.noise_sigma, size=2)
                st = AgentState(st.t, st.x + dx, st.y + dy, st.vx, st.vy, st.yaw, st.length, st.width)
            states.append(st)
        tracks.append(AgentTrack(i, "car", tuple(states)))

    # random global pose, then the scenario-centric frame
    theta = float(rng.uniform(-math.pi, math.pi))
    shift = rng.uniform(-50.0, 50.0, size=2)
    raw = _place(Scenario(scenario_id, tuple(tracks), tuple(lanes), tuple(range(n)), 0,
                          horizon=cfg.horizon), theta, shift)
    return normalize(raw, "centroid_nearest")


def _place(scn: Scenario, theta: float, shift: np.ndarray) -> Scenario:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])

    def move(st: AgentState) -> AgentState:
        p = rot @ (st.x, st.y) + shift
        v = rot @ (st.vx, st.vy)
        yaw = math.atan2(math.sin(st.yaw + theta), math.cos(st.yaw + theta))
        return AgentState(st.t, float(p[0]), float(p[1]), float(v[0]), float(v[1]), yaw, st.length, st.width)

    tracks = tuple(AgentTrack(t.agent_id, t.agent_type, tuple(move(x) for x in t.states)) for t in scn.tracks)
    lanes = tuple(LanePolyline(l.lane_id, l.centerline @ rot.T + shift, l.successor_ids, l.predecessor_ids)
                  for l in scn.lanes)
    return Scenario(scn.scenario_id, tracks, lanes, scn.interesting_ids, scn.ego_id, Frame(), scn.horizon)


def generate(cfg: GenConfig) -> list[Scenario]:
    """``cfg.n_scenarios`` scenarios; scenario ``i`` depends only on ``(seed, i)``."""
    out = []
    for i in range(cfg.n_scenarios):
        rng = np.random.default_rng([cfg.seed, i])
        layout = cfg.layouts[int(rng.integers(len(cfg.layouts)))]
        out.append(generate_one(rng, layout, cfg, f"{layout}-{cfg.seed}-{i:05d}"))
    return out


def constant_velocity_baseline(scn: Scenario, modes: int = 6) -> JointPrediction:
    """Linear extrapolation of the t=0 velocity, copied into every modality."""
    steps, hz = scn.horizon.fut_steps, scn.horizon.hz
    dt = np.arange(1, steps + 1) / hz
    rows = []
    for track in scn.interesting_tracks():
        s = track.state_at(0)
        rows.append(np.stack([s.x + s.vx * dt, s.y + s.vy * dt], axis=1))
    path = np.stack(rows)  # (n, T, 2)
    return JointPrediction(
        agent_ids=tuple(scn.interesting_ids),
        positions=np.repeat(path[:, :, None, :], modes, axis=2),
        probs=np.full(modes, 1.0 / modes),
    )


def split_counts(n: int) -> tuple[int, int, int]:
    """8:1:1 train/val/test sizes."""
    train = int(round(0.8 * n))
    val = int(round(0.1 * n))
    return train, val, n - train - val


def write_splits(scenarios: list[Scenario], out_dir) -> dict[str, pathlib.Path]:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, b, _ = split_counts(len(scenarios))
    parts = {"train": scenarios[:a], "val": scenarios[a:a + b], "test": scenarios[a + b:]}
    paths = {}
    for name, items in parts.items():
        paths[name] = out / f"{name}.jsonl"
        save_jsonl(items, paths[name])
    return paths

"""Scenario data model, scenario-centric normalization and JSONL persistence.

One scenario per JSON line::

    {"scenario_id": str,
     "horizon": {"t_obs_s": float, "t_fut_s": float, "hz": float},
     "frame": {"origin": [x, y], "rot": float},
     "ego_id": id, "interesting_ids": [id, ...],
     "tracks": [{"agent_id": id, "type": str,
                 "states": [[t, x, y, vx, vy, yaw, length, width], ...]}],
     "lanes": [{"lane_id": id, "centerline": [[x, y], ...],
                "succ": [id, ...], "pred": [id, ...]}]}

``t`` is an integer step index on the ``hz`` grid, ``t <= 0`` observed and
``t > 0`` ground-truth future. ``frame`` maps scenario coordinates back to
the source frame: ``global = R(rot) @ local + origin``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Union

import numpy as np

AgentId = Union[int, str]
AGENT_TYPES = ("car", "pedestrian", "bicycle", "other")


class ScenarioValidationError(ValueError):
    """A scenario violates a data-model invariant."""


class ScenarioFormatError(ValueError):
    """A JSONL record could not be decoded."""

    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field {field_name!r}: {message}")
        self.line = line
        self.field = field_name


def wrap_angle(a: float) -> float:
    """Map an angle into ``(-pi, pi]``."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class AgentState:
    t: int
    x: float
    y: float
    vx: float
    vy: float
    yaw: float
    length: float
    width: float

    def as_row(self) -> list:
        return [self.t, self.x, self.y, self.vx, self.vy, self.yaw, self.length, self.width]


@dataclass(frozen=True)
class AgentTrack:
    agent_id: AgentId
    agent_type: str
    states: tuple[AgentState, ...]

    def __post_init__(self):
        if self.agent_type not in AGENT_TYPES:
            raise ScenarioValidationError(f"agent {self.agent_id}: unknown type {self.agent_type!r}")
        steps = [s.t for s in self.states]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ScenarioValidationError(f"agent {self.agent_id}: timesteps not strictly increasing")
        for s in self.states:
            if not (s.length > 0 and s.width > 0):
                raise ScenarioValidationError(f"agent {self.agent_id}: non-positive extent at t={s.t}")

    @cached_property
    def array(self) -> np.ndarray:
        """``(N, 8)`` rows ``[t, x, y, vx, vy, yaw, length, width]``."""
        if not self.states:
            return np.zeros((0, 8))
        return np.array([s.as_row() for s in self.states], dtype=np.float64)

    @cached_property
    def _by_t(self) -> dict[int, AgentState]:
        return {s.t: s for s in self.states}

    def state_at(self, t: int) -> AgentState | None:
        return self._by_t.get(t)

    def observed(self) -> tuple[AgentState, ...]:
        return tuple(s for s in self.states if s.t <= 0)

    def future(self) -> tuple[AgentState, ...]:
        return tuple(s for s in self.states if s.t > 0)

    def observed_mask(self, obs_steps: int) -> np.ndarray:
        """Boolean mask over the observation grid ``t = -obs_steps+1 .. 0``."""
        grid = range(-obs_steps + 1, 1)
        return np.array([t in self._by_t for t in grid], dtype=bool)


@dataclass(frozen=True)
class LanePolyline:
    lane_id: AgentId
    centerline: np.ndarray
    successor_ids: tuple = ()
    predecessor_ids: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ScenarioValidationError(f"lane {self.lane_id}: needs >= 2 centerline points")
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "successor_ids", tuple(self.successor_ids))
        object.__setattr__(self, "predecessor_ids", tuple(self.predecessor_ids))

    @property
    def center(self) -> np.ndarray:
        return self.centerline.mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, LanePolyline):
            return NotImplemented
        return (self.lane_id == other.lane_id
                and np.array_equal(self.centerline, other.centerline)
                and self.successor_ids == other.successor_ids
                and self.predecessor_ids == other.predecessor_ids)

    __hash__ = None


@dataclass(frozen=True)
class Frame:
    origin: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0


@dataclass(frozen=True)
class Horizon:
    t_obs_s: float = 1.0
    t_fut_s: float = 3.0
    hz: float = 10.0

    @property
    def obs_steps(self) -> int:
        return int(round(self.t_obs_s * self.hz))

    @property
    def fut_steps(self) -> int:
        return int(round(self.t_fut_s * self.hz))


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    tracks: tuple[AgentTrack, ...]
    lanes: tuple[LanePolyline, ...]
    interesting_ids: tuple
    ego_id: AgentId
    frame: Frame = field(default_factory=Frame)
    horizon: Horizon = field(default_factory=Horizon)

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "interesting_ids", tuple(self.interesting_ids))
        self.validate()

    def validate(self) -> None:
        ids = [t.agent_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ScenarioValidationError(f"{self.scenario_id}: duplicate agent ids")
        if not self.interesting_ids:
            raise ScenarioValidationError(f"{self.scenario_id}: interesting_ids is empty")
        if self.ego_id not in ids:
            raise ScenarioValidationError(f"{self.scenario_id}: ego {self.ego_id!r} has no track")
        for aid in self.interesting_ids:
            if aid not in ids:
                raise ScenarioValidationError(f"{self.scenario_id}: interesting agent {aid!r} has no track")
            if self.track(aid).state_at(0) is None:
                raise ScenarioValidationError(f"{self.scenario_id}: interesting agent {aid!r} lacks t=0 state")
        lane_ids = {lane.lane_id for lane in self.lanes}
        if len(lane_ids) != len(self.lanes):
            raise ScenarioValidationError(f"{self.scenario_id}: duplicate lane ids")
        for lane in self.lanes:
            for ref in lane.successor_ids + lane.predecessor_ids:
                if ref not in lane_ids:
                    raise ScenarioValidationError(
                        f"{self.scenario_id}: lane {lane.lane_id!r} references unknown lane {ref!r}")

    @cached_property
    def _track_index(self) -> dict:
        return {t.agent_id: t for t in self.tracks}

    def track(self, agent_id) -> AgentTrack:
        return self._track_index[agent_id]

    def interesting_tracks(self) -> list[AgentTrack]:
        return [self.track(a) for a in self.interesting_ids]

    def is_labeled(self) -> bool:
        """True when every interesting agent has the full ground-truth future."""
        want = set(range(1, self.horizon.fut_steps + 1))
        return all(want <= {s.t for s in t.future()} for t in self.interesting_tracks())

    def ground_truth(self) -> np.ndarray:
        """``(n, T_f, 2)`` future positions of interesting agents."""
        steps = self.horizon.fut_steps
        out = np.empty((len(self.interesting_ids), steps, 2))
        for i, track in enumerate(self.interesting_tracks()):
            for t in range(1, steps + 1):
                s = track.state_at(t)
                if s is None:
                    raise ScenarioValidationError(
                        f"{self.scenario_id}: agent {track.agent_id!r} missing ground truth at t={t}")
                out[i, t - 1] = (s.x, s.y)
        return out


# ---------------------------------------------------------------------------
# coordinate frames


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _transform(scn: Scenario, origin: np.ndarray, theta: float, new_frame: Frame) -> Scenario:
    """Apply ``p -> R(-theta) (p - origin)`` to every coordinate."""
    rot = _rotation(-theta)

    def move_state(s: AgentState) -> AgentState:
        p = rot @ (np.array([s.x, s.y]) - origin)
        v = rot @ np.array([s.vx, s.vy])
        return replace(s, x=float(p[0]), y=float(p[1]), vx=float(v[0]), vy=float(v[1]),
                       yaw=wrap_angle(s.yaw - theta))

    tracks = tuple(
        AgentTrack(t.agent_id, t.agent_type, tuple(move_state(s) for s in t.states))
        for t in scn.tracks
    )
    lanes = tuple(
        LanePolyline(l.lane_id, (l.centerline - origin) @ rot.T, l.successor_ids, l.predecessor_ids)
        for l in scn.lanes
    )
    return replace(scn, tracks=tracks, lanes=lanes, frame=new_frame)


def anchor_agent(scn: Scenario, convention: str) -> AgentId:
    """Pick the agent defining the scenario frame.

    ``ego_centric`` uses the ego; ``centroid_nearest`` the agent closest to
    the centroid of all t=0 positions (ties: first in track order).
    """
    if convention == "ego_centric":
        return scn.ego_id
    if convention != "centroid_nearest":
        raise ValueError(f"unknown normalization convention {convention!r}")
    present = [(t.agent_id, t.state_at(0)) for t in scn.tracks if t.state_at(0) is not None]
    if not present:
        raise ScenarioValidationError(f"{scn.scenario_id}: no agent has a t=0 state")
    pts = np.array([[s.x, s.y] for _, s in present])
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1)
    return present[int(np.argmin(dist))][0]


def normalize(raw: Scenario, convention: str = "centroid_nearest") -> Scenario:
    """Re-express ``raw`` with the anchor agent at the origin heading along +x."""
    anchor_id = anchor_agent(raw, convention)
    state = raw.track(anchor_id).state_at(0)
    if state is None:
        raise ScenarioValidationError(f"{raw.scenario_id}: anchor {anchor_id!r} lacks t=0 state")
    a = np.array([state.x, state.y])
    theta = state.yaw
    # compose with the existing frame so repeated normalization stays invertible
    old_o = np.asarray(raw.frame.origin, dtype=np.float64)
    origin = _rotation(raw.frame.rotation) @ a + old_o
    frame = Frame((float(origin[0]), float(origin[1])), wrap_angle(raw.frame.rotation + theta))
    return _transform(raw, a, theta, frame)


def denormalize(scn: Scenario) -> Scenario:
    """Map a scenario back to its source frame (identity frame afterwards)."""
    theta = scn.frame.rotation
    origin = np.asarray(scn.frame.origin, dtype=np.float64)
    # R(theta) p + o == R(-(-theta)) (p - o') with o' = -R(-theta) o
    inv_origin = -(_rotation(-theta) @ origin)
    return _transform(scn, inv_origin, -theta, Frame())


def to_global(points: np.ndarray, frame: Frame) -> np.ndarray:
    """Map ``(..., 2)`` local points to the source frame."""
    rot = _rotation(frame.rotation)
    return np.asarray(points) @ rot.T + np.asarray(frame.origin)


# ---------------------------------------------------------------------------
# JSONL


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "scenario_id": scn.scenario_id,
        "horizon": {"t_obs_s": scn.horizon.t_obs_s, "t_fut_s": scn.horizon.t_fut_s, "hz": scn.horizon.hz},
        "frame": {"origin": list(scn.frame.origin), "rot": scn.frame.rotation},
        "ego_id": scn.ego_id,
        "interesting_ids": list(scn.interesting_ids),
        "tracks": [
            {"agent_id": t.agent_id, "type": t.agent_type, "states": [s.as_row() for s in t.states]}
            for t in scn.tracks
        ],
        "lanes": [
            {"lane_id": l.lane_id, "centerline": l.centerline.tolist(),
             "succ": list(l.successor_ids), "pred": list(l.predecessor_ids)}
            for l in scn.lanes
        ],
    }


def _need(obj: dict, key: str, line: int, prefix: str = ""):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioFormatError(line, prefix + key, "missing")
    return obj[key]


def scenario_from_dict(rec: dict, line: int = 0) -> Scenario:
    sid = _need(rec, "scenario_id", line)
    hz = _need(rec, "horizon", line)
    fr = _need(rec, "frame", line)
    try:
        horizon = Horizon(float(_need(hz, "t_obs_s", line, "horizon.")),
                          float(_need(hz, "t_fut_s", line, "horizon.")),
                          float(_need(hz, "hz", line, "horizon.")))
        origin = _need(fr, "origin", line, "frame.")
        frame = Frame((float(origin[0]), float(origin[1])), float(_need(fr, "rot", line, "frame.")))
    except (TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, ScenarioFormatError):
            raise
        raise ScenarioFormatError(line, "horizon/frame", str(exc)) from None
    tracks = []
    for k, tr in enumerate(_need(rec, "tracks", line)):
        name = f"tracks[{k}]"
        aid = _need(tr, "agent_id", line, name + ".")
        try:
            states = tuple(
                AgentState(int(r[0]), *(float(v) for v in r[1:8]))
                for r in _need(tr, "states", line, name + ".")
            )
            if any(len(r) != 8 for r in tr["states"]):
                raise ValueError("state rows need 8 values")
            tracks.append(AgentTrack(aid, _need(tr, "type", line, name + "."), states))
        except (TypeError, ValueError, ScenarioValidationError) as exc:
            if isinstance(exc, ScenarioFormatError):
                raise
            raise ScenarioFormatError(line, name + ".states", str(exc)) from None
    lanes = []
    for k, ln in enumerate(_need(rec, "lanes", line)):
        name = f"lanes[{k}]"
        try:
            lanes.append(LanePolyline(
                _need(ln, "lane_id", line, name + "."),
                np.asarray(_need(ln, "centerline", line, name + "."), dtype=np.float64),
                tuple(_need(ln, "succ", line, name + ".")),
                tuple(_need(ln, "pred", line, name + "."))))
        except (TypeError, ValueError, ScenarioValidationError) as exc:
            if isinstance(exc, ScenarioFormatError):
                raise
            raise ScenarioFormatError(line, name + ".centerline", str(exc)) from None
    interesting = _need(rec, "interesting_ids", line)
    ego = _need(rec, "ego_id", line)
    try:
        return Scenario(sid, tuple(tracks), tuple(lanes), tuple(interesting), ego, frame, horizon)
    except ScenarioValidationError as exc:
        raise ScenarioFormatError(line, "scenario", str(exc)) from None


def save_jsonl(scenarios: Iterable[Scenario], path) -> None:
    """Write one scenario per line; the file appears only once complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        for scn in scenarios:
            fh.write(json.dumps(scenario_to_dict(scn), separators=(",", ":")) + "\n")
    tmp.replace(path)


def load_jsonl(path) -> list[Scenario]:
    """Read all scenarios; any malformed line raises :class:`ScenarioFormatError`."""
    out = []
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        # a writer always terminates records; a missing newline means truncation
        last = text.count("\n") + 1
        try:
            json.loads(text.rsplit("\n", 1)[-1])
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(last, "<record>", f"truncated JSON: {exc.msg}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(lineno, "<record>", f"invalid JSON: {exc.msg}") from None
        out.append(scenario_from_dict(rec, lineno))
    return out

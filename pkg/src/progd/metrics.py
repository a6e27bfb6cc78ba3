"""Joint-prediction metrics: displacement, miss and collision rates.

Conventions:
    * Box headings along a trajectory come from consecutive-position
      differences; the first step reuses the t=0 yaw and a step with no
      motion keeps the previous heading.
    * A miss decomposes the final-step error into the ground-truth heading
      frame (lateral / longitudinal) and compares each against its threshold.
    * Ties in every argmin resolve to the lowest modality index.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import JointPrediction
from .scenario import Scenario

STILL = 1e-6


@dataclass(frozen=True)
class MetricConfig:
    lateral_threshold: float = 1.0
    longitudinal_threshold: float = 2.0
    actor_miss_threshold: float = 2.0


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box extents must be positive")

    def axes(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        ax = self.axes()
        hl, hw = self.length / 2, self.width / 2
        signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]])
        return np.asarray(self.center) + (signs[:, :1] * hl) * ax[0] + (signs[:, 1:] * hw) * ax[1]


def obb_collision(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test over the four box axes; touching is not overlap."""
    delta = np.asarray(b.center, float) - np.asarray(a.center, float)
    ax_a, ax_b = a.axes(), b.axes()
    for u in (*ax_a, *ax_b):
        ra = a.length / 2 * abs(u @ ax_a[0]) + a.width / 2 * abs(u @ ax_a[1])
        rb = b.length / 2 * abs(u @ ax_b[0]) + b.width / 2 * abs(u @ ax_b[1])
        if abs(u @ delta) >= ra + rb:
            return False
    return True


def path_headings(path: np.ndarray, yaw0: float) -> np.ndarray:
    """Heading per step of a ``(T, 2)`` path (see module conventions)."""
    steps = path.shape[0]
    out = np.empty(steps)
    out[0] = yaw0
    for t in range(1, steps):
        d = path[t] - path[t - 1]
        out[t] = math.atan2(d[1], d[0]) if math.hypot(d[0], d[1]) > STILL else out[t - 1]
    return out


def final_heading(gt_path: np.ndarray, yaw0: float) -> float:
    return float(path_headings(gt_path, yaw0)[-1])


def jade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean L2 error over agents and steps for one modality ``(n, T, 2)``."""
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def jfde(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.linalg.norm(pred[:, -1] - gt[:, -1], axis=-1).mean())


def miss_joint(pred: np.ndarray, gt: np.ndarray, yaw0: np.ndarray, cfg: MetricConfig = MetricConfig()) -> bool:
    """True when any agent's final error exceeds a lateral or longitudinal threshold."""
    for i in range(gt.shape[0]):
        h = final_heading(gt[i], float(yaw0[i]))
        err = pred[i, -1] - gt[i, -1]
        lon = err[0] * math.cos(h) + err[1] * math.sin(h)
        lat = -err[0] * math.sin(h) + err[1] * math.cos(h)
        if abs(lat) > cfg.lateral_threshold or abs(lon) > cfg.longitudinal_threshold:
            return True
    return False


def _boxes(path: np.ndarray, yaw0: float, extent) -> list[OrientedBox]:
    heads = path_headings(path, yaw0)
    return [OrientedBox((float(p[0]), float(p[1])), float(h), float(extent[0]), float(extent[1]))
            for p, h in zip(path, heads)]


def _paths_collide(boxes_a: list[OrientedBox], boxes_b: list[OrientedBox]) -> bool:
    return any(obb_collision(a, b) for a, b in zip(boxes_a, boxes_b))


def actor_collisions(pred: np.ndarray, yaw0: np.ndarray, extents: np.ndarray) -> np.ndarray:
    """Per agent: collides with another predicted agent at some common step."""
    n = pred.shape[0]
    boxes = [_boxes(pred[i], float(yaw0[i]), extents[i]) for i in range(n)]
    hit = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if _paths_collide(boxes[i], boxes[j]):
                hit[i] = hit[j] = True
    return hit


def cross_collision(pred: np.ndarray, yaw0: np.ndarray, extents: np.ndarray) -> bool:
    return bool(actor_collisions(pred, yaw0, extents).any())


@dataclass(frozen=True)
class EvalCase:
    """Ground truth and geometry that metrics need for one scenario."""

    scenario_id: str
    agent_ids: tuple
    gt: np.ndarray  # (n, T, 2)
    yaw0: np.ndarray  # (n,)
    extents: np.ndarray  # (n, 2) length, width
    ego_gt: np.ndarray  # (T, 2)
    ego_yaw0: float
    ego_extent: np.ndarray
    ego_index: int | None  # position of ego among interesting agents

    @classmethod
    def from_scenario(cls, scn: Scenario) -> "EvalCase":
        tracks = scn.interesting_tracks()
        yaw0 = np.array([t.state_at(0).yaw for t in tracks])
        extents = np.array([[t.state_at(0).length, t.state_at(0).width] for t in tracks])
        ego = scn.track(scn.ego_id)
        steps = scn.horizon.fut_steps
        ego_ref = ego.state_at(0) or ego.observed()[-1]
        rows = [ego.state_at(t) for t in range(1, steps + 1)]
        if any(r is None for r in rows):
            raise ValueError(f"{scn.scenario_id}: ego lacks a full ground-truth future")
        ego_index = list(scn.interesting_ids).index(scn.ego_id) if scn.ego_id in scn.interesting_ids else None
        return cls(
            scenario_id=scn.scenario_id,
            agent_ids=tuple(scn.interesting_ids),
            gt=scn.ground_truth(),
            yaw0=yaw0,
            extents=extents,
            ego_gt=np.array([[r.x, r.y] for r in rows]),
            ego_yaw0=ego_ref.yaw,
            ego_extent=np.array([ego_ref.length, ego_ref.width]),
            ego_index=ego_index,
        )


def ego_collision(pred: np.ndarray, case: EvalCase) -> bool:
    """Ego ground truth against every other interesting agent's prediction."""
    ego_boxes = _boxes(case.ego_gt, case.ego_yaw0, case.ego_extent)
    for i in range(pred.shape[0]):
        if i == case.ego_index:
            continue
        if _paths_collide(ego_boxes, _boxes(pred[i], float(case.yaw0[i]), case.extents[i])):
            return True
    return False


@dataclass
class MetricReport:
    minJADE: float
    minJFDE: float
    minJMR: float
    crossCR: float
    egoCR: float
    consis_minJMR: float
    actorMR: float
    actorCR: float
    b_minJFDE: float
    top1_JADE: float = float("nan")
    top1_JFDE: float = float("nan")
    scenarios: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        out = asdict(self)
        out.pop("scenarios")
        return out

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate(), "scenarios": self.scenarios}


def scenario_record(case: EvalCase, pred: JointPrediction, cfg: MetricConfig = MetricConfig()) -> dict:
    """Every per-scenario quantity the aggregates are reduced from."""
    modes = pred.by_mode()
    k_count = modes.shape[0]
    jades = [jade(modes[k], case.gt) for k in range(k_count)]
    jfdes = [jfde(modes[k], case.gt) for k in range(k_count)]
    misses = [miss_joint(modes[k], case.gt, case.yaw0, cfg) for k in range(k_count)]
    actor_hits = [actor_collisions(modes[k], case.yaw0, case.extents) for k in range(k_count)]
    cross = [bool(h.any()) for h in actor_hits]
    ego = [ego_collision(modes[k], case) for k in range(k_count)]
    best = int(np.argmin(jfdes))
    top = int(np.argmax(pred.probs))
    final_err = np.linalg.norm(modes[best][:, -1] - case.gt[:, -1], axis=-1)
    return {
        "scenario_id": case.scenario_id,
        "jade": jades,
        "jfde": jfdes,
        "miss": misses,
        "cross": cross,
        "ego": ego,
        "best_k": best,
        "top_k": top,
        "actors": int(case.gt.shape[0]),
        "actor_misses": int((final_err > cfg.actor_miss_threshold).sum()),
        "actor_collisions": int(actor_hits[best].sum()),
        "p_best": float(pred.probs[best]),
    }


def reduce_records(records: list[dict]) -> MetricReport:
    if not records:
        raise ValueError("no scenarios to evaluate")
    actors = sum(r["actors"] for r in records)
    min_jfde = [min(r["jfde"]) for r in records]

    def mean(values):
        return float(sum(values) / len(values))

    return MetricReport(
        minJADE=mean([min(r["jade"]) for r in records]),
        minJFDE=mean(min_jfde),
        minJMR=mean([float(all(r["miss"])) for r in records]),
        crossCR=mean([mean([float(c) for c in r["cross"]]) for r in records]),
        egoCR=mean([mean([float(c) for c in r["ego"]]) for r in records]),
        consis_minJMR=mean([float(all(m or c for m, c in zip(r["miss"], r["cross"]))) for r in records]),
        actorMR=sum(r["actor_misses"] for r in records) / actors,
        actorCR=sum(r["actor_collisions"] for r in records) / actors,
        b_minJFDE=mean([f + (1.0 - r["p_best"]) ** 2 for f, r in zip(min_jfde, records)]),
        top1_JADE=mean([r["jade"][r["top_k"]] for r in records]),
        top1_JFDE=mean([r["jfde"][r["top_k"]] for r in records]),
        scenarios=records,
    )


def evaluate_predictions(cases: list[EvalCase], preds: list[JointPrediction],
                         cfg: MetricConfig = MetricConfig()) -> MetricReport:
    if len(cases) != len(preds):
        raise ValueError(f"{len(cases)} cases but {len(preds)} predictions")
    return reduce_records([scenario_record(c, p, cfg) for c, p in zip(cases, preds)])


# single-metric entry points over a dataset


def min_jade(cases, preds) -> float:
    return evaluate_predictions(cases, preds).minJADE


def min_jfde(cases, preds) -> float:
    return evaluate_predictions(cases, preds).minJFDE


def min_jmr(cases, preds, cfg: MetricConfig = MetricConfig()) -> float:
    return evaluate_predictions(cases, preds, cfg).minJMR


def cross_cr(cases, preds) -> float:
    return evaluate_predictions(cases, preds).crossCR


def ego_cr(cases, preds) -> float:
    return evaluate_predictions(cases, preds).egoCR


def consis_min_jmr(cases, preds, cfg: MetricConfig = MetricConfig()) -> float:
    return evaluate_predictions(cases, preds, cfg).consis_minJMR


def actor_mr(cases, preds, cfg: MetricConfig = MetricConfig()) -> float:
    return evaluate_predictions(cases, preds, cfg).actorMR


def actor_cr(cases, preds) -> float:
    return evaluate_predictions(cases, preds).actorCR


def b_min_jfde(cases, preds) -> float:
    return evaluate_predictions(cases, preds).b_minJFDE

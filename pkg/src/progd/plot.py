"""SVG rendering of a scenario with optional predictions."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

from .decoder import JointPrediction
from .scenario import Scenario

LANE = "#9a9a9a"
HISTORY = "orange"
TRUTH = "navy"
PREDICTION = "red"


def _path_d(points: np.ndarray) -> str:
    head, *rest = points
    return f"M {head[0]:.3f} {head[1]:.3f} " + " ".join(f"L {x:.3f} {y:.3f}" for x, y in rest)


def render_svg(scn: Scenario, pred: JointPrediction | None = None, size: int = 800,
               margin: float = 10.0) -> str:
    tracks = scn.tracks
    pts = [np.array([[s.x, s.y] for s in t.states]) for t in tracks]
    focus = np.concatenate(pts)
    if pred is not None:
        focus = np.concatenate([focus, pred.positions.reshape(-1, 2)])
    lo, hi = focus.min(axis=0) - margin, focus.max(axis=0) + margin
    scale = size / max(hi[0] - lo[0], hi[1] - lo[1], 1e-6)

    def screen(xy) -> np.ndarray:
        xy = np.atleast_2d(xy)
        # y axis points up in the scene, down on screen
        return np.stack([(xy[:, 0] - lo[0]) * scale, (hi[1] - xy[:, 1]) * scale], axis=1)

    width = (hi[0] - lo[0]) * scale
    height = (hi[1] - lo[1]) * scale
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=f"{width:.0f}",
                     height=f"{height:.0f}", viewBox=f"0 0 {width:.3f} {height:.3f}")
    ET.SubElement(svg, "title").text = scn.scenario_id
    ET.SubElement(svg, "rect", width="100%", height="100%", fill="white")

    lanes = ET.SubElement(svg, "g", id="lanes")
    for lane in scn.lanes:
        ET.SubElement(lanes, "path", d=_path_d(screen(lane.centerline)), stroke=LANE,
                      fill="none", **{"stroke-width": "1.5"})

    agents = ET.SubElement(svg, "g", id="agents")
    for track in tracks:
        hist = np.array([[s.x, s.y] for s in track.observed()])
        fut = np.array([[s.x, s.y] for s in track.states if s.t >= 0])
        if len(hist) > 1:
            ET.SubElement(agents, "path", d=_path_d(screen(hist)), stroke=HISTORY, fill="none",
                          **{"stroke-width": "2", "class": "history"})
        if len(fut) > 1:
            ET.SubElement(agents, "path", d=_path_d(screen(fut)), stroke=TRUTH, fill="none",
                          **{"stroke-width": "2", "class": "truth"})
        now = track.state_at(0)
        if now is not None:
            c, s = np.cos(now.yaw), np.sin(now.yaw)
            half = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * (now.length / 2, now.width / 2)
            corners = half @ np.array([[c, s], [-s, c]]) + (now.x, now.y)
            ET.SubElement(agents, "polygon", points=" ".join(f"{x:.3f},{y:.3f}" for x, y in screen(corners)),
                          fill="none", stroke="black", **{"stroke-width": "1"})

    if pred is not None:
        group = ET.SubElement(svg, "g", id="predictions")
        starts = {t.agent_id: t.state_at(0) for t in tracks}
        arm = 4.0
        for i, aid in enumerate(pred.agent_ids):
            s0 = starts[aid]
            for k in range(pred.modes):
                path = np.vstack([[s0.x, s0.y], pred.positions[i, :, k]])
                sp = screen(path)
                ET.SubElement(group, "path", d=_path_d(sp), stroke=PREDICTION, fill="none",
                              **{"stroke-width": "1.5", "stroke-dasharray": "6 4", "class": "prediction"})
                ex, ey = sp[-1]
                # endpoint marker: an x per modality
                ET.SubElement(group, "path", d=f"M {ex - arm:.3f} {ey - arm:.3f} L {ex + arm:.3f} {ey + arm:.3f} "
                                               f"M {ex - arm:.3f} {ey + arm:.3f} L {ex + arm:.3f} {ey - arm:.3f}",
                              stroke=PREDICTION, **{"stroke-width": "1.5", "class": "endpoint"})
    return ET.tostring(svg, encoding="unicode")

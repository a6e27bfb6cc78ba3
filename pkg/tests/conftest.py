import math

import numpy as np
import pytest

from progd.datagen import GenConfig, generate
from progd.scenario import AgentState, AgentTrack, Horizon, LanePolyline, Scenario


def straight_track(agent_id, x0, y0, vx, vy, obs=10, fut=30, agent_type="car", length=4.5, width=2.0):
    """Constant-velocity track sampled at 10 Hz from ``t=-obs+1`` to ``t=fut``."""
    yaw = math.atan2(vy, vx) if (vx or vy) else 0.0
    states = tuple(
        AgentState(t, x0 + vx * t / 10, y0 + vy * t / 10, vx, vy, yaw, length, width)
        for t in range(-obs + 1, fut + 1)
    )
    return AgentTrack(agent_id, agent_type, states)


def make_scenario(tracks, lanes=None, interesting=None, ego=None, sid="s0", horizon=None):
    if lanes is None:
        lanes = [LanePolyline("a", np.stack([np.linspace(-40, 40, 41), np.zeros(41)], axis=1))]
    ids = [t.agent_id for t in tracks]
    return Scenario(sid, tuple(tracks), tuple(lanes), tuple(ids if interesting is None else interesting), ids[0] if ego is None else ego,
                    horizon=horizon or Horizon(1.0, 3.0, 10.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mixed_scenarios():
    return generate(GenConfig(seed=11, n_scenarios=12, agents_min=2, agents_max=4, noise_sigma=0.05))


@pytest.fixture(scope="session")
def small_scenario():
    return generate(GenConfig(seed=5, n_scenarios=1, agents_min=3, agents_max=3, layouts=("crossing",)))[0]


def micro_scenario():
    """2 agents, 2 lanes, 1 s observed, 1 s future: the gradient-check micro case."""
    horizon = Horizon(1.0, 1.0, 10.0)
    a = straight_track(0, 0.0, 0.0, 8.0, 0.0, fut=10)
    states = tuple(AgentState(s.t, s.x, s.y + 0.02 * s.t ** 2 / 10, s.vx, s.vy + 0.04 * s.t / 10, s.yaw, 4.5, 2.0)
                   for s in straight_track(1, -6.0, 3.5, 6.0, 0.3, fut=10).states)
    b = AgentTrack(1, "car", states)
    theta = np.linspace(-0.4, 0.4, 17)
    lanes = [LanePolyline("main", np.stack([np.linspace(-20, 20, 21), 0.01 * np.linspace(-20, 20, 21) ** 2], 1)),
             LanePolyline("arc", np.stack([40 * np.sin(theta), 3.5 + 40 * (1 - np.cos(theta))], 1))]
    return make_scenario([a, b], lanes=lanes, sid="micro", horizon=horizon)

"""Randomized and constructed metric fixtures shared by the metric tests."""

import numpy as np

from progd.decoder import JointPrediction
from progd.metrics import EvalCase


def random_scenario(rng, sid="r"):
    n = int(rng.integers(2, 5))
    K = int(rng.integers(1, 7))
    T = 8
    start = rng.uniform(-8, 8, (n, 2))
    vel = rng.normal(0, 1.5, (n, 2))
    steps = np.arange(1, T + 1)[None, :, None]
    gt = start[:, None] + vel[:, None] * steps + rng.normal(0, 0.1, (n, T, 2))
    spread = rng.choice([0.3, 1.5, 4.0])
    pred = gt[None] + rng.normal(0, spread, (K, n, T, 2)) * np.linspace(0.2, 1, T)[None, None, :, None]
    probs = rng.dirichlet(np.ones(K))
    yaw0 = rng.uniform(-np.pi, np.pi, n)
    ext = np.stack([rng.uniform(3, 5, n), rng.uniform(1.5, 2.2, n)], axis=1)
    if rng.random() < 0.5:
        ego_index, ego_gt, ego_yaw0, ego_ext = 0, gt[0], float(yaw0[0]), ext[0]
    else:
        ego_index = None
        ego_gt = rng.uniform(-8, 8, 2) + rng.normal(0, 1.5, 2) * steps[0]
        ego_yaw0, ego_ext = float(rng.uniform(-np.pi, np.pi)), np.array([4.5, 2.0])
    return dict(sid=sid, pred=pred, probs=probs, gt=gt, yaw0=yaw0, ext=ext, ego_gt=np.asarray(ego_gt),
                ego_yaw0=ego_yaw0, ego_ext=np.asarray(ego_ext), ego_index=ego_index)


def consis_case():
    """Only modality 0 hits every target, and its agents collide."""
    T = 6
    t = np.arange(1, T + 1)[:, None]
    gt = np.stack([np.hstack([t * 1.0, np.zeros_like(t)]), np.hstack([t * 1.0, np.full_like(t, 1.0)])])
    hit = gt.copy()  # agents 1 m apart laterally with 2 m width: boxes overlap
    far = gt + np.array([0.0, 5.0]) * np.array([1.0, -1.0])[:, None, None]
    pred = np.stack([hit, far])
    return dict(sid="consis", pred=pred, probs=np.array([0.7, 0.3]), gt=gt, yaw0=np.zeros(2),
                ext=np.array([[4.0, 2.0], [4.0, 2.0]]), ego_gt=gt[0], ego_yaw0=0.0, ego_ext=np.array([4.0, 2.0]),
                ego_index=0)


def split_winner_case():
    """Agent 0 is best in modality 0 and agent 1 in modality 1."""
    T = 5
    t = np.arange(1, T + 1)[:, None]
    gt = np.stack([np.hstack([t * 2.0, np.zeros_like(t)]), np.hstack([t * 2.0, np.full_like(t, 30.0)])])
    pred = np.stack([gt + np.array([[[0.1, 0]], [[3.0, 0]]]), gt + np.array([[[2.5, 0]], [[0.2, 0]]])])
    return dict(sid="split", pred=pred, probs=np.array([0.5, 0.5]), gt=gt, yaw0=np.zeros(2),
                ext=np.array([[4.0, 2.0], [4.0, 2.0]]), ego_gt=gt[0], ego_yaw0=0.0, ego_ext=np.array([4.0, 2.0]),
                ego_index=0)


def to_package(s):
    n = s["gt"].shape[0]
    case = EvalCase(s["sid"], tuple(range(n)), s["gt"], s["yaw0"], s["ext"], s["ego_gt"], s["ego_yaw0"],
                    s["ego_ext"], s["ego_index"])
    pred = JointPrediction(tuple(range(n)), np.transpose(s["pred"], (1, 2, 0, 3)), s["probs"])
    return case, pred


def to_reference(s):
    return {"pred": s["pred"].tolist(), "probs": list(s["probs"]), "gt": s["gt"].tolist(),
            "yaw0": list(s["yaw0"]), "ext": s["ext"].tolist(), "ego_gt": s["ego_gt"].tolist(),
            "ego_yaw0": s["ego_yaw0"], "ego_ext": list(s["ego_ext"]), "ego_index": s["ego_index"]}


def fixture(seed, size=5):
    """One randomized fixture of ``size`` scenarios; every fourth adds the constructed cases."""
    rng = np.random.default_rng([seed, 99])
    out = [random_scenario(rng, f"r{seed}_{i}") for i in range(size)]
    if seed % 4 == 0:
        out[0], out[1] = consis_case(), split_winner_case()
    return out

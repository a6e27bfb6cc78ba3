"""Winner-take-all smooth-L1 objectives for joint, coarse and marginal outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossBreakdown:
    l_joint: Tensor
    l_mid: Tensor
    l_marg: Tensor
    l_prob: Tensor
    winner_k: int
    lambda1: float = 1.0
    lambda2: float = 1.0
    prob_weight: float = 0.5

    def row(self) -> dict[str, float]:
        return {
            "l_joint": self.l_joint.item(),
            "l_mid": self.l_mid.item(),
            "l_marg": self.l_marg.item(),
            "l_prob": self.l_prob.item(),
            "total": total_loss(self).item(),
        }


def smooth_l1(residual, beta: float = 1.0) -> Tensor:
    """Smooth-L1 of every coordinate of ``residual``, summed to a scalar."""
    return ad.smooth_l1(residual, beta).sum()


def _final_errors(final_pred: np.ndarray, final_gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(final_pred - final_gt, axis=-1)


def joint_winner(joint: np.ndarray, gt: np.ndarray) -> int:
    """Modality minimizing the summed final-step L2 error over agents.

    Args:
        joint: ``(K, n, T, 2)`` predictions.
        gt: ``(n, T, 2)`` ground truth.
    """
    if gt is None:
        raise ValueError("ground truth required to pick the winning modality")
    errors = _final_errors(np.asarray(joint)[:, :, -1], np.asarray(gt)[None, :, -1]).sum(axis=1)
    return int(np.argmin(errors))


def loss_joint(joint: Tensor, gt: np.ndarray, k: int, beta: float = 1.0) -> Tensor:
    """Mean over agents and steps of the per-step smooth-L1 (coords summed)."""
    n, steps = gt.shape[0], gt.shape[1]
    return smooth_l1(joint[k] - gt, beta) * (1.0 / (n * steps))


def coarse_targets(gt: np.ndarray, stage_steps: int, mid_step: int) -> np.ndarray:
    """``(n, P, 2, 2)`` ground-truth midpoint and endpoint of every stage."""
    steps = gt.shape[1]
    ends = np.arange(stage_steps, steps + 1, stage_steps) - 1
    mids = ends - stage_steps + mid_step
    return np.stack([gt[:, mids], gt[:, ends]], axis=2)


def loss_mid(coarse: Tensor | None, gt: np.ndarray, k: int, stage_steps: int, mid_step: int,
             beta: float = 1.0) -> Tensor:
    """Coarse-point loss for modality ``k`` (the joint winner)."""
    if coarse is None:
        return Tensor(0.0)
    target = coarse_targets(gt, stage_steps, mid_step)
    n, stages = target.shape[0], target.shape[1]
    return smooth_l1(coarse[k] - target, beta) * (1.0 / (n * stages * 2))


def marginal_winners(marginal: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-agent modality minimizing that agent's final-step error, ``(n,)``."""
    errors = _final_errors(np.asarray(marginal)[:, :, -1], np.asarray(gt)[None, :, -1])
    return np.argmin(errors, axis=0)


def loss_marg(marginal: Tensor, gt: np.ndarray, beta: float = 1.0) -> Tensor:
    n, steps = gt.shape[0], gt.shape[1]
    winners = marginal_winners(marginal.data, gt)
    chosen = marginal[winners, np.arange(n)]
    return smooth_l1(chosen - gt, beta) * (1.0 / (n * steps))


def loss_prob(log_probs: Tensor, k: int) -> Tensor:
    return -log_probs[k]


def total_loss(b: LossBreakdown) -> Tensor:
    return (b.l_joint + b.l_mid * b.lambda1 + b.l_marg * b.lambda2
            + b.l_prob * b.prob_weight)


def compute_losses(out, gt: np.ndarray, stage_steps: int, mid_step: int, lambda1: float = 1.0,
                   lambda2: float = 1.0, prob_weight: float = 0.5, beta: float = 1.0) -> LossBreakdown:
    """All loss terms for one scenario decode (``out`` is a ``DecodeOutput``)."""
    k = joint_winner(out.joint.data, gt)
    return LossBreakdown(
        l_joint=loss_joint(out.joint, gt, k, beta),
        l_mid=loss_mid(out.coarse, gt, k, stage_steps, mid_step, beta),
        l_marg=loss_marg(out.marginal, gt, beta),
        l_prob=loss_prob(out.log_probs, k),
        winner_k=k,
        lambda1=lambda1,
        lambda2=lambda2,
        prob_weight=prob_weight,
    )

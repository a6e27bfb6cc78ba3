import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progd import autodiff as ad
from progd.autodiff import Tensor
from progd.objectives import (LossBreakdown, coarse_targets, compute_losses, joint_winner, loss_joint, loss_marg,
                              loss_mid, loss_prob, marginal_winners, smooth_l1, total_loss)


def huber(x, beta=1.0):
    x = abs(x)
    return 0.5 * x * x / beta if x < beta else x - 0.5 * beta


def brute_joint(joint, gt, k):
    K, n, T, _ = joint.shape
    total = 0.0
    for i in range(n):
        for t in range(T):
            total += huber(joint[k, i, t, 0] - gt[i, t, 0]) + huber(joint[k, i, t, 1] - gt[i, t, 1])
    return total / (n * T)


def brute_winner(joint, gt):
    best, best_err = None, math.inf
    for k in range(joint.shape[0]):
        err = sum(math.hypot(*(joint[k, i, -1] - gt[i, -1])) for i in range(gt.shape[0]))
        if err < best_err:
            best, best_err = k, err
    return best


def test_smooth_l1_closed_forms():
    assert smooth_l1(Tensor([0.0])).item() == 0.0
    assert smooth_l1(Tensor([0.5])).item() == pytest.approx(0.125)
    assert smooth_l1(Tensor([2.0])).item() == pytest.approx(1.5)
    assert smooth_l1(Tensor([-2.0, 0.5])).item() == pytest.approx(1.625)


def test_smooth_l1_one_sided_kink_gradient():
    for x, want in [(1.0, 1.0), (1.0 - 1e-9, 1.0 - 1e-9), (-1.0, -1.0)]:
        t = Tensor([x], requires_grad=True)
        ad.backward(smooth_l1(t))
        assert t.grad[0] == pytest.approx(want, abs=1e-12)


def test_joint_winner_example():
    gt = np.zeros((2, 3, 2))
    joint = np.zeros((2, 2, 3, 2))
    joint[0, 0, -1] = (1.5, 0)
    joint[0, 1, -1] = (0, 1.5)
    joint[1, 0, -1] = (2.5, 0)
    assert joint_winner(joint, gt) == 1
    assert joint_winner(np.zeros((3, 2, 3, 2)), gt) == 0
    with pytest.raises(ValueError):
        joint_winner(joint, None)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(1, 6), st.integers(1, 4), st.floats(-50, 50))
def test_winner_and_joint_loss_match_oracle(seed, K, n, shift):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 3, (n, 5, 2))
    joint = rng.normal(0, 3, (K, n, 5, 2))
    k = joint_winner(joint, gt)
    assert k == brute_winner(joint, gt)
    # common offset on every modality's final error leaves argmin unchanged
    assert k == int(np.argmin(np.linalg.norm(joint[:, :, -1] - gt[None, :, -1], axis=-1).sum(1) + shift))
    assert loss_joint(Tensor(joint), gt, k).item() == pytest.approx(brute_joint(joint, gt, k), rel=1e-12)
    assert loss_joint(Tensor(joint), joint[k], k).item() == 0.0


def test_joint_loss_uniform_offset():
    gt = np.zeros((3, 30, 2))
    joint = np.zeros((1, 3, 30, 2))
    joint[..., 0] = 1.0
    assert loss_joint(Tensor(joint), gt, 0).item() == pytest.approx(0.5)


def test_coarse_targets_and_mid_loss_hand_case():
    gt = np.arange(12, dtype=float).reshape(1, 6, 2)  # one agent, 6 steps
    tg = coarse_targets(gt, stage_steps=3, mid_step=1)
    np.testing.assert_array_equal(tg[0, 0], [gt[0, 0], gt[0, 2]])
    np.testing.assert_array_equal(tg[0, 1], [gt[0, 3], gt[0, 5]])
    coarse = np.zeros((2, 1, 2, 2, 2))
    coarse[1] = tg
    coarse[1, 0, 0, 1] += (0.5, 2.0)  # stage 1 endpoint off by (0.5, 2)
    # single-agent, two-stage hand value: (0.125 + 1.5) / 4 points
    assert loss_mid(Tensor(coarse), gt, 1, 3, 1).item() == pytest.approx(1.625 / 4)
    coarse[1] = tg
    assert loss_mid(Tensor(coarse), gt, 1, 3, 1).item() == 0.0
    assert loss_mid(None, gt, 0, 3, 1).item() == 0.0


def test_marginal_winners_differ_per_agent():
    gt = np.zeros((2, 4, 2))
    marg = np.zeros((2, 2, 4, 2))
    marg[0, 1] += 5.0  # agent 1 is bad in modality 0
    marg[1, 0] += 5.0  # agent 0 is bad in modality 1
    assert marginal_winners(marg, gt).tolist() == [0, 1]
    assert loss_marg(Tensor(marg), gt).item() == 0.0
    # the joint winner alone cannot fit both
    assert brute_joint(marg, gt, joint_winner(marg, gt)) > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_marginal_loss_oracle(seed):
    rng = np.random.default_rng(seed)
    K, n, T = 3, 3, 4
    gt = rng.normal(0, 2, (n, T, 2))
    marg = rng.normal(0, 2, (K, n, T, 2))
    total = 0.0
    for i in range(n):
        k = min(range(K), key=lambda kk: (math.hypot(*(marg[kk, i, -1] - gt[i, -1])), kk))
        total += sum(huber(marg[k, i, t, c] - gt[i, t, c]) for t in range(T) for c in range(2))
    assert loss_marg(Tensor(marg), gt).item() == pytest.approx(total / (n * T), rel=1e-12)


def breakdown(lambda1, lambda2):
    return LossBreakdown(Tensor(1.0), Tensor(2.0), Tensor(3.0), Tensor(4.0), 0, lambda1, lambda2)


def test_total_loss_weights():
    assert total_loss(breakdown(0, 0)).item() == pytest.approx(1.0 + 0.5 * 4.0)
    assert total_loss(breakdown(1, 1)).item() == pytest.approx(1 + 2 + 3 + 2)
    assert loss_prob(Tensor(np.log([0.25, 0.75])), 1).item() == pytest.approx(-math.log(0.75))


def test_compute_losses_gradient_and_nonnegative(rng):
    K, n, T, S = 2, 2, 4, 2
    joint = Tensor(rng.normal(0, 2, (K, n, T, 2)), requires_grad=True)
    marg = Tensor(rng.normal(0, 2, (K, n, T, 2)), requires_grad=True)
    coarse = Tensor(rng.normal(0, 2, (K, n, T // S, 2, 2)), requires_grad=True)
    logits = Tensor(rng.normal(0, 1, K), requires_grad=True)
    gt = rng.normal(0, 2, (n, T, 2))

    def loss():
        out = SimpleNamespace(joint=joint, marginal=marg, coarse=coarse, log_probs=ad.log_softmax_lastdim(logits))
        return total_loss(compute_losses(out, gt, S, 1))

    out = SimpleNamespace(joint=joint, marginal=marg, coarse=coarse, log_probs=ad.log_softmax_lastdim(logits))
    b = compute_losses(out, gt, S, 1)
    assert all(v >= 0 for v in b.row().values())
    params = [joint, marg, coarse, logits]
    ad.backward(loss())
    for p in params:
        assert ad.relative_error(p.grad, ad.numerical_gradient(loss, p)) <= 1e-6

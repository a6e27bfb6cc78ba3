import numpy as np
import pytest

from progd import autodiff as ad
from progd.autodiff import Tensor
from progd.decoder import (DecoderConfig, ModalityEmbedding, ProgressiveDecoder, TemporalModule,
                           cross_time_attention, expand_temporal, hetero_conv, modality_bias)
from progd.dyngraph import construct_snapshot
from progd.nn import HeteroConv
from progd.model import ModelConfig, ProgD, prepare

D = 8


def scalar_grad_error(loss, params):
    for p in params:
        p.zero_grad()
    ad.backward(loss())
    got = np.concatenate([(np.zeros_like(p.data) if p.grad is None else p.grad).ravel() for p in params])
    num = np.concatenate([ad.numerical_gradient(loss, p).ravel() for p in params])
    return ad.relative_error(got, num)


def decoder(rng_seed=0, **kw):
    cfg = DecoderConfig(**{"d": D, "modes": 3, "fut_steps": 6, "stage_steps": 2, "heads": 2, **kw})
    return ProgressiveDecoder(cfg, np.random.default_rng(rng_seed))


def scene(rng, n=3, lanes=4):
    h = Tensor(rng.standard_normal((n, D)))
    start = rng.uniform(-10, 10, (n, 2))
    lane_feats = Tensor(rng.standard_normal((lanes, D)))
    lane_xy = rng.uniform(-15, 15, (lanes, 2))
    cands = [frozenset(range(lanes))] * n
    return h, start, lane_feats, lane_xy, cands


def zero_headers(dec):
    for mlp in (dec.coarse_header, dec.joint_header, dec.marginal_header):
        mlp.zero_()


# modality embeddings ---------------------------------------------------------

def test_modality_bias_examples(rng):
    h = Tensor(rng.standard_normal((2, D)))
    m = Tensor(rng.standard_normal((2, D)))
    out = modality_bias(h, m).data
    assert out.shape == (4, D)
    for k in range(2):
        for i in range(2):
            np.testing.assert_array_equal(out[k * 2 + i], h.data[i] + m.data[k])
    np.testing.assert_array_equal(modality_bias(h, Tensor(np.zeros((3, D)))).data, np.tile(h.data, (3, 1)))


def test_modality_offset_constant_across_agents(rng):
    n, k = 5, 4
    # dyadic values keep float arithmetic exact so the check can be bitwise
    h = Tensor(rng.integers(-64, 64, (n, D)) / 8.0)
    m = Tensor(rng.integers(-64, 64, (k, D)) / 16.0)
    out = modality_bias(h, m).data.reshape(k, n, D)
    diff = out - h.data[None]
    for kk in range(k):
        assert np.all(diff[kk] == diff[kk, 0])


def test_modality_count_validated(rng):
    with pytest.raises(ValueError):
        ModalityEmbedding(0, D, rng)


# temporal module ---------------------------------------------------------------

def test_expand_temporal_shape_and_zero(rng):
    tm = TemporalModule(32, 30, 8, rng)
    h = Tensor(rng.standard_normal((2, 32)))
    assert expand_temporal(h, tm).shape == (2, 30, 32)
    tm.expand.weight.data[...] = 0
    tm.expand.bias.data[...] = 0
    assert np.all(expand_temporal(h, tm).data == 0)


def test_expand_temporal_gradient(rng):
    tm = TemporalModule(4, 3, 2, rng)
    h = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    assert scalar_grad_error(lambda: (expand_temporal(h, tm) * w).sum(), [h, tm.expand.weight, tm.expand.bias]) <= 1e-5


def test_single_step_attention_ignores_query_key(rng):
    tm = TemporalModule(D, 1, 2, rng)
    x = Tensor(rng.standard_normal((3, 1, D)))
    ref = cross_time_attention(x, tm).data
    tm.attention.attn.query.weight.data[...] = rng.standard_normal((D, D)) * 5
    tm.attention.attn.key.weight.data[...] = rng.standard_normal((D, D)) * 5
    np.testing.assert_allclose(cross_time_attention(x, tm).data, ref, atol=1e-12)
    assert ref.shape == (3, 1, D)


def test_cross_time_attention_gradient(rng):
    tm = TemporalModule(D, 4, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, D)), requires_grad=True)
    w = rng.standard_normal((2, 4, D))
    assert scalar_grad_error(lambda: (cross_time_attention(x, tm) * w).sum(), [x] + tm.attention.parameters()) <= 1e-4


# hetero_conv -------------------------------------------------------------------

def conv_fixture(rng, n=4, lanes=3, eps=40.0):
    conv = HeteroConv(D, ["agent", "lane"], rng)
    xy = rng.uniform(-10, 10, (n, 2))
    lane_xy = rng.uniform(-10, 10, (lanes, 2))
    snap = construct_snapshot(1, xy, [set(range(lanes))] * n, lane_xy, eps)
    return conv, snap, Tensor(rng.standard_normal((n, D))), Tensor(rng.standard_normal((lanes, D)))


def test_hetero_conv_no_lane_neighbors(rng):
    conv, snap, x, lanes = conv_fixture(rng, eps=0.0)
    assert len(snap.e1) == 0
    out = hetero_conv(snap, x, lanes, conv).data
    xi = x.data[snap.e0[:, 1]]
    xj = x.data[snap.e0[:, 0]]
    dc = (snap.agent_xy[snap.e0[:, 0]] - snap.agent_xy[snap.e0[:, 1]]) / conv.coord_scale
    msg = conv.message["agent"](np.concatenate([xi, xj, dc], axis=1)).data
    pooled = np.stack([msg[snap.e0[:, 1] == i].max(axis=0) for i in range(4)])
    want = conv.self_fn(x.data).data + conv.transform["agent"](pooled).data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_hetero_conv_neighbor_order_invariance(rng):
    conv, snap, x, lanes = conv_fixture(rng)
    ref = hetero_conv(snap, x, lanes, conv).data
    for seed in range(5):
        p = np.random.default_rng(seed)
        shuffled = type(snap)(**{**snap.__dict__, "e0": snap.e0[p.permutation(len(snap.e0))],
                                 "e1": snap.e1[p.permutation(len(snap.e1))]})
        np.testing.assert_array_equal(hetero_conv(shuffled, x, lanes, conv).data, ref)


def test_hetero_conv_translation_invariance(rng):
    conv, snap, x, lanes = conv_fixture(rng)
    ref = hetero_conv(snap, x, lanes, conv).data
    shift = np.array([123.4, -56.7])
    moved = construct_snapshot(1, snap.agent_xy + shift, snap.candidates, snap.lane_xy + shift, snap.eps)
    assert np.array_equal(moved.e1, snap.e1)
    assert np.abs(hetero_conv(moved, x, lanes, conv).data - ref).max() <= 1e-9


# headers -----------------------------------------------------------------------

def test_header_arity_and_zero_fixed_points(rng):
    dec = decoder()
    zero_headers(dec)
    z = Tensor(rng.standard_normal((5, D)))
    anchor = Tensor(rng.standard_normal((5, 2)))
    assert dec.coarse_header(z).shape == (5, 4)
    mid, end = dec.coarse(z, anchor)
    np.testing.assert_array_equal(mid.data, anchor.data)
    np.testing.assert_array_equal(end.data, anchor.data)
    traj = dec.joint(z, anchor)
    assert traj.shape == (5, 2, 2)
    np.testing.assert_array_equal(traj.data, np.repeat(anchor.data[:, None], 2, axis=1))
    lat = Tensor(rng.standard_normal((5, 6, D)))
    marg = dec.marginal(lat, anchor)
    assert marg.shape == (5, 6, 2)
    np.testing.assert_array_equal(marg.data, np.repeat(anchor.data[:, None], 6, axis=1))


@pytest.mark.parametrize("header", ["coarse", "joint", "marginal"])
def test_header_gradients(rng, header):
    dec = decoder()
    anchor = Tensor(rng.standard_normal((3, 2)))
    if header == "marginal":
        z = Tensor(rng.standard_normal((3, 6, D)), requires_grad=True)
        fn, mlp = (lambda: (dec.marginal(z, anchor) * w).sum()), dec.marginal_header
        w = rng.standard_normal((3, 6, 2))
    elif header == "joint":
        z = Tensor(rng.standard_normal((3, D)), requires_grad=True)
        fn, mlp = (lambda: (dec.joint(z, anchor) * w).sum()), dec.joint_header
        w = rng.standard_normal((3, 2, 2))
    else:
        z = Tensor(rng.standard_normal((3, D)), requires_grad=True)
        w = rng.standard_normal((2, 3, 2))
        fn, mlp = (lambda: (dec.coarse(z, anchor)[0] * w[0] + dec.coarse(z, anchor)[1] * w[1]).sum()), dec.coarse_header
    assert scalar_grad_error(fn, [z] + mlp.parameters()) <= 1e-5


def test_probabilities_uniform_for_identical_modalities(rng):
    dec = decoder()
    z = Tensor(np.tile(rng.standard_normal((2, D)), (3, 1)))
    p = np.exp(dec.probabilities(z, 2).data)
    np.testing.assert_allclose(p, 1 / 3, atol=1e-12)
    z2 = Tensor(rng.standard_normal((6, D)), requires_grad=True)
    assert abs(np.exp(dec.probabilities(z2, 2).data).sum() - 1) <= 1e-9
    w = rng.standard_normal(3)
    assert scalar_grad_error(lambda: (dec.probabilities(z2, 2) * w).sum(),
                             [z2] + dec.probability_header.parameters()) <= 1e-5


# full decode -------------------------------------------------------------------

def test_zero_headers_keep_agents_at_start(rng):
    dec = decoder()
    zero_headers(dec)
    h, start, lf, lxy, cands = scene(rng)
    out = dec(h, start, lf, lxy, cands)
    assert out.joint.shape == (3, 3, 6, 2)
    want = np.broadcast_to(start[None, :, None, :], out.joint.shape)
    np.testing.assert_array_equal(out.joint.data, want)
    np.testing.assert_array_equal(out.marginal.data, want)


def test_stage_structure_and_snapshot_chaining(rng):
    dec = decoder()
    h, start, lf, lxy, cands = scene(rng)
    out = dec(h, start, lf, lxy, cands, trace=True)
    assert len(out.trace) == dec.cfg.stages == 3
    assert len(dec.first_convs) == len(dec.second_convs) == 3
    assert [t.first_layer for t in out.trace] == [0, 1, 2]
    np.testing.assert_array_equal(out.trace[0].construct_xy, np.broadcast_to(start, (3, 3, 2)))
    for prev, cur in zip(out.trace, out.trace[1:]):
        np.testing.assert_array_equal(cur.construct_xy, prev.joint_end)
        for k, snap in enumerate(cur.snapshots):
            np.testing.assert_array_equal(snap.agent_xy, prev.joint_end[k])
    for tr in out.trace:
        for k, upd in enumerate(tr.updated):
            np.testing.assert_array_equal(upd.agent_xy, tr.coarse_end[k])
    # joint endpoint of a stage is the trajectory at the stage's last step
    full = out.joint.data
    for p, tr in enumerate(out.trace, start=1):
        np.testing.assert_array_equal(tr.joint_end, full[:, :, p * 2 - 1])
    assert abs(np.exp(out.log_probs.data).sum() - 1) <= 1e-9


def test_unshared_stage_weights(rng):
    dec = decoder()
    ids = {id(p) for conv in dec.first_convs + dec.second_convs for p in conv.parameters()}
    assert len(ids) == sum(len(c.parameters()) for c in dec.first_convs + dec.second_convs)


def test_decode_agent_permutation_equivariance(rng):
    dec = decoder()
    h, start, lf, lxy, cands = scene(rng, n=4)
    cands = [frozenset({0, 1}), frozenset({1, 2, 3}), frozenset({3}), frozenset(range(4))]
    perm = np.array([3, 1, 0, 2])
    ref = dec(h, start, lf, lxy, cands)
    out = dec(Tensor(h.data[perm]), start[perm], lf, lxy, [cands[i] for i in perm])
    np.testing.assert_array_equal(out.joint.data, ref.joint.data[:, perm])
    np.testing.assert_array_equal(out.marginal.data, ref.marginal.data[:, perm])
    np.testing.assert_allclose(out.log_probs.data, ref.log_probs.data, atol=1e-12)


def test_tau_must_divide_horizon():
    with pytest.raises(ValueError):
        DecoderConfig(fut_steps=30, stage_steps=7).stages


def test_static_future_graph_reuses_one_snapshot(rng):
    dec = decoder(static_future_graph=True, multiscale=False)
    h, start, lf, lxy, cands = scene(rng)
    out = dec(h, start, lf, lxy, cands, trace=True)
    first = out.trace[0].snapshots
    for tr in out.trace:
        assert all(a is b for a, b in zip(tr.snapshots, first))
        assert all(a is b for a, b in zip(tr.updated, first))
    assert out.coarse is None


def test_decode_on_prepared_scenario(small_scenario):
    model = ProgD(ModelConfig(d=D, modes=2, heads=2), small_scenario.horizon)
    prep = prepare(small_scenario, model.cfg)
    pred = model.predict(prep)
    n = len(small_scenario.interesting_ids)
    assert pred.positions.shape == (n, 30, 2, 2)
    assert pred.coarse.shape == (n, 3, 2, 2, 2)
    assert abs(pred.probs.sum() - 1) <= 1e-9
    assert np.isfinite(pred.positions).all()

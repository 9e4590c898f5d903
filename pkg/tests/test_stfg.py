import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vecmap import stfg, tensor as T
from vecmap.errors import ContractError
from vecmap.geometry import Se2Pose, chamfer
from vecmap.stfg import TrajectoryHistory, pad_history
from vecmap.tensor import ParameterStore, Tensor

C, NP, HALF = 8, 5, 16.0


def params(n=4, trained=False, seed=0):
    s = ParameterStore(seed)
    stfg.init_params(s, n, NP, C, hidden=16)
    if trained:
        rng = np.random.default_rng(seed + 1)
        for name in s.names():
            s[name].data[:] = rng.normal(scale=0.3, size=s[name].shape)
    return s


def hist(n=4, seed=2):
    return np.random.default_rng(seed).uniform(-10, 10, size=(n, NP, 2))


def test_zero_final_layer_is_identity_prediction():
    h = hist()
    offsets, p_hat = stfg.predict_future(h, params(), HALF)
    assert not offsets.data.any()
    assert np.array_equal(p_hat.data, h[-1])


def test_empty_history_rejected():
    with pytest.raises(ContractError):
        stfg.predict_future(np.zeros((0, NP, 2)), params(), HALF)
    with pytest.raises(ContractError):
        TrajectoryHistory(4).stack(7)


def test_history_padding_and_contiguity():
    h = TrajectoryHistory(4)
    a, b = np.zeros((NP, 2)), np.ones((NP, 2))
    h.push(1, 3, a)
    h.push(1, 4, b)
    st_ = h.stack(1)
    assert np.array_equal(st_, np.stack([a, a, a, b]))
    with pytest.raises(ContractError):
        h.push(1, 6, a)
    for t in range(5, 10):
        h.push(1, t, a + t)
    assert h.frames(1) == [6, 7, 8, 9]
    assert np.array_equal(pad_history([a], 2), np.stack([a, a]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-1, 1))
def test_reframe_applies_inverse_motion(dx, dy, th):
    h = TrajectoryHistory(3)
    pts = hist(1)[0]
    h.push(0, 0, pts)
    g = Se2Pose(dx, dy, th)
    h.reframe(g)
    np.testing.assert_allclose(h.stack(0, 1)[0], g.inverse().apply(pts), atol=1e-9)


def test_identical_points_embed_to_phi_of_point():
    p = params(trained=True)
    pt = np.array([[2.0, -3.0]])
    a = stfg.future_embedding(np.repeat(pt, NP, axis=0), p, HALF).data
    b = stfg.future_embedding(pt, p, HALF).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_identity_fusion_ignores_future():
    p = params()
    q = Tensor(np.random.default_rng(3).normal(size=C))
    out = stfg.fuse_future_guidance(q, hist()[0], p, HALF).data
    np.testing.assert_array_equal(out, q.data)


def test_fusion_invariant_to_point_order():
    p = params(trained=True)
    q = Tensor(np.random.default_rng(4).normal(size=C))
    pts = hist()[0]
    a = stfg.fuse_future_guidance(q, pts, p, HALF).data
    b = stfg.fuse_future_guidance(q, pts[::-1].copy(), p, HALF).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def brute_chamfer(a, b):
    da = [min(np.hypot(*(x - y)) for y in b) for x in a]
    db = [min(np.hypot(*(y - x)) for x in a) for y in b]
    return 0.5 * (sum(da) / len(da) + sum(db) / len(db))


def test_pred_loss_examples():
    gt = np.stack([np.linspace(0, 4, NP), np.zeros(NP)], axis=1)
    assert stfg.pred_loss(Tensor(gt), gt).item() == 0.0
    shifted = gt + [1.0, 0.0]
    value = stfg.pred_loss(Tensor(shifted), gt).item()
    assert value == pytest.approx(brute_chamfer(shifted, gt), abs=1e-12)
    assert value == pytest.approx(0.2, abs=1e-12)
    assert stfg.pred_loss(Tensor([[0.0, 0.0]]), np.array([[3.0, 4.0]])).item() == pytest.approx(5.0)
    assert stfg.zero_offset_loss(np.stack([gt, shifted]), gt) == chamfer(shifted, gt)


def test_pred_loss_gradient_through_mlp():
    p = params(trained=True)
    h = hist()
    target = h[-1] + np.random.default_rng(5).normal(scale=0.7, size=(NP, 2))
    f = lambda: stfg.pred_loss(stfg.predict_future(h, p, HALF)[1], target)
    assert T.finite_diff_check(f, p.parameters()) <= 1e-4


def test_fusion_gradient():
    p = params(trained=True)
    q = Tensor(np.random.default_rng(6).normal(size=C), requires_grad=True)
    w = np.random.default_rng(7).normal(size=C)
    h = hist()
    f = lambda: T.tsum(T.mul(stfg.fuse_future_guidance(q, stfg.predict_future(h, p, HALF)[1], p, HALF), w))
    assert T.finite_diff_check(f, [q] + p.parameters()) <= 1e-4

import math

import numpy as np
import pytest

from vecmap import saqg, tensor as T
from vecmap.geometry import Window
from vecmap.tensor import ParameterStore, Tensor
from vecmap.world import BevGrid

C = 8


def make_params(n_q=4, layers=2, seed=0):
    s = ParameterStore(seed)
    saqg.init_params(s, n_q, C, layers)
    return s


def tokens(seed=1, cells=64):
    return np.random.default_rng(seed).normal(size=(cells, C))


def test_all_open_prev_mask_equals_unmasked_attention():
    p, tok = make_params(), tokens()
    q = p["saqg.queries"]
    out, _ = saqg.decoder_layer(q, tok, np.ones((4, 64)), p, 0, 0.5)
    ref = T.masked_attention(T.matmul(q, p["saqg.l0.wq"]), Tensor(tok @ p["saqg.l0.wk"].data),
                             Tensor(tok @ p["saqg.l0.wv"].data))
    np.testing.assert_allclose(out.data, q.data + ref.data @ p["saqg.l0.wo"].data, rtol=0, atol=1e-12)


def test_all_closed_prev_mask_falls_back_to_unmasked():
    p, tok = make_params(), tokens()
    q = p["saqg.queries"]
    a, _ = saqg.decoder_layer(q, tok, np.zeros((4, 64)), p, 0, 0.5)
    b, _ = saqg.decoder_layer(q, tok, np.ones((4, 64)), p, 0, 0.5)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_output_projection_keeps_queries():
    p, tok = make_params(), tokens()
    p["saqg.l0.wo"].data[:] = 0.0
    q = p["saqg.queries"]
    out, _ = saqg.decoder_layer(q, tok, np.random.default_rng(2).random((4, 64)), p, 0, 0.5)
    assert np.array_equal(out.data, q.data)


def test_zero_query_gives_half_masks():
    p, tok = make_params(), tokens()
    m = saqg.predict_masks(Tensor(np.zeros((3, C))), tok, p)
    assert np.all(m.data == 0.5)


def test_mask_peaks_at_aligned_cell():
    p = make_params()
    p["saqg.mask_proj"].data[:] = np.eye(C)
    tok = np.zeros((64, C))
    tok[:, 1] = 1.0
    tok[17] = 0.0
    tok[17, 0] = 1.0
    m = saqg.predict_masks(Tensor(np.eye(C)[:1] * 5.0), tok, p).data[0]
    assert int(np.argmax(m)) == 17 and m[17] > 0.99
    assert np.all(np.delete(m, 17) == 0.5)


def test_mask_shape_at_default_grid():
    s = ParameterStore(0)
    saqg.init_params(s, 16, 32, 1)
    win = Window(-16.0, 16.0, -16.0, 16.0)
    bev = BevGrid(np.zeros((64, 64, 32)), win, 0.5)
    q, m = saqg.run_generator(s["saqg.queries"], bev, s, 1, 0.5)
    assert saqg.MaskSet(m, 64, 64).grids().shape == (16, 64, 64)
    assert q.shape == (16, 32)


def test_run_generator_single_layer_is_one_decoder_call():
    p, tok = make_params(layers=1), tokens()
    q0 = p["saqg.queries"]
    seed_masks = saqg.predict_masks(q0, tok, p).data
    ref_q, ref_m = saqg.decoder_layer(q0, tok, seed_masks, p, 0, 0.5)
    q, m = saqg.run_generator(q0, tok, p, 1, 0.5)
    assert np.array_equal(q.data, ref_q.data) and np.array_equal(m.data, ref_m.data)
    q2, m2 = saqg.run_generator(q0, tok, p, 1, 0.5)
    assert np.array_equal(q.data, q2.data) and np.array_equal(m.data, m2.data)


def test_locality_masked_cells_do_not_matter():
    p = make_params()
    tok = tokens()
    prev = np.zeros((4, 64))
    prev[:, :20] = 0.9
    out_a, _ = saqg.decoder_layer(p["saqg.queries"], tok, prev, p, 0, 0.5)
    tok_b = tok.copy()
    tok_b[20:] = np.random.default_rng(9).normal(size=(44, C)) * 100
    out_b, _ = saqg.decoder_layer(p["saqg.queries"], tok_b, prev, p, 0, 0.5)
    assert np.array_equal(out_a.data, out_b.data)


def test_seg_loss_hand_values():
    gt = np.array([[1.0, 1.0, 0.0, 0.0]])
    perfect = saqg.seg_loss(Tensor(gt.copy()), gt).item()
    assert perfect <= 2 * 1e-6 + -math.log(1 - 1e-7) + 1e-9
    half = saqg.seg_loss(Tensor(np.full((1, 4), 0.5)), gt, lambda_dice=2.0, lambda_bce=1.0).item()
    dice = 1 - 2 * (0.5 * 2) / (0.5 * 4 + 2 + 1e-6)
    assert abs(half - (2 * dice + math.log(2))) < 1e-12
    disjoint = saqg.seg_loss(Tensor(np.array([[0.0, 0.0, 1.0, 1.0]])), gt, 2.0, 0.0).item()
    assert abs(disjoint - 2.0) < 1e-12
    assert saqg.seg_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 4))).item() == 0.0


def test_generator_gradient_wrt_initial_queries():
    p, tok = make_params(), tokens()
    w = np.random.default_rng(3).normal(size=(4, 64))
    f = lambda: T.tsum(T.mul(saqg.run_generator(p["saqg.queries"], tok, p, 2, 0.5)[1], w))
    assert T.finite_diff_check(f, [p["saqg.queries"]]) <= 1e-4


def test_query_set_rejects_duplicate_track_ids():
    with pytest.raises(ValueError):
        saqg.QuerySet(Tensor(np.zeros((2, C))), [saqg.TRACK, saqg.TRACK], [3, 3])

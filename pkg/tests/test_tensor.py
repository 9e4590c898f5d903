import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vecmap import tensor as T
from vecmap.errors import ConfigError, ContractError, DimensionError, NumericError
from vecmap.tensor import ParameterStore, Tensor, finite_diff_check

NEG = -np.inf


def param(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- linear


def test_linear_identity():
    y = T.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_linear_hand_product():
    y = T.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(y.data, [[6.0]])


def test_linear_bias_passthrough():
    W = np.random.default_rng(0).normal(size=(3, 1))
    y = T.linear(Tensor(np.zeros((1, 3))), Tensor(W), Tensor([5.0]))
    np.testing.assert_array_equal(y.data, [[5.0]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        T.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))))
    assert "(1, 3)" in str(err.value) and "(2, 4)" in str(err.value)


# ---------------------------------------------------------------- attention


def test_attention_zero_mask_is_plain_softmax_attention():
    rng = np.random.default_rng(1)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    out = T.masked_attention(Tensor(Q), Tensor(K), Tensor(V), np.zeros((3, 5))).data
    s = Q @ K.T / 2.0
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(out, w @ V, rtol=0, atol=1e-14)


def test_attention_single_open_cell_copies_value_row():
    V = np.array([[1.5, -2.0], [7.0, 3.0]])
    out = T.masked_attention(Tensor([[0.3, 0.1]]), Tensor([[1.0, 2.0], [-4.0, 0.5]]), Tensor(V),
                             np.array([[0.0, NEG]])).data
    assert np.array_equal(out, V[:1])


def test_attention_fully_masked_row_falls_back_to_unmasked():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    mask = np.array([[NEG] * 4, [0.0, NEG, NEG, 0.0]])
    out = T.masked_attention(Tensor(Q), Tensor(K), Tensor(V), mask).data
    plain = T.masked_attention(Tensor(Q), Tensor(K), Tensor(V)).data
    np.testing.assert_array_equal(out[0], plain[0])
    assert np.all(np.isfinite(out))


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(4, 6)) * 5)
    mask = np.where(rng.random((4, 6)) < 0.4, NEG, 0.0)
    w = T.masked_softmax(logits, mask).data
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, rtol=0, atol=1e-12)


@given(st.floats(-50, 50))
def test_softmax_shift_invariance(c):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, 5))
    a = T.masked_softmax(Tensor(z)).data
    b = T.masked_softmax(Tensor(z + np.array([[c], [0.0]]))).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_token_attention_matches_explicit_projection():
    rng = np.random.default_rng(5)
    x, tok = Tensor(rng.normal(size=(3, 4))), rng.normal(size=(10, 4))
    W = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
    mask = np.where(rng.random((3, 10)) < 0.5, NEG, 0.0)
    a = T.token_attention(x, tok, *W, mask).data
    b = T.masked_attention(T.matmul(x, W[0]), Tensor(tok @ W[1].data), Tensor(tok @ W[2].data), mask).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- mlp


def test_mlp_identity_layer():
    x = Tensor([[0.5, -3.0]])
    np.testing.assert_array_equal(T.mlp(x, [(Tensor(np.eye(2)), Tensor(np.zeros(2)))]).data, x.data)


def test_mlp_two_layers_hand_forward():
    # h = relu([-1, 1] @ [[1, 2], [3, -1]] + [0, 1]) = relu([2, -2]) = [2, 0]; y = 2*4 + 0*5 - 1 = 7
    W1, b1 = Tensor([[1.0, 2.0], [3.0, -1.0]]), Tensor([0.0, 1.0])
    W2, b2 = Tensor([[4.0], [5.0]]), Tensor([-1.0])
    y = T.mlp(Tensor([[-1.0, 1.0]]), [(W1, b1), (W2, b2)], "relu")
    np.testing.assert_array_equal(y.data, [[7.0]])


def test_mlp_zero_final_layer_gives_zero():
    rng = np.random.default_rng(6)
    layers = [(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=8))), (Tensor(np.zeros((8, 2))), Tensor(np.zeros(2)))]
    assert np.array_equal(T.mlp(Tensor(rng.normal(size=(5, 3))), layers).data, np.zeros((5, 2)))


def test_mlp_empty_layers_is_config_error():
    with pytest.raises(ConfigError):
        T.mlp(Tensor([[1.0]]), [])


# ---------------------------------------------------------------- backward


def test_backward_sum():
    x = param([1.0, 2.0, 3.0])
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = param([2.0])
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0])


def test_backward_accumulates_and_rejects_non_scalar():
    x = param([1.0, -1.0])
    T.tsum(T.mul(x, 3.0)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    with pytest.raises(ContractError):
        T.mul(x, 2.0).backward()


def test_no_grad_records_nothing():
    x = param([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic_form():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(4, 4))
    x = param(rng.normal(size=(1, 4)))
    f = lambda: T.tsum(T.mul(T.matmul(x, A), x))
    assert finite_diff_check(f, [x]) < 1e-6


def test_fd_relu_away_from_kinks():
    x = param([[0.7, -0.4, 1.3, -2.0]])
    W = param(np.random.default_rng(8).normal(size=(4, 3)))
    f = lambda: T.tsum(T.relu(T.matmul(x, W)))
    assert finite_diff_check(f, [x, W]) < 1e-4


def test_fd_constant_function():
    x = param([1.0, 2.0])
    f = lambda: T.Tensor(3.0)
    assert finite_diff_check(f, [x]) == 0.0


def test_fd_composite_softmax_linear_mean():
    rng = np.random.default_rng(9)
    Q, K, V = (param(rng.normal(size=s)) for s in ((3, 4), (5, 4), (5, 4)))
    mask = np.where(rng.random((3, 5)) < 0.3, NEG, 0.0)
    f = lambda: T.mean(T.tanh(T.masked_attention(Q, K, V, mask)))
    assert finite_diff_check(f, [Q, K, V]) < 1e-4


def test_fd_layer_norm_and_log_softmax():
    rng = np.random.default_rng(10)
    x = param(rng.normal(size=(3, 6)))
    w = rng.normal(size=(3, 6))
    f = lambda: T.tsum(T.mul(T.log_softmax(T.layer_norm(x)), w))
    assert finite_diff_check(f, [x]) < 1e-4


def test_fd_rejects_bad_eps_and_nonfinite():
    x = param([1.0])
    with pytest.raises(ConfigError):
        finite_diff_check(lambda: T.tsum(x), [x], eps=1e-2)
    with pytest.raises(NumericError):
        finite_diff_check(lambda: T.tsum(T.log(T.mul(x, 0.0))), [x])


# ---------------------------------------------------------------- parameters


def test_parameter_store_reproducible_and_sorted():
    def build(seed):
        s = ParameterStore(seed)
        s.create("b.w", (3, 2))
        s.create("a.w", (2, 2))
        return s
    a, b = build(11), build(11)
    assert a.names() == ["a.w", "b.w"]
    for n in a.names():
        assert np.array_equal(a[n].data, b[n].data)
    assert not np.array_equal(a["b.w"].data, build(12)["b.w"].data)
    bound = 1 / math.sqrt(3)
    assert np.all(np.abs(a["b.w"].data) <= bound)


def test_duplicate_parameter_is_contract_error():
    s = ParameterStore(0)
    s.create("w", (1,))
    with pytest.raises(ContractError):
        s.create("w", (1,))


def test_checkpoint_round_trip(tmp_path):
    s = ParameterStore(3)
    s.create("x.w", (4, 3))
    s.create("x.b", (3,), init="zeros")
    s["x.b"].data[:] = [1e-300, -0.1, 1 / 3]
    s.save(tmp_path / "a.txt")
    seed, state = ParameterStore.read_checkpoint(tmp_path / "a.txt")
    assert seed == 3
    t = ParameterStore(seed)
    t.create("x.w", (4, 3))
    t.create("x.b", (3,))
    t.load_state_dict(state)
    t.save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    for n in s.names():
        assert np.array_equal(s[n].data, t[n].data)


def test_sgd_clips_and_rejects_nonfinite():
    w = param([3.0, 4.0])
    w.grad = np.array([30.0, 40.0])
    opt = T.SGD([w], lr=0.1, momentum=0.0, clip_norm=5.0)
    opt.step()
    np.testing.assert_allclose(w.data, [3.0 - 0.3, 4.0 - 0.4])
    small = param([1.0])
    small.grad = np.array([0.0, 0.0, 5.0])[2:]
    w.grad = np.array([0.0, 0.0])
    opt2 = T.SGD([w, small], lr=0.1, momentum=0.5, clip_norm=10.0)
    assert opt2.step() == 5.0
    opt2.step()
    np.testing.assert_allclose(small.data, [1.0 - 0.5 - 0.75])
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        opt.step()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_backward_bit_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, W = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))

    def run():
        a, b = param(x), param(W)
        T.tsum(T.sigmoid(T.matmul(a, b))).backward()
        return a.grad.tobytes() + b.grad.tobytes()
    assert run() == run()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_conv1d, explicit_attention, lstm_reference
from seqemo import layers as L
from seqemo.errors import ShapeError
from seqemo.numeric import finite_diff_check, make_rng

SEEDS = range(10)
TOL = 1e-4


def layer_grad_error(forward, backward, tensors, seed, h=1e-6, max_coords=None):
    """Finite-difference check of a layer under the loss sum(output * R) for a fixed random R."""
    rng = np.random.default_rng(seed + 1000)
    out, _ = forward(tensors)
    weights = rng.normal(size=out.shape)

    def f(p):
        out, cache = forward(p)
        grads = backward(weights, cache)
        return float(np.sum(out * weights)), grads

    return finite_diff_check(f, tensors, h=h, max_coords=max_coords, rng=make_rng(seed))


def with_x(fn):
    """Adapt a (dx, param_grads) backward to the dict layout used by layer_grad_error."""

    def backward(dout, cache):
        dx, grads = fn(dout, cache)
        return {"x": dx, **grads}

    return backward


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 6, 3))
        kernel = np.eye(3)[None]
        out, _ = L.conv1d_forward(x, kernel, np.zeros(3), 1, None)
        np.testing.assert_array_equal(out, x)

    def test_output_length(self, rng):
        out, _ = L.conv1d_forward(rng.normal(size=(1, 100, 2)), rng.normal(size=(5, 2, 3)), np.zeros(3), 2, None)
        assert out.shape == (1, 48, 3)

    def test_too_short_names_layer(self):
        with pytest.raises(ShapeError, match="conv7"):
            L.conv1d_forward(np.zeros((1, 3, 2)), np.zeros((5, 2, 2)), np.zeros(2), 1, "relu", name="conv7")

    def test_exhaustive_lengths_against_brute_force(self):
        rng = np.random.default_rng(0)
        for steps in range(1, 13):
            x = rng.normal(size=(1, steps, 2))
            for width in range(1, steps + 1):
                kernel = rng.normal(size=(width, 2, 3))
                bias = rng.normal(size=3)
                for stride in range(1, 5):
                    out, _ = L.conv1d_forward(x, kernel, bias, stride, None)
                    assert out.shape[1] == (steps - width) // stride + 1
                    assert L.conv_output_length(steps, width, stride) == out.shape[1]
                    np.testing.assert_allclose(out[0], brute_force_conv1d(x[0], kernel, bias, stride), atol=1e-12)

    def test_relu_clamps(self, rng):
        out, _ = L.conv1d_forward(rng.normal(size=(2, 8, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4), 1, "relu")
        assert out.min() >= 0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        stride = 1 + seed % 3
        activation = "relu" if seed % 2 else None
        tensors = {"x": rng.normal(size=(2, 11, 3)), "kernel": rng.normal(size=(3, 3, 4)), "bias": rng.normal(size=4)}
        fwd = lambda p: L.conv1d_forward(p["x"], p["kernel"], p["bias"], stride, activation)
        assert layer_grad_error(fwd, with_x(L.conv1d_backward), tensors, seed) <= TOL


class TestMaxPool:
    def test_hand_example(self):
        out, _ = L.maxpool1d_forward(np.array([1.0, 3, 2, 5]).reshape(1, 4, 1), 2)
        np.testing.assert_array_equal(out.ravel(), [3, 5])

    def test_remainder_dropped(self):
        out, cache = L.maxpool1d_forward(np.arange(5.0).reshape(1, 5, 1), 2)
        assert out.shape == (1, 2, 1)
        dx, _ = L.maxpool1d_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(dx.ravel(), [0, 1, 0, 1, 0])

    def test_tie_goes_to_first_index(self):
        out, cache = L.maxpool1d_forward(np.array([2.0, 2.0]).reshape(1, 2, 1), 2)
        dx, _ = L.maxpool1d_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(dx.ravel(), [1, 0])

    def test_too_short(self):
        with pytest.raises(ShapeError):
            L.maxpool1d_forward(np.zeros((1, 1, 2)), 2)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        tensors = {"x": rng.normal(size=(2, 9, 3))}
        pool = 2 + seed % 2
        fwd = lambda p: L.maxpool1d_forward(p["x"], pool)
        assert layer_grad_error(fwd, with_x(L.maxpool1d_backward), tensors, seed) <= TOL


class TestGlobalPools:
    def test_constant_sequence(self):
        x = np.full((2, 5, 3), 1.5)
        assert np.all(L.global_maxpool_forward(x)[0] == 1.5)
        np.testing.assert_allclose(L.global_avgpool_forward(x)[0], 1.5)

    def test_single_frame(self, rng):
        x = rng.normal(size=(2, 1, 4))
        np.testing.assert_array_equal(L.global_maxpool_forward(x)[0], x[:, 0])
        np.testing.assert_allclose(L.global_avgpool_forward(x)[0], x[:, 0])

    def test_max_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            steps, channels = rng.integers(1, 20), rng.integers(1, 6)
            x = rng.normal(size=(1, steps, channels))
            expected = [max(x[0, t, c] for t in range(steps)) for c in range(channels)]
            np.testing.assert_array_equal(L.global_maxpool_forward(x)[0][0], expected)

    def test_avg_gradient_is_one_over_t(self):
        x = np.zeros((1, 4, 2))
        _, cache = L.global_avgpool_forward(x)
        dx, _ = L.global_avgpool_backward(np.ones((1, 2)), cache)
        np.testing.assert_allclose(dx, 0.25)

    def test_masked_pools_ignore_padding(self, rng):
        x = rng.normal(size=(1, 6, 3))
        padded = np.concatenate([x, np.full((1, 4, 3), 50.0)], axis=1)
        for fwd in (L.global_maxpool_forward, L.global_avgpool_forward, L.last_state_forward):
            np.testing.assert_allclose(fwd(padded, np.array([6]))[0], fwd(x)[0], atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize(
        "pair",
        [
            (L.global_maxpool_forward, L.global_maxpool_backward),
            (L.global_avgpool_forward, L.global_avgpool_backward),
            (L.last_state_forward, L.last_state_backward),
        ],
        ids=["max", "avg", "last"],
    )
    def test_gradients(self, pair, seed):
        rng = np.random.default_rng(seed)
        tensors = {"x": rng.normal(size=(3, 7, 4))}
        lengths = np.array([7, 4, 1]) if seed % 2 else None
        fwd = lambda p: pair[0](p["x"], lengths)
        assert layer_grad_error(fwd, with_x(pair[1]), tensors, seed) <= TOL


def blstm_params(rng, features, hidden, scale=0.5):
    params = {}
    for d in ("fw", "bw"):
        params[f"{d}_W"] = rng.normal(scale=scale, size=(features, 4 * hidden))
        params[f"{d}_U"] = rng.normal(scale=scale, size=(hidden, 4 * hidden))
        params[f"{d}_b"] = rng.normal(scale=scale, size=4 * hidden)
    return params


class TestBlstm:
    def test_zero_weights_give_zero_output(self, rng):
        params = {k: np.zeros_like(v) for k, v in blstm_params(rng, 5, 4).items()}
        out, _ = L.blstm_forward(rng.normal(size=(2, 7, 5)), params)
        assert out.shape == (2, 7, 8)
        np.testing.assert_array_equal(out, 0.0)

    def test_directions_match_reference_lstm(self, rng):
        params = blstm_params(rng, 5, 3)
        x = rng.normal(size=(1, 7, 5))
        out, _ = L.blstm_forward(x, params)
        fw = lstm_reference(x[0], params["fw_W"], params["fw_U"], params["fw_b"])
        bw = lstm_reference(x[0, ::-1], params["bw_W"], params["bw_U"], params["bw_b"])[::-1]
        np.testing.assert_allclose(out[0, :, :3], fw, atol=1e-12)
        np.testing.assert_allclose(out[0, :, 3:], bw, atol=1e-12)

    def test_reversal_symmetry(self, rng):
        params = blstm_params(rng, 5, 3)
        swapped = {("bw" if k.startswith("fw") else "fw") + k[2:]: v for k, v in params.items()}
        x = rng.normal(size=(2, 7, 5))
        out, _ = L.blstm_forward(x, params)
        out_rev, _ = L.blstm_forward(x[:, ::-1], swapped)
        expected = np.concatenate([out[:, ::-1, 3:], out[:, ::-1, :3]], axis=2)
        np.testing.assert_allclose(out_rev, expected, atol=1e-12)

    def test_lengths_make_padding_irrelevant(self, rng):
        params = blstm_params(rng, 5, 3)
        x = rng.normal(size=(1, 6, 5))
        padded = np.concatenate([x, np.zeros((1, 5, 5))], axis=1)
        short, _ = L.blstm_forward(x, params)
        long, _ = L.blstm_forward(padded, params, lengths=np.array([6]))
        np.testing.assert_allclose(long[:, :6], short, atol=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        tensors = {"x": rng.normal(size=(2, 7, 5)), **blstm_params(rng, 5, 3)}
        lengths = np.array([7, 3]) if seed % 2 else None

        def fwd(p):
            return L.blstm_forward(p["x"], {k: v for k, v in p.items() if k != "x"}, lengths)

        assert layer_grad_error(fwd, with_x(L.blstm_backward), tensors, seed, h=1e-5) <= TOL


class TestAttention:
    def test_zero_weights_give_mean(self, rng):
        x = rng.normal(size=(2, 5, 4))
        (context, alpha), _ = L.attention_forward(x, np.zeros(4))
        np.testing.assert_allclose(alpha, 0.2)
        np.testing.assert_allclose(context, x.mean(axis=1), atol=1e-12)
        np.testing.assert_allclose(context, L.global_avgpool_forward(x)[0], atol=1e-12)

    def test_single_step(self, rng):
        x = rng.normal(size=(1, 1, 4))
        (context, alpha), _ = L.attention_forward(x, rng.normal(size=4))
        np.testing.assert_array_equal(alpha, [[1.0]])
        np.testing.assert_allclose(context, x[:, 0])

    def test_hand_example(self):
        x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        (context, alpha), _ = L.attention_forward(x, np.array([1.0, 0.0]))
        a1 = math.exp(math.tanh(1.0)) / (math.exp(math.tanh(1.0)) + 1.0)
        assert a1 == pytest.approx(0.6817, abs=5e-5)
        np.testing.assert_allclose(alpha[0], [a1, 1 - a1], atol=1e-12)
        np.testing.assert_allclose(context[0], [a1, 1 - a1], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 12))
    def test_matches_explicit_loops(self, seed, steps):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, steps, 6))
        w = rng.normal(size=6)
        (context, alpha), _ = L.attention_forward(x, w)
        ref_alpha, ref_context = explicit_attention(x[0], w)
        np.testing.assert_allclose(alpha[0], ref_alpha, atol=1e-12)
        np.testing.assert_allclose(context[0], ref_context, atol=1e-12)

    def test_mask_ignores_padding(self, rng):
        x = rng.normal(size=(1, 5, 4))
        w = rng.normal(size=4)
        padded = np.concatenate([x, np.zeros((1, 3, 4))], axis=1)
        (c1, a1), _ = L.attention_forward(x, w)
        (c2, a2), _ = L.attention_forward(padded, w, lengths=np.array([5]))
        np.testing.assert_allclose(a2[:, :5], a1, atol=1e-12)
        np.testing.assert_array_equal(a2[:, 5:], 0.0)
        np.testing.assert_allclose(c2, c1, atol=1e-12)

    def test_wrong_dimension(self):
        with pytest.raises(ShapeError):
            L.attention_forward(np.zeros((1, 3, 4)), np.zeros(5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        tensors = {"x": rng.normal(size=(3, 6, 5)), "w": rng.normal(size=5)}
        lengths = np.array([6, 2, 4]) if seed % 2 else None

        def fwd(p):
            (context, _), cache = L.attention_forward(p["x"], p["w"], lengths)
            return context, cache

        assert layer_grad_error(fwd, with_x(L.attention_backward), tensors, seed) <= TOL


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(L.dense_forward(x, np.eye(4), np.zeros(4))[0], x)

    def test_tanh_range(self, rng):
        x, W, b = rng.normal(size=(50, 4)) * 3, rng.normal(size=(4, 6)), rng.normal(size=6)
        out, _ = L.dense_forward(x, W, b, "tanh")
        # saturated units round to exactly 1.0 in floating point
        assert np.all(np.abs(out) <= 1)
        np.testing.assert_allclose(out, np.tanh(x @ W + b), atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            L.dense_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        tensors = {"x": rng.normal(size=(3, 5)), "W": rng.normal(size=(5, 4)), "b": rng.normal(size=4)}
        activation = "tanh" if seed % 2 else None
        fwd = lambda p: L.dense_forward(p["x"], p["W"], p["b"], activation)
        assert layer_grad_error(fwd, with_x(L.dense_backward), tensors, seed) <= TOL


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = rng.normal(size=(4, 5))
        for mode in ("train", "infer"):
            np.testing.assert_array_equal(L.dropout_forward(x, 0.0, mode, rng)[0], x)

    def test_infer_identity(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(L.dropout_forward(x, 0.2, "infer")[0], x)

    def test_train_statistics(self):
        x = np.ones(1_000_000, dtype=np.float32)
        out, _ = L.dropout_forward(x, 0.2, "train", make_rng(0))
        dropped = np.mean(out == 0)
        assert abs(dropped - 0.2) <= 0.002
        assert abs(out.mean() - 1.0) <= 0.01
        np.testing.assert_allclose(out[out != 0], 1.25, rtol=1e-6)

    def test_backward_uses_same_mask(self, rng):
        x = rng.normal(size=(10, 10))
        out, mask = L.dropout_forward(x, 0.5, "train", make_rng(3))
        dx, _ = L.dropout_backward(np.ones_like(x), mask)
        np.testing.assert_array_equal(dx == 0, out == 0)

    def test_invalid_rate(self, rng):
        with pytest.raises(ValueError):
            L.dropout_forward(np.zeros(3), 1.0, "train", rng)


def test_reverse_index_is_involution():
    idx = L.reverse_index(np.array([5, 3, 1]), 3, 5)
    np.testing.assert_array_equal(idx[0], [4, 3, 2, 1, 0])
    np.testing.assert_array_equal(idx[1], [2, 1, 0, 3, 4])
    np.testing.assert_array_equal(idx[2], [0, 1, 2, 3, 4])
    for row in idx:
        np.testing.assert_array_equal(row[row], np.arange(5))

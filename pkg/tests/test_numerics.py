import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convhtr import numerics as nx


def naive_conv1d(x, w, b, stride, dilation):
    """Direct summation over (t, k, ci, co) with explicit zero padding."""
    bsz, t, c_in = x.shape
    k, _, c_out = w.shape
    t_out = math.ceil(t / stride)
    left = ((k - 1) * dilation) // 2
    out = np.zeros((bsz, t_out, c_out))
    for bi in range(bsz):
        for to in range(t_out):
            for co in range(c_out):
                acc = b[co]
                for kk in range(k):
                    src = to * stride + kk * dilation - left
                    if 0 <= src < t:
                        for ci in range(c_in):
                            acc += w[kk, ci, co] * x[bi, src, ci]
                out[bi, to, co] = acc
    return out


def check(fn, inputs, step=1e-3):
    return nx.grad_check(fn, inputs, step)


def away_from_zero(a, margin=1e-2):
    a = np.array(a, dtype=np.float64)
    a[np.abs(a) < margin] = margin * 3
    return a


class TestConv1d:
    def test_pointwise_scaling(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32).reshape(1, 3, 1)
        w = np.full((1, 1, 1), 2.0, dtype=np.float32)
        out, _ = nx.conv1d(x, w, np.zeros(1, np.float32))
        np.testing.assert_array_equal(out.ravel(), [2, 4, 6])

    @pytest.mark.parametrize("t, stride, expected", [(10, 2, 5), (9, 2, 5), (7, 1, 7), (1, 3, 1)])
    def test_output_length(self, t, stride, expected):
        for k in (1, 3, 5):
            out, _ = nx.conv1d(np.ones((1, t, 2)), np.ones((k, 2, 3)), None, stride)
            assert out.shape == (1, expected, 3)

    def test_matches_naive_loop(self, rng):
        x = rng.standard_normal((2, 7, 3)).astype(np.float32)
        w = rng.standard_normal((5, 3, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out, _ = nx.conv1d(x, w, b, stride=2, dilation=2)
        np.testing.assert_allclose(out, naive_conv1d(x, w, b, 2, 2), atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(nx.ContractError):
            nx.conv1d(np.ones((1, 4, 3)), np.ones((3, 2, 1)), None)

    def test_empty_sequence(self):
        with pytest.raises(nx.ContractError):
            nx.conv1d(np.ones((1, 0, 2)), np.ones((3, 2, 1)), None)

    def test_pointwise_equals_fully_connected(self, rng):
        x = rng.standard_normal((3, 5, 4)).astype(np.float32)
        w = rng.standard_normal((4, 6)).astype(np.float32)
        b = rng.standard_normal(6).astype(np.float32)
        conv, _ = nx.conv1d(x, w[None], b)
        fc, _ = nx.fully_connected(x, w, b)
        np.testing.assert_allclose(conv, fc, atol=1e-6)

    def test_right_padding_does_not_move_receptive_fields(self, rng):
        x = rng.standard_normal((1, 9, 2))
        w = rng.standard_normal((3, 2, 2))
        short, _ = nx.conv1d(x, w, None, stride=2)
        padded = np.concatenate([x, np.zeros((1, 4, 2))], axis=1)
        long, _ = nx.conv1d(padded, w, None, stride=2)
        np.testing.assert_allclose(long[:, :short.shape[1]], short, atol=1e-12)


class TestConv1dVjp:
    def test_zero_upstream(self, rng):
        x = rng.standard_normal((2, 6, 3))
        out, cache = nx.conv1d(x, rng.standard_normal((3, 3, 2)), np.zeros(2), 2)
        for g in nx.conv1d_vjp(cache, np.zeros_like(out)):
            assert not np.any(g)

    def test_pointwise_weight_grad_is_matrix_product(self, rng):
        x = rng.standard_normal((2, 5, 3))
        up = rng.standard_normal((2, 5, 4))
        _, cache = nx.conv1d(x, rng.standard_normal((1, 3, 4)), np.zeros(4))
        _, gw, _ = nx.conv1d_vjp(cache, up)
        np.testing.assert_allclose(gw[0], np.einsum("bti,bto->io", x, up), atol=1e-12)

    @pytest.mark.parametrize("stride, dilation", [(2, 1), (1, 2), (1, 1), (3, 2)])
    def test_finite_differences(self, rng, stride, dilation):
        inputs = {"x": rng.standard_normal((1, 6, 2)), "w": rng.standard_normal((3, 2, 3)),
                  "b": rng.standard_normal(3)}

        def fn(p):
            out, cache = nx.conv1d(p["x"], p["w"], p["b"], stride, dilation)
            return out, lambda g: dict(zip(("x", "w", "b"), nx.conv1d_vjp(cache, g)))

        assert check(fn, inputs) < 1e-2

    def test_mismatched_upstream(self, rng):
        _, cache = nx.conv1d(rng.standard_normal((1, 6, 2)), rng.standard_normal((3, 2, 3)), None)
        with pytest.raises(nx.ContractError):
            nx.conv1d_vjp(cache, np.zeros((1, 5, 3)))


class TestBatchNorm:
    def test_train_standardizes(self, rng):
        x = (rng.standard_normal((4, 10, 3)) * 3 + 2).astype(np.float32)
        state = nx.BatchNormState.fresh(3)
        out, _ = nx.batch_norm(x, np.ones(3, np.float32), np.zeros(3, np.float32), state, "train")
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0, atol=1e-4)
        # epsilon shrinks the variance slightly below 1
        var = x.var(axis=(0, 1))
        np.testing.assert_allclose(out.var(axis=(0, 1)), var / (var + nx.BN_EPSILON), atol=1e-4)

    def test_constant_channel_gives_beta(self):
        x = np.full((2, 5, 2), 0.7, dtype=np.float32)
        state = nx.BatchNormState.fresh(2)
        beta = np.array([0.5, -1.0], np.float32)
        out, _ = nx.batch_norm(x, np.ones(2, np.float32), beta, state, "train")
        np.testing.assert_allclose(out, np.broadcast_to(beta, out.shape), atol=1e-4)

    def test_infer_affine(self, rng):
        x = rng.standard_normal((2, 3, 4))
        state = nx.BatchNormState(np.zeros(4), np.ones(4))
        out, _ = nx.batch_norm(x, np.full(4, 2.0), np.ones(4), state, "infer")
        scale = 1 / math.sqrt(1 + nx.BN_EPSILON)
        np.testing.assert_allclose(out, 2 * x * scale + 1, atol=1e-12)

    def test_infer_ignores_batch(self, rng):
        state = nx.BatchNormState(rng.random(3), rng.random(3) + 0.5)
        x = rng.standard_normal((3, 4, 3))
        a, _ = nx.batch_norm(x, np.ones(3), np.zeros(3), state, "infer")
        b, _ = nx.batch_norm(x[:1], np.ones(3), np.zeros(3), state, "infer")
        np.testing.assert_array_equal(a[:1], b)

    def test_running_stats_update(self):
        x = np.arange(8, dtype=np.float64).reshape(2, 4, 1)
        state = nx.BatchNormState(np.zeros(1), np.ones(1))
        nx.batch_norm(x, np.ones(1), np.zeros(1), state, "train")
        assert state.running_mean[0] == pytest.approx(0.1 * 3.5)
        assert state.running_var[0] == pytest.approx(0.9 + 0.1 * x.var())
        assert np.all(state.running_var > 0)

    def test_degenerate_batch(self):
        with pytest.raises(nx.DegenerateBatchError):
            nx.batch_norm(np.ones((1, 1, 2)), np.ones(2), np.zeros(2), nx.BatchNormState.fresh(2), "train")

    def test_affine_invariance(self, rng):
        x = rng.standard_normal((3, 6, 4))
        scale = rng.uniform(0.5, 3.0, 4)
        shift = rng.standard_normal(4)
        g, b = rng.standard_normal(4), rng.standard_normal(4)
        a, _ = nx.batch_norm(x, g, b, nx.BatchNormState.fresh(4, np.float64), "train")
        c, _ = nx.batch_norm(x * scale + shift, g, b, nx.BatchNormState.fresh(4, np.float64), "train")
        np.testing.assert_allclose(a, c, atol=1e-3)

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_finite_differences(self, rng, mode):
        inputs = {"x": rng.standard_normal((2, 4, 3)), "gamma": rng.standard_normal(3),
                  "beta": rng.standard_normal(3)}

        def fn(p):
            state = nx.BatchNormState(np.full(3, 0.2), np.full(3, 1.5))
            out, cache = nx.batch_norm(p["x"], p["gamma"], p["beta"], state, mode)
            return out, lambda g: dict(zip(("x", "gamma", "beta"), nx.batch_norm_vjp(cache, g)))

        assert check(fn, inputs) < 1e-2


class TestLayerNorm:
    def test_per_frame_standardization(self, rng):
        x = rng.standard_normal((2, 4, 8)) * 5 + 1
        out, _ = nx.layer_norm(x, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-4)
        var = x.var(axis=-1)
        np.testing.assert_allclose(out.var(axis=-1), var / (var + nx.LN_EPSILON), atol=1e-4)

    def test_single_channel(self, rng):
        out, _ = nx.layer_norm(rng.standard_normal((2, 3, 1)), np.ones(1), np.full(1, 0.25))
        np.testing.assert_allclose(out, 0.25)

    def test_direct_formula(self, rng):
        x = rng.standard_normal((2, 4, 8))
        g, b = rng.standard_normal(8), rng.standard_normal(8)
        out, _ = nx.layer_norm(x, g, b)
        for i in range(2):
            for t in range(4):
                f = x[i, t]
                mu = sum(f) / 8
                var = sum((v - mu) ** 2 for v in f) / 8
                expect = [(v - mu) / math.sqrt(var + nx.LN_EPSILON) * g[c] + b[c] for c, v in enumerate(f)]
                np.testing.assert_allclose(out[i, t], expect, atol=1e-5)

    def test_finite_differences(self, rng):
        inputs = {"x": rng.standard_normal((2, 3, 5)), "gamma": rng.standard_normal(5),
                  "beta": rng.standard_normal(5)}

        def fn(p):
            out, cache = nx.layer_norm(p["x"], p["gamma"], p["beta"])
            return out, lambda g: dict(zip(("x", "gamma", "beta"), nx.layer_norm_vjp(cache, g)))

        assert check(fn, inputs) < 1e-2


class TestActivations:
    def test_relu(self):
        out, _ = nx.activation("relu", np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 2])

    def test_sigmoid_zero(self):
        out, cache = nx.activation("sigmoid", np.zeros(1))
        assert out[0] == 0.5
        assert nx.activation_vjp(cache, np.array([3.0]))[0] == pytest.approx(0.75)

    def test_sigmoid_extremes_are_finite(self):
        out, _ = nx.sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("kind", ["relu", "sigmoid"])
    def test_finite_differences(self, rng, kind):
        inputs = {"x": away_from_zero(rng.standard_normal((3, 4)), 5e-2)}

        def fn(p):
            out, cache = nx.activation(kind, p["x"])
            return out, lambda g: {"x": nx.activation_vjp(cache, g)}

        assert check(fn, inputs) < 1e-2

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nx.activation("tanh", np.zeros(1))


class TestLogSoftmax:
    def test_uniform(self):
        out, _ = nx.log_softmax(np.zeros((2, 4)))
        np.testing.assert_allclose(out, math.log(0.25))

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 5))
        a, _ = nx.log_softmax(x)
        b, _ = nx.log_softmax(x + 17.5)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_wide_accumulator_oracle(self, rng):
        import decimal

        x = rng.standard_normal(6) * 4
        out, _ = nx.log_softmax(x.astype(np.float32))
        ctx = decimal.Context(prec=40)
        exps = [ctx.exp(decimal.Decimal(float(v))) for v in x]
        total = sum(exps, decimal.Decimal(0))
        expect = [float(ctx.ln(e / total)) for e in exps]
        np.testing.assert_allclose(out, expect, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        out, _ = nx.log_softmax(rng.standard_normal((4, 7)) * 10)
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-6)

    def test_finite_differences(self, rng):
        inputs = {"x": rng.standard_normal((3, 5))}

        def fn(p):
            out, cache = nx.log_softmax(p["x"])
            return out, lambda g: {"x": nx.log_softmax_vjp(cache, g)}

        assert check(fn, inputs) < 1e-2


class TestFullyConnected:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3))
        out, _ = nx.fully_connected(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(out, x)

    def test_hand_arithmetic(self):
        out, _ = nx.fully_connected(np.array([1.0, 2.0]), np.eye(2), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(out, [4, 6])

    def test_naive_loop(self, rng):
        x = rng.standard_normal((2, 3, 4)).astype(np.float32)
        w = rng.standard_normal((4, 5)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        out, _ = nx.fully_connected(x, w, b)
        expect = np.zeros((2, 3, 5))
        for i in range(2):
            for j in range(3):
                for o in range(5):
                    expect[i, j, o] = b[o] + sum(float(x[i, j, d]) * float(w[d, o]) for d in range(4))
        np.testing.assert_allclose(out, expect, atol=1e-5)

    def test_mismatch(self):
        with pytest.raises(nx.ContractError):
            nx.fully_connected(np.ones((2, 3)), np.ones((4, 2)), None)

    def test_grad_check_linear(self, rng):
        inputs = {"x": rng.standard_normal((2, 3)), "w": rng.standard_normal((3, 4)),
                  "b": rng.standard_normal(4)}

        def fn(p):
            out, cache = nx.fully_connected(p["x"], p["w"], p["b"])
            return out, lambda g: dict(zip(("x", "w", "b"), nx.fully_connected_vjp(cache, g)))

        assert check(fn, inputs) < 1e-4


class TestGlobalAveragePool:
    def test_constant(self):
        out, _ = nx.global_average_pool(np.full((2, 5, 3), 4.5), [5, 2])
        np.testing.assert_allclose(out, 4.5)

    def test_masks_padding(self):
        x = np.array([1.0, 3.0, 100.0, 100.0]).reshape(1, 4, 1)
        out, _ = nx.global_average_pool(x, [2])
        assert out[0, 0] == 2.0

    def test_masked_mean_oracle(self, rng):
        x = rng.standard_normal((3, 6, 4))
        lengths = [6, 1, 4]
        out, _ = nx.global_average_pool(x, lengths)
        for b, n in enumerate(lengths):
            np.testing.assert_allclose(out[b], [sum(x[b, t, c] for t in range(n)) / n for c in range(4)],
                                       atol=1e-6)

    def test_zero_length(self):
        with pytest.raises(nx.ContractError):
            nx.global_average_pool(np.ones((1, 3, 2)), [0])

    def test_finite_differences(self, rng):
        inputs = {"x": rng.standard_normal((2, 5, 3))}

        def fn(p):
            out, cache = nx.global_average_pool(p["x"], [5, 3])
            return out, lambda g: {"x": nx.global_average_pool_vjp(cache, g)}

        assert check(fn, inputs) < 1e-2


class TestDropout:
    def test_infer_identity(self, rng):
        x = rng.standard_normal((4, 4))
        out, _ = nx.dropout(x, 0.5, "infer", None)
        assert out is x

    def test_rate_zero_identity(self, rng):
        x = rng.standard_normal((4, 4))
        for mode in ("train", "infer"):
            np.testing.assert_array_equal(nx.dropout(x, 0.0, mode, rng)[0], x)

    def test_statistics(self):
        x = np.random.default_rng(5).uniform(1.0, 2.0, 10**5)
        out, _ = nx.dropout(x, 0.3, "train", np.random.default_rng(7))
        survivors = out != 0
        assert abs(survivors.mean() - 0.7) < 0.01
        # inverted scaling keeps the expectation
        assert abs(out.mean() / x.mean() - 1) < 0.02

    def test_reproducible_and_vjp_reuses_mask(self, rng):
        x = rng.standard_normal(100)
        a, mask = nx.dropout(x, 0.4, "train", np.random.default_rng(3))
        b, _ = nx.dropout(x, 0.4, "train", np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        g = nx.dropout_vjp(mask, np.ones(100))
        np.testing.assert_array_equal(g == 0, a == 0)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            nx.dropout(np.ones(3), 1.0, "train", np.random.default_rng(0))


class TestGradCheck:
    def test_detects_wrong_gradient(self, rng):
        def fn(p):
            return p["x"] ** 2, lambda g: {"x": g * p["x"]}  # missing factor 2

        assert nx.grad_check(fn, {"x": rng.standard_normal(4) + 3}) > 0.1

    def test_relu_away_from_kink(self, rng):
        x = away_from_zero(rng.standard_normal((4, 4)))

        def fn(p):
            out, mask = nx.relu(p["x"])
            return out, lambda g: {"x": nx.relu_vjp(mask, g)}

        assert nx.grad_check(fn, {"x": x}) < 1e-2

    def test_conv_bn_relu_chain(self, rng):
        inputs = {"x": rng.standard_normal((2, 5, 2)), "w": rng.standard_normal((3, 2, 3)),
                  "gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.standard_normal(3) + 0.5}

        def fn(p):
            h, c1 = nx.conv1d(p["x"], p["w"], None)
            h, c2 = nx.batch_norm(h, p["gamma"], p["beta"], nx.BatchNormState.fresh(3, np.float64))
            out, mask = nx.relu(h)

            def back(g):
                g = nx.relu_vjp(mask, g)
                g, gg, gb = nx.batch_norm_vjp(c2, g)
                gx, gw, _ = nx.conv1d_vjp(c1, g)
                return {"x": gx, "w": gw, "gamma": gg, "beta": gb}

            return out, back

        assert nx.grad_check(fn, inputs) < 1e-2

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            nx.grad_check(lambda p: (p["x"], lambda g: {"x": g}), {"x": np.ones(1)}, step=0)


@settings(max_examples=40, deadline=None)
@given(b=st.integers(1, 3), t=st.integers(1, 20), c_in=st.integers(1, 4), c_out=st.integers(1, 4),
       k=st.integers(1, 5), stride=st.integers(1, 3), dilation=st.integers(1, 3))
def test_conv_shape_algebra(b, t, c_in, c_out, k, stride, dilation):
    out, cache = nx.conv1d(np.ones((b, t, c_in)), np.ones((k, c_in, c_out)), np.zeros(c_out),
                           stride, dilation)
    assert out.shape == (b, math.ceil(t / stride), c_out)
    gx, gw, gb = nx.conv1d_vjp(cache, np.ones_like(out))
    assert gx.shape == (b, t, c_in) and gw.shape == (k, c_in, c_out) and gb.shape == (c_out,)


def test_deterministic(rng):
    x = rng.standard_normal((2, 9, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 4)).astype(np.float32)
    a, _ = nx.conv1d(x, w, None, 2)
    b, _ = nx.conv1d(x, w, None, 2)
    assert a.tobytes() == b.tobytes()


def test_debug_mode_flags_nonfinite(monkeypatch):
    monkeypatch.setattr(nx, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        nx.conv1d(np.full((1, 3, 1), np.inf), np.ones((1, 1, 1)), None)

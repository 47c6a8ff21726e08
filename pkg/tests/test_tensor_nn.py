import math

import numpy as np
import pytest

from wenets import tensor_nn as nn
from wenets.errors import ShapeError


def _conv(weights, bias=None) -> nn.ConvLayer:
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.zeros(weights.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return nn.ConvLayer(weights, bias)


def _brute_conv(x: np.ndarray, layer: nn.ConvLayer) -> np.ndarray:
    n, c_in, length = x.shape
    out = np.zeros((n, layer.f_n, length))
    for b in range(n):
        for o in range(layer.f_n):
            for i in range(length):
                total = layer.bias[o]
                for c in range(c_in):
                    for k in range(layer.f_l):
                        position = i + k - layer.padding
                        if 0 <= position < length:
                            total += layer.weights[o, c, k] * x[b, c, position]
                out[b, o, i] = total
    return out


def test_conv_hand_example() -> None:
    layer = _conv([[[1.0, 2.0, 3.0]]])
    x = np.array([[[0.0, 0.0, 1.0, 0.0, 0.0]]])

    out, _ = nn.conv1d_forward(x, layer)

    np.testing.assert_array_equal(out[0, 0], [0.0, 3.0, 2.0, 1.0, 0.0])


def test_conv_identity_kernel() -> None:
    x = np.random.default_rng(0).standard_normal((2, 1, 9))

    out, _ = nn.conv1d_forward(x, _conv([[[1.0]]]))

    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("f_l", [4, 7])
def test_conv_matches_direct_loop(f_l: int) -> None:
    rng = np.random.default_rng(f_l)
    layer = nn.ConvLayer.initialized(3, 2, f_l, rng, np.float64)
    layer.bias[...] = rng.standard_normal(2)
    x = rng.standard_normal((2, 3, 11))

    out, _ = nn.conv1d_forward(x, layer)

    np.testing.assert_allclose(out, _brute_conv(x, layer), atol=1e-12)


def test_conv_keeps_length_for_first_section() -> None:
    layer = nn.ConvLayer.initialized(1, 192, 11, np.random.default_rng(0))

    out, _ = nn.conv1d_forward(np.zeros((1, 1, 24000), dtype=np.float32), layer)

    assert out.shape == (1, 192, 24000)


def test_conv_rejects_channel_mismatch() -> None:
    with pytest.raises(ShapeError):
        nn.conv1d_forward(np.zeros((1, 2, 5)), _conv([[[1.0]]]))


def test_parallel_conv_matches_sequential() -> None:
    rng = np.random.default_rng(2)
    layer = nn.ConvLayer.initialized(4, 6, 5, rng, np.float64)
    x = rng.standard_normal((8, 4, 50))

    sequential, _ = nn.conv1d_forward(x, layer)
    with nn.execution(deterministic=False, workers=4):
        parallel, _ = nn.conv1d_forward(x, layer)

    np.testing.assert_allclose(parallel, sequential, rtol=1e-12, atol=1e-12)


def test_batchnorm_train_standardizes() -> None:
    rng = np.random.default_rng(1)
    layer = nn.BatchNormLayer.initialized(3, np.float64)
    x = rng.standard_normal((4, 3, 50)) * [[[1.0], [5.0], [0.1]]] + [[[0.0], [3.0], [-2.0]]]

    out, _ = nn.batchnorm_forward(x, layer, "train")

    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2)), x.var(axis=(0, 2)) / (x.var(axis=(0, 2)) + 1e-5), rtol=1e-9)
    np.testing.assert_allclose(layer.running_mean, 0.1 * x.mean(axis=(0, 2)), rtol=1e-12)


def test_batchnorm_identity_on_standardized_input() -> None:
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 2, 40))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)

    out, _ = nn.batchnorm_forward(x, nn.BatchNormLayer.initialized(2, np.float64), "train")

    np.testing.assert_allclose(out, x, atol=1e-4)


def test_batchnorm_eval_is_affine() -> None:
    layer = nn.BatchNormLayer.initialized(1, np.float64)
    layer.gamma[...] = 2.0
    layer.beta[...] = 1.0

    out, _ = nn.batchnorm_forward(np.array([[0.5]]), layer, "eval")

    assert out[0, 0] == pytest.approx(2.0, abs=1e-5)
    assert layer.running_mean[0] == 0.0


def test_batchnorm_train_needs_two_values() -> None:
    with pytest.raises(ShapeError):
        nn.batchnorm_forward(np.ones((1, 2)), nn.BatchNormLayer.initialized(2, np.float64), "train")


def test_prelu_definition() -> None:
    layer = nn.PReLULayer(np.array([0.25]))

    out, _ = nn.prelu_forward(np.array([[-2.0, 3.0]]).reshape(1, 1, 2), layer)
    identity, _ = nn.prelu_forward(np.array([[-2.0, 3.0]]).reshape(1, 1, 2), nn.PReLULayer(np.array([1.0])))

    np.testing.assert_array_equal(out[0, 0], [-0.5, 3.0])
    np.testing.assert_array_equal(identity[0, 0], [-2.0, 3.0])


def test_average_pool() -> None:
    x = np.arange(1.0, 9.0).reshape(1, 1, 8)

    np.testing.assert_array_equal(nn.avgpool1d(x, 4)[0, 0], [2.5, 6.5])
    np.testing.assert_array_equal(nn.avgpool1d(np.full((1, 2, 8), 3.0), 4), np.full((1, 2, 2), 3.0))
    assert nn.avgpool1d(np.zeros((1, 192, 24000)), 4).shape == (1, 192, 6000)


def test_max_pool_values_and_ties() -> None:
    out, argmax = nn.maxpool1d(np.array([[[1.0, 3.0, 2.0, 5.0]]]), 2)
    tie, tie_index = nn.maxpool1d(np.array([[[2.0, 2.0]]]), 2)

    np.testing.assert_array_equal(out[0, 0], [3.0, 5.0])
    np.testing.assert_array_equal(argmax[0, 0], [1, 3])
    assert tie[0, 0, 0] == 2.0
    assert tie_index[0, 0, 0] == 0
    assert nn.maxpool1d(np.zeros((1, 512, 250)), 2)[0].shape == (1, 512, 125)


def test_max_pool_losers_get_no_gradient() -> None:
    rng = np.random.default_rng(8)
    layer = nn.ConvLayer.initialized(1, 2, 1, rng, np.float64)
    layer.weights[...] = np.abs(layer.weights)
    x = np.array([[[10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]]])

    conv_out, conv_cache = nn.conv1d_forward(x, layer)
    pooled, argmax = nn.maxpool1d(conv_out, 4)
    grad_conv = nn.maxpool1d_backward(np.ones_like(pooled), argmax, conv_out.shape)
    grad_x, _ = nn.conv1d_backward(grad_conv, conv_cache)

    assert np.all(grad_conv[:, :, 1:4] == 0.0)
    assert np.all(grad_x[:, :, 1:4] == 0.0)
    assert np.all(grad_x[:, :, 0] != 0.0)


def test_pool_rejects_indivisible_length() -> None:
    with pytest.raises(ShapeError):
        nn.maxpool1d(np.zeros((1, 1, 10)), 4)


def test_dense_examples() -> None:
    out = nn.dense_forward(np.array([[1.0, 1.0]]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
    x = np.random.default_rng(0).standard_normal((3, 4))

    np.testing.assert_array_equal(out[0], [3.0, 7.0])
    np.testing.assert_array_equal(nn.dense_forward(x, np.eye(4), np.zeros(4)), x)


def test_dropout_modes() -> None:
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 5))

    eval_out, _ = nn.dropout_forward(x, 0.5, "eval")
    no_drop, _ = nn.dropout_forward(x, 0.0, "train", rng)

    assert eval_out is x
    assert no_drop is x
    with pytest.raises(ValueError):
        nn.dropout_forward(x, 1.0, "train", rng)


def test_dropout_survivor_statistics() -> None:
    x = np.ones((400, 500))
    p = 0.5

    out, mask = nn.dropout_forward(x, p, "train", np.random.default_rng(10))

    n = x.size
    survivors = np.count_nonzero(mask) / n
    assert abs(survivors - (1 - p)) <= 4 * math.sqrt(p * (1 - p) / n)
    assert out.mean() == pytest.approx(1.0, abs=0.01)


def test_kaiming_statistics_and_determinism() -> None:
    fan_out = 192 * 11
    weights = nn.kaiming_init((192, 1, 11), fan_out, np.random.default_rng(0), np.float64)
    repeats = np.concatenate(
        [nn.kaiming_init((192, 1, 11), fan_out, np.random.default_rng(seed), np.float64).ravel() for seed in range(20)]
    )
    expected_std = math.sqrt(2.0 / fan_out)

    assert repeats.std() == pytest.approx(expected_std, rel=0.05)
    assert abs(repeats.mean()) <= 4 * expected_std / math.sqrt(repeats.size)
    again = nn.kaiming_init((192, 1, 11), fan_out, np.random.default_rng(0), np.float64)
    assert weights.tobytes() == again.tobytes()


def test_adam_zero_gradient_is_fixed_point() -> None:
    w = np.array([1.0, -2.0])
    state = nn.AdamState()

    nn.adam_step({"w": w}, {"w": np.zeros(2)}, state, lr=0.1)

    np.testing.assert_array_equal(w, [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)
    np.testing.assert_array_equal(state.v["w"], 0.0)


def test_adam_first_step_moves_by_lr() -> None:
    w = np.array([1.0])

    nn.adam_step({"w": w}, {"w": np.array([1.0])}, nn.AdamState(), lr=0.1)

    assert w[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_matches_scalar_reference() -> None:
    w = np.array([0.3])
    grads = [0.5, -1.25, 0.75]
    state = nn.AdamState()
    for g in grads:
        nn.adam_step({"w": w}, {"w": np.array([g])}, state, lr=0.01, l2=1e-3)

    ref_w, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        g = g + 1e-3 * ref_w
        m = 0.9 * m + (1 - 0.9) * g
        v = 0.999 * v + (1 - 0.999) * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        ref_w -= 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)

    assert abs(w[0] - ref_w) <= 1e-12
    assert state.t == 3


def test_adam_decay_filter_skips_biases() -> None:
    weights = np.array([1.0])
    bias = np.array([1.0])

    nn.adam_step(
        {"l.weights": weights, "l.bias": bias},
        {"l.weights": np.zeros(1), "l.bias": np.zeros(1)},
        nn.AdamState(),
        lr=0.1,
        l2=1.0,
        decay=lambda name: name.endswith(".weights"),
    )

    assert weights[0] < 1.0
    assert bias[0] == 1.0


def test_adam_rejects_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState(), lr=0.1)


def _layer_cases():
    rng = np.random.default_rng(12)
    batchnorm = nn.BatchNormLayer.initialized(3, np.float64)
    batchnorm.gamma[...] = rng.uniform(0.5, 1.5, 3)
    return {
        "conv": (nn.ConvLayer.initialized(3, 4, 5, rng, np.float64), rng.standard_normal((2, 3, 12))),
        "conv_even": (nn.ConvLayer.initialized(2, 3, 4, rng, np.float64), rng.standard_normal((2, 2, 10))),
        "batchnorm": (batchnorm, rng.standard_normal((4, 3, 6))),
        "batchnorm_dense": (nn.BatchNormLayer.initialized(5, np.float64), rng.standard_normal((6, 5))),
        "prelu": (nn.PReLULayer(rng.uniform(0.1, 0.4, 3)), rng.standard_normal((2, 3, 8))),
        "avgpool": (nn.AvgPool(4), rng.standard_normal((2, 3, 12))),
        "maxpool": (nn.MaxPool(3), rng.standard_normal((2, 3, 12))),
        "dense": (nn.DenseLayer.initialized(6, 4, rng, np.float64), rng.standard_normal((3, 6))),
        "dropout": (nn.Dropout(0.5), rng.standard_normal((3, 6))),
    }


@pytest.mark.parametrize("case", sorted(_layer_cases()))
def test_layer_gradients_match_finite_differences(case: str) -> None:
    layer, x = _layer_cases()[case]

    report = nn.check_layer(layer, x, "train")

    assert report.passed, report.errors
    assert "input" in report.errors
    assert set(layer.parameters()) <= set(report.errors)


def test_batchnorm_eval_gradients() -> None:
    layer = nn.BatchNormLayer.initialized(3, np.float64)
    layer.running_mean[...] = [0.1, -0.2, 0.3]
    layer.running_var[...] = [0.5, 2.0, 1.5]

    report = nn.check_layer(layer, np.random.default_rng(3).standard_normal((2, 3, 4)), "eval")

    assert report.passed, report.errors


def test_corrupted_backward_is_detected() -> None:
    layer, x = _layer_cases()["dense"]

    report = nn.check_layer(layer, x, "train", corrupt=True)

    assert not report.passed
    assert report.max_error > 0.1


def test_check_layer_restores_running_stats() -> None:
    layer, x = _layer_cases()["batchnorm"]
    before = layer.running_mean.copy()

    nn.check_layer(layer, x, "train")

    np.testing.assert_array_equal(layer.running_mean, before)


def test_grad_check_requires_64_bit() -> None:
    w = np.zeros(3, dtype=np.float32)

    with pytest.raises(ValueError, match="64-bit"):
        nn.grad_check(lambda: 0.0, {"w": w}, {"w": np.zeros(3)})


def test_grad_check_floors_tiny_groups_at_global_scale() -> None:
    big = np.zeros(1)
    small = np.zeros(1)

    report = nn.grad_check(
        lambda: float(10.0 * big[0] + 1e-9 * small[0]),
        {"big": big, "small": small},
        {"big": np.array([10.0]), "small": np.array([0.0])},
    )

    # floor = 1e-3 * max(0, 1e-2 * 10)
    assert report.errors["small"] == pytest.approx(1e-9 / 1e-4, rel=1e-3)
    assert report.errors["big"] == pytest.approx(0.0, abs=1e-9)

"""Tensor core: primitive kernels, tape backward and precision handling"""

import numpy as np
import pytest

import dcml_tensor as T
from dcml_shared import FLAGS, DimensionError, NonFiniteError


def test_matmul_identity():
    a = T.Tensor([[1, 2], [3, 4]])
    out = T.matmul(a, T.Tensor(np.eye(2)))
    assert np.array_equal(out.numpy(), [[1, 2], [3, 4]])


def test_matmul_inner_dim_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_global_avg_pool_constant_channels():
    x = np.zeros((4, 4, 3))
    for c, v in enumerate((0.5, -1.0, 2.0)):
        x[:, :, c] = v
    out = T.global_avg_pool(T.Tensor(x))
    assert np.allclose(out.numpy(), [0.5, -1.0, 2.0])


def _direct_conv(x, w, b, stride, pad):
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = b[co]
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[s, i * stride + di, j * stride + dj, :] @ w[di, dj, :, co]
                    out[s, i, j, co] = acc
    return out


@pytest.mark.parametrize("kernel,stride,pad", [(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 1, 3)])
def test_conv2d_matches_direct_loops(f64, rng, kernel, stride, pad):
    x = rng.standard_normal((1, 5, 5, 2))
    w = rng.standard_normal((kernel, kernel, 2, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad)
    assert np.max(np.abs(out.numpy() - _direct_conv(x, w, b, stride, pad))) < 1e-6


def test_conv2d_rejects_5x5_kernel():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.ones((1, 6, 6, 1))), T.Tensor(np.ones((5, 5, 1, 1))))


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.ones((1, 6, 6, 2))), T.Tensor(np.ones((3, 3, 1, 1))))


def test_max_pool_halves_spatial_size():
    out = T.max_pool(T.Tensor(np.ones((1, 48, 48, 2))), size=3, stride=2, padding=1)
    assert out.shape == (1, 24, 24, 2)


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.nan])
    bad = T.Tensor([1.0, np.inf], check_finite=False)
    with pytest.raises(NonFiniteError):
        T.relu(bad)


def test_log_of_zero_rejected():
    with pytest.raises(NonFiniteError):
        T.log(T.Tensor([0.0, 1.0]))


def test_softmax_rows_sum_to_one(rng):
    x = T.Tensor(rng.standard_normal((6, 9)) * 20)
    sums = T.softmax(x).numpy().sum(axis=1)
    assert np.all(np.abs(sums - 1.0) < 1e-6)


def test_l2_normalize_unit_norm_and_zero_row(f64, rng):
    x = rng.standard_normal((3, 5))
    x[1] = 0.0
    out = T.l2_normalize(T.Tensor(x)).numpy()
    norms = np.linalg.norm(out, axis=1)
    assert abs(norms[0] - 1) < 1e-6 and abs(norms[2] - 1) < 1e-6
    assert np.all(out[1] == 0.0)
    assert FLAGS.count("l2_normalize_zero") == 1


def test_backward_of_sum_is_all_ones(rng):
    x = T.Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 4, 2)))


def test_sigmoid_gradient_at_zero():
    x = T.Tensor(0.0, requires_grad=True)
    T.backward(T.sigmoid(x))
    assert abs(float(x.grad) - 0.25) < 1e-7


def test_fan_out_accumulates():
    x = T.Tensor([2.0, 3.0], requires_grad=True)
    T.backward(T.sum_(T.add(T.mul(x, x), x)))
    assert np.allclose(x.grad, [5.0, 7.0])


def test_backward_needs_scalar_root():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        T.backward(T.relu(x))


def test_backward_clears_tape():
    x = T.Tensor([1.0], requires_grad=True)
    T.backward(T.sum_(T.exp(x)))
    assert len(T.get_tape()) == 0


def test_no_grad_records_nothing():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad
    assert len(T.get_tape()) == 0


def _three_layer(x, w1, w2, w3):
    h = T.relu(T.matmul(x, w1))
    h = T.sigmoid(T.matmul(h, w2))
    return T.mean(T.mul(T.matmul(h, w3), T.matmul(h, w3)))


def test_three_layer_gradients_match_finite_differences(f64, rng):
    x = T.Tensor(rng.standard_normal((4, 5)))
    weights = [T.Tensor(rng.standard_normal(s) * 0.5, requires_grad=True)
               for s in ((5, 6), (6, 4), (4, 2))]
    T.backward(_three_layer(x, *weights))
    h = 1e-3
    for w in weights:
        numeric = np.zeros_like(w.data)
        for idx in np.ndindex(*w.shape):
            orig = w.data[idx]
            w.data[idx] = orig + h
            with T.no_grad():
                up = _three_layer(x, *weights).item()
            w.data[idx] = orig - h
            with T.no_grad():
                down = _three_layer(x, *weights).item()
            w.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        err = np.max(np.abs(w.grad - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
        assert err < 1e-4, f"relative error {err}"


def test_backward_is_deterministic(rng):
    data = rng.standard_normal((4, 5))
    w_data = rng.standard_normal((5, 3))
    grads = []
    for _ in range(2):
        w = T.Tensor(w_data, requires_grad=True)
        T.backward(T.mean(T.relu(T.matmul(T.Tensor(data), w))))
        grads.append(w.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_precision_context():
    assert T.get_precision() == 'float32'
    with T.precision('float64'):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(T.Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert abs(loss.item() - np.log(3)) < 1e-6

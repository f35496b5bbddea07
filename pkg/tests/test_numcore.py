import numpy as np
import pytest

from viralnet import kernels
from viralnet.numcore import (DimensionError, LayerParams, NumericalError, avgpool2,
                              avgpool2_backward, conv2d_backward, conv2d_forward, fc_backward,
                              fc_forward, make_rng, relu, relu_backward, sgd_step)

from conftest import central_diff, rel_err


def test_conv_unit_kernel(backend):
    p = LayerParams(np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    out = conv2d_forward(np.ones((1, 3, 3)), p)
    assert out.shape == (1, 3, 3)
    assert np.all(out == 2.0)


def test_conv_zero_kernel_gives_bias(backend, rng):
    p = LayerParams(np.zeros((2, 3, 3, 3)), np.array([0.7, -1.2]))
    out = conv2d_forward(rng.random((3, 8, 9)), p)
    assert np.all(out[0] == 0.7) and np.all(out[1] == -1.2)


def test_conv_ramp_average(backend):
    x = np.arange(16.0).reshape(1, 4, 4)
    p = LayerParams(np.full((1, 1, 2, 2), 0.25), np.zeros(1))
    expected = np.array([[2.5, 3.5, 4.5], [6.5, 7.5, 8.5], [10.5, 11.5, 12.5]])
    np.testing.assert_allclose(conv2d_forward(x, p)[0], expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize("stride,size,k", [(1, 7, 3), (2, 9, 3), (3, 10, 2)])
def test_conv_output_extent(backend, rng, stride, size, k):
    p = LayerParams.uniform((2, 3, k, k), rng)
    out = conv2d_forward(rng.random((2, 3, size, size)), p, stride)
    assert out.shape[2:] == ((size - k) // stride + 1,) * 2


def test_conv_dimension_errors(backend, rng):
    p = LayerParams.uniform((2, 3, 5, 5), rng)
    with pytest.raises(DimensionError) as err:
        conv2d_forward(rng.random((4, 8, 8)), p)
    assert err.value.axis == "channels"
    with pytest.raises(DimensionError) as err:
        conv2d_forward(rng.random((3, 4, 8)), p)
    assert err.value.axis == "height"
    with pytest.raises(DimensionError):
        conv2d_backward(rng.random((3, 8, 8)), p, np.zeros((2, 3, 3)))


def test_conv_backward_zero_upstream(backend, rng):
    p = LayerParams.uniform((2, 3, 3, 3), rng)
    x = rng.random((2, 3, 6, 6))
    dx, (dw, db) = conv2d_backward(x, p, np.zeros((2, 2, 4, 4)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_scalar_chain_rule(backend):
    p = LayerParams(np.array([[[[3.0]]]]), np.array([0.5]))
    dx, (dw, db) = conv2d_backward(np.array([[[2.0]]]), p, np.array([[[4.0]]]))
    assert dx[0, 0, 0] == 12.0 and dw.item() == 8.0 and db.item() == 4.0


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients_match_finite_differences(backend, rng, stride):
    p = LayerParams.uniform((3, 2, 3, 3), rng)
    p.bias[:] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 7, 7))
    out_shape = conv2d_forward(x, p, stride).shape
    up = rng.normal(size=out_shape)

    def loss():
        return float((conv2d_forward(x, p, stride) * up).sum())

    dx, (dw, db) = conv2d_backward(x, p, up, stride)
    for arr, grad in ((x, dx), (p.weight, dw), (p.bias, db)):
        for flat in rng.choice(arr.size, min(10, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            assert rel_err(grad[idx], central_diff(loss, arr, idx)) < 1e-6


def test_conv_backward_accumulates(backend, rng):
    p = LayerParams.uniform((2, 1, 2, 2), rng)
    x = rng.random((1, 4, 4))
    up = rng.random((2, 3, 3))
    _, (dw, _) = conv2d_backward(x, p, up)
    conv2d_backward(x, p, up)
    np.testing.assert_allclose(p.grad_weight, 2 * dw)


def test_conv_is_linear_in_input(backend, rng):
    p = LayerParams.uniform((3, 2, 3, 3), rng)
    x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
    a, b = 1.7, -0.6
    zero = conv2d_forward(np.zeros_like(x), p)
    lhs = conv2d_forward(a * x + b * y, p) - zero
    rhs = a * (conv2d_forward(x, p) - zero) + b * (conv2d_forward(y, p) - zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_backends_agree(rng):
    from viralnet import _pykernels
    try:
        from viralnet import _ckernels
    except ImportError:
        pytest.skip("compiled kernels not built")
    x, w, b = rng.random((2, 3, 9, 8)), rng.random((4, 3, 3, 2)), rng.random(4)
    for stride in (1, 2):
        out = _ckernels.conv2d_forward(x, w, b, stride)
        np.testing.assert_allclose(out, _pykernels.conv2d_forward(x, w, b, stride), atol=1e-12)
        up = rng.random(out.shape)
        for a, c in zip(_ckernels.conv2d_backward(x, w, up, stride, True),
                        _pykernels.conv2d_backward(x, w, up, stride, True)):
            np.testing.assert_allclose(a, c, atol=1e-12)
    img = rng.random((2, 3, 7, 8))
    px, py = rng.uniform(-2, 9, (2, 5, 6)), rng.uniform(-2, 8, (2, 5, 6))
    np.testing.assert_allclose(_ckernels.bilinear_forward(img, px, py),
                               _pykernels.bilinear_forward(img, px, py), atol=1e-14)
    up = rng.random((2, 3, 5, 6))
    for a, c in zip(_ckernels.bilinear_backward(img, px, py, up, True),
                    _pykernels.bilinear_backward(img, px, py, up, True)):
        np.testing.assert_allclose(a, c, atol=1e-13)


def test_fc_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(fc_forward(x, LayerParams(np.eye(3), np.zeros(3))), x)
    b = np.array([0.5, 0.25])
    assert np.array_equal(fc_forward(x, LayerParams(np.zeros((2, 3)), b)), b)


def test_fc_gradients_match_finite_differences(rng):
    p = LayerParams.uniform((4, 5), rng)
    p.bias[:] = rng.normal(size=4)
    x = rng.normal(size=(3, 5))
    up = rng.normal(size=(3, 4))

    def loss():
        return float((fc_forward(x, p) * up).sum())

    dx, (dw, db) = fc_backward(x, p, up)
    for arr, grad in ((x, dx), (p.weight, dw), (p.bias, db)):
        for flat in range(arr.size):
            idx = np.unravel_index(flat, arr.shape)
            assert rel_err(grad[idx], central_diff(loss, arr, idx)) < 1e-6


def test_fc_linear_in_input(rng):
    p = LayerParams.uniform((4, 5), rng)
    x, y = rng.normal(size=5), rng.normal(size=5)
    f = lambda v: fc_forward(v, p) - p.bias  # noqa: E731
    np.testing.assert_allclose(f(2 * x - 3 * y), 2 * f(x) - 3 * f(y), atol=1e-10)


def test_fc_dimension_error():
    with pytest.raises(DimensionError):
        fc_forward(np.ones(4), LayerParams(np.zeros((2, 3)), np.zeros(2)))


def test_relu_cases(rng):
    neg = -rng.random(10) - 0.1
    assert not relu(neg).any()
    assert not relu_backward(neg, np.ones(10)).any()
    pos = rng.random(10) + 0.1
    assert np.array_equal(relu(pos), pos)
    assert np.array_equal(relu_backward(pos, np.arange(10.0)), np.arange(10.0))


def test_relu_gradient_away_from_kink(rng):
    x = rng.normal(size=50)
    x = x[np.abs(x) > 1e-3]
    up = rng.normal(size=x.size)
    g = relu_backward(x, up)
    for i in range(x.size):
        num = central_diff(lambda: float((relu(x) * up).sum()), x, i)
        assert rel_err(g[i], num) < 1e-6


def test_avgpool_examples(rng):
    np.testing.assert_array_equal(avgpool2(np.full((2, 6, 4), 0.3)), np.full((2, 3, 2), 0.3))
    assert avgpool2(np.array([[[0.0, 1.0], [2.0, 3.0]]]))[0, 0, 0] == 1.5
    x = rng.random((3, 16, 10))
    assert abs(avgpool2(x).mean() - x.mean()) < 1e-12


def test_avgpool_odd_extent():
    with pytest.raises(DimensionError):
        avgpool2(np.zeros((1, 5, 4)))


def test_avgpool_backward_matches_finite_differences(rng):
    x = rng.random((2, 4, 6))
    up = rng.normal(size=(2, 2, 3))
    g = avgpool2_backward(up)
    for flat in rng.choice(x.size, 12, replace=False):
        idx = np.unravel_index(flat, x.shape)
        assert rel_err(g[idx], central_diff(lambda: float((avgpool2(x) * up).sum()), x, idx)) < 1e-6


def test_sgd_zero_gradient_keeps_weights():
    p = LayerParams(np.array([[1.0, 2.0]]), np.array([3.0]))
    sgd_step(p, 0.1, 0.9)
    assert np.array_equal(p.weight, [[1.0, 2.0]]) and np.array_equal(p.bias, [3.0])


def test_sgd_plain_step():
    p = LayerParams(np.array([[1.0]]), np.array([0.0]))
    p.grad_weight[:] = 2.0
    sgd_step(p, 0.1, 0.0)
    assert p.weight[0, 0] == pytest.approx(0.8, abs=1e-15)
    assert not p.grad_weight.any()


def test_sgd_momentum_two_steps():
    p = LayerParams(np.array([[0.0]]), np.array([0.0]))
    deltas = []
    for _ in range(2):
        before = p.weight[0, 0]
        p.grad_weight[:] = 1.0
        sgd_step(p, 0.1, 0.9)
        deltas.append(p.weight[0, 0] - before)
    np.testing.assert_allclose(deltas, [-0.1, -0.19], atol=1e-15)


def test_sgd_rejects_non_finite():
    p = LayerParams(np.zeros((1, 1)), np.zeros(1), name="head")
    p.grad_bias[:] = np.nan
    with pytest.raises(NumericalError, match="head.bias"):
        sgd_step(p, 0.1)


def test_zero_grad_keeps_weights(rng):
    p = LayerParams.uniform((3, 4), rng)
    w = p.weight.copy()
    p.grad_weight += 1.0
    p.zero_grad()
    assert np.array_equal(p.weight, w) and not p.grad_weight.any()
    assert p.grad_weight.shape == p.weight.shape == p.mom_weight.shape


def test_rng_is_deterministic():
    a, b = make_rng(99), make_rng(99)
    assert np.array_equal(a.random(20), b.random(20))
    assert not np.array_equal(make_rng(1).random(5), make_rng(2).random(5))


def test_uniform_init_bounds(rng):
    p = LayerParams.uniform((8, 3, 5, 5), rng)
    limit = np.sqrt(6 / 75)
    assert np.abs(p.weight).max() <= limit and not p.bias.any()


def test_backend_switch_roundtrip():
    prev = kernels.use_backend("python")
    assert kernels.BACKEND == "python"
    kernels.use_backend(prev)
    assert kernels.BACKEND == prev
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")

import itertools

import numpy as np
import pytest

from neuromamba.errors import ShapeError
from neuromamba.tensor import (ConvSpec, Volume, conv1d, conv3d, init_conv3d, instance_norm,
                               pointwise, xavier_uniform)


def conv3d_oracle(x, w, b, pad, stride):
    """Direct summation over each output voxel's receptive field."""
    c_out, c_in, kd, kh, kw = w.shape
    _, D, H, W = x.shape
    out_ext = [(n + 2 * p - k) // s + 1 for n, k, p, s in zip((D, H, W), (kd, kh, kw), pad, stride)]
    out = np.zeros([c_out] + out_ext)
    for o, d, h, x_ in itertools.product(range(c_out), *map(range, out_ext)):
        acc = b[o]
        for i, a, bb, c in itertools.product(range(c_in), range(kd), range(kh), range(kw)):
            zd = d * stride[0] + a - pad[0]
            zh = h * stride[1] + bb - pad[1]
            zw = x_ * stride[2] + c - pad[2]
            if 0 <= zd < D and 0 <= zh < H and 0 <= zw < W:
                acc += w[o, i, a, bb, c] * x[i, zd, zh, zw]
        out[o, d, h, x_] = acc
    return out


def test_conv3d_pointwise_scaling(backend, rng):
    x = rng.normal(size=(1, 3, 4, 5))
    spec = ConvSpec(np.full((1, 1, 1, 1, 1), 2.0), np.zeros(1))
    np.testing.assert_array_equal(conv3d(x, spec), 2 * x)


def test_conv3d_delta_kernel_is_identity(backend, rng):
    x = rng.normal(size=(1, 4, 5, 6))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(conv3d(x, ConvSpec(w, padding=1)), x)


def test_conv3d_all_ones_matches_direct_summation(backend):
    x = np.ones((1, 5, 5, 5))
    w = np.ones((1, 1, 3, 3, 3))
    out = conv3d(x, ConvSpec(w, padding=1))
    expected = conv3d_oracle(x, w, np.zeros(1), (1, 1, 1), (1, 1, 1))
    np.testing.assert_array_equal(out, expected)
    assert out[0, 2, 2, 2] == 27
    assert out[0, 0, 2, 2] == 18  # face centre
    assert out[0, 0, 0, 0] == 8


@pytest.mark.parametrize("stride,pad", [((1, 1, 1), (1, 1, 1)), ((1, 2, 2), (0, 1, 1)),
                                        ((2, 1, 3), (1, 0, 2))])
def test_conv3d_random_matches_oracle(backend, rng, stride, pad):
    x = rng.normal(size=(2, 4, 5, 6))
    w = rng.normal(size=(3, 2, 3, 2, 3))
    b = rng.normal(size=3)
    out = conv3d(x, ConvSpec(w, b, pad, stride))
    np.testing.assert_allclose(out, conv3d_oracle(x, w, b, pad, stride), atol=1e-12)


def test_conv3d_is_linear(backend, rng):
    spec = init_conv3d(rng, 2, 3)
    x, y = rng.normal(size=(2, 2, 4, 5, 6))
    a, b = 1.7, -0.3
    lhs = conv3d(a * x + b * y, spec)
    rhs = a * conv3d(x, spec) + b * conv3d(y, spec)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_conv3d_is_pure(backend, rng):
    spec = init_conv3d(rng, 2, 2)
    x = rng.normal(size=(2, 3, 4, 5))
    x_copy = x.copy()
    assert np.array_equal(conv3d(x, spec), conv3d(x, spec))
    assert np.array_equal(x, x_copy)


def test_conv3d_backends_agree(rng):
    from neuromamba import _accel
    spec = init_conv3d(rng, 3, 4, stride=(1, 2, 2), padding=1)
    x = rng.normal(size=(3, 4, 8, 8))
    prev = _accel.set_backend("numba")
    a = conv3d(x, spec)
    _accel.set_backend("numpy")
    b = conv3d(x, spec)
    _accel.set_backend(prev)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_conv3d_errors_name_the_axis():
    spec = ConvSpec(np.ones((1, 1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="width"):
        conv3d(np.ones((1, 4, 4, 2)), spec)
    with pytest.raises(ShapeError, match="channel"):
        conv3d(np.ones((2, 4, 4, 4)), spec)


def test_conv1d_examples():
    a, b, c = 3.0, -1.0, 7.0
    np.testing.assert_array_equal(conv1d([[a, b, c]], ConvSpec(np.ones((1, 1, 1)))), [[a, b, c]])
    shift = ConvSpec(np.array([[[1.0, 0.0, 0.0]]]), padding=1)
    np.testing.assert_array_equal(conv1d([[a, b, c]], shift), [[0.0, a, b]])
    box = ConvSpec(np.ones((1, 1, 3)), padding=1)
    np.testing.assert_array_equal(conv1d([[1.0, 2.0, 3.0]], box), [[3.0, 6.0, 5.0]])


def test_conv1d_shared_across_lengths(rng):
    spec = ConvSpec(rng.normal(size=(2, 2, 3)), rng.normal(size=2), padding=1)
    for n in (1, 4, 9):
        v = rng.normal(size=(2, n))
        out = conv1d(v, spec)
        vp = np.pad(v, ((0, 0), (1, 1)))
        ref = np.array([[spec.bias[o] + sum(spec.weight[o, i, k] * vp[i, t + k]
                                            for i in range(2) for k in range(3))
                         for t in range(n)] for o in range(2)])
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_rejects_empty():
    with pytest.raises(ShapeError):
        conv1d(np.zeros((1, 0)), ConvSpec(np.ones((1, 1, 1))))


def test_conv1d_is_linear(rng):
    spec = ConvSpec(rng.normal(size=(3, 2, 3)), padding=1)
    x, y = rng.normal(size=(2, 2, 11))
    lhs = conv1d(2.5 * x - 4 * y, spec)
    assert np.max(np.abs(lhs - (2.5 * conv1d(x, spec) - 4 * conv1d(y, spec)))) <= 1e-12


def test_instance_norm_examples():
    np.testing.assert_array_equal(instance_norm(np.full((1, 5), 3.0)), np.zeros((1, 5)))
    np.testing.assert_allclose(instance_norm(np.array([[-1.0, 1.0]]), eps=1e-14), [[-1.0, 1.0]],
                               atol=1e-12)
    out = instance_norm(np.array([[0.0, 1.0, 2.0, 3.0]]), eps=0.0)
    np.testing.assert_allclose(out, [[-1.3416, -0.4472, 0.4472, 1.3416]], atol=1e-4)


def test_instance_norm_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 6))
    eps = 1e-5
    out = instance_norm(x, eps=eps)
    for c in range(4):
        var = x[c].var()
        assert abs(out[c].mean()) <= 1e-10
        assert abs(out[c].var() - 1.0 / (1.0 + eps / var)) <= 1e-6


def test_instance_norm_affine(rng):
    x = rng.normal(size=(2, 10))
    out = instance_norm(x, gamma=[2.0, 3.0], beta=[1.0, -1.0])
    base = instance_norm(x)
    np.testing.assert_allclose(out, base * [[2.0], [3.0]] + [[1.0], [-1.0]])


def test_pointwise():
    assert pointwise(0.0, "sigmoid") == 0.5
    assert pointwise(-3.0, "relu") == 0.0
    assert pointwise(3.0, "relu") == 3.0
    assert abs(pointwise(2.0, "sigmoid") - 0.8808) < 1e-4
    assert np.isfinite(pointwise(np.array([-1e4, 1e4]), "sigmoid")).all()
    with pytest.raises(ValueError):
        pointwise(1.0, "tanh")


def test_xavier_bounds_and_seed():
    w1 = xavier_uniform(np.random.default_rng(7), (4, 2, 3, 3, 3))
    w2 = xavier_uniform(np.random.default_rng(7), (4, 2, 3, 3, 3))
    assert np.array_equal(w1, w2)
    assert np.abs(w1).max() < np.sqrt(6 / (2 * 27 + 4 * 27))


def test_volume_contract():
    v = Volume(np.zeros((2, 3, 4)), resolution=(40, 4))
    assert v.channels == 1 and v.dims == (2, 3, 4) and v.resolution == (40.0, 4.0)
    with pytest.raises(ShapeError):
        Volume(np.zeros((0, 3, 4)))

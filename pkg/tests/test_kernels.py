import numpy as np
import pytest
from hypothesis import given, strategies as st

from wsevo import kernels
from wsevo.tensor import Conv2d

from oracles import naive_conv2d

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not importable")


@pytest.fixture
def backend():
    prev = kernels.get_backend()
    yield kernels.set_backend
    kernels.set_backend(prev)


def _run_all(x, w, b, dy, stride, padding):
    y = kernels.conv2d_forward(x, w, b, stride, padding)
    dx, dw, db = kernels.conv2d_backward(x, w, dy, stride, padding)
    p, idx = kernels.maxpool2d_forward(y, 2, 2)
    dp = kernels.maxpool2d_backward(np.ones_like(p), idx, y.shape, 2, 2)
    return y, dx, dw, db, p, idx, dp


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)])
def test_backends_agree(backend, stride, padding, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 9, 9)).astype(np.float32)
    w = rng.standard_normal((4, 2, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    ho = (9 + 2 * padding - k) // stride + 1
    dy = rng.standard_normal((3, 4, ho, ho)).astype(np.float32)
    results = {}
    for name in kernels.BACKENDS:
        backend(name)
        results[name] = _run_all(x, w, b, dy, stride, padding)
    for a, c in zip(results["numba"], results["numpy"]):
        np.testing.assert_allclose(a, c, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("name", kernels.BACKENDS)
def test_conv_matches_naive_loops(backend, name):
    backend(name)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(kernels.conv2d_forward(x, w, b, 2, 1), naive_conv2d(x, w, b, 2, 1), rtol=1e-12)


def test_maxpool_first_max_wins_on_ties(backend):
    x = np.ones((1, 1, 2, 2), np.float32)
    for name in kernels.BACKENDS:
        backend(name)
        _, idx = kernels.maxpool2d_forward(x)
        assert idx[0, 0, 0, 0] == 0


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_avgpool_drops_remainder():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    out = kernels.avgpool2d(x, 2)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)


@given(h=st.integers(1, 12), k=st.integers(1, 5), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_output_size_formula(h, k, stride, pad):
    expected = (h + 2 * pad - k) // stride + 1
    if expected < 1:
        with pytest.raises(ValueError):
            Conv2d(1, 1, k, stride, pad).output_shape((1, h, h))
        return
    assert Conv2d(1, 1, k, stride, pad).output_shape((1, h, h)) == (1, expected, expected)
    y = kernels.conv2d_forward(np.zeros((1, 1, h, h), np.float32), np.zeros((1, 1, k, k), np.float32),
                               np.zeros(1, np.float32), stride, pad)
    assert y.shape == (1, 1, expected, expected)

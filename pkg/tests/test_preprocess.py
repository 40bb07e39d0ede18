import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from wsevo.dataset import Sample
from wsevo.preprocess import (
    IMAGENET_MEAN, IMAGENET_STD, ConfigurationError, DatasetStats, InputRangeError, compute_dsm_sigma,
    destandardize_ortho, destandardize_wse, prepare_samples, standardize_dsm, standardize_ortho,
    standardize_wse,
)

UNIT = DatasetStats(1.0)
finite_dsm = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                    elements=st.floats(-50, 50))


def test_default_imagenet_constants():
    s = DatasetStats(2.0)
    assert s.imagenet_mean == (0.485, 0.456, 0.406)
    assert s.imagenet_std == (0.229, 0.224, 0.225)


@pytest.mark.parametrize("sigma", [0.0, -1.0, np.nan])
def test_non_positive_sigma_is_configuration_error(sigma):
    with pytest.raises(ConfigurationError):
        DatasetStats(sigma)


def test_constant_dsm_annihilated():
    out, mean = standardize_dsm(np.full((4, 4), 200.0), UNIT)
    assert mean == 200.0
    assert np.all(out == 0)


def test_hand_dsm_example():
    out, mean = standardize_dsm(np.array([[200, 202], [198, 200]], float), UNIT)
    assert mean == 200.0
    np.testing.assert_array_equal(out, [[0, 1], [-1, 0]])


def test_sigma_linearity():
    d = np.random.default_rng(0).uniform(190, 210, (5, 5))
    a, _ = standardize_dsm(d, DatasetStats(0.5))
    b, _ = standardize_dsm(d, UNIT)
    np.testing.assert_allclose(a, 2 * b, rtol=1e-6)


def test_dsm_rejects_empty_and_nonfinite():
    with pytest.raises(InputRangeError):
        standardize_dsm(np.zeros((0, 0)), UNIT)
    with pytest.raises(InputRangeError):
        standardize_dsm(np.array([[1.0, np.nan]]), UNIT)


@pytest.mark.parametrize("pred,mean,expected", [(0.0, 200.0, 200.0), (1.0, 200.0, 202.0)])
def test_destandardize_examples(pred, mean, expected):
    assert destandardize_wse(pred, mean, UNIT) == expected


@pytest.mark.parametrize("sigma", [0.01, 0.7, 3.0, 25.0])
def test_wse_round_trip_known_value(sigma):
    stats = DatasetStats(sigma)
    t = standardize_wse(199.37, 200.4, stats)
    assert abs(destandardize_wse(t, 200.4, stats) - 199.37) < 1e-5


def test_ortho_examples():
    img = np.empty((3, 1, 2))
    img[:, 0, 0] = IMAGENET_MEAN
    img[:, 0, 1] = (0.714, 0.456, 0.406)
    out = standardize_ortho(img, UNIT)
    np.testing.assert_allclose(out[:, 0, 0], 0, atol=1e-7)
    np.testing.assert_allclose(out[:, 0, 1], [1.0, 0, 0], atol=1e-6)
    zero = standardize_ortho(np.zeros((3, 2, 2)), UNIT)
    expected = -np.array(IMAGENET_MEAN) / np.array(IMAGENET_STD)
    np.testing.assert_allclose(zero[:, 1, 1], expected, rtol=1e-6)


@pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
def test_ortho_range_enforced(bad):
    img = np.full((3, 2, 2), 0.5)
    img[1, 1, 0] = bad
    with pytest.raises(InputRangeError):
        standardize_ortho(img, UNIT)


@given(finite_dsm, st.floats(-1000, 1000), st.floats(0.05, 20))
def test_dsm_zero_mean_and_altitude_invariant(d, offset, sigma):
    stats = DatasetStats(sigma)
    a, ma = standardize_dsm(d, stats)
    b, mb = standardize_dsm(d + offset, stats)
    assert abs(float(a.astype(np.float64).mean())) < 1e-5
    np.testing.assert_allclose(a, b, atol=1e-4)
    assert mb == pytest.approx(ma + offset, abs=1e-6)


@given(st.floats(-100, 400), st.floats(-100, 400), st.floats(0.01, 50))
def test_wse_inverse_identity(wse, mean, sigma):
    stats = DatasetStats(sigma)
    assert abs(destandardize_wse(standardize_wse(wse, mean, stats), mean, stats) - wse) < 1e-5


@given(arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)))
def test_ortho_invertible(x):
    back = destandardize_ortho(standardize_ortho(x, UNIT), UNIT)
    np.testing.assert_allclose(back, x, atol=1e-6)


def test_compute_sigma_pools_pixels():
    assert compute_dsm_sigma([np.zeros((2, 2)), np.full((2, 2), 2.0)]) == 1.0
    with pytest.raises(ConfigurationError):
        compute_dsm_sigma([])


def test_prepare_stacks_four_channels_and_inverts():
    rng = np.random.default_rng(2)
    samples = [Sample(rng.uniform(0, 1, (3, 4, 4)), rng.uniform(199, 201, (4, 4)), wse=200.1 + i / 10)
               for i in range(3)]
    stats = DatasetStats(compute_dsm_sigma([s.dsm for s in samples]))
    ps = prepare_samples(samples, stats)
    assert ps.x.shape == (3, 4, 4, 4) and ps.input_shape == (4, 4, 4)
    np.testing.assert_allclose(destandardize_wse(ps.target, ps.dsm_mean, stats), ps.wse, atol=1e-5)
    sub = ps.subset([2])
    assert len(sub) == 1 and sub.wse[0] == ps.wse[2]

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sslkd.labels import Codebook, cluster_purity, decimate, kmeans_assign, kmeans_fit
from sslkd.errors import InsufficientDataError, ShapeError


def blobs(seed, n=200):
    rng = np.random.default_rng(seed)
    a = rng.normal(5.0, 1.0, size=(n, 3))
    b = rng.normal(-5.0, 1.0, size=(n, 3))
    return np.concatenate([a, b])


def test_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(50, 4))
    cb = kmeans_fit(x, 1)
    np.testing.assert_allclose(cb.centroids[0], x.mean(axis=0), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_two_blobs_recovered(seed):
    cb = kmeans_fit(blobs(seed), 2, seed=seed)
    c = cb.centroids[np.argsort(cb.centroids[:, 0])]
    assert np.max(np.abs(c[0] + 5.0)) < 0.5
    assert np.max(np.abs(c[1] - 5.0)) < 0.5


def test_inertia_non_increasing():
    x = np.random.default_rng(1).normal(size=(500, 6))
    cb = kmeans_fit(x, 8, max_iters=100, seed=3)
    h = np.array(cb.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_fit_deterministic_and_fixed_point():
    x = np.random.default_rng(2).normal(size=(300, 5))
    a = kmeans_fit(x, 6, max_iters=200, seed=4)
    b = kmeans_fit(x, 6, max_iters=200, seed=4)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    again = kmeans_fit(x, 6, max_iters=200, init=a.centroids)
    np.testing.assert_array_equal(again.centroids, a.centroids)
    assert len(set(again.inertia_history)) == 1


def test_too_few_frames():
    with pytest.raises(InsufficientDataError):
        kmeans_fit(np.zeros((3, 2)), 4)


def test_assign_exact_and_tie():
    cents = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [9.0, 1.0], [3.0, 0.0]])
    cb = Codebook(cents)
    assert kmeans_assign(np.array([[9.0, 1.0]]), cb)[0] == 3
    # (2, 0) is equidistant from centroids 1 and 4
    assert kmeans_assign(np.array([[2.0, 0.0]]), cb)[0] == 1
    with pytest.raises(ShapeError):
        kmeans_assign(np.zeros((2, 3)), cb)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
def test_assign_matches_brute_force(x, cents):
    labels = kmeans_assign(x, Codebook(cents))
    for i, row in enumerate(x):
        d = [float(np.sum((row - c) ** 2)) for c in cents]
        assert 0 <= labels[i] < 4
        assert d[labels[i]] == min(d)
        assert labels[i] == d.index(min(d))


def test_decimate_and_purity():
    assert decimate(np.arange(7)[:, None]).ravel().tolist() == [0, 2, 4, 6]
    truth = np.array([0, 0, 1, 1, 2, 2])
    assert cluster_purity(np.array([5, 5, 3, 3, 3, 3]), truth) == pytest.approx(4 / 6)
    assert cluster_purity(truth, truth) == 1.0

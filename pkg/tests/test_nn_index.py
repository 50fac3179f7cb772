import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from resflow import nn_index
from resflow.errors import EmptyCloud
from resflow.nn_index import NeighborIndex, brute_force, build, nearest

BACKENDS = sorted(nn_index.BACKENDS)


def oracle(P, Q):
    """Exhaustive scan; argmin returns the first (smallest) index among ties."""
    d2 = ((P[None, :, :] - Q[:, None, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, np.sqrt(d2[np.arange(len(Q)), idx])


def test_compiled_backend_available():
    # the extension is part of the normal build; the fallback still runs everywhere
    assert "python" in BACKENDS
    assert nn_index.DEFAULT_BACKEND in BACKENDS


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_point(backend):
    idx = NeighborIndex([[1.0, 2.0, 3.0]], backend=backend)
    Q = np.random.default_rng(0).normal(size=(20, 3))
    i, d = idx.query(Q)
    assert np.all(i == 0)
    np.testing.assert_allclose(d, np.linalg.norm(Q - [1, 2, 3], axis=1))


@pytest.mark.parametrize("backend", BACKENDS)
def test_hand_examples(backend):
    idx = NeighborIndex([[0.0, 0, 0], [10.0, 0, 0]], backend=backend)
    nb = nearest(idx, [4.0, 0, 0])
    assert nb.index == 0 and nb.distance == 4.0
    np.testing.assert_array_equal(nb.point, [0, 0, 0])
    nb = idx.nearest([10.0, 0, 0])
    assert nb.index == 1 and nb.distance == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_brute_force_large(backend):
    rng = np.random.default_rng(1)
    P = rng.uniform(-5, 5, size=(10_000, 3))
    Q = rng.uniform(-6, 6, size=(1000, 3))
    i, d = NeighborIndex(P, backend=backend).query(Q)
    oi, od = oracle(P, Q)
    np.testing.assert_array_equal(i, oi)
    np.testing.assert_array_equal(d, od)


@pytest.mark.parametrize("backend", BACKENDS)
def test_duplicates_return_lowest_index(backend):
    rng = np.random.default_rng(2)
    base = rng.integers(0, 4, size=(60, 3)).astype(float)
    P = np.concatenate([base, base, base[::-1]])  # every point appears several times
    Q = np.concatenate([base, rng.integers(0, 4, size=(200, 3)) + 0.5])  # exact hits and equidistant queries
    i, d = NeighborIndex(P, leaf_size=4, backend=backend).query(Q)
    oi, od = oracle(P, Q)
    np.testing.assert_array_equal(i, oi)
    np.testing.assert_array_equal(d, od)


def test_backends_agree_and_are_deterministic():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(3000, 3))
    Q = rng.normal(size=(500, 3))
    results = [NeighborIndex(P, backend=b).query(Q) for b in BACKENDS for _ in range(2)]
    for i, d in results[1:]:
        np.testing.assert_array_equal(i, results[0][0])
        np.testing.assert_array_equal(d, results[0][1])


def test_brute_force_helper_matches_oracle():
    rng = np.random.default_rng(4)
    P, Q = rng.normal(size=(300, 3)), rng.normal(size=(50, 3))
    np.testing.assert_array_equal(brute_force(P, Q)[0], oracle(P, Q)[0])


def test_empty_and_snapshot():
    with pytest.raises(EmptyCloud):
        build(np.zeros((0, 3)))
    P = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    idx = build(P)
    P[0] = [100, 100, 100]  # the index keeps its own copy
    assert idx.nearest([0.1, 0, 0]).index == 0
    with pytest.raises(ValueError):
        idx.points[0, 0] = 1.0


points = arrays(np.float64, st.tuples(st.integers(1, 80), st.just(3)),
                elements=st.floats(-3, 3, allow_nan=False, width=16))


@settings(max_examples=60, deadline=None)
@given(points, points, st.integers(1, 20))
def test_property_exact(P, Q, leaf):
    oi, od = oracle(P, Q)
    for b in BACKENDS:
        i, d = NeighborIndex(P, leaf_size=leaf, backend=b).query(Q)
        np.testing.assert_array_equal(i, oi)
        np.testing.assert_array_equal(d, od)

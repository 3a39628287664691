import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from lid_align import knn
from lid_align.knn import NeighborList, neighbors, neighbors_batch, pairwise_distances, rank_rows


def test_simple_example():
    nl = neighbors([0.0], [3.0, -1.0, 2.0, 10.0], 3)
    assert nl.indices.tolist() == [1, 2, 0]
    assert nl.distances.tolist() == [1.0, 2.0, 3.0]
    assert nl.k == 3 and nl.r_max == 3.0


def test_ties_break_by_index():
    nl = neighbors([0.0, 0.0], [[1, 0], [0, 1], [-1, 0], [0, -1]], 3)
    assert nl.indices.tolist() == [0, 1, 2]


def test_exclude_self():
    refs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
    nl = neighbors(refs[0], refs, 2, exclude_self=True)
    assert nl.indices.tolist() == [2, 1]
    nl = neighbors(refs[2], refs, 2, exclude_self=True, self_index=2)
    assert nl.indices.tolist() == [0, 1]
    with pytest.raises(ValueError):
        neighbors(refs[0], refs, 2, exclude_self=True, self_index=1)


def test_k_bounds():
    with pytest.raises(ValueError):
        neighbors([0.0], [1.0, 2.0], 3)
    with pytest.raises(ValueError):
        neighbors([0.0], [1.0, 2.0], 0)
    with pytest.raises(ValueError):
        rank_rows(np.ones((1, 2)), 2, exclude=np.array([0]))


def test_unsorted_neighbor_list_rejected():
    with pytest.raises(ValueError):
        NeighborList(np.array([2.0, 1.0]), np.array([0, 1]))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        neighbors(np.zeros(3), np.zeros((4, 2)), 1)


sets = st.integers(2, 30).flatmap(lambda m: st.tuples(
    hnp.arrays(np.float64, 3, elements=st.floats(-10, 10)),
    hnp.arrays(np.float64, (m, 3), elements=st.floats(-10, 10)),
    st.integers(1, m)))


@given(sets)
def test_neighbors_match_sorting_oracle(case):
    q, R, k = case
    nl = neighbors(q, R, k)
    d = np.sqrt(((R - q) ** 2).sum(axis=1))
    order = sorted(range(len(R)), key=lambda j: (d[j], j))[:k]
    assert nl.indices.tolist() == order
    assert np.allclose(nl.distances, d[order], rtol=1e-12, atol=0)
    assert np.all(np.diff(nl.distances) >= 0)


@given(sets)
def test_prefix_property(case):
    q, R, k = case
    big = neighbors(q, R, k)
    for j in range(1, k + 1):
        small = neighbors(q, R, j)
        assert small.indices.tolist() == big.indices[:j].tolist()


def test_batch_equals_single_and_threads(rng):
    Q, R = rng.normal(size=(600, 5)), rng.normal(size=(300, 5))
    d1, i1 = neighbors_batch(Q, R, 7)
    for n in (0, 299, 599):
        nl = neighbors(Q[n], R, 7)
        assert np.array_equal(nl.distances, d1[n]) and np.array_equal(nl.indices, i1[n])
    knn.set_threads(3)
    try:
        d3, i3 = neighbors_batch(Q, R, 7)
    finally:
        knn.set_threads(1)
    assert np.array_equal(d1, d3) and np.array_equal(i1, i3)
    with pytest.raises(ValueError):
        knn.set_threads(0)


def test_pairwise_shape_and_flattening(rng):
    A = rng.normal(size=(4, 2, 3))
    assert pairwise_distances(A, A).shape == (4, 4)
    assert np.allclose(np.diag(pairwise_distances(A, A)), 0)

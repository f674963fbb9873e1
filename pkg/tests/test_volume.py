import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from celis.volume import (N_TRANSFORMS, RegionGraph, apply_transform, build_region_graph,
                          check_affinities, check_labels, inverse_transform, zero_far_faces)


def test_check_labels_rejects_bad_input():
    with pytest.raises(ValueError):
        check_labels(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        check_labels(np.zeros((2, 2, 2), dtype=float))
    with pytest.raises(ValueError):
        check_labels(-np.ones((2, 2, 2), dtype=int))


def test_check_affinities_range_and_far_faces():
    with pytest.raises(ValueError):
        check_affinities(np.full((3, 2, 2, 2), 1.5))
    aff = check_affinities(np.ones((3, 4, 5, 6)))
    assert aff[0, -1].sum() == 0 and aff[1, :, -1].sum() == 0 and aff[2, :, :, -1].sum() == 0
    assert aff[0, :-1].min() == 1


def test_region_graph_two_blocks():
    sv = np.zeros((4, 2, 2), dtype=np.int64)
    sv[:2] = 1
    sv[2:] = 2
    g = build_region_graph(sv)
    assert list(g.edges) == [(1, 2)]
    assert g.edges[(1, 2)].contact == 4


def test_region_graph_background_not_adjacent():
    sv = np.array([1, 0, 2]).reshape(3, 1, 1)
    g = build_region_graph(sv)
    assert g.edges == {}
    with pytest.raises(ValueError):
        build_region_graph(np.zeros((2, 2, 2), dtype=int))


def test_merge_contracts_parallel_edges():
    # 1 - 2 - 3 chain plus 1 - 3: merging 1 and 2 unifies the two edges to 3
    g = RegionGraph([1, 2, 3], {(1, 2): 5, (2, 3): 2, (1, 3): 7})
    root = g.merge(2, 1)
    assert root == 1
    assert g.edges == {(1, 3): g.edges[(1, 3)]}
    assert g.edges[(1, 3)].contact == 9
    assert g.edges[(1, 3)].sv_pair == (1, 3)
    assert g.find(2) == 1 and g.segments == [1, 3]
    with pytest.raises(ValueError):
        g.merge(1, 2)


def test_relabel_uses_smallest_member():
    sv = np.arange(1, 9).reshape(2, 2, 2)
    g = build_region_graph(sv)
    g.merge(8, 4)
    g.merge(4, 2)
    lab = g.relabel(sv)
    assert set(np.unique(lab)) == {1, 2, 3, 5, 6, 7}
    assert lab[sv == 8].item() == 2


def test_copy_is_independent():
    g = RegionGraph([1, 2], {(1, 2): 1})
    h = g.copy()
    h.merge(1, 2)
    assert (1, 2) in g.edges and g.find(2) == 2


@pytest.mark.parametrize("t", range(N_TRANSFORMS))
def test_transform_inverse_round_trip(t):
    rng = np.random.default_rng(t)
    v = rng.integers(0, 5, size=(4, 4, 3))
    back = apply_transform(apply_transform(v, t), inverse_transform(t))
    np.testing.assert_array_equal(back, v)


def test_transform_ids_validated():
    with pytest.raises(ValueError):
        apply_transform(np.zeros((2, 2, 2)), 16)


def _affinity_from_labels(lab):
    aff = np.zeros((3,) + lab.shape)
    for c in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[c] = slice(None, -1)
        hi[c] = slice(1, None)
        aff[c][tuple(lo)] = (lab[tuple(lo)] == lab[tuple(hi)]) & (lab[tuple(lo)] > 0)
    return aff


@settings(max_examples=40, deadline=None)
@given(st.integers(0, N_TRANSFORMS - 1), st.integers(0, 10_000))
def test_affinity_transform_commutes_with_labels(t, seed):
    # transforming labels then deriving affinities equals transforming the affinities
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 3, size=(4, 4, 5))
    expect = _affinity_from_labels(apply_transform(lab, t))
    got = apply_transform(_affinity_from_labels(lab), t)
    np.testing.assert_array_equal(got, expect)


def test_zero_far_faces_copies():
    aff = np.ones((3, 2, 2, 2))
    out = zero_far_faces(aff)
    assert aff.min() == 1 and out[0, 1].max() == 0

import numpy as np
import pytest
from scipy.ndimage import label

from celis.synthetic import SceneSpec, generate_synthetic_scene
from celis.watershed import (WatershedParams, oversegment, oversegmentation_completeness,
                             oversegmentation_purity)

SIX = np.zeros((3, 3, 3), dtype=bool)
SIX[1, 1, :] = SIX[1, :, 1] = SIX[:, 1, 1] = True


def line_affinities(weights):
    """Affinities for a row of voxels along x with the given neighbour weights."""
    aff = np.zeros((3, len(weights) + 1, 1, 1))
    aff[0, :-1, 0, 0] = weights
    return aff


@pytest.mark.parametrize("seed", range(3))
def test_noiseless_scene_recovered(seed):
    gt, aff, _ = generate_synthetic_scene(SceneSpec(shape=(24, 24, 24), noise=0.0, seed=seed))
    sv = oversegment(aff, WatershedParams(0.9, 0.5, 0.1, 1))
    assert oversegmentation_purity(sv, gt) == 1.0
    assert oversegmentation_completeness(sv, gt) == 1.0
    np.testing.assert_array_equal(sv > 0, gt > 0)


def test_all_zero_is_background():
    out = oversegment(np.zeros((3, 5, 5, 5)), WatershedParams())
    assert not out.any()


def test_all_one_single_segment():
    aff = np.ones((3, 5, 4, 3))
    out = oversegment(aff, WatershedParams(t_size=1))
    assert np.all(out == 1)
    # two foreground slabs separated by a zero-affinity plane
    aff[0, 1] = 0
    out = oversegment(aff, WatershedParams(t_size=1))
    assert set(np.unique(out)) == {1, 2}
    assert np.all(out[:2] == 1) and np.all(out[2:] == 2)


def test_segments_connected_and_large(rng):
    aff = rng.random((3, 12, 12, 12))
    params = WatershedParams(0.95, 0.2, 0.3, 8)
    out = oversegment(aff, params)
    ids, sizes = np.unique(out[out > 0], return_counts=True)
    assert np.all(sizes >= 8)
    for i in ids:
        _, n = label(out == i, structure=SIX)
        assert n == 1
    assert ids.tolist() == list(range(1, ids.size + 1))


def test_labels_ordered_by_first_voxel(rng):
    out = oversegment(rng.random((3, 8, 8, 8)), WatershedParams(0.95, 0.2, 0.3, 4))
    flat = out.ravel()
    first = [flat[np.flatnonzero(flat == i)[0]] for i in np.unique(flat[flat > 0])]
    order = [np.flatnonzero(flat == i)[0] for i in np.unique(flat[flat > 0])]
    assert order == sorted(order) and first == sorted(first)


def test_deterministic(rng):
    aff = rng.random((3, 10, 10, 10))
    p = WatershedParams(0.9, 0.3, 0.2, 5)
    np.testing.assert_array_equal(oversegment(aff, p), oversegment(aff, p))


def test_low_clamp_uses_min_of_thresholds():
    # T_l above T_h: edges between them are still forced by the high clamp
    aff = line_affinities([0.995, 0.995, 0.995])
    out = oversegment(aff, WatershedParams(t_high=0.99, t_low=0.9999, t_edge=0.03, t_size=1))
    assert np.all(out == 1)


def test_small_basins_absorbed():
    # basins {0,1} and {2,3} joined by a 0.5 edge
    aff = line_affinities([0.9, 0.5, 0.9])
    assert np.all(oversegment(aff, WatershedParams(0.99, 0.1, 0.4, 4)) == 1)
    split = oversegment(aff, WatershedParams(0.99, 0.1, 0.4, 2))
    assert split.ravel().tolist() == [1, 1, 2, 2]


def test_raising_edge_threshold_refines(rng):
    aff = rng.random((3, 12, 12, 12))
    outs = [oversegment(aff, WatershedParams(0.95, 0.2, te, 6)) for te in (0.2, 0.4, 0.6, 0.8)]
    for low, high in zip(outs, outs[1:]):
        fg = high > 0
        assert np.all(low[fg] > 0)
        # every high-threshold segment lies inside one low-threshold segment
        pairs = set(zip(high[fg].tolist(), low[fg].tolist()))
        assert len(pairs) == len(set(high[fg].tolist()))


def test_raising_edge_threshold_can_drop_segments():
    # two small basins merged at a low threshold both fall to background at a high one
    aff = line_affinities([0.9, 0.5, 0.9])
    low = oversegment(aff, WatershedParams(0.99, 0.1, 0.4, 4))
    high = oversegment(aff, WatershedParams(0.99, 0.1, 0.6, 4))
    assert low.max() == 1 and high.max() == 0


def test_purity_examples():
    gt = np.array([1, 1, 2, 2]).reshape(4, 1, 1)
    assert oversegmentation_purity(np.array([1, 2, 3, 4]).reshape(4, 1, 1), gt) == 1.0
    assert oversegmentation_purity(np.ones((4, 1, 1), dtype=int), gt) == 0.5
    assert oversegmentation_completeness(np.ones((4, 1, 1), dtype=int), gt) == 1.0
    with pytest.raises(ValueError):
        oversegmentation_purity(np.zeros((4, 1, 1), dtype=int), gt)
    with pytest.raises(ValueError):
        oversegmentation_purity(np.ones((4, 1, 2), dtype=int), gt)


def test_params_validation():
    with pytest.raises(ValueError):
        WatershedParams(t_high=1.5)
    with pytest.raises(ValueError):
        WatershedParams(t_size=0)

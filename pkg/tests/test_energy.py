import numpy as np
import pytest
from scipy.special import expit

from celis.descriptor import Descriptor, sample_descriptor_type
from celis.energy import (EnergyModel, FeatureProvider, HandcraftedFeatures, box_means,
                          evaluate, evaluate_batch, feature_at, init_model)
from celis.regions import RegionState, tile_regions


def zero_model(k, d, hidden=4):
    return EnergyModel(k, d, [np.zeros((k + d, hidden)), np.zeros((hidden, hidden)),
                              np.zeros((hidden, 1))],
                       [np.zeros(hidden), np.zeros(hidden), np.zeros(1)])


def test_zero_model_is_half():
    m = zero_model(8, 3)
    out = evaluate_batch(m, np.ones((5, 8), dtype=bool), np.ones((5, 3)))
    np.testing.assert_array_equal(out, 0.5)


def test_hand_set_model():
    w1 = np.array([[1.0], [-2.0], [0.5]])
    w2 = np.array([[3.0]])
    w3 = np.array([[-0.7]])
    m = EnergyModel(2, 1, [w1, w2, w3], [np.array([0.1]), np.array([-0.2]), np.array([0.3])])
    for bits, f in [([1, 0], 0.4), ([0, 1], 2.0), ([1, 1], -3.0), ([0, 0], 1.0)]:
        h1 = max(bits[0] * 1.0 - 2.0 * bits[1] + 0.5 * f + 0.1, 0.0)
        h2 = max(3.0 * h1 - 0.2, 0.0)
        expected = 1.0 / (1.0 + np.exp(-(-0.7 * h2 + 0.3)))
        got = evaluate(m, Descriptor.from_bools(bits), [f])
        assert abs(got - expected) <= 1e-12


def test_batch_matches_single(rng):
    m = init_model(16, 4, hidden=8, seed=1)
    bits = rng.integers(0, 2, size=(12, 16)).astype(bool)
    feats = rng.normal(size=(12, 4))
    batch = evaluate_batch(m, bits, feats)
    single = [evaluate(m, Descriptor.from_bools(b), f) for b, f in zip(bits, feats)]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-15)
    assert evaluate_batch(m, np.zeros((0, 16), dtype=bool), np.zeros((0, 4))).shape == (0,)
    perm = rng.permutation(12)
    np.testing.assert_array_equal(evaluate_batch(m, bits[perm], feats[perm]), batch[perm])


def test_dimension_errors():
    m = init_model(8, 2, hidden=4)
    with pytest.raises(ValueError):
        evaluate(m, Descriptor.from_bools(np.zeros(7, dtype=bool)), [0, 0])
    with pytest.raises(ValueError):
        evaluate_batch(m, np.zeros((3, 8), dtype=bool), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        EnergyModel(8, 2, [np.zeros((9, 4)), np.zeros((4, 4)), np.zeros((4, 1))],
                    [np.zeros(4), np.zeros(4), np.zeros(1)])
    with pytest.raises(ValueError):
        EnergyModel(8, 2, [np.zeros((10, 4)), np.zeros((4, 4)), np.zeros((4, 2))],
                    [np.zeros(4), np.zeros(4), np.zeros(2)])


def test_save_load_round_trip(tmp_path):
    m = init_model(10, 3, hidden=6, seed=4)
    m.meta["note"] = "x"
    m.save(tmp_path / "m.bin")
    back = EnergyModel.load(tmp_path / "m.bin")
    assert back.meta == {"note": "x"}
    assert back.hidden == 6 and back.dropout == m.dropout
    for a, b in zip(back.weights, m.weights):
        np.testing.assert_array_equal(a, b.astype(np.float32))
    # saving the loaded model reproduces the same bytes
    back.save(tmp_path / "n.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()


def test_load_rejects_truncated(tmp_path):
    init_model(4, 1, hidden=2).save(tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        EnergyModel.load(tmp_path / "bad.bin")


def test_init_model_shapes():
    m = init_model(20, 5, hidden=7, seed=0)
    assert [w.shape for w in m.weights] == [(25, 7), (7, 7), (7, 1)]
    limit = np.sqrt(6.0 / 32)
    assert np.abs(m.weights[0]).max() <= limit
    assert all(np.all(b == 0) for b in m.biases)


def test_output_depends_only_on_bits(rng):
    """Renaming segment ids leaves descriptors and hence costs unchanged."""
    dt = sample_descriptor_type(0, "pairwise", 5, 32, region_size=8)
    seg = rng.integers(0, 5, size=(8, 8, 8))
    perm = np.array([0, 4, 2, 1, 3])
    m = init_model(32, 2, hidden=8, seed=2)
    feats = rng.normal(size=(64, 2))
    region = tile_regions(seg.shape, dt).region((0, 0, 0))
    pos = np.arange(64)
    a = RegionState(region, dt, seg).bits(pos)
    b = RegionState(region, dt, perm[seg]).bits(pos)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(evaluate_batch(m, a, feats), evaluate_batch(m, b, feats))


def test_constant_affinities_constant_means():
    aff = np.full((3, 6, 7, 5), 0.25)
    prov = HandcraftedFeatures(aff, box_sizes=(3, 9))
    assert prov.dim == 3 * 2 + 3
    np.testing.assert_allclose(prov.field[:6], 0.25)


def test_box_means_border_and_oracle(rng):
    values = rng.random((6, 5, 7))
    valid = (rng.random((6, 5, 7)) > 0.2).astype(float)
    for size in (1, 3, 5):
        got = box_means(values, valid, size)
        h = size // 2
        for x in np.ndindex(values.shape):
            sl = tuple(slice(max(c - h, 0), c + h + 1) for c in x)
            n = valid[sl].sum()
            expected = (values[sl] * valid[sl]).sum() / n if n else 0.0
            assert abs(got[x] - expected) < 1e-12
    corner = box_means(values, np.ones_like(values), 3)[0, 0, 0]
    assert abs(corner - values[:2, :2, :2].mean()) < 1e-12


def test_handcrafted_excludes_far_face():
    aff = np.ones((3, 4, 4, 4))
    prov = HandcraftedFeatures(aff, box_sizes=(3,))
    # the far x face is undefined for channel 0 but the mean stays 1
    np.testing.assert_allclose(prov.field[0], 1.0)


def test_feature_provider_lookup(rng):
    field = rng.normal(size=(2, 3, 4, 5))
    prov = FeatureProvider(field)
    np.testing.assert_array_equal(feature_at(prov, (1, 2, 3)), field[:, 1, 2, 3])
    coords = np.array([[0, 0, 0], [2, 3, 4]])
    np.testing.assert_array_equal(prov.features_at(coords), field[:, coords[:, 0], coords[:, 1], coords[:, 2]].T)
    with pytest.raises(ValueError):
        prov.feature_at((3, 0, 0))
    with pytest.raises(ValueError):
        FeatureProvider(np.zeros((2, 2)))
    assert FeatureProvider(np.zeros((2, 2, 2))).dim == 1


def test_logistic_range():
    m = init_model(4, 0, hidden=3, seed=0)
    m.biases[2][:] = 50.0
    out = evaluate_batch(m, np.ones((2, 4), dtype=bool), np.zeros((2, 0)))
    np.testing.assert_allclose(out, expit(50.0))

import numpy as np
import pytest
from conftest import small_scene, small_types

from celis.descriptor import pack
from celis.energy import HandcraftedFeatures, init_model
from celis.metrics import contingency, variation_of_information
from celis.regions import RegionState, tile_regions
from celis.training import (ExampleSet, PrioritySampler, balance_classes, example_stream,
                            expert_rollout, extract_examples, loss_and_grads, mean_loss,
                            priority_sample, sampled_examples, train_energy_model, training_rows)
from celis.volume import build_region_graph


def make_examples(bits_post, bits_pre, y, weight=None, features=None):
    n, k = bits_post.shape
    features = np.zeros((n, 0)) if features is None else features
    weight = np.abs(y) if weight is None else weight
    return ExampleSet(k, np.zeros(n, np.int32), pack(bits_pre), pack(bits_post),
                      np.asarray(y, float), np.asarray(weight, float), features)


# ---------------------------------------------------------------------- expert


def test_rollout_on_ground_truth_is_empty():
    gt, _, _ = small_scene(seed=1, shape=(12, 12, 12), n_objects=3)
    assert expert_rollout(gt, gt) == []


def test_rollout_two_way_split():
    gt = np.ones((4, 4, 4), dtype=np.int64)
    sv = gt.copy()
    sv[2:] = 2
    steps = expert_rollout(sv, gt)
    assert len(steps) == 1
    assert steps[0].sv_pair == (1, 2) and steps[0].delta < 0


def test_rollout_vi_monotone():
    gt, _, sv = small_scene(seed=2, shape=(12, 12, 12), n_objects=4)
    steps = expert_rollout(sv, gt)
    assert steps
    graph = build_region_graph(sv)
    trace = [variation_of_information(contingency(sv, gt))]
    for s in steps:
        graph.merge(*s.sv_pair)
        trace.append(variation_of_information(contingency(graph.relabel(sv), gt)))
        assert abs(trace[-1] - trace[-2] - s.delta) < 1e-10
    assert all(b < a for a, b in zip(trace, trace[1:]))
    assert trace[-1] <= min(trace)
    # pure oversegmentation: the expert recovers ground truth
    assert trace[-1] < 1e-12


# ---------------------------------------------------------------------- extraction


def brute_examples(sv, gt, types):
    """Every (type, edge, position) at the initial state whose descriptor changes."""
    graph = build_region_graph(sv)
    table = contingency(sv, gt)
    out = {}
    for ti, dt in enumerate(types):
        for region in tile_regions(sv.shape, dt).regions():
            st = RegionState(region, dt, sv)
            everywhere = np.arange(region.n_centers)
            pre = st.bits(everywhere)
            for a, b in graph.edges:
                lookup = np.arange(sv.max() + 1)
                lookup[b] = a
                post = RegionState(region, dt, sv, lookup).bits(everywhere)
                for p in np.flatnonzero(np.any(pre != post, axis=1)):
                    x = tuple(int(c) for c in st.centers_local[p] + region.block_lo)
                    out[(ti, (a, b), x)] = (pre[p], post[p])
    return out, table


def test_example_stream_matches_brute_force():
    gt, aff, sv = small_scene(seed=4, shape=(10, 10, 10), n_objects=3, split_rate=4.0)
    types = small_types(k=24, pair_box=3, centre_box=5, zone=2)
    prov = HandcraftedFeatures(aff)
    rollout = expert_rollout(sv, gt)
    expected, _ = brute_examples(sv, gt, types)
    got = {}
    weights = {}
    for ti, t, edge, y, x, pre, post, phi in example_stream(sv, gt, types, prov, rollout):
        if t != 0:
            continue
        got[(ti, edge, x)] = (pre, post)
        weights.setdefault(edge, set()).add(y)
        np.testing.assert_array_equal(phi, prov.feature_at(x))
        assert np.any(pre != post)
    assert got.keys() == expected.keys()
    for key, (pre, post) in expected.items():
        np.testing.assert_array_equal(got[key][0], pre)
        np.testing.assert_array_equal(got[key][1], post)
    # the weight depends only on the edge and state
    assert all(len(v) == 1 for v in weights.values())


def test_extract_with_large_reservoir_keeps_everything():
    gt, aff, sv = small_scene(seed=5, shape=(10, 10, 10), n_objects=3, split_rate=4.0)
    types = small_types(k=24, pair_box=3, centre_box=5, zone=2)
    prov = HandcraftedFeatures(aff)
    rollout = expert_rollout(sv, gt)
    full = [ex for ex in example_stream(sv, gt, types, prov, rollout) if ex[3] != 0.0]
    samplers = extract_examples(sv, gt, types, prov, rollout=rollout, m=10 ** 6, seed=0)
    sets = sampled_examples(samplers, types, prov.dim)
    assert sum(len(s) for s in sets.values()) == len(full)
    for ti, s in sets.items():
        np.testing.assert_allclose(s.weight, np.abs(s.y))
        mine = sorted((y, tuple(b)) for t, _, _, y, _, _, b, _ in full if t == ti
                      for b in [pack(b)])
        theirs = sorted((y, tuple(b)) for y, b in zip(s.y, s.r_post))
        assert mine == theirs


def test_extract_small_reservoir():
    gt, aff, sv = small_scene(seed=5, shape=(10, 10, 10), n_objects=3, split_rate=4.0)
    types = small_types(k=24, pair_box=3, centre_box=5, zone=2)
    prov = HandcraftedFeatures(aff)
    samplers = extract_examples(sv, gt, types, prov, m=20, seed=3)
    sets = sampled_examples(samplers, types, prov.dim)
    for s in sets.values():
        assert len(s) <= 20
        assert np.all(s.weight >= np.abs(s.y))
        assert (s.y < 0).any() and (s.y > 0).any()
    again = sampled_examples(extract_examples(sv, gt, types, prov, m=20, seed=3), types, prov.dim)
    for ti in sets:
        np.testing.assert_array_equal(sets[ti].r_post, again[ti].r_post)
        np.testing.assert_array_equal(sets[ti].weight, again[ti].weight)


def test_example_file_round_trip(tmp_path, rng):
    ex = make_examples(rng.random((7, 13)) < 0.5, rng.random((7, 13)) < 0.5, rng.normal(size=7),
                       features=rng.normal(size=(7, 4)))
    ex.meta["source"] = "unit"
    ex.save(tmp_path / "ex.bin")
    back = ExampleSet.load(tmp_path / "ex.bin")
    assert back.k == 13 and back.meta == {"source": "unit"}
    for name in ("type_id", "r_pre", "r_post", "y", "weight", "features"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ex, name))
    raw = (tmp_path / "ex.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        ExampleSet.load(tmp_path / "bad.bin")


def test_concat_and_select(rng):
    a = make_examples(rng.random((3, 9)) < 0.5, rng.random((3, 9)) < 0.5, np.ones(3))
    b = make_examples(rng.random((2, 9)) < 0.5, rng.random((2, 9)) < 0.5, -np.ones(2))
    c = ExampleSet.concat([a, b])
    assert len(c) == 5 and len(c.select(c.y < 0)) == 2
    with pytest.raises(ValueError):
        ExampleSet.concat([a, make_examples(np.zeros((1, 3), bool), np.zeros((1, 3), bool), [1.0])])


# ---------------------------------------------------------------------- priority sampling


def test_priority_small_stream_keeps_all():
    out = priority_sample([(i, -0.5 * i) for i in range(1, 6)], m=10, seed=0)
    assert [item for item, _, _ in out] == [1, 2, 3, 4, 5]
    assert [adj for _, _, adj in out] == [0.5 * i for i in range(1, 6)]
    assert [y for _, y, _ in out] == [-0.5 * i for i in range(1, 6)]


def test_priority_dominant_item_retained():
    stream = [(i, 1.0) for i in range(50)] + [("big", 1e6)]
    for seed in range(1000):
        kept = [item for item, _, _ in priority_sample(stream, m=5, seed=seed)]
        assert "big" in kept


def test_priority_unbiased_subset_sum():
    rng = np.random.default_rng(0)
    w = rng.exponential(size=100)
    stream = list(enumerate(w))
    est = [sum(adj for _, _, adj in priority_sample(stream, m=10, seed=s)) for s in range(3000)]
    assert abs(np.mean(est) / w.sum() - 1) < 0.03


def test_priority_threshold_and_merge():
    a = PrioritySampler(3, 0)
    b = PrioritySampler(3, 1)
    for i in range(10):
        a.offer(("a", i), 1.0 + i)
        b.offer(("b", i), 1.0 + i)
    prios = sorted([e[0] for e in a._heap] + [e[0] for e in b._heap], reverse=True)
    a.merge(b)
    assert len(a) == 3
    assert sorted(e[0] for e in a._heap) == sorted(prios[:3])
    assert a.threshold >= prios[3]
    assert all(adj >= abs(wt) for _, wt, adj in a.items())
    with pytest.raises(ValueError):
        PrioritySampler(0)


# ---------------------------------------------------------------------- balancing


def test_balance_classes():
    ex = make_examples(np.zeros((4, 8), bool), np.ones((4, 8), bool), [-1.0, -1.0, 1.0, 1.0],
                       weight=[4.0, 6.0, 10.0, 20.0])
    out = balance_classes(ex)
    np.testing.assert_allclose(out.weight, [8.0, 12.0, 20.0 * 2 / 3 * 0.5, 40 / 3])
    assert out.weight[:2].sum() == pytest.approx(out.weight[2:].sum())
    np.testing.assert_array_equal(ex.weight, [4.0, 6.0, 10.0, 20.0])
    same = balance_classes(make_examples(np.zeros((2, 8), bool), np.ones((2, 8), bool), [-1.0, 1.0]))
    np.testing.assert_allclose(same.weight, [1.0, 1.0])
    zero = balance_classes(make_examples(np.zeros((3, 8), bool), np.ones((3, 8), bool),
                                         [-1.0, 1.0, 1.0], weight=[1.0, 0.0, 1.0]))
    assert zero.weight[1] == 0.0
    with pytest.raises(ValueError, match="both classes"):
        balance_classes(make_examples(np.zeros((2, 8), bool), np.ones((2, 8), bool), [1.0, 2.0]))


def test_training_rows_signs():
    post = np.array([[1, 0, 1]], bool)
    pre = np.array([[0, 1, 1]], bool)
    x, y = training_rows(make_examples(post, pre, [-0.3], weight=[2.0]))
    np.testing.assert_array_equal(x[:, :3], np.vstack([post, pre]).astype(float))
    np.testing.assert_array_equal(y, [-2.0, 2.0])


# ---------------------------------------------------------------------- gradients


def numeric_grad(model, x, y, loss, keep, layer, which, eps=1e-6):
    arr = model.weights[layer] if which == 0 else model.biases[layer]
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = mean_loss(model, x, y, loss, keep)
        arr[idx] = old - eps
        down = mean_loss(model, x, y, loss, keep)
        arr[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("loss", ["log", "signed_linear"])
@pytest.mark.parametrize("dropout", [False, True])
def test_gradients_match_finite_differences(loss, dropout):
    rng = np.random.default_rng(1)
    model = init_model(6, 2, hidden=5, seed=3)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = np.concatenate([rng.random((9, 6)) < 0.5, rng.normal(size=(9, 2))], axis=1).astype(float)
    y = rng.normal(size=9)
    keep = (rng.random((9, 5)) > 0.5).astype(float) if dropout else None
    _, grads = loss_and_grads(model, x, y, loss, keep)
    for layer in range(3):
        for which in (0, 1):
            num = numeric_grad(model, x, y, loss, keep, layer, which)
            ana = grads[layer][which]
            err = np.abs(num - ana).max() / max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
            assert err <= 1e-4, (layer, which, err)


@pytest.mark.parametrize("loss", ["log", "signed_linear"])
def test_sign_semantics(loss):
    rng = np.random.default_rng(2)
    model = init_model(8, 0, hidden=6, seed=0, dropout=0.0)
    post = rng.random((1, 8)) < 0.5
    pre = ~post
    ex = make_examples(post, pre, [-1.0])
    before_post = model.forward(post.astype(float))[0]
    before_pre = model.forward(pre.astype(float))[0]
    trained = train_energy_model(model, ex, loss=loss, lr=0.1, epochs=1, batch=2).model
    assert trained.forward(post.astype(float))[0] < before_post
    assert trained.forward(pre.astype(float))[0] > before_pre


def test_separable_data_is_learned():
    rng = np.random.default_rng(3)
    n, k = 400, 16
    post = rng.random((n, k)) < 0.5
    y = np.where(post[:, 0], 1.0, -1.0) * rng.uniform(0.5, 2.0, size=n)
    pre = post.copy()
    pre[:, 0] = ~pre[:, 0]
    flip = rng.random((n, k)) < 0.1
    flip[:, 0] = False
    pre ^= flip
    ex = make_examples(post, pre, y)
    result = train_energy_model(init_model(k, 0, hidden=16, seed=1), ex, lr=0.2, epochs=50, batch=32)
    x, target = training_rows(ex)
    out = result.model.forward(x)
    correct = (out > 0.5) == (target > 0)
    assert np.sum(np.abs(target) * correct) / np.sum(np.abs(target)) >= 0.95
    assert result.losses[-1] < result.losses[0]


def test_positive_rows_saturate():
    # rows with y > 0 only, fitted directly: the cost goes to 1
    rng = np.random.default_rng(4)
    x = (rng.random((20, 8)) < 0.5).astype(float)
    y = np.ones(20)
    model = init_model(8, 0, hidden=8, seed=0, dropout=0.0)
    for _ in range(500):
        _, grads = loss_and_grads(model, x, y, "log")
        for layer, (gw, gb) in enumerate(grads):
            model.weights[layer] -= 0.5 * gw
            model.biases[layer] -= 0.5 * gb
    assert model.forward(x).min() > 0.95


def test_training_deterministic_and_curve(tmp_path):
    rng = np.random.default_rng(5)
    post = rng.random((30, 8)) < 0.5
    ex = make_examples(post, ~post, rng.normal(size=30), features=rng.normal(size=(30, 2)))
    a = train_energy_model(init_model(8, 2, hidden=4), ex, epochs=3, batch=8, seed=9)
    b = train_energy_model(init_model(8, 2, hidden=4), ex, epochs=3, batch=8, seed=9)
    for wa, wb in zip(a.model.weights, b.model.weights):
        np.testing.assert_array_equal(wa, wb)
    assert a.losses == b.losses and len(a.losses) == 3
    a.write_curve(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors():
    ex = make_examples(np.zeros((2, 4), bool), np.ones((2, 4), bool), [1.0, -1.0],
                       features=np.array([[np.inf], [1.0]]))
    with pytest.raises(FloatingPointError):
        train_energy_model(init_model(4, 1, hidden=3), ex, epochs=1)
    with pytest.raises(ValueError):
        train_energy_model(init_model(4, 1, hidden=3), ex, loss="hinge")
    with pytest.raises(ValueError):
        train_energy_model(init_model(5, 1, hidden=3), ex)

import numpy as np
import pytest

from celis.descriptor import CENTER_BASED, PAIRWISE, sample_descriptor_type
from celis.energy import HandcraftedFeatures, init_model
from celis.synthetic import SceneSpec, generate_synthetic_scene


def small_scene(seed=0, shape=(16, 16, 16), n_objects=6, split_rate=6.0, noise=0.3):
    spec = SceneSpec(shape=shape, n_objects=n_objects, split_rate=split_rate, noise=noise,
                     seed=seed, min_object_voxels=20)
    return generate_synthetic_scene(spec)


def small_types(k=32, pair_box=5, centre_box=7, zone=4):
    return [
        sample_descriptor_type(1, PAIRWISE, pair_box, k, region_size=2 * pair_box + 2,
                               zone_size=zone, type_id=0),
        sample_descriptor_type(2, CENTER_BASED, centre_box, k, region_size=2 * centre_box,
                               zone_size=zone, type_id=1),
    ]


def random_models(types, n_features, hidden=16, seed=0):
    return [init_model(t.k, n_features, hidden=hidden, seed=seed + i) for i, t in enumerate(types)]


@pytest.fixture
def scene16():
    gt, aff, sv = small_scene(seed=3)
    return gt, aff, sv, HandcraftedFeatures(aff)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(number, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

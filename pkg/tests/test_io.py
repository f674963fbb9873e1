import json

import numpy as np
import pytest

from celis.io import load_volume, save_volume, sidecar_path


def test_label_round_trip(tmp_path):
    v = np.random.default_rng(0).integers(0, 1000, size=(3, 4, 5)).astype(np.uint32)
    save_volume(tmp_path / "v.raw", v, voxel_size=(4, 4, 40))
    np.testing.assert_array_equal(load_volume(tmp_path / "v.raw"), v)
    meta = json.loads(sidecar_path(tmp_path / "v.raw").read_text())
    assert meta == {"shape": [3, 4, 5], "dtype": "uint32", "channels": 1, "voxel_size": [4.0, 4.0, 40.0]}


def test_channel_layout_is_x_fastest(tmp_path):
    v = np.arange(2 * 2 * 3 * 1, dtype=np.float32).reshape(2, 2, 3, 1)
    save_volume(tmp_path / "a.raw", v)
    raw = np.frombuffer((tmp_path / "a.raw").read_bytes(), dtype="<f4")
    # first channel, x varies fastest
    np.testing.assert_array_equal(raw[:6], v[0].ravel(order="F"))
    np.testing.assert_array_equal(load_volume(tmp_path / "a.raw"), v)


def test_truncated_file_rejected(tmp_path):
    save_volume(tmp_path / "v.raw", np.zeros((2, 2, 2), dtype=np.uint8))
    (tmp_path / "v.raw").write_bytes(b"\0" * 3)
    with pytest.raises(ValueError):
        load_volume(tmp_path / "v.raw")

"""Raw volume files with JSON sidecars.

A volume at ``path`` is stored as little-endian raw values in x-fastest
order; multi-channel volumes store each channel contiguously, channel
slowest.  Metadata lives next to it in ``path + ".json"``::

    {"shape": [nx, ny, nz], "dtype": "uint32", "channels": 1,
     "voxel_size": [1.0, 1.0, 1.0]}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_volume(path, data: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> None:
    """Write a label volume ``(nx, ny, nz)`` or channel volume ``(c, nx, ny, nz)``."""
    data = np.asarray(data)
    if data.ndim == 3:
        channels, spatial = 1, data.shape
        stacked = data[None]
    elif data.ndim == 4:
        channels, spatial = data.shape[0], data.shape[1:]
        stacked = data
    else:
        raise ValueError(f"cannot store array of shape {data.shape}")
    dtype = stacked.dtype.newbyteorder("<")
    raw = np.concatenate([c.astype(dtype).ravel(order="F") for c in stacked])
    path = Path(path)
    path.write_bytes(raw.tobytes())
    meta = {
        "shape": [int(s) for s in spatial],
        "dtype": stacked.dtype.name,
        "channels": int(channels),
        "voxel_size": [float(v) for v in voxel_size],
    }
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_volume(path) -> np.ndarray:
    """Read a volume written by :func:`save_volume`; single-channel files come back 3-D."""
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    shape = tuple(meta["shape"])
    channels = int(meta["channels"])
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    flat = np.frombuffer(path.read_bytes(), dtype=dtype)
    n = int(np.prod(shape))
    if flat.size != n * channels:
        raise ValueError(f"{path}: expected {n * channels} values, found {flat.size}")
    out = np.stack([flat[i * n:(i + 1) * n].reshape(shape, order="F") for i in range(channels)])
    out = out.astype(dtype.newbyteorder("="))
    return out[0] if channels == 1 else out

"""Local energy models and image feature providers.

An :class:`EnergyModel` maps a descriptor (as 0/1 inputs) concatenated with
an image feature vector through two ReLU layers to a logistic cost in (0, 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .descriptor import Descriptor
from .regions import box_sum, integral_volume
from .volume import check_affinities

DEFAULT_BOX_SIZES = (3, 9, 17, 33)


@dataclass
class EnergyModel:
    """Two-hidden-layer ReLU network with a logistic output unit."""

    n_bits: int
    n_features: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("expected exactly three layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).ravel() for b in self.biases]
        if self.weights[0].shape[0] != self.input_dim:
            raise ValueError(
                f"first layer takes {self.weights[0].shape[0]} inputs, expected {self.input_dim}"
            )
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("weight and bias shapes disagree")
        for w1, w2 in zip(self.weights, self.weights[1:]):
            if w1.shape[1] != w2.shape[0]:
                raise ValueError("consecutive layer shapes disagree")
        if self.weights[2].shape[1] != 1:
            raise ValueError("output layer must have a single unit")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.n_bits + self.n_features

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "EnergyModel":
        return EnergyModel(self.n_bits, self.n_features, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.dropout, dict(self.meta))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Costs for input rows ``x`` of shape ``(n, k + d)`` (no dropout)."""
        h1 = np.maximum(x @ self.weights[0] + self.biases[0], 0.0)
        h2 = np.maximum(h1 @ self.weights[1] + self.biases[1], 0.0)
        return expit(h2 @ self.weights[2] + self.biases[2])[:, 0]

    def inputs(self, bits: np.ndarray, features: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits)
        features = np.asarray(features, dtype=np.float64)
        if bits.ndim != 2 or bits.shape[1] != self.n_bits:
            raise ValueError(f"expected bits of shape (n, {self.n_bits}), got {bits.shape}")
        if features.ndim != 2 or features.shape != (bits.shape[0], self.n_features):
            raise ValueError(
                f"expected features of shape ({bits.shape[0]}, {self.n_features}), got {features.shape}"
            )
        return np.concatenate([bits.astype(np.float64), features], axis=1)

    def save(self, path) -> None:
        header = {
            "n_bits": self.n_bits,
            "n_features": self.n_features,
            "dropout": self.dropout,
            "layers": [list(w.shape) for w in self.weights],
            "meta": self.meta,
        }
        blob = b"".join(
            np.concatenate([w.ravel(), b]).astype("<f4").tobytes()
            for w, b in zip(self.weights, self.biases)
        )
        Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)

    @classmethod
    def load(cls, path) -> "EnergyModel":
        raw = Path(path).read_bytes()
        head, blob = raw.split(b"\n", 1)
        header = json.loads(head)
        values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        weights, biases, pos = [], [], 0
        for n_in, n_out in header["layers"]:
            weights.append(values[pos:pos + n_in * n_out].reshape(n_in, n_out))
            pos += n_in * n_out
            biases.append(values[pos:pos + n_out])
            pos += n_out
        if pos != values.size:
            raise ValueError(f"{path}: weight blob has {values.size} values, header implies {pos}")
        return cls(header["n_bits"], header["n_features"], weights, biases,
                   header["dropout"], header.get("meta", {}))


def init_model(n_bits: int, n_features: int, hidden: int = 512, seed: int = 0,
               dropout: float = 0.5) -> EnergyModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [n_bits + n_features, hidden, hidden, 1]
    weights = []
    for n_in, n_out in zip(dims, dims[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
    biases = [np.zeros(d) for d in dims[1:]]
    return EnergyModel(n_bits, n_features, weights, biases, dropout)


def evaluate(model: EnergyModel, r: Descriptor, f) -> float:
    """Cost of a single descriptor and feature vector."""
    if r.k != model.n_bits:
        raise ValueError(f"descriptor has {r.k} bits, model expects {model.n_bits}")
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    return float(model.forward(model.inputs(r.to_bools()[None, :], f))[0])


def evaluate_batch(model: EnergyModel, bits: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Costs for boolean ``bits (n, k)`` and ``features (n, d)``; order preserved."""
    bits = np.asarray(bits)
    if bits.ndim == 2 and bits.shape[0] == 0:
        return np.zeros(0)
    return model.forward(model.inputs(bits, features))


# ---------------------------------------------------------------------- features


class FeatureProvider:
    """Dense per-voxel feature field of shape ``(d, nx, ny, nz)``."""

    mode = "file_backed"

    def __init__(self, field: np.ndarray):
        field = np.asarray(field, dtype=np.float64)
        if field.ndim == 3:
            field = field[None]
        if field.ndim != 4:
            raise ValueError(f"feature field must have shape (d, nx, ny, nz), got {field.shape}")
        self.field = field

    @property
    def dim(self) -> int:
        return self.field.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.field.shape[1:]

    def feature_at(self, x) -> np.ndarray:
        x = tuple(int(c) for c in x)
        if len(x) != 3 or not all(0 <= c < n for c, n in zip(x, self.shape)):
            raise ValueError(f"position {x} outside the volume {self.shape}")
        return self.field[(slice(None),) + x].copy()

    def features_at(self, coords: np.ndarray) -> np.ndarray:
        """Feature rows ``(n, d)`` for integer coordinates ``(n, 3)``."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return self.field[:, coords[:, 0], coords[:, 1], coords[:, 2]].T


def feature_at(provider: FeatureProvider, x) -> np.ndarray:
    return provider.feature_at(x)


class HandcraftedFeatures(FeatureProvider):
    """Multi-scale affinity statistics: per-channel box means plus the centre affinities.

    Far-face affinity entries are undefined and excluded from every mean.
    """

    mode = "handcrafted"

    def __init__(self, aff: np.ndarray, box_sizes=DEFAULT_BOX_SIZES):
        aff = check_affinities(aff)
        self.box_sizes = tuple(int(b) for b in box_sizes)
        planes = []
        for c in range(3):
            valid = np.ones(aff.shape[1:], dtype=np.float64)
            idx = [slice(None)] * 3
            idx[c] = -1
            valid[tuple(idx)] = 0
            for b in self.box_sizes:
                planes.append(box_means(aff[c], valid, b))
        planes.extend(aff[c] for c in range(3))
        super().__init__(np.stack(planes))


def box_means(values: np.ndarray, valid: np.ndarray, size: int) -> np.ndarray:
    """Mean of ``values`` over ``valid`` voxels in centred ``size``-cubes, clipped at the border."""
    half = size // 2
    sums = np.zeros(tuple(s + 1 for s in values.shape))
    sums[1:, 1:, 1:] = (values * valid).cumsum(0).cumsum(1).cumsum(2)
    counts = integral_volume(valid.astype(np.int64))
    lo = [np.clip(np.arange(n) - half, 0, n) for n in values.shape]
    hi = [np.clip(np.arange(n) + half + 1, 0, n) for n in values.shape]
    s = box_sum(sums, lo, hi)
    c = box_sum(counts, lo, hi)
    return np.divide(s, c, out=np.zeros(values.shape), where=c > 0)

"""Local binary shape descriptors.

Bit ``i`` of a descriptor centred at ``x`` records whether ``x + a_i`` and
``x + b_i`` lie in the same local connected component of the segmentation.
Background voxels and positions outside the volume are never connected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import isqrt

import numpy as np

PAIRWISE = "pairwise"
CENTER_BASED = "center_based"
KINDS = (PAIRWISE, CENTER_BASED)

# Region edge lengths used when none is given, keyed by bounding-box edge.
DEFAULT_REGION_SIZE = {9: 24, 17: 48, 33: 96}
DEFAULT_ZONE_SIZE = 8


def default_region_size(bbox_size: int) -> int:
    return DEFAULT_REGION_SIZE.get(bbox_size, max(bbox_size, 3 * bbox_size - 3))


@dataclass(frozen=True, eq=False)
class DescriptorType:
    """One descriptor scale: bounding box, offset pairs and region tiling."""

    id: int
    kind: str
    bbox_size: int
    pairs: np.ndarray = field(repr=False)  # (k, 2, 3) offsets from the centre
    region_size: int
    zone_size: int = DEFAULT_ZONE_SIZE
    rng_seed: int | None = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.ndim != 3 or pairs.shape[1:] != (2, 3) or pairs.shape[0] < 1:
            raise ValueError(f"pairs must have shape (k, 2, 3) with k >= 1, got {pairs.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.bbox_size < 1 or self.bbox_size % 2 == 0:
            raise ValueError(f"bbox_size must be odd and positive, got {self.bbox_size}")
        if np.abs(pairs).max() > self.half:
            raise ValueError("pair offsets fall outside the bounding box")
        if self.kind == CENTER_BASED and np.any(pairs[:, 0, :] != 0):
            raise ValueError("center-based descriptors need a_i = (0, 0, 0)")
        if self.region_size < self.bbox_size:
            raise ValueError(
                f"region size {self.region_size} smaller than bounding box {self.bbox_size}"
            )
        if self.zone_size < 1:
            raise ValueError("zone_size must be >= 1")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    @property
    def k(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def half(self) -> int:
        return (self.bbox_size - 1) // 2

    @property
    def stride(self) -> int:
        return self.region_size - self.bbox_size + 1

    def __eq__(self, other):
        if not isinstance(other, DescriptorType):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.id, self.kind, self.bbox_size, self.pairs.tobytes()))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "bbox_size": self.bbox_size,
            "k": self.k,
            "region_size": self.region_size,
            "zone_size": self.zone_size,
            "seed": self.rng_seed,
            "pairs": self.pairs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DescriptorType":
        pairs = np.asarray(data["pairs"], dtype=np.int64)
        if "k" in data and int(data["k"]) != pairs.shape[0]:
            raise ValueError(f"k={data['k']} does not match {pairs.shape[0]} pairs")
        return cls(
            id=int(data["id"]),
            kind=data["kind"],
            bbox_size=int(data["bbox_size"]),
            pairs=pairs,
            region_size=int(data["region_size"]),
            zone_size=int(data.get("zone_size", DEFAULT_ZONE_SIZE)),
            rng_seed=data.get("seed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DescriptorType":
        return cls.from_dict(json.loads(text))


def _unrank_pair(idx: int, n: int) -> tuple[int, int]:
    """Map ``idx`` in ``[0, n(n-1)/2)`` to the pair ``(i, j)``, ``i < j``, in lexicographic order."""
    total = n * (n - 1) // 2
    r = total - 1 - idx  # rank from the end: pairs with large i come first
    m = (isqrt(8 * r + 1) - 1) // 2  # largest m with m(m+1)/2 <= r
    i = n - 2 - m
    j = n - 1 - (r - m * (m + 1) // 2)
    return i, j


def sample_descriptor_type(
    seed: int,
    kind: str,
    bbox_size: int,
    k: int = 512,
    region_size: int | None = None,
    zone_size: int = DEFAULT_ZONE_SIZE,
    type_id: int = 0,
) -> DescriptorType:
    """Sample ``k`` distinct offset pairs uniformly without replacement."""
    if bbox_size < 1 or bbox_size % 2 == 0:
        raise ValueError(f"bbox_size must be odd and positive, got {bbox_size}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    half = (bbox_size - 1) // 2
    n = bbox_size ** 3
    rng = np.random.default_rng(seed)
    grid = np.stack(np.unravel_index(np.arange(n), (bbox_size,) * 3), axis=1) - half
    if kind == PAIRWISE:
        available = n * (n - 1) // 2
        if k > available:
            raise ValueError(f"k={k} exceeds the {available} distinct pairs of a {bbox_size}^3 box")
        picks = rng.choice(available, size=k, replace=False)
        idx = np.array([_unrank_pair(int(p), n) for p in picks], dtype=np.int64)
        pairs = np.stack([grid[idx[:, 0]], grid[idx[:, 1]]], axis=1)
    else:
        center = n // 2
        others = np.delete(np.arange(n), center)
        if k > others.size:
            raise ValueError(f"k={k} exceeds the {others.size} non-centre positions of the box")
        picks = others[rng.choice(others.size, size=k, replace=False)]
        pairs = np.stack([np.zeros((k, 3), dtype=np.int64), grid[picks]], axis=1)
    if region_size is None:
        region_size = default_region_size(bbox_size)
    return DescriptorType(
        id=type_id,
        kind=kind,
        bbox_size=bbox_size,
        pairs=pairs,
        region_size=region_size,
        zone_size=zone_size,
        rng_seed=seed,
    )


def default_descriptor_types(k: int = 512, seed: int = 0) -> list[DescriptorType]:
    """Pairwise 9^3/17^3/33^3 and center-based 17^3/33^3 types."""
    specs = [(PAIRWISE, 9), (PAIRWISE, 17), (PAIRWISE, 33), (CENTER_BASED, 17), (CENTER_BASED, 33)]
    return [
        sample_descriptor_type(seed + i, kind, b, k, type_id=i) for i, (kind, b) in enumerate(specs)
    ]


@dataclass(frozen=True, eq=False)
class Descriptor:
    """A packed ``k``-bit descriptor (``numpy.packbits`` order, big-endian within bytes)."""

    bits: np.ndarray
    k: int

    @classmethod
    def from_bools(cls, bools) -> "Descriptor":
        bools = np.asarray(bools, dtype=bool).ravel()
        return cls(np.packbits(bools), int(bools.size))

    def to_bools(self) -> np.ndarray:
        return np.unpackbits(self.bits, count=self.k).astype(bool)

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.k, self.bits.tobytes()))


def hamming(d1: Descriptor, d2: Descriptor) -> int:
    """Number of differing bits."""
    if d1.k != d2.k:
        raise ValueError(f"descriptor lengths differ: {d1.k} vs {d2.k}")
    return int(np.bitwise_count(np.bitwise_xor(d1.bits, d2.bits)).sum())


def flat_offsets(dt: DescriptorType, ext_shape) -> tuple[np.ndarray, np.ndarray]:
    """Flat (C-order) index offsets of the pair endpoints inside an array of ``ext_shape``."""
    strides = np.array([ext_shape[1] * ext_shape[2], ext_shape[2], 1], dtype=np.int64)
    return dt.pairs[:, 0, :] @ strides, dt.pairs[:, 1, :] @ strides


def pair_bits(frag_flat, labels, centers_flat, off_a, off_b) -> np.ndarray:
    """Boolean ``(n, k)`` descriptor bits at ``centers_flat``.

    ``frag_flat`` holds a fragment id per voxel (-1 for background or outside
    the volume) and ``labels`` maps fragment id -> component label.
    """
    fa = frag_flat[centers_flat[:, None] + off_a[None, :]]
    fb = frag_flat[centers_flat[:, None] + off_b[None, :]]
    lab = np.append(labels, -1)
    return (fa >= 0) & (lab[fa] == lab[fb])


def pack(bools: np.ndarray) -> np.ndarray:
    return np.packbits(bools, axis=-1)

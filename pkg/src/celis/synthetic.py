"""Synthetic scenes: tube/blob objects, noisy affinities and pure oversegmentations."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from skimage.measure import label as cc_label

from .volume import zero_far_faces


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene.

    ``split_rate`` is the expected number of extra supervoxels per 1000
    voxels of an object.  ``tube_fraction`` is the probability that an
    object is a tube rather than a blob.
    """

    shape: tuple[int, int, int] = (32, 32, 32)
    n_objects: int = 12
    tube_radius: tuple[float, float] = (2.5, 5.0)
    blob_radius: tuple[float, float] = (4.0, 8.0)
    tube_fraction: float = 0.7
    noise: float = 0.3
    split_rate: float = 2.0
    seed: int = 0
    min_object_voxels: int = 30
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "tube_radius", tuple(float(r) for r in self.tube_radius))
        object.__setattr__(self, "blob_radius", tuple(float(r) for r in self.blob_radius))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        for name in ("tube_radius", "blob_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if not 0 <= self.tube_fraction <= 1:
            raise ValueError("tube_fraction must lie in [0, 1]")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")
        if self.split_rate < 0:
            raise ValueError("split_rate must be >= 0")
        if self.min_object_voxels < 1 or self.max_retries < 1:
            raise ValueError("min_object_voxels and max_retries must be >= 1")

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _segment_distance(coords, p0, p1):
    d = p1 - p0
    t = np.clip(((coords - p0) @ d) / (d @ d), 0.0, 1.0)
    closest = p0 + t[:, None] * d
    return np.linalg.norm(coords - closest, axis=1)


def _sample_object(rng, spec: SceneSpec, coords, shape):
    if rng.random() < spec.tube_fraction:
        r = rng.uniform(*spec.tube_radius)
        center = rng.uniform(0, 1, 3) * shape
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        half = np.linalg.norm(shape)
        dist = _segment_distance(coords, center - half * direction, center + half * direction)
    else:
        r = rng.uniform(*spec.blob_radius)
        center = rng.uniform(0, 1, 3) * shape
        dist = np.linalg.norm(coords - center, axis=1)
    return dist / r


def _place_objects(rng, spec: SceneSpec) -> np.ndarray:
    shape = np.array(spec.shape, dtype=np.float64)
    grid = np.indices(spec.shape).reshape(3, -1).T.astype(np.float64)
    best = np.full(grid.shape[0], np.inf)
    owner = np.zeros(grid.shape[0], dtype=np.int64)
    retries = 0
    placed = 0
    while placed < spec.n_objects:
        nd = _sample_object(rng, spec, grid, shape)
        wins = (nd < 1.0) & (nd < best)
        if wins.sum() < spec.min_object_voxels:
            retries += 1
            if retries > spec.max_retries:
                raise RuntimeError(
                    f"could not place object {placed + 1} of {spec.n_objects} "
                    f"within {spec.max_retries} retries"
                )
            continue
        placed += 1
        best[wins] = nd[wins]
        owner[wins] = placed
    return owner.reshape(spec.shape)


def _split_object(rng, mask_coords: np.ndarray, n_pieces: int, shape) -> np.ndarray:
    """Grow ``n_pieces`` connected pieces over one object by multi-source BFS."""
    n = mask_coords.shape[0]
    piece = np.full(n, -1, dtype=np.int64)
    if n_pieces <= 1:
        piece[:] = 0
        return piece
    index = {tuple(c): i for i, c in enumerate(mask_coords.tolist())}
    seeds = rng.choice(n, size=n_pieces, replace=False)
    queue = deque()
    for p, s in enumerate(seeds):
        piece[s] = p
        queue.append(s)
    steps = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
    while queue:
        i = queue.popleft()
        x, y, z = mask_coords[i]
        for dx, dy, dz in steps:
            j = index.get((x + dx, y + dy, z + dz))
            if j is not None and piece[j] < 0:
                piece[j] = piece[i]
                queue.append(j)
    return piece


def generate_synthetic_scene(spec: SceneSpec):
    """Return ``(ground_truth, affinities, supervoxels)`` for ``spec``.

    Every ground-truth segment is 6-connected, and every supervoxel is a
    connected subset of exactly one ground-truth segment.
    """
    rng = np.random.default_rng(spec.seed)
    owner = _place_objects(rng, spec)
    gt = cc_label(owner, background=0, connectivity=1).astype(np.int64)
    sizes = np.bincount(gt.ravel())
    small = np.flatnonzero(sizes < spec.min_object_voxels)
    small = small[small > 0]
    if small.size:
        gt[np.isin(gt, small)] = 0
        gt = cc_label(gt, background=0, connectivity=1).astype(np.int64)

    aff = np.zeros((3,) + spec.shape)
    for c in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[c] = slice(None, -1)
        hi[c] = slice(1, None)
        a, b = gt[tuple(lo)], gt[tuple(hi)]
        same = (a == b) & (a > 0)
        u = rng.uniform(0.0, 1.0, size=a.shape)
        aff[c][tuple(lo)] = np.where(same, 1.0 - spec.noise * u, spec.noise * u)
    aff = zero_far_faces(aff)

    sv = np.zeros(spec.shape, dtype=np.int64)
    next_id = 1
    for obj in range(1, int(gt.max()) + 1):
        coords = np.argwhere(gt == obj)
        if coords.size == 0:
            continue
        extra = rng.poisson(spec.split_rate * coords.shape[0] / 1000.0)
        n_pieces = int(min(1 + extra, coords.shape[0]))
        piece = _split_object(rng, coords, n_pieces, spec.shape)
        sv[tuple(coords.T)] = piece + next_id
        next_id += n_pieces
    return gt, aff, sv

"""Dense 3-D volumes, supervoxel region graphs and axis-aligned transforms.

Label volumes are integer arrays indexed ``[x, y, z]``; label 0 is
background.  Affinity volumes are float arrays of shape ``(3, nx, ny, nz)``
where channel ``c`` holds the affinity between voxel ``v`` and ``v + e_c``.
Far-face entries (where ``v + e_c`` leaves the volume) are held at 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_TRANSFORMS = 16


def check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3 or min(labels.shape) < 1:
        raise ValueError(f"label volume must be 3-D and non-empty, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label volume must have an integer dtype, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    return labels


def check_affinities(aff: np.ndarray) -> np.ndarray:
    aff = np.asarray(aff, dtype=np.float64)
    if aff.ndim != 4 or aff.shape[0] != 3 or min(aff.shape[1:]) < 1:
        raise ValueError(f"affinity volume must have shape (3, nx, ny, nz), got {aff.shape}")
    if aff.size and (aff.min() < 0 or aff.max() > 1):
        raise ValueError("affinities must lie in [0, 1]")
    return zero_far_faces(aff)


def zero_far_faces(aff: np.ndarray) -> np.ndarray:
    """Return a copy of ``aff`` with the undefined far-face entries set to 0."""
    aff = np.array(aff, dtype=np.float64, copy=True)
    aff[0, -1, :, :] = 0
    aff[1, :, -1, :] = 0
    aff[2, :, :, -1] = 0
    return aff


def adjacent_pairs(labels: np.ndarray):
    """Yield ``(a, b)`` label arrays for every 6-adjacent voxel pair, one axis at a time."""
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        yield labels[tuple(lo)].ravel(), labels[tuple(hi)].ravel()


@dataclass
class EdgeInfo:
    contact: int
    sv_pair: tuple[int, int]


class RegionGraph:
    """Adjacency graph over segments with a union-find over supervoxels.

    Segments are identified by their union-find root, which is always the
    smallest supervoxel id in the segment, so partitions and their labels do
    not depend on merge order.
    """

    def __init__(self, supervoxels, contacts: dict[tuple[int, int], int]):
        self.supervoxels = np.array(sorted(int(s) for s in supervoxels), dtype=np.int64)
        self._parent = {int(s): int(s) for s in self.supervoxels}
        self.members = {int(s): [int(s)] for s in self.supervoxels}
        self.edges: dict[tuple[int, int], EdgeInfo] = {}
        self.neighbors: dict[int, set[int]] = {int(s): set() for s in self.supervoxels}
        for (a, b), n in contacts.items():
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self edge on supervoxel {a}")
            key = (min(a, b), max(a, b))
            self.edges[key] = EdgeInfo(int(n), key)
            self.neighbors[a].add(b)
            self.neighbors[b].add(a)

    def copy(self) -> "RegionGraph":
        g = RegionGraph.__new__(RegionGraph)
        g.supervoxels = self.supervoxels.copy()
        g._parent = dict(self._parent)
        g.members = {k: list(v) for k, v in self.members.items()}
        g.edges = {k: EdgeInfo(v.contact, v.sv_pair) for k, v in self.edges.items()}
        g.neighbors = {k: set(v) for k, v in self.neighbors.items()}
        return g

    @property
    def segments(self) -> list[int]:
        return sorted(self.members)

    def find(self, sv: int) -> int:
        sv = int(sv)
        root = sv
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[sv] != root:
            self._parent[sv], sv = root, self._parent[sv]
        return root

    def edge(self, a: int, b: int) -> tuple[int, int]:
        a, b = self.find(a), self.find(b)
        return (a, b) if a < b else (b, a)

    def merge(self, a: int, b: int) -> int:
        """Union the segments containing ``a`` and ``b``; returns the surviving root."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            raise ValueError(f"supervoxels {a} and {b} are already in one segment")
        keep, gone = min(ra, rb), max(ra, rb)
        self._parent[gone] = keep
        self.members[keep].extend(self.members.pop(gone))
        self.edges.pop((keep, gone), None)
        self.neighbors[keep].discard(gone)
        for y in self.neighbors.pop(gone):
            if y == keep:
                continue
            y_gone = self.neighbors[y]
            y_gone.discard(gone)
            old = self.edges.pop((min(gone, y), max(gone, y)))
            key = (min(keep, y), max(keep, y))
            cur = self.edges.get(key)
            if cur is None:
                self.edges[key] = EdgeInfo(old.contact, old.sv_pair)
                self.neighbors[keep].add(y)
                y_gone.add(keep)
            else:
                cur.contact += old.contact
                cur.sv_pair = min(cur.sv_pair, old.sv_pair)
        return keep

    def lookup_table(self) -> np.ndarray:
        """Dense array mapping supervoxel id -> segment root (0 stays 0)."""
        size = int(self.supervoxels.max()) + 1 if self.supervoxels.size else 1
        table = np.zeros(size, dtype=np.int64)
        for root, mem in self.members.items():
            table[mem] = root
        return table

    def relabel(self, sv: np.ndarray) -> np.ndarray:
        return self.lookup_table()[sv]


def build_region_graph(sv: np.ndarray) -> RegionGraph:
    """Build the 6-connected adjacency graph of the positive labels in ``sv``."""
    sv = check_labels(sv)
    ids = np.unique(sv)
    ids = ids[ids > 0]
    if ids.size == 0:
        raise ValueError("no supervoxels")
    chunks = []
    for a, b in adjacent_pairs(sv):
        keep = (a != b) & (a > 0) & (b > 0)
        if keep.any():
            a, b = a[keep].astype(np.int64), b[keep].astype(np.int64)
            chunks.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
    contacts = {}
    if chunks:
        pairs, counts = np.unique(np.concatenate(chunks), axis=0, return_counts=True)
        contacts = {(int(p[0]), int(p[1])): int(n) for p, n in zip(pairs, counts)}
    return RegionGraph(ids, contacts)


def _transform_flags(t: int) -> tuple[bool, bool, bool, bool]:
    if not isinstance(t, (int, np.integer)) or not 0 <= t < N_TRANSFORMS:
        raise ValueError(f"transform id must be an integer in [0, {N_TRANSFORMS}), got {t!r}")
    t = int(t)
    return bool(t & 1), bool(t & 2), bool(t & 4), bool(t & 8)


def inverse_transform(t: int) -> int:
    flip_x, flip_y, swap, flip_z = _transform_flags(t)
    if swap:
        flip_x, flip_y = flip_y, flip_x
    return int(flip_x) | int(flip_y) << 1 | int(swap) << 2 | int(flip_z) << 3


def apply_transform(v: np.ndarray, t: int) -> np.ndarray:
    """Apply one of the 16 axis-aligned symmetries (x-y dihedral group x z-flip).

    Bits of ``t``: 1 flips x, 2 flips y, 4 swaps x and y (after the flips),
    8 flips z.  3-D arrays are label volumes; 4-D arrays are affinity volumes
    whose channels are permuted and re-anchored so that each entry still
    describes the same voxel pair.
    """
    flip_x, flip_y, swap, flip_z = _transform_flags(t)
    v = np.asarray(v)
    if v.ndim == 3:
        out = v
        for axis, flip in enumerate((flip_x, flip_y, flip_z)):
            if flip:
                out = np.flip(out, axis)
        if swap:
            out = np.swapaxes(out, 0, 1)
        return np.ascontiguousarray(out)
    if v.ndim != 4 or v.shape[0] != 3:
        raise ValueError(f"expected a label (3-D) or affinity (3, nx, ny, nz) volume, got {v.shape}")
    channels = []
    for c, flip_c in enumerate((flip_x, flip_y, flip_z)):
        ch = v[c]
        for axis, flip in enumerate((flip_x, flip_y, flip_z)):
            if flip:
                ch = np.flip(ch, axis)
        if flip_c:
            # the pair (u, u+e_c) is now anchored one voxel earlier
            ch = np.roll(ch, -1, axis=c)
            idx = [slice(None)] * 3
            idx[c] = -1
            ch = ch.copy()
            ch[tuple(idx)] = 0
        channels.append(ch)
    if swap:
        channels = [np.swapaxes(channels[1], 0, 1), np.swapaxes(channels[0], 0, 1),
                    np.swapaxes(channels[2], 0, 1)]
    return np.ascontiguousarray(np.stack(channels))

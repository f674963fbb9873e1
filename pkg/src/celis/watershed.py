"""Affinity-graph watershed producing the initial supervoxels.

Steps: clamp affinities (high values force merges, low values cut edges),
grow basins by steepest ascent, then absorb basins smaller than a minimum
size along their strongest edges.  Basins left too small become background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .volume import check_affinities


@dataclass(frozen=True)
class WatershedParams:
    t_high: float = 0.99
    t_low: float = 0.3
    t_edge: float = 0.1
    t_size: int = 25

    def __post_init__(self):
        for name in ("t_high", "t_low", "t_edge"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.t_size < 1:
            raise ValueError(f"t_size must be >= 1, got {self.t_size}")


def _edge_list(shape):
    """Flat voxel indices ``(u, v)`` and channel of every in-volume 6-adjacent pair."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    us, vs, cs = [], [], []
    for c in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[c] = slice(None, -1)
        hi[c] = slice(1, None)
        us.append(idx[tuple(lo)].ravel())
        vs.append(idx[tuple(hi)].ravel())
        cs.append(np.full(us[-1].size, c))
    return np.concatenate(us), np.concatenate(vs), np.concatenate(cs)


def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def oversegment(aff: np.ndarray, params: WatershedParams) -> np.ndarray:
    """Supervoxel labels (0 = background, 1..n in order of first voxel)."""
    aff = check_affinities(aff)
    shape = aff.shape[1:]
    n = int(np.prod(shape))
    u, v, c = _edge_list(shape)
    lo_idx = np.unravel_index(u, shape)
    w = aff[(c,) + lo_idx]
    w = np.where(w >= params.t_high, 1.0, w)
    w = np.where(w < min(params.t_low, params.t_high), 0.0, w)
    keep = w > 0
    u, v, w = u[keep], v[keep], w[keep]

    # steepest ascent: each voxel points along its strongest edge, ties to the lowest neighbour
    nbr = np.concatenate([v, u])
    src = np.concatenate([u, v])
    ww = np.concatenate([w, w])
    order = np.lexsort((nbr, -ww, src))
    src, nbr, ww = src[order], nbr[order], ww[order]
    first = np.r_[src[:1] >= 0, src[1:] != src[:-1]]
    ptr_src, ptr_dst = src[first], nbr[first]
    forced = w >= 1.0
    a = np.concatenate([ptr_src, u[forced]])
    b = np.concatenate([ptr_dst, v[forced]])
    graph = coo_matrix((np.ones(a.size, dtype=np.int8), (a, b)), shape=(n, n))
    _, basin = connected_components(graph, directed=False)
    has_edge = np.zeros(n, dtype=bool)
    has_edge[u] = True
    has_edge[v] = True

    # basin graph weighted by the strongest connecting affinity
    bu, bv = basin[u], basin[v]
    cross = bu != bv
    pairs = np.stack([np.minimum(bu, bv)[cross], np.maximum(bu, bv)[cross]], axis=1)
    weights = w[cross]
    if pairs.size:
        o = np.lexsort((-weights, pairs[:, 1], pairs[:, 0]))
        pairs, weights = pairs[o], weights[o]
        head = np.r_[True, np.any(pairs[1:] != pairs[:-1], axis=1)]
        pairs, weights = pairs[head], weights[head]
        o = np.lexsort((pairs[:, 1], pairs[:, 0], -weights))
        pairs, weights = pairs[o], weights[o]

    n_basins = int(basin.max()) + 1 if n else 0
    size = np.bincount(basin[has_edge], minlength=n_basins).astype(np.int64)
    parent = list(range(n_basins))
    changed = True
    while changed:
        changed = False
        for (p, q), wt in zip(pairs.tolist(), weights.tolist()):
            if wt < params.t_edge:
                break
            rp, rq = _find(parent, p), _find(parent, q)
            if rp == rq or (size[rp] >= params.t_size and size[rq] >= params.t_size):
                continue
            keep_root, gone = min(rp, rq), max(rp, rq)
            parent[gone] = keep_root
            size[keep_root] += size[gone]
            changed = True
    root = np.array([_find(parent, b) for b in range(n_basins)], dtype=np.int64)
    seg = root[basin]
    big = size[seg] >= params.t_size
    seg = np.where(has_edge & big, seg, -1)

    out = np.zeros(n, dtype=np.int64)
    fg = np.flatnonzero(seg >= 0)
    _, first_idx, inv = np.unique(seg[fg], return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first_idx))
    out[fg] = rank[inv.ravel()] + 1
    return out.reshape(shape)


def _majority_match(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of voxels (foreground in both) whose ``a``-segment's majority ``b`` label is their own."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    fg = (a > 0) & (b > 0)
    if not fg.any():
        raise ValueError("no foreground voxels to compare")
    pairs, counts = np.unique(np.stack([a[fg], b[fg]], axis=1), axis=0, return_counts=True)
    # per a-label, keep the largest overlap (ties to the smaller b label)
    o = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs, counts = pairs[o], counts[o]
    head = np.r_[True, pairs[1:, 0] != pairs[:-1, 0]]
    return float(counts[head].sum()) / float(fg.sum())


def oversegmentation_purity(sv: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of foreground voxels whose supervoxel's majority ground-truth label is their own."""
    return _majority_match(np.asarray(sv), np.asarray(gt))


def oversegmentation_completeness(sv: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of foreground voxels whose ground-truth segment's majority supervoxel is their own."""
    return _majority_match(np.asarray(gt), np.asarray(sv))

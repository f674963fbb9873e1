"""Connectivity regions: tiling, static fragments and dynamic local components.

Each descriptor type tiles the lattice of descriptor centres into blocks of
``p = R - B + 1`` centres per axis.  A region's voxel extent is its block
dilated by ``(B - 1) / 2``, so every bounding box centred in the block fits
inside it and neighbouring extents overlap by ``B - 1``.

Inside an extent, supervoxels are cut into fragments (maximal 6-connected
same-supervoxel voxel sets).  Fragments never change; merges only join
fragments into local components.  All arrays below use *extent
coordinates*: the unclipped extent of the region, with voxels outside the
volume marked as background (-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.ndimage import find_objects
from skimage.measure import label as cc_label

from .descriptor import CENTER_BASED, DescriptorType, flat_offsets, pair_bits


@dataclass(frozen=True)
class Region:
    index: tuple[int, int, int]
    block_lo: tuple[int, int, int]
    block_hi: tuple[int, int, int]
    half: int

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.block_lo, self.block_hi))

    @property
    def ext_lo(self) -> tuple[int, int, int]:
        return tuple(l - self.half for l in self.block_lo)

    @property
    def ext_hi(self) -> tuple[int, int, int]:
        return tuple(h + self.half for h in self.block_hi)

    @property
    def ext_shape(self) -> tuple[int, int, int]:
        return tuple(s + 2 * self.half for s in self.block_shape)

    @property
    def n_centers(self) -> int:
        return int(np.prod(self.block_shape))

    def clipped_extent(self, shape) -> tuple[slice, slice, slice]:
        return tuple(slice(max(l, 0), min(h, n)) for l, h, n in zip(self.ext_lo, self.ext_hi, shape))

    def contains_center(self, x) -> bool:
        return all(l <= c < h for c, l, h in zip(x, self.block_lo, self.block_hi))

    def centers(self) -> np.ndarray:
        """Global coordinates of the block's centres in C order, shape ``(n, 3)``."""
        grids = np.indices(self.block_shape).reshape(3, -1).T
        return grids + np.array(self.block_lo)


@dataclass(frozen=True)
class RegionTiling:
    volume_shape: tuple[int, int, int]
    bbox_size: int
    region_size: int

    @property
    def half(self) -> int:
        return (self.bbox_size - 1) // 2

    @property
    def stride(self) -> int:
        return self.region_size - self.bbox_size + 1

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        p = self.stride
        return tuple(-(-n // p) for n in self.volume_shape)

    def region(self, index) -> Region:
        p = self.stride
        lo = tuple(i * p for i in index)
        hi = tuple(min((i + 1) * p, n) for i, n in zip(index, self.volume_shape))
        return Region(tuple(int(i) for i in index), lo, hi, self.half)

    def regions(self) -> list[Region]:
        return [self.region(idx) for idx in product(*(range(g) for g in self.grid_shape))]

    def region_of(self, x) -> Region:
        if not all(0 <= c < n for c, n in zip(x, self.volume_shape)):
            raise ValueError(f"position {tuple(x)} outside the volume")
        return self.region(tuple(int(c) // self.stride for c in x))


def tile_regions(volume_shape, dt: DescriptorType | None = None, *, bbox_size=None,
                 region_size=None) -> RegionTiling:
    """Tile the centre lattice of ``volume_shape`` for one descriptor type."""
    if dt is not None:
        bbox_size, region_size = dt.bbox_size, dt.region_size
    if bbox_size is None or region_size is None:
        raise ValueError("need a descriptor type or explicit bbox_size and region_size")
    if region_size < bbox_size:
        raise ValueError(f"region size {region_size} smaller than bounding box {bbox_size}")
    return RegionTiling(tuple(int(n) for n in volume_shape), int(bbox_size), int(region_size))


def integral_volume(occ: np.ndarray) -> np.ndarray:
    """3-D summed-area table with a zero leading plane on every axis."""
    sat = np.zeros(tuple(s + 1 for s in occ.shape), dtype=np.int64)
    sat[1:, 1:, 1:] = occ.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    return sat


def box_sum(sat: np.ndarray, lo, hi):
    """Sum over the box ``[lo, hi)`` given per-axis arrays (broadcast as an outer grid)."""
    x0, y0, z0 = (np.asarray(v) for v in lo)
    x1, y1, z1 = (np.asarray(v) for v in hi)
    ix = np.ix_(*(np.atleast_1d(a) for a in (x0, y0, z0)))
    jx = np.ix_(*(np.atleast_1d(a) for a in (x1, y1, z1)))
    X0, Y0, Z0 = ix
    X1, Y1, Z1 = jx
    return (sat[X1, Y1, Z1] - sat[X0, Y1, Z1] - sat[X1, Y0, Z1] - sat[X1, Y1, Z0]
            + sat[X0, Y0, Z1] + sat[X0, Y1, Z0] + sat[X1, Y0, Z0] - sat[X0, Y0, Z0])


class Fragment:
    """Static fragment geometry: bounding box and occupancy integral volume."""

    __slots__ = ("id", "sv", "lo", "hi", "sat", "size")

    def __init__(self, fid: int, sv: int, sub: np.ndarray, lo):
        self.id = fid
        self.sv = sv
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = self.lo + np.array(sub.shape)
        self.size = int(sub.sum())
        self.sat = integral_volume(sub)

    def count_in_boxes(self, lo_axes, hi_axes) -> np.ndarray:
        """Voxel counts in the outer grid of boxes ``[lo, hi)`` (extent coordinates)."""
        clo = [np.clip(np.asarray(l) - o, 0, e - o) for l, o, e in zip(lo_axes, self.lo, self.hi)]
        chi = [np.clip(np.asarray(h) - o, 0, e - o) for h, o, e in zip(hi_axes, self.lo, self.hi)]
        chi = [np.maximum(h, l) for h, l in zip(chi, clo)]
        return box_sum(self.sat, clo, chi)


class RegionState:
    """Local connectivity of one region under the current segmentation.

    Fragment edges join 6-adjacent fragments of different supervoxels; an
    edge is *on* when both supervoxels belong to one segment, and local
    components are the connected components of on-edges.  ``comp[f]`` is the
    smallest fragment id in the component of fragment ``f``.
    """

    def __init__(self, region: Region, dt: DescriptorType, sv: np.ndarray, seg_lookup=None):
        self.region = region
        self.dt = dt
        self.half = region.half
        self.bbox = dt.bbox_size
        ext_shape = region.ext_shape
        self.ext_shape = ext_shape
        sv_ext = np.zeros(ext_shape, dtype=np.int64)
        clip = region.clipped_extent(sv.shape)
        dst = tuple(slice(c.start - l, c.stop - l) for c, l in zip(clip, region.ext_lo))
        sv_ext[dst] = sv[clip]
        frag = cc_label(sv_ext, background=0, connectivity=1).astype(np.int64) - 1
        self.frag = frag
        self.frag_flat = frag.ravel()
        n = int(frag.max()) + 1
        self.n_frag = n
        flat_sv = sv_ext.ravel()
        first = np.full(n, -1, dtype=np.int64)
        fg = np.flatnonzero(self.frag_flat >= 0)
        first[self.frag_flat[fg][::-1]] = fg[::-1]
        self.frag_sv = flat_sv[first] if n else np.zeros(0, dtype=np.int64)
        self.fragments = [
            Fragment(f, int(self.frag_sv[f]), frag[slc] == f, [sl.start for sl in slc])
            for f, slc in enumerate(find_objects(frag + 1))
        ]

        chunks = []
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            a, b = frag[tuple(lo)].ravel(), frag[tuple(hi)].ravel()
            keep = (a >= 0) & (b >= 0) & (a != b)
            chunks.append(np.stack([np.minimum(a[keep], b[keep]), np.maximum(a[keep], b[keep])], 1))
        fe = np.unique(np.concatenate(chunks), axis=0) if chunks else np.zeros((0, 2), np.int64)
        self.fedges = fe.reshape(-1, 2).astype(np.int64)

        # centre lattice and zones
        bs = region.block_shape
        h = self.half
        strides = np.array([ext_shape[1] * ext_shape[2], ext_shape[2], 1], dtype=np.int64)
        local = np.indices(bs).reshape(3, -1).T
        self.centers_local = local
        self.centers_flat = (local + h) @ strides
        self.off_a, self.off_b = flat_offsets(dt, ext_shape)
        z = dt.zone_size
        self.zone_grid = tuple(-(-s // z) for s in bs)
        zidx = local // z
        self.zone_of_center = np.ravel_multi_index(zidx.T, self.zone_grid)
        self.n_zones = int(np.prod(self.zone_grid))
        order = np.argsort(self.zone_of_center, kind="stable")
        bounds = np.searchsorted(self.zone_of_center[order], np.arange(self.n_zones + 1))
        self.zone_positions = [order[bounds[i]:bounds[i + 1]] for i in range(self.n_zones)]
        self.frag_zone_mask = [self._fragment_zone_mask(fr) for fr in self.fragments]
        self._frag_vis: dict[int, np.ndarray] = {}

        if seg_lookup is None:
            seg_lookup = np.arange(int(sv.max()) + 1 if sv.size else 1)
        self.seg = np.asarray(seg_lookup)[self.frag_sv].astype(np.int64)
        self.comp = np.arange(n, dtype=np.int64)
        self.comp_mask = {f: self.frag_zone_mask[f] for f in range(n)}
        self.members = {f: [f] for f in range(n)}
        self._comp_vis: dict[int, np.ndarray] = {}
        if n:
            on = self.seg[self.fedges[:, 0]] == self.seg[self.fedges[:, 1]]
            self._join(self.fedges[on])
        self._refresh_active()

    # ------------------------------------------------------------------ geometry

    def _fragment_zone_mask(self, fr: Fragment) -> int:
        z = self.dt.zone_size
        bs = self.region.block_shape
        los = [np.arange(g) * z for g in self.zone_grid]
        his = [np.minimum((np.arange(g) + 1) * z, s) + self.bbox - 1 for g, s in zip(self.zone_grid, bs)]
        counts = fr.count_in_boxes(los, his).ravel()
        mask = 0
        for zi in np.flatnonzero(counts > 0):
            mask |= 1 << int(zi)
        return mask

    def fragment_visibility(self, f: int) -> np.ndarray:
        """Boolean over block centres: does fragment ``f`` intersect the bounding box?"""
        vis = self._frag_vis.get(f)
        if vis is None:
            bs = self.region.block_shape
            los = [np.arange(s) for s in bs]
            his = [np.arange(s) + self.bbox for s in bs]
            vis = (self.fragments[f].count_in_boxes(los, his) > 0).ravel()
            self._frag_vis[f] = vis
        return vis

    def component_visibility(self, c: int) -> np.ndarray:
        vis = self._comp_vis.get(c)
        if vis is None:
            mem = self.members[c]
            vis = self.fragment_visibility(mem[0])
            if len(mem) > 1:
                vis = vis.copy()
                for f in mem[1:]:
                    vis |= self.fragment_visibility(f)
            self._comp_vis[c] = vis
        return vis

    def center_index(self, x) -> int:
        """Index into the block's centre list of global position ``x``."""
        if not self.region.contains_center(x):
            raise ValueError("descriptor outside region")
        local = [int(c) - l for c, l in zip(x, self.region.block_lo)]
        return int(np.ravel_multi_index(local, self.region.block_shape))

    def ext_flat(self, x) -> int:
        local = [int(c) - l for c, l in zip(x, self.region.ext_lo)]
        if not all(0 <= c < s for c, s in zip(local, self.ext_shape)):
            raise ValueError(f"position {tuple(x)} outside the region extent")
        return int(np.ravel_multi_index(local, self.ext_shape))

    # ------------------------------------------------------------------ dynamics

    def _join(self, fedges: np.ndarray) -> bool:
        """Union the components joined by ``fedges`` (fragment pairs)."""
        changed = False
        for f, g in fedges:
            a, b = int(self.comp[f]), int(self.comp[g])
            if a == b:
                continue
            keep, gone = min(a, b), max(a, b)
            mem = self.members.pop(gone)
            self.comp[mem] = keep
            self.members[keep].extend(mem)
            self.comp_mask[keep] |= self.comp_mask.pop(gone)
            self._comp_vis.pop(keep, None)
            self._comp_vis.pop(gone, None)
            changed = True
        return changed

    def _refresh_active(self) -> None:
        self.active: dict[tuple[int, int], np.ndarray] = {}
        if not len(self.fedges):
            self.segments = set(np.unique(self.seg).tolist())
            return
        sa = self.seg[self.fedges[:, 0]]
        sb = self.seg[self.fedges[:, 1]]
        cross = np.flatnonzero(sa != sb)
        lo = np.minimum(sa[cross], sb[cross])
        hi = np.maximum(sa[cross], sb[cross])
        order = np.lexsort((hi, lo))
        lo, hi, cross = lo[order], hi[order], cross[order]
        if cross.size:
            starts = np.flatnonzero(np.r_[True, (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])])
            ends = np.r_[starts[1:], cross.size]
            for s, e in zip(starts, ends):
                self.active[(int(lo[s]), int(hi[s]))] = cross[s:e]
        self.segments = set(np.unique(self.seg).tolist())

    def fedges_between(self, a: int, b: int) -> np.ndarray:
        """Indices of fragment edges joining segments ``a`` and ``b`` (empty if inactive)."""
        key = (a, b) if a < b else (b, a)
        return self.active.get(key, _EMPTY)

    def apply_merge(self, a: int, b: int) -> bool:
        """Merge segments ``a`` and ``b`` (root becomes ``min``); True if components joined."""
        if a == b:
            raise ValueError("cannot merge a segment with itself")
        keep, gone = min(a, b), max(a, b)
        touched = self.fedges_between(a, b)
        has_gone = gone in self.segments
        if not has_gone:
            return False
        self.seg[self.seg == gone] = keep
        changed = self._join(self.fedges[touched]) if touched.size else False
        self._refresh_active()
        return changed

    # ------------------------------------------------------------------ queries

    def local_connectivity_query(self, u, v) -> bool:
        fu = int(self.frag_flat[self.ext_flat(u)])
        fv = int(self.frag_flat[self.ext_flat(v)])
        return fu >= 0 and fv >= 0 and self.comp[fu] == self.comp[fv]

    def visibility_set(self, x) -> set[int]:
        """Components with at least one voxel inside the bounding box centred at ``x``."""
        i = self.center_index(x)
        lo = self.centers_local[i]
        out = set()
        for fr in self.fragments:
            n = fr.count_in_boxes([[lo[0]], [lo[1]], [lo[2]]],
                                  [[lo[0] + self.bbox], [lo[1] + self.bbox], [lo[2] + self.bbox]])
            if n.item() > 0:
                out.add(int(self.comp[fr.id]))
        return out

    def zone_masks(self) -> dict[int, int]:
        """Zone visibility bitmask per segment present in the region."""
        out: dict[int, int] = {}
        for c, m in self.comp_mask.items():
            s = int(self.seg[c])
            out[s] = out.get(s, 0) | m
        return out

    def groups(self, fedge_idx, labels=None) -> dict[int, list[int]]:
        """Groups of ``labels`` (default: components) joined by the given fragment edges.

        Returns ``{group_root: [label, ...]}`` for groups of two or more labels.
        """
        if labels is None:
            labels = self.comp
        parent: dict[int, int] = {}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        fe = self.fedges[fedge_idx]
        for f, g in zip(labels[fe[:, 0]].tolist(), labels[fe[:, 1]].tolist()):
            parent.setdefault(f, f)
            parent.setdefault(g, g)
            rf, rg = find(f), find(g)
            if rf != rg:
                parent[max(rf, rg)] = min(rf, rg)
        out: dict[int, list[int]] = {}
        for x in sorted(parent):
            out.setdefault(find(x), []).append(x)
        return {r: v for r, v in out.items() if len(v) > 1}

    def active_zones(self, a: int, b: int) -> int:
        """Zones in which merging ``a`` and ``b`` can change some descriptor.

        A zone qualifies when two components that the merge joins together
        are both visible from it.  When the merge joins exactly one
        component of each segment this is the AND of their zone masks.
        """
        mask = 0
        for members in self.groups(self.fedges_between(a, b)).values():
            mask |= twice_mask(self.comp_mask[c] for c in members)
        return mask

    def relabel(self, fedge_idx, labels=None) -> np.ndarray:
        """Partition labels after additionally joining along ``fedge_idx``."""
        if labels is None:
            labels = self.comp
        out = labels.copy()
        for root, members in self.groups(fedge_idx, labels).items():
            out[np.isin(labels, members)] = root
        return out

    def bits(self, positions: np.ndarray, labels=None) -> np.ndarray:
        """Boolean descriptor bits ``(len(positions), k)`` at block-centre indices."""
        if labels is None:
            labels = self.comp
        return pair_bits(self.frag_flat, labels, self.centers_flat[positions], self.off_a, self.off_b)

    def center_labels(self, positions: np.ndarray, labels=None) -> np.ndarray:
        """Partition label of the voxel at each centre (-1 for background)."""
        if labels is None:
            labels = self.comp
        f = self.frag_flat[self.centers_flat[positions]]
        return np.where(f >= 0, np.append(labels, -1)[f], -1)


_EMPTY = np.zeros(0, dtype=np.int64)


def twice_mask(masks) -> int:
    """Bits set in at least two of ``masks``."""
    seen = twice = 0
    for m in masks:
        twice |= seen & m
        seen |= m
    return twice


def build_region_state(region: Region, dt: DescriptorType, sv: np.ndarray, graph=None) -> RegionState:
    lookup = graph.lookup_table() if graph is not None else None
    return RegionState(region, dt, np.asarray(sv), lookup)


def candidate_positions(st: RegionState, mask: int, conditions, center_groups,
                        pruned: dict | None = None, report=None) -> np.ndarray:
    """Block-centre indices where a merge can change the descriptor.

    Centres outside the zones of ``mask`` are dropped.  Every entry of
    ``conditions`` is a list of component groups, and a centre must see two
    components of some group in each list.  For center-based types the
    centre's own component must also lie in one of ``center_groups`` that
    has a second visible component.  Dropped centres are tallied in
    ``pruned`` under ``"zone"``, ``"lemma4"`` and ``"lemma3"`` and passed
    to ``report(rule, positions)`` (``None`` meaning every centre).
    """
    npos = st.region.n_centers

    def note(rule, n, positions):
        if pruned is not None:
            pruned[rule] = pruned.get(rule, 0) + int(n)
        if report is not None:
            report(rule, positions)

    if mask == 0:
        note("zone", npos, None)
        return np.zeros(0, dtype=np.int64)
    zones = [z for z in range(st.n_zones) if mask >> z & 1]
    cand = np.sort(np.concatenate([st.zone_positions[z] for z in zones]))
    if cand.size < npos:
        note("zone", npos - cand.size, np.setdiff1d(np.arange(npos), cand, assume_unique=True))
    counts = {}

    def count(group):
        key = tuple(group)
        got = counts.get(key)
        if got is None:
            got = np.zeros(cand.size, dtype=np.int32)
            for comp in group:
                got += st.component_visibility(comp)[cand]
            counts[key] = got
        return got

    ok = np.ones(cand.size, dtype=bool)
    for groups in conditions:
        hit = np.zeros(cand.size, dtype=bool)
        for g in groups:
            hit |= count(g) >= 2
        ok &= hit
    if not ok.all():
        note("lemma4", (~ok).sum(), cand[~ok])
    if st.dt.kind == CENTER_BASED:
        centre = st.center_labels(cand)
        own = np.zeros(cand.size, dtype=bool)
        for g in center_groups:
            own |= (count(g) >= 2) & np.isin(centre, g)
        drop = ok & ~own
        if drop.any():
            note("lemma3", drop.sum(), cand[drop])
        ok &= own
    return cand[ok]


def merge_candidates(st: RegionState, a: int, b: int, pruned=None, report=None):
    """``(fragment edges, positions)`` for merging segments ``a`` and ``b`` in this region."""
    fe = st.fedges_between(a, b)
    groups = list(st.groups(fe).values())
    mask = 0
    for g in groups:
        mask |= twice_mask(st.comp_mask[c] for c in g)
    return fe, candidate_positions(st, mask, [groups], groups, pruned, report)

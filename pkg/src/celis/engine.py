"""Incremental energy minimisation over supervoxel agglomerations.

The global energy sums a local cost at every descriptor centre of every
descriptor type.  For each candidate merge ``e`` the engine keeps
``delta[e] = E(S + e) - E(S)`` as a sum of per-region contributions, and
after committing a merge it only revisits regions that contain both merged
segments.  Work inside a region is cut down by four kinds of tests, each
of which is exact (a skipped term is identically zero):

``lemma1``
    the merge joins no local components in the region;
``zone``
    no zone of centres can see two components that the merge joins;
``lemma4``
    the bounding box at a centre sees fewer than two such components;
``lemma3``
    (center-based types) the centre voxel's own component is not joined;
``lemma2``
    the descriptor is unchanged, so the model is not evaluated.

After a merge ``e_t`` the contribution of a surviving edge changes by the
second difference ``E(S) - E(S+e) - E(S+e_t) + E(S+e_t+e)``, evaluated at
the few centres where both merges can act and with terms cancelled
whenever two descriptors coincide.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .descriptor import CENTER_BASED, DescriptorType, pack
from .energy import EnergyModel, FeatureProvider
from .regions import RegionState, candidate_positions, merge_candidates, tile_regions, twice_mask
from .volume import RegionGraph, build_region_graph, check_labels

RULES = ("lemma1", "zone", "lemma4", "lemma3", "lemma2")
PARALLEL_TOL = 1e-6


@dataclass
class Counters:
    """Work done by the engine next to what a naive recomputation would need."""

    descriptors: int = 0
    model_evals: int = 0
    naive_descriptors: int = 0
    pruned: dict = field(default_factory=lambda: {r: 0 for r in RULES})
    per_step: list = field(default_factory=list)
    parallel_checks: int = 0
    parallel_mismatches: int = 0

    def snapshot(self) -> tuple[int, int]:
        return self.descriptors, self.model_evals

    def to_dict(self) -> dict:
        return {
            "descriptors_computed": self.descriptors,
            "model_evals": self.model_evals,
            "naive_descriptors": self.naive_descriptors,
            "naive_model_evals": self.naive_descriptors,
            "pruned": dict(self.pruned),
            "parallel_checks": self.parallel_checks,
            "parallel_mismatches": self.parallel_mismatches,
            "per_step": list(self.per_step),
        }


@dataclass
class MergeEntry:
    t: int
    sv_pair: tuple[int, int]
    delta: float
    energy: float


@dataclass
class MergeLog:
    """Merges in execution order; replaying a prefix reproduces any intermediate state."""

    entries: list[MergeEntry] = field(default_factory=list)
    initial_energy: float = 0.0

    def to_jsonl(self) -> str:
        lines = [json.dumps({"t": e.t, "supervoxels": list(e.sv_pair), "delta": e.delta,
                             "energy": e.energy}) for e in self.entries]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "MergeLog":
        entries = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                entries.append(MergeEntry(int(d["t"]), tuple(int(v) for v in d["supervoxels"]),
                                          float(d["delta"]), float(d["energy"])))
        return cls(entries)

    def prefix(self, threshold: float) -> list[MergeEntry]:
        """Entries before the first one whose delta is not below ``threshold``."""
        out = []
        for e in self.entries:
            if not e.delta < threshold:
                break
            out.append(e)
        return out

    def replay(self, sv: np.ndarray, threshold: float = math.inf) -> np.ndarray:
        """Segment labels after the merges of :meth:`prefix`."""
        graph = build_region_graph(sv)
        for e in self.prefix(threshold):
            graph.merge(*e.sv_pair)
        return graph.relabel(sv)


class _Slot:
    """One (descriptor type, region) pair with its caches."""

    __slots__ = ("index", "type_index", "state", "model", "features", "bits", "energy",
                 "energy_sum", "delta", "is_center")

    def __init__(self, index, type_index, state, model, features):
        self.index = index
        self.type_index = type_index
        self.state = state
        self.model = model
        self.features = features
        self.bits = None
        self.energy = None
        self.energy_sum = 0.0
        self.delta: dict[tuple[int, int], float] = {}
        self.is_center = state.dt.kind == CENTER_BASED


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class EnergyEngine:
    """Maintains ``delta[e] = E(S + e) - E(S)`` for every current edge ``e``.

    ``auditor`` (optional) receives every skipped term so tests can force-compute
    it; see :class:`tests.auditing.PruningAuditor` for the expected methods.
    """

    def __init__(self, sv: np.ndarray, types: list[DescriptorType], models: list[EnergyModel],
                 provider: FeatureProvider, graph: RegionGraph | None = None, *,
                 auditor=None, check_parallel: bool = False):
        self.sv = check_labels(sv)
        if len(types) != len(models):
            raise ValueError("need one energy model per descriptor type")
        for dt, m in zip(types, models):
            if m.n_bits != dt.k or m.n_features != provider.dim:
                raise ValueError(f"model for type {dt.id} does not match k={dt.k}, d={provider.dim}")
        if tuple(provider.shape) != tuple(self.sv.shape):
            raise ValueError("feature provider and supervoxel volume shapes differ")
        self.types = list(types)
        self.models = list(models)
        self.provider = provider
        self.graph = graph if graph is not None else build_region_graph(self.sv)
        self.auditor = auditor
        self.check_parallel = check_parallel
        self.counters = Counters()
        self.slots: list[_Slot] = []
        self.seg_slots: dict[int, set[int]] = {}
        self.edge_slots: dict[tuple[int, int], set[int]] = {}
        self.delta: dict[tuple[int, int], float] = {}
        self.step = 0
        self._init_deltas()

    # ------------------------------------------------------------------ setup

    @property
    def n_positions(self) -> int:
        return sum(s.state.region.n_centers for s in self.slots)

    def _init_deltas(self) -> None:
        lookup = self.graph.lookup_table()
        c = self.counters
        before = c.snapshot()
        for ti, (dt, model) in enumerate(zip(self.types, self.models)):
            for region in tile_regions(self.sv.shape, dt).regions():
                state = RegionState(region, dt, self.sv, lookup)
                feats = self.provider.features_at(region.centers())
                slot = _Slot(len(self.slots), ti, state, model, feats)
                everywhere = np.arange(region.n_centers)
                bools = state.bits(everywhere)
                slot.bits = pack(bools)
                slot.energy = model.forward(model.inputs(bools, feats))
                slot.energy_sum = float(np.sum(slot.energy))
                c.descriptors += region.n_centers
                c.model_evals += region.n_centers
                self.slots.append(slot)
                for s in state.segments:
                    self.seg_slots.setdefault(s, set()).add(slot.index)
        n_edges = len(self.graph.edges)
        for slot in self.slots:
            st = slot.state
            inactive = n_edges - len(st.active)
            c.pruned["lemma1"] += inactive * st.region.n_centers
            if self.auditor is not None and inactive:
                others = [e for e in self.graph.edges if e not in st.active]
                self.auditor.delta_skipped(self, "lemma1", slot, [], others, None)
            for edge in sorted(st.active):
                slot.delta[edge] = self._region_delta(slot, edge)
                self.edge_slots.setdefault(edge, set()).add(slot.index)
        for edge in self.graph.edges:
            self._resum(edge)
        self._record_step(before)

    def _record_step(self, before) -> None:
        naive = self.n_positions * (len(self.graph.edges) + 1)
        self.counters.naive_descriptors += naive
        self.counters.per_step.append({
            "step": self.step,
            "descriptors": self.counters.descriptors - before[0],
            "model_evals": self.counters.model_evals - before[1],
            "naive_descriptors": naive,
            "edges": len(self.graph.edges),
        })

    def _resum(self, edge) -> None:
        slots = self.edge_slots.get(edge, ())
        self.delta[edge] = float(sum(self.slots[i].delta[edge] for i in sorted(slots)))

    # ------------------------------------------------------------------ candidate positions

    def _positions(self, slot: _Slot, mask: int, conditions, center_groups, report):
        return candidate_positions(slot.state, mask, conditions, center_groups,
                                   self.counters.pruned, report)

    def _eval_changed(self, slot: _Slot, positions, bools, ref_bits, ref_energy, report):
        """Energies for ``bools`` at ``positions``, reusing ``ref_energy`` where bits equal ``ref_bits``."""
        packed = pack(bools)
        same = np.all(packed == ref_bits, axis=1)
        out = ref_energy.copy()
        need = ~same
        if need.any():
            out[need] = slot.model.forward(
                slot.model.inputs(bools[need], slot.features[positions[need]]))
            self.counters.model_evals += int(need.sum())
        if same.any():
            self.counters.pruned["lemma2"] += int(same.sum())
            report("lemma2", positions[same])
        return out, packed

    # ------------------------------------------------------------------ first differences

    def _region_delta(self, slot: _Slot, edge, merges_before=()) -> float:
        """``sum_x E(x; S + e) - E(x; S)`` over the slot's centres, from the caches."""
        st = slot.state

        def report(rule, positions):
            if self.auditor is not None:
                self.auditor.delta_skipped(self, rule, slot, list(merges_before), [edge], positions)

        fe, pos = merge_candidates(st, *edge, self.counters.pruned, report)
        if pos.size == 0:
            return 0.0
        bools = st.bits(pos, st.relabel(fe))
        self.counters.descriptors += pos.size
        e1, _ = self._eval_changed(slot, pos, bools, slot.bits[pos], slot.energy[pos], report)
        return float(np.sum(e1 - slot.energy[pos]))

    # ------------------------------------------------------------------ merging

    def best_action(self):
        """``(edge, delta)`` with the lowest delta; ties go to larger contact, then smaller
        supervoxel pair.  Returns ``None`` when no edges remain."""
        if not self.delta:
            return None
        edges = self.graph.edges

        def rank(item):
            e, d = item
            info = edges[e]
            return (d, -info.contact, info.sv_pair)

        edge, d = min(self.delta.items(), key=rank)
        return edge, d

    def energy(self) -> float:
        return float(sum(s.energy_sum for s in self.slots))

    def commit_merge(self, a: int, b: int) -> None:
        """Merge the adjacent segments ``a`` and ``b`` and update every delta."""
        a, b = self.graph.find(a), self.graph.find(b)
        e_t = _key(a, b)
        if e_t not in self.graph.edges:
            raise ValueError(f"segments {a} and {b} are not adjacent")
        before = self.counters.snapshot()
        keep, gone = e_t
        slots_a = self.seg_slots.get(keep, set())
        slots_b = self.seg_slots.get(gone, set())
        both = sorted(slots_a & slots_b)
        touched = sorted(slots_a | slots_b)
        stale = {_key(s, y) for s in e_t for y in self.graph.neighbors[s]}
        new_deltas = {}
        for i in both:
            new_deltas[i] = self._commit_region(self.slots[i], keep, gone)
        for i in touched:
            slot = self.slots[i]
            if i in new_deltas:
                continue
            npos = slot.state.region.n_centers
            self.counters.pruned["lemma1"] += npos * len(slot.delta)
            if self.auditor is not None and slot.delta:
                self.auditor.delta2_skipped(self, "lemma1", slot, e_t, sorted(slot.delta), None)
            renamed = {}
            for (x, y), v in slot.delta.items():
                renamed[_key(keep if x == gone else x, keep if y == gone else y)] = v
            slot.state.apply_merge(keep, gone)
            new_deltas[i] = renamed
        for e in stale:
            self.edge_slots.pop(e, None)
            self.delta.pop(e, None)
        self.graph.merge(keep, gone)
        self.seg_slots[keep] = slots_a | slots_b
        self.seg_slots.pop(gone, None)
        resum = set()
        for i, deltas in new_deltas.items():
            slot = self.slots[i]
            slot.delta = deltas
            for e in deltas:
                self.edge_slots.setdefault(e, set()).add(i)
                resum.add(e)
        for e in self.graph.neighbors[keep]:
            resum.add(_key(keep, e))
        for e in sorted(resum):
            self._resum(e)
        self.step += 1
        self._record_step(before)

    def _commit_region(self, slot: _Slot, keep: int, gone: int) -> dict:
        st = slot.state
        c = self.counters
        npos = st.region.n_centers
        e_t = (keep, gone)
        h_t = st.fedges_between(keep, gone)
        old_bits = slot.bits.copy()
        old_energy = slot.energy.copy()
        if h_t.size:
            groups_t = list(st.groups(h_t).values())
            mask = 0
            for g in groups_t:
                mask |= twice_mask(st.comp_mask[cc] for cc in g)

            def report_t(rule, positions):
                if self.auditor is not None:
                    self.auditor.delta_skipped(self, rule, slot, [], [e_t], positions)

            pos = self._positions(slot, mask, [groups_t], groups_t, report_t)
            if pos.size:
                bools = st.bits(pos, st.relabel(h_t))
                c.descriptors += pos.size
                e2, packed = self._eval_changed(slot, pos, bools, slot.bits[pos],
                                                slot.energy[pos], report_t)
                slot.bits[pos] = packed
                slot.energy[pos] = e2
                slot.energy_sum = float(np.sum(slot.energy))

        # group pre-merge active pairs by their post-merge identity
        incoming: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for pair in st.active:
            if pair == e_t:
                continue
            x, y = pair
            post = _key(keep if x == gone else x, keep if y == gone else y)
            incoming.setdefault(post, []).append(pair)

        out = {}
        for post in sorted(incoming):
            olds = sorted(incoming[post])
            value = self._second_difference(slot, e_t, olds[0], olds, old_bits, old_energy)
            if self.check_parallel and len(olds) == 2:
                other = self._second_difference(slot, e_t, olds[1], olds, old_bits, old_energy,
                                                quiet=True)
                c.parallel_checks += 1
                if abs(other - value) > PARALLEL_TOL * max(1.0, abs(value)):
                    c.parallel_mismatches += 1
                    warnings.warn(f"parallel edges {olds} disagree ({value} vs {other}); recomputing")
                    value = None
            out[post] = value
        st.apply_merge(keep, gone)
        for post, value in out.items():
            if value is None:
                out[post] = self._region_delta(slot, post)
        if set(out) != set(st.active):
            raise RuntimeError("active set out of sync after merge")
        return out

    def _second_difference(self, slot: _Slot, e_t, e_old, olds, old_bits, old_energy,
                           quiet=False) -> float:
        """New contribution of the edge formed from ``olds`` after merging ``e_t``.

        Returns ``delta_old + sum_x [E0 - E1 - E2 + E3]`` with
        ``E0 = E(S)``, ``E1 = E(S + e_old)``, ``E2 = E(S + e_t)`` and
        ``E3 = E(S + e_t + e_old)``.
        """
        st = slot.state
        c = self.counters
        npos = st.region.n_centers
        base = slot.delta.get(e_old, 0.0)
        h_t = st.fedges_between(*e_t)
        h_old = st.fedges_between(*e_old)
        h_new = np.concatenate([st.fedges_between(*p) for p in olds])
        extra = np.setdiff1d(h_new, h_old, assume_unique=True)
        t_edges = np.concatenate([h_t, extra])

        def report(rule, positions):
            if self.auditor is not None and not quiet:
                self.auditor.delta2_skipped(self, rule, slot, e_t, [e_old], positions)

        if t_edges.size == 0:
            if not quiet:
                c.pruned["lemma1"] += npos
            report("lemma1", None)
            return base
        full = st.groups(np.concatenate([h_t, h_new]))
        fe = st.fedges
        t_comps = set(st.comp[fe[t_edges].ravel()].tolist())
        e_comps = set(st.comp[fe[h_new].ravel()].tolist())
        t_groups = [g for g in full.values() if t_comps.intersection(g)]
        e_groups = [g for g in full.values() if e_comps.intersection(g)]
        both = [g for g in t_groups if e_comps.intersection(g)]
        mask_t = mask_e = 0
        for g in t_groups:
            mask_t |= twice_mask(st.comp_mask[cc] for cc in g)
        for g in e_groups:
            mask_e |= twice_mask(st.comp_mask[cc] for cc in g)
        if quiet:
            saved = dict(c.pruned)
        pos = self._positions(slot, mask_t & mask_e, [t_groups, e_groups], both, report)
        if pos.size == 0:
            if quiet:
                c.pruned.update(saved)
            return base
        lab_old = st.relabel(h_old)
        lab_full = st.relabel(np.concatenate([h_t, h_new]))
        r0, e0 = old_bits[pos], old_energy[pos]
        r2, e2 = slot.bits[pos], slot.energy[pos]
        b1 = st.bits(pos, lab_old)
        b3 = st.bits(pos, lab_full)
        c.descriptors += 2 * pos.size
        r1, r3 = pack(b1), pack(b3)
        eq01 = np.all(r1 == r0, axis=1)
        eq23 = np.all(r3 == r2, axis=1)
        eq13 = np.all(r3 == r1, axis=1)
        e1 = e0.copy()
        need1 = ~eq01
        if need1.any():
            e1[need1] = slot.model.forward(slot.model.inputs(b1[need1], slot.features[pos[need1]]))
        e3 = e2.copy()
        copy13 = ~eq23 & eq13
        e3[copy13] = e1[copy13]
        need3 = ~eq23 & ~eq13
        if need3.any():
            e3[need3] = slot.model.forward(slot.model.inputs(b3[need3], slot.features[pos[need3]]))
        evals = int(need1.sum() + need3.sum())
        c.model_evals += evals
        c.pruned["lemma2"] += 2 * pos.size - evals
        if self.auditor is not None and not quiet:
            if eq01.any():
                self.auditor.delta_skipped(self, "lemma2", slot, [], [e_old], pos[eq01])
            if eq23.any():
                self.auditor.delta_skipped(self, "lemma2", slot, [e_t], [e_old], pos[eq23])
        if quiet:
            c.pruned.update(saved)
        d2 = (e3 - e2) - (e1 - e0)
        return base + float(np.sum(d2))

    # ------------------------------------------------------------------ driver

    def run_agglomeration(self, threshold: float = 0.0, max_steps: int | None = None) -> MergeLog:
        """Greedily merge the best edge while its delta is below ``threshold``."""
        log = MergeLog(initial_energy=self.energy())
        while max_steps is None or len(log.entries) < max_steps:
            best = self.best_action()
            if best is None:
                break
            edge, d = best
            if not d < threshold:
                break
            sv_pair = self.graph.edges[edge].sv_pair
            self.commit_merge(*edge)
            log.entries.append(MergeEntry(len(log.entries), sv_pair, d, self.energy()))
        return log

    def segment_labels(self) -> np.ndarray:
        return self.graph.relabel(self.sv)


def init_deltas(sv, types, models, provider, **kwargs) -> EnergyEngine:
    return EnergyEngine(sv, types, models, provider, **kwargs)


def run_agglomeration(engine: EnergyEngine, threshold: float = 0.0,
                      max_steps: int | None = None) -> MergeLog:
    return engine.run_agglomeration(threshold, max_steps)

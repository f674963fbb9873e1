"""Learning energy models from expert agglomerations.

An expert policy greedily merges the adjacent pair that most reduces the
variation of information against ground truth.  At each visited state every
candidate merge ``e`` and every descriptor centre whose descriptor would
change yields an example ``(r_pre, r_post, y = dVI_e)``.  Examples are
subsampled by priority sampling (one reservoir per sign of ``y``), their
class weights equalised, and a model is fitted by plain SGD so that costs
rise on descriptors produced by harmful merges and fall on those produced
by helpful ones.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .descriptor import DescriptorType, pack
from .energy import EnergyModel, FeatureProvider
from .metrics import ContingencyTable, contingency, delta_vi_merge
from .regions import RegionState, merge_candidates, tile_regions
from .volume import RegionGraph, build_region_graph

LOSSES = ("log", "signed_linear")
DEFAULT_SAMPLES = 200_000


# ---------------------------------------------------------------------- expert policy


@dataclass
class RolloutStep:
    segments: tuple[int, int]
    sv_pair: tuple[int, int]
    delta: float


def _edge_deltas(table: ContingencyTable, edges) -> dict:
    out = {}
    for u, v in edges:
        if u in table.row_cells and v in table.row_cells:
            out[(u, v)] = delta_vi_merge(table, u, v)
        else:
            out[(u, v)] = 0.0  # a segment with no foreground overlap leaves VI unchanged
    return out


def expert_rollout(sv: np.ndarray, gt: np.ndarray, graph: RegionGraph | None = None,
                   tol: float = 1e-12) -> list[RolloutStep]:
    """Greedy VI-optimal merges while some merge lowers VI by more than ``tol``.

    Ties are broken like the energy engine: larger contact, then smaller
    supervoxel pair.
    """
    graph = graph.copy() if graph is not None else build_region_graph(sv)
    table = contingency(sv, gt)
    deltas = _edge_deltas(table, graph.edges)
    steps = []
    while deltas:
        edge = min(deltas, key=lambda e: (deltas[e], -graph.edges[e].contact, graph.edges[e].sv_pair))
        d = deltas[edge]
        if not d < -tol:
            break
        u, v = edge
        steps.append(RolloutStep(edge, graph.edges[edge].sv_pair, d))
        keep = graph.merge(u, v)
        if u in table.row_cells and v in table.row_cells:
            table = table.merge_rows(u, v)
        elif v in table.row_cells or u in table.row_cells:
            # relabel the surviving row to the new root
            old = u if u in table.row_cells else v
            if old != keep:
                rows = np.where(table.rows == old, keep, table.rows)
                table = ContingencyTable(rows, table.cols, table.counts)
        deltas = {e: x for e, x in deltas.items() if u not in e and v not in e}
        deltas.update(_edge_deltas(table, [tuple(sorted((keep, y))) for y in graph.neighbors[keep]]))
    return steps


# ---------------------------------------------------------------------- example extraction


@dataclass
class ExampleSet:
    """Training examples of one or more descriptor types as flat arrays.

    ``weight`` holds the sampling-adjusted (and possibly class-balanced)
    weight; the sign of ``y`` gives the class.
    """

    k: int
    type_id: np.ndarray
    r_pre: np.ndarray  # (n, ceil(k/8)) packed bits
    r_post: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    features: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.y.size)

    @classmethod
    def empty(cls, k: int, d: int) -> "ExampleSet":
        nb = (k + 7) // 8
        return cls(k, np.zeros(0, np.int32), np.zeros((0, nb), np.uint8), np.zeros((0, nb), np.uint8),
                   np.zeros(0), np.zeros(0), np.zeros((0, d)))

    def select(self, mask) -> "ExampleSet":
        return ExampleSet(self.k, self.type_id[mask], self.r_pre[mask], self.r_post[mask],
                          self.y[mask], self.weight[mask], self.features[mask], dict(self.meta))

    @staticmethod
    def concat(sets: list["ExampleSet"]) -> "ExampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        k = sets[0].k
        if any(s.k != k for s in sets):
            raise ValueError("example sets have different descriptor lengths")
        cat = np.concatenate
        return ExampleSet(k, cat([s.type_id for s in sets]), cat([s.r_pre for s in sets]),
                          cat([s.r_post for s in sets]), cat([s.y for s in sets]),
                          cat([s.weight for s in sets]), cat([s.features for s in sets]),
                          dict(sets[0].meta))

    def _dtype(self):
        nb = (self.k + 7) // 8
        d = self.features.shape[1]
        return np.dtype([("type_id", "<i4"), ("r_pre", "u1", (nb,)), ("r_post", "u1", (nb,)),
                         ("y", "<f8"), ("weight", "<f8"), ("features", "<f8", (d,))])

    def save(self, path) -> None:
        """JSON header line followed by fixed-size little-endian records."""
        rec = np.zeros(len(self), dtype=self._dtype())
        for name in rec.dtype.names:
            rec[name] = getattr(self, name)
        header = {"k": self.k, "n_features": int(self.features.shape[1]), "n": len(self),
                  "record": [list(map(str, x)) for x in rec.dtype.descr], "meta": self.meta}
        Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + rec.tobytes())

    @classmethod
    def load(cls, path) -> "ExampleSet":
        raw = Path(path).read_bytes()
        head, blob = raw.split(b"\n", 1)
        header = json.loads(head)
        out = cls.empty(header["k"], header["n_features"])
        rec = np.frombuffer(blob, dtype=out._dtype())
        if rec.size != header["n"]:
            raise ValueError(f"{path}: header says {header['n']} records, found {rec.size}")
        return cls(header["k"], rec["type_id"].copy(), rec["r_pre"].copy(), rec["r_post"].copy(),
                   rec["y"].copy(), rec["weight"].copy(), rec["features"].copy(), header.get("meta", {}))


class PrioritySampler:
    """Priority sampling of ``capacity`` items without replacement.

    Each offered item with weight ``w`` gets priority ``w / u``, ``u`` uniform
    in (0, 1].  The highest-priority items are kept; ``threshold`` is the
    largest priority among items not kept, and kept items carry the adjusted
    weight ``max(w, threshold)``, making subset-sum estimates unbiased.
    """

    def __init__(self, capacity: int, rng: np.random.Generator | int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._heap: list = []
        self._count = 0
        self.threshold = 0.0

    def draw_priority(self, weight: float) -> float:
        u = 1.0 - self.rng.random()  # (0, 1]
        return abs(weight) / u

    def would_keep(self, priority: float) -> bool:
        """False when an item with this priority can neither be kept nor raise the threshold."""
        return priority > self.threshold

    def offer_with_priority(self, item, weight: float, priority: float) -> bool:
        self._count += 1
        entry = (priority, -self._count, weight, item)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
            return True
        if priority > self._heap[0][0]:
            dropped = heapq.heapreplace(self._heap, entry)
            self.threshold = max(self.threshold, dropped[0])
            return True
        self.threshold = max(self.threshold, priority)
        return False

    def offer(self, item, weight: float) -> bool:
        return self.offer_with_priority(item, weight, self.draw_priority(weight))

    def merge(self, other: "PrioritySampler") -> None:
        """Fold in another sampler's reservoir (priorities are independent, so the top-m stays valid)."""
        self.threshold = max(self.threshold, other.threshold)
        for priority, _, weight, item in sorted(other._heap, reverse=True):
            self.offer_with_priority(item, weight, priority)

    def items(self) -> list[tuple[object, float, float]]:
        """``(item, weight, adjusted_weight)`` in offer order."""
        kept = sorted(self._heap, key=lambda e: -e[1])
        return [(item, w, max(abs(w), self.threshold)) for _, _, w, item in kept]

    def __len__(self):
        return len(self._heap)


def priority_sample(stream, m: int, seed=0) -> list[tuple[object, float, float]]:
    """Priority-sample ``(item, y)`` pairs by ``|y|``; returns ``(item, y, adjusted_weight)``."""
    sampler = PrioritySampler(m, seed)
    for item, y in stream:
        sampler.offer(item, y)
    return sampler.items()


class _RolloutStates:
    """Region states for every descriptor type, stepped along a rollout."""

    def __init__(self, sv, gt, types, graph=None):
        self.graph = graph.copy() if graph is not None else build_region_graph(sv)
        self.table = contingency(sv, gt)
        lookup = self.graph.lookup_table()
        self.types = list(types)
        self.states: list[tuple[int, RegionState]] = []
        for ti, dt in enumerate(self.types):
            for region in tile_regions(sv.shape, dt).regions():
                self.states.append((ti, RegionState(region, dt, sv, lookup)))

    def deltas(self) -> dict:
        return _edge_deltas(self.table, self.graph.edges)

    def merge(self, u: int, v: int) -> None:
        u, v = self.graph.find(u), self.graph.find(v)
        keep = self.graph.merge(u, v)
        gone = u + v - keep
        if u in self.table.row_cells and v in self.table.row_cells:
            self.table = self.table.merge_rows(u, v)
        elif gone in self.table.row_cells:
            rows = np.where(self.table.rows == gone, keep, self.table.rows)
            self.table = ContingencyTable(rows, self.table.cols, self.table.counts)
        for _, st in self.states:
            if gone in st.segments:
                st.apply_merge(keep, gone)


def candidate_stream(sv, gt, types, rollout: list[RolloutStep] | None = None, *,
                     state_stride: int = 1, skip_zero: bool = True):
    """Yield ``(type_index, t, edge, y, state, fedges, positions)`` over rollout states.

    ``positions`` are the centres surviving the pruning tests; the
    descriptor may still be unchanged at some of them.
    """
    if state_stride < 1:
        raise ValueError("state_stride must be >= 1")
    if rollout is None:
        rollout = expert_rollout(sv, gt)
    walk = _RolloutStates(sv, gt, types)
    for t in range(len(rollout) + 1):
        if t % state_stride == 0:
            dvi = walk.deltas()
            for ti, st in walk.states:
                for edge in sorted(st.active):
                    y = dvi[edge]
                    if skip_zero and y == 0.0:
                        continue
                    fe, pos = merge_candidates(st, *edge)
                    if pos.size:
                        yield ti, t, edge, y, st, fe, pos
        if t < len(rollout):
            walk.merge(*rollout[t].sv_pair)


def example_stream(sv, gt, types, provider: FeatureProvider, rollout=None, *,
                   state_stride: int = 1, skip_zero: bool = False):
    """Every example (no sampling): yields ``(type_index, t, edge, y, position, r_pre, r_post, phi)``.

    ``position`` is the global centre coordinate; descriptors are boolean arrays.
    """
    for ti, t, edge, y, st, fe, pos in candidate_stream(sv, gt, types, rollout,
                                                        state_stride=state_stride,
                                                        skip_zero=skip_zero):
        pre = st.bits(pos)
        post = st.bits(pos, st.relabel(fe))
        changed = np.any(pre != post, axis=1)
        coords = st.centers_local[pos[changed]] + np.array(st.region.block_lo)
        feats = provider.features_at(coords)
        for c, a, b, f in zip(coords, pre[changed], post[changed], feats):
            yield ti, t, edge, y, tuple(int(v) for v in c), a, b, f


def extract_examples(sv, gt, types: list[DescriptorType], provider: FeatureProvider, *,
                     rollout=None, m: int = DEFAULT_SAMPLES, seed: int = 0,
                     state_stride: int = 1, samplers=None) -> dict:
    """Priority-sampled examples per descriptor type.

    Two reservoirs of ``m // 2`` (helpful and harmful merges) are kept per
    type.  Priorities are drawn before descriptors are computed, so centres
    that could not enter a reservoir cost nothing.  Pass ``samplers`` from a
    previous call to keep accumulating across volumes.

    Returns ``{type_index: (neg_sampler, pos_sampler)}``.
    """
    rng = np.random.default_rng(seed)
    if samplers is None:
        samplers = {ti: (PrioritySampler(max(1, m // 2), rng), PrioritySampler(max(1, m // 2), rng))
                    for ti in range(len(types))}
    for ti, t, edge, y, st, fe, pos in candidate_stream(sv, gt, types, rollout,
                                                        state_stride=state_stride):
        sampler = samplers[ti][0 if y < 0 else 1]
        u = 1.0 - sampler.rng.random(pos.size)
        prio = abs(y) / u
        hot = prio > sampler.threshold
        if not hot.any():
            continue
        pos, prio = pos[hot], prio[hot]
        pre = st.bits(pos)
        post = st.bits(pos, st.relabel(fe))
        changed = np.flatnonzero(np.any(pre != post, axis=1))
        if changed.size == 0:
            continue
        coords = st.centers_local[pos[changed]] + np.array(st.region.block_lo)
        feats = provider.features_at(coords)
        pre_p, post_p = pack(pre[changed]), pack(post[changed])
        for j in range(changed.size):
            q = prio[changed[j]]
            if sampler.would_keep(q):
                sampler.offer_with_priority((pre_p[j], post_p[j], feats[j]), y, q)
    return samplers


def sampled_examples(samplers, types, n_features: int) -> dict[int, ExampleSet]:
    """Convert reservoirs from :func:`extract_examples` into one :class:`ExampleSet` per type."""
    out = {}
    for ti, pair in samplers.items():
        k = types[ti].k
        rows = [r for s in pair for r in s.items()]
        if not rows:
            out[ti] = ExampleSet.empty(k, n_features)
            continue
        out[ti] = ExampleSet(
            k,
            np.full(len(rows), types[ti].id, dtype=np.int32),
            np.stack([item[0] for item, _, _ in rows]),
            np.stack([item[1] for item, _, _ in rows]),
            np.array([y for _, y, _ in rows], dtype=np.float64),
            np.array([w for _, _, w in rows], dtype=np.float64),
            np.stack([item[2] for item, _, _ in rows]).reshape(len(rows), n_features),
        )
    return out


def balance_classes(ex: ExampleSet) -> ExampleSet:
    """Rescale weights so helpful (y < 0) and harmful (y > 0) merges carry equal total weight."""
    neg = ex.y < 0
    pos = ex.y > 0
    w_neg, w_pos = ex.weight[neg].sum(), ex.weight[pos].sum()
    if w_neg <= 0 or w_pos <= 0:
        raise ValueError(
            "need examples with positive weight in both classes (helpful and harmful merges); "
            "extract from more states or volumes, or raise the sample size"
        )
    target = 0.5 * (w_neg + w_pos)
    weight = ex.weight.copy()
    weight[neg] *= target / w_neg
    weight[pos] *= target / w_pos
    out = ex.select(slice(None))
    out.weight = weight
    return out


# ---------------------------------------------------------------------- losses and SGD


def training_rows(ex: ExampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and signed row targets: ``(r_post, y)`` then ``(r_pre, -y)`` per example."""
    bits_post = np.unpackbits(ex.r_post, axis=1, count=ex.k).astype(np.float64)
    bits_pre = np.unpackbits(ex.r_pre, axis=1, count=ex.k).astype(np.float64)
    signed = np.sign(ex.y) * ex.weight
    x = np.concatenate([np.concatenate([bits_post, ex.features], 1),
                        np.concatenate([bits_pre, ex.features], 1)])
    return x, np.concatenate([signed, -signed])


def row_losses(z: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    """Per-row loss from output pre-activations ``z`` and signed targets ``y``."""
    if loss == "log":
        # -|y| log a for y > 0, -|y| log(1 - a) for y < 0, with a = logistic(z)
        return np.where(y > 0, y * np.logaddexp(0.0, -z), -y * np.logaddexp(0.0, z))
    if loss == "signed_linear":
        # negated like the log loss, so positive targets push the cost up
        return -y * expit(z)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def _output_grad(z, y, loss):
    a = expit(z)
    if loss == "log":
        return np.where(y > 0, -y * (1 - a), -y * a)
    return -y * a * (1 - a)


def loss_and_grads(model: EnergyModel, x: np.ndarray, y: np.ndarray, loss: str,
                   keep_mask: np.ndarray | None = None):
    """Mean row loss and its gradients ``[(dW, db), ...]`` for each layer.

    ``keep_mask`` (same shape as the second hidden layer) applies inverted
    dropout: kept units are scaled by ``1 / (1 - p)``.
    """
    w0, w1, w2 = model.weights
    b0, b1, b2 = model.biases
    n = x.shape[0]
    z0 = x @ w0 + b0
    h0 = np.maximum(z0, 0.0)
    z1 = h0 @ w1 + b1
    h1 = np.maximum(z1, 0.0)
    if keep_mask is not None:
        scale = keep_mask / (1.0 - model.dropout)
        h1d = h1 * scale
    else:
        h1d = h1
    z = (h1d @ w2 + b2)[:, 0]
    value = float(np.mean(row_losses(z, y, loss)))
    gz = _output_grad(z, y, loss)[:, None] / n
    g_w2 = h1d.T @ gz
    g_b2 = gz.sum(0)
    gh1 = gz @ w2.T
    if keep_mask is not None:
        gh1 = gh1 * scale
    gz1 = gh1 * (z1 > 0)
    g_w1 = h0.T @ gz1
    g_b1 = gz1.sum(0)
    gz0 = (gz1 @ w1.T) * (z0 > 0)
    g_w0 = x.T @ gz0
    g_b0 = gz0.sum(0)
    return value, [(g_w0, g_b0), (g_w1, g_b1), (g_w2, g_b2)]


def mean_loss(model: EnergyModel, x, y, loss: str, keep_mask=None) -> float:
    return loss_and_grads(model, x, y, loss, keep_mask)[0]


@dataclass
class TrainResult:
    model: EnergyModel
    losses: list[float]

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i + 1, repr(v)])


def train_energy_model(model: EnergyModel, examples: ExampleSet, loss: str = "log",
                       lr: float = 0.05, epochs: int = 10, batch: int = 256,
                       seed: int = 0, weight_scale: float | None = None) -> TrainResult:
    """Fit ``model`` (a copy is returned) by minibatch SGD on both rows of every example.

    Row targets are divided by ``weight_scale`` (default: their mean magnitude)
    so the learning rate does not depend on the units of the weights.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if examples.k != model.n_bits or examples.features.shape[1] != model.n_features:
        raise ValueError("example dimensions do not match the model")
    if len(examples) == 0:
        raise ValueError("no training examples")
    model = model.copy()
    rng = np.random.default_rng(seed)
    x, y = training_rows(examples)
    if weight_scale is None:
        weight_scale = float(np.mean(np.abs(y))) or 1.0
    y = y / weight_scale
    curve = []
    hidden = model.weights[1].shape[1]
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for start in range(0, order.size, batch):
            idx = order[start:start + batch]
            keep = None
            if model.dropout > 0:
                keep = (rng.random((idx.size, hidden)) >= model.dropout).astype(np.float64)
            value, grads = loss_and_grads(model, x[idx], y[idx], loss, keep)
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch starting {start}; "
                    f"max |w| = {max(float(np.abs(w).max()) for w in model.weights):.3g}, lr = {lr}"
                )
            for layer, (gw, gb) in enumerate(grads):
                model.weights[layer] -= lr * gw
                model.biases[layer] -= lr * gb
            total += value * idx.size
        curve.append(total / x.shape[0])
    model.meta = dict(model.meta, loss=loss, epochs=epochs, lr=lr, batch=batch, seed=seed)
    return TrainResult(model, curve)

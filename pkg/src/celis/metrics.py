"""Partition comparison: contingency tables, variation of information and Rand F1.

Only voxels that are foreground (label > 0) in both volumes are counted.
Entropies use the natural logarithm.
"""

from __future__ import annotations

import numpy as np


def _plogp_counts(counts, n: float) -> float:
    """``-sum p log p`` for integer counts out of ``n``."""
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    return float(-np.sum(c / n * np.log(c / n)))


def _nlogn(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0)), 0.0)


class ContingencyTable:
    """Sparse overlap counts ``n_ij`` between segments ``i`` of S and ``j`` of S*."""

    def __init__(self, rows: np.ndarray, cols: np.ndarray, counts: np.ndarray):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.total = int(self.counts.sum())
        self._index()

    def _index(self):
        self.row_cells: dict[int, dict[int, int]] = {}
        for i, j, n in zip(self.rows.tolist(), self.cols.tolist(), self.counts.tolist()):
            self.row_cells.setdefault(i, {})[j] = n
        self.row_sums = {i: sum(c.values()) for i, c in self.row_cells.items()}
        col_sums: dict[int, int] = {}
        for j, n in zip(self.cols.tolist(), self.counts.tolist()):
            col_sums[j] = col_sums.get(j, 0) + n
        self.col_sums = col_sums

    def as_dense(self) -> tuple[np.ndarray, list[int], list[int]]:
        ri = sorted(self.row_sums)
        ci = sorted(self.col_sums)
        rpos = {r: k for k, r in enumerate(ri)}
        cpos = {c: k for k, c in enumerate(ci)}
        out = np.zeros((len(ri), len(ci)), dtype=np.int64)
        for i, j, n in zip(self.rows, self.cols, self.counts):
            out[rpos[int(i)], cpos[int(j)]] += n
        return out, ri, ci

    def merge_rows(self, u: int, v: int) -> "ContingencyTable":
        """Table after merging segments ``u`` and ``v`` of S (kept as ``min(u, v)``)."""
        if u == v:
            raise ValueError("cannot merge a row with itself")
        for r in (u, v):
            if r not in self.row_cells:
                raise KeyError(f"segment {r} has no foreground overlap")
        keep = min(u, v)
        rows = np.where(np.isin(self.rows, (u, v)), keep, self.rows)
        return _aggregate(rows, self.cols, self.counts)


def _aggregate(rows, cols, counts) -> ContingencyTable:
    pairs = np.stack([rows, cols], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    summed = np.bincount(inv.ravel(), weights=counts, minlength=len(uniq)).astype(np.int64)
    return ContingencyTable(uniq[:, 0], uniq[:, 1], summed)


def contingency(seg: np.ndarray, gt: np.ndarray) -> ContingencyTable:
    seg = np.asarray(seg)
    gt = np.asarray(gt)
    if seg.shape != gt.shape:
        raise ValueError(f"shape mismatch: {seg.shape} vs {gt.shape}")
    fg = (seg > 0) & (gt > 0)
    if not fg.any():
        raise ValueError("volumes share no foreground voxels")
    rows = seg[fg].astype(np.int64)
    cols = gt[fg].astype(np.int64)
    return _aggregate(rows, cols, np.ones(rows.size, dtype=np.int64))


def entropies(t: ContingencyTable) -> tuple[float, float, float]:
    """``(H(S), H(S*), H(S, S*))`` in nats."""
    n = float(t.total)
    return (_plogp_counts(list(t.row_sums.values()), n),
            _plogp_counts(list(t.col_sums.values()), n),
            _plogp_counts(t.counts, n))


def variation_of_information(t: ContingencyTable) -> float:
    h_s, h_gt, h_joint = entropies(t)
    return max(0.0, 2 * h_joint - h_s - h_gt)


def vi_split_merge(t: ContingencyTable) -> tuple[float, float]:
    """``(H(S | S*), H(S* | S))``: over-segmentation and under-segmentation parts of VI."""
    h_s, h_gt, h_joint = entropies(t)
    return max(0.0, h_joint - h_gt), max(0.0, h_joint - h_s)


def _pairs(c) -> float:
    c = np.asarray(list(c), dtype=np.float64)
    return float(np.sum(c * (c - 1) / 2))


def rand_f1(t: ContingencyTable) -> float:
    """F1 of same-segment classification over all voxel pairs (0 when degenerate)."""
    tp = _pairs(t.counts)
    pred = _pairs(t.row_sums.values())
    true = _pairs(t.col_sums.values())
    if pred == 0 or true == 0 or tp == 0:
        return 0.0
    p, r = tp / pred, tp / true
    return 2 * p * r / (p + r)


def delta_vi_merge(t: ContingencyTable, u: int, v: int) -> float:
    """Change in VI from merging segments ``u`` and ``v`` of S.

    With ``g(n) = n log n``, ``N * VI = sum_i g(a_i) + sum_j g(b_j) - 2 sum_ij g(n_ij)``
    (``N`` is unchanged by a merge), so only the two rows' terms need replacing.
    """
    if u == v:
        raise ValueError("cannot merge a segment with itself")
    cu = t.row_cells.get(u)
    cv = t.row_cells.get(v)
    if cu is None or cv is None:
        raise KeyError(f"segment {u if cu is None else v} has no foreground overlap")
    au, av = t.row_sums[u], t.row_sums[v]
    d_rows = _nlogn(au + av) - _nlogn(au) - _nlogn(av)
    d_cells = 0.0
    for j in cu.keys() & cv.keys():
        d_cells += _nlogn(cu[j] + cv[j]) - _nlogn(cu[j]) - _nlogn(cv[j])
    return float(d_rows - 2 * d_cells) / t.total


def evaluate_segmentation(seg: np.ndarray, gt: np.ndarray) -> dict:
    t = contingency(seg, gt)
    split, merge = vi_split_merge(t)
    return {"vi": variation_of_information(t), "rand_f1": rand_f1(t),
            "vi_split": split, "vi_merge": merge}

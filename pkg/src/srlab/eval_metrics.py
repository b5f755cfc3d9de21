"""Cluster-to-class matching and IoU reporting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import IdOutOfRange, NonFiniteScore, OverlappingIdSets


def confusion_matrix(pred, gt, n_pred: int, n_gt: int) -> np.ndarray:
    """Counts with entry ``(i, j)`` = number of points predicted ``i`` whose truth is ``j``."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise IdOutOfRange(f"pred/gt lengths differ: {pred.shape} vs {gt.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= n_pred):
        raise IdOutOfRange(f"prediction ids must lie in [0, {n_pred})")
    if gt.size and (gt.min() < 0 or gt.max() >= n_gt):
        raise IdOutOfRange(f"ground-truth ids must lie in [0, {n_gt})")
    out = np.zeros((n_pred, n_gt), dtype=np.int64)
    np.add.at(out, (pred, gt), 1)
    return out


def _pad_square(score: np.ndarray) -> np.ndarray:
    n = max(score.shape)
    out = np.zeros((n, n), dtype=np.float64)
    out[: score.shape[0], : score.shape[1]] = score
    return out


def hungarian_match(score, maximize: bool = True) -> np.ndarray:
    """Optimal assignment ``perm`` with row ``i`` matched to column ``perm[i]``.

    Rectangular inputs are zero-padded to square.  Among optimal assignments the
    lexicographically smallest permutation is returned: rows are fixed one at a
    time to the smallest column that still admits an optimal completion.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError(f"score must be 2-D, got shape {score.shape}")
    if not np.all(np.isfinite(score)):
        raise NonFiniteScore("score matrix contains NaN or Inf")
    score = _pad_square(score)
    n = len(score)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    cost = -score if maximize else score
    r, c = linear_sum_assignment(cost)
    best = cost[r, c].sum()
    tol = 1e-9 * max(1.0, np.abs(cost).max()) * n

    perm = np.empty(n, dtype=np.int64)
    rows = list(range(n))
    cols = list(range(n))
    fixed = 0.0
    for i in range(n):
        rest_rows = rows[1:]
        for j in cols:
            rest_cols = [k for k in cols if k != j]
            total = fixed + cost[i, j]
            if rest_rows:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub)
                total += sub[rr, cc].sum()
            if total <= best + tol:
                perm[i] = j
                fixed += cost[i, j]
                cols = rest_cols
                break
        rows = rest_rows
    return perm


def per_class_iou(pred, gt, class_set) -> tuple[np.ndarray, np.ndarray]:
    """IoU per class in ``class_set`` and a mask of classes absent from both pred and gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    ious, absent = [], []
    for c in class_set:
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        ious.append(np.count_nonzero(p & g) / union if union else 0.0)
        absent.append(union == 0)
    return np.array(ious, dtype=np.float64), np.array(absent, dtype=bool)


def match_clusters(pred_novel, gt_novel, n_clusters: int, novel_ids) -> dict[int, int]:
    """Map cluster ids to novel class ids by maximising pairwise IoU."""
    novel_ids = list(novel_ids)
    n = max(n_clusters, len(novel_ids))
    cm = confusion_matrix(pred_novel, np.searchsorted(novel_ids, gt_novel), n, n).astype(np.float64)
    union = cm.sum(axis=1, keepdims=True) + cm.sum(axis=0, keepdims=True) - cm
    iou = np.divide(cm, union, out=np.zeros_like(cm), where=union > 0)
    perm = hungarian_match(iou, maximize=True)
    return {int(k): novel_ids[perm[k]] for k in range(n_clusters) if perm[k] < len(novel_ids)}


def matched_accuracy(pred, gt) -> float:
    """Fraction of points correct after the best one-to-one relabelling of ``pred``."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.size == 0:
        return 0.0
    _, p = np.unique(pred, return_inverse=True)
    _, g = np.unique(gt, return_inverse=True)
    n = max(p.max(), g.max()) + 1
    cm = confusion_matrix(p, g, n, n)
    r, c = linear_sum_assignment(-cm)
    return float(cm[r, c].sum() / pred.size)


@dataclass
class MetricsReport:
    class_ids: list[int]
    iou: list[float]
    absent: list[bool]
    known_ids: list[int]
    novel_ids: list[int]
    novel_mean: float
    known_mean: float
    all_mean: float
    matching: dict[int, int] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    head_medium_tail: dict[str, float] = field(default_factory=dict)
    class_names: list[str] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["matching"] = {str(k): v for k, v in self.matching.items()}
        return json.dumps(d, indent=2)

    def table(self) -> str:
        names = self.class_names or [str(c) for c in self.class_ids]
        headers = names + ["Novel", "Known", "All"]
        values = [f"{100 * v:.1f}" if not a else "-" for v, a in zip(self.iou, self.absent)]
        values += [f"{100 * v:.1f}" for v in (self.novel_mean, self.known_mean, self.all_mean)]
        widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
        line1 = " | ".join(h.rjust(w) for h, w in zip(headers, widths))
        line2 = " | ".join(v.rjust(w) for v, w in zip(values, widths))
        return f"{line1}\n{'-' * len(line1)}\n{line2}"


def _mean(values: np.ndarray) -> float:
    return float(values.mean()) if len(values) else float("nan")


def summarize(iou, known_ids, novel_ids, absent=None, size_rank=None, class_ids=None) -> MetricsReport:
    """Aggregate per-class IoU into known/novel/all means.

    ``iou`` is indexed by position in ``class_ids`` (default ``0..len(iou)-1``).
    Absent classes are excluded from means.  ``size_rank`` lists novel class ids
    from largest to smallest and is split into head/medium/tail thirds.
    """
    iou = np.asarray(iou, dtype=np.float64)
    class_ids = list(range(len(iou))) if class_ids is None else [int(c) for c in class_ids]
    absent = np.zeros(len(iou), dtype=bool) if absent is None else np.asarray(absent, dtype=bool)
    known_ids, novel_ids = [int(c) for c in known_ids], [int(c) for c in novel_ids]
    if set(known_ids) & set(novel_ids):
        raise OverlappingIdSets(f"ids in both sets: {sorted(set(known_ids) & set(novel_ids))}")
    if sorted(known_ids + novel_ids) != sorted(class_ids):
        raise OverlappingIdSets("known and novel ids must exactly cover the class ids")
    pos = {c: k for k, c in enumerate(class_ids)}

    def mean_of(ids):
        idx = [pos[c] for c in ids if not absent[pos[c]]]
        return _mean(iou[idx])

    hmt = {}
    if size_rank is not None:
        for name, group in zip(("head", "medium", "tail"), np.array_split(np.asarray(size_rank), 3)):
            hmt[name] = mean_of([int(c) for c in group])
    return MetricsReport(
        class_ids=class_ids,
        iou=iou.tolist(),
        absent=absent.tolist(),
        known_ids=known_ids,
        novel_ids=novel_ids,
        novel_mean=mean_of(novel_ids),
        known_mean=mean_of(known_ids),
        all_mean=mean_of(class_ids),
        head_medium_tail=hmt,
    )


def evaluate_segmentation(pred, gt, known_ids, novel_ids, n_clusters: int | None = None) -> MetricsReport:
    """Full report: known ids are scored directly, novel clusters after IoU-based matching.

    ``pred`` holds known class ids for points predicted as known and
    ``max(class ids) + 1 + k`` for novel cluster ``k``.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    known_ids, novel_ids = sorted(int(c) for c in known_ids), sorted(int(c) for c in novel_ids)
    class_ids = sorted(known_ids + novel_ids)
    offset = max(class_ids) + 1
    n_clusters = len(novel_ids) if n_clusters is None else n_clusters

    cluster = pred - offset
    novel_gt = np.isin(gt, novel_ids)
    in_cluster = cluster >= 0
    sel = novel_gt & in_cluster
    mapping = match_clusters(cluster[sel], gt[sel], n_clusters, novel_ids)
    relabeled = pred.copy()
    for k in range(n_clusters):
        relabeled[cluster == k] = mapping.get(k, -1)
    iou, absent = per_class_iou(relabeled, gt, class_ids)
    sizes = {c: int(np.count_nonzero(gt == c)) for c in novel_ids}
    rank = sorted(novel_ids, key=lambda c: (-sizes[c], c))
    report = summarize(iou, known_ids, novel_ids, absent=absent, size_rank=rank, class_ids=class_ids)
    report.matching = mapping
    report.confusion = confusion_matrix(
        np.clip(relabeled, -1, None) + 1, gt + 1, offset + 1, offset + 1
    )[1:, 1:].tolist()
    return report

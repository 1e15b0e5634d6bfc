"""Retrieval evaluation under the cross-camera protocol, plus cluster
quality scoring.

For each query, gallery items that share both its identity and its camera
are excluded (they are near-duplicates, not retrieval successes), as are
junk items labeled -1. Remaining items are ranked by ascending Euclidean
distance with ties broken by gallery order. Queries left with no relevant
item are skipped and counted.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

JUNK_IDENTITY = -1


@dataclass
class EvalItem:
    """One embedded image with its identity and camera labels."""

    embedding: np.ndarray
    identity: int
    camera: int


@dataclass
class RankingRow:
    """Ranked gallery for one query, in valid-subset index space."""

    query_index: int
    order: np.ndarray            # gallery indices, best match first
    relevant: np.ndarray         # bool per ranked position
    num_relevant: int = field(init=False)

    def __post_init__(self):
        self.num_relevant = int(self.relevant.sum())


def _check_items(items, what):
    if not items:
        raise UsageError(f"{what} set is empty")
    dim = np.asarray(items[0].embedding).shape
    if len(dim) != 1:
        raise ShapeError(f"{what} embeddings must be 1-D, got {dim}")
    for it in items:
        if np.asarray(it.embedding).shape != dim:
            raise ShapeError(f"{what} embeddings disagree in width")
    return dim[0]


def rank_gallery(query, gallery, query_index=0):
    """Rank gallery items for one query under the exclusion rules.

    Returns a RankingRow over the valid gallery subset; ``order`` holds
    original gallery indices. Ties in distance keep gallery order (stable
    sort), so equal embeddings rank by position.
    """
    _check_items(gallery, "gallery")
    q = np.asarray(query.embedding, dtype=np.float64)
    ids = np.fromiter((g.identity for g in gallery), dtype=np.int64, count=len(gallery))
    cams = np.fromiter((g.camera for g in gallery), dtype=np.int64, count=len(gallery))
    valid = (ids != JUNK_IDENTITY) & ~((ids == query.identity) & (cams == query.camera))
    valid_idx = np.nonzero(valid)[0]
    mat = np.stack([np.asarray(gallery[i].embedding, dtype=np.float64) for i in valid_idx]) \
        if valid_idx.size else np.zeros((0, q.shape[0]))
    if mat.size and mat.shape[1] != q.shape[0]:
        raise ShapeError(
            f"query width {q.shape[0]} does not match gallery width {mat.shape[1]}")
    dists = np.sqrt(((mat - q) ** 2).sum(axis=1)) if mat.size else np.zeros(0)
    order_local = np.argsort(dists, kind="stable")
    order = valid_idx[order_local]
    relevant = (ids[order] == query.identity) & (query.identity != JUNK_IDENTITY)
    return RankingRow(query_index=query_index, order=order, relevant=relevant)


def rank_all(queries, gallery):
    _check_items(queries, "query")
    return [rank_gallery(q, gallery, i) for i, q in enumerate(queries)]


def _counted(rows):
    return [r for r in rows if r.num_relevant > 0]


def cmc(rows, ks=(1, 5, 10)):
    """Cumulative match characteristic at the given ranks.

    A query scores at rank k when some relevant item appears in its top k.
    Queries without relevant items are skipped.
    """
    for k in ks:
        if k < 1:
            raise UsageError(f"CMC rank must be at least 1, got {k}")
    counted = _counted(rows)
    if not counted:
        return {k: 0.0 for k in ks}
    hits = {k: 0 for k in ks}
    for row in counted:
        first = int(np.argmax(row.relevant)) + 1  # 1-based rank of first hit
        for k in ks:
            if first <= k:
                hits[k] += 1
    return {k: hits[k] / len(counted) for k in ks}


def mean_average_precision(rows):
    """Mean over counted queries of average precision.

    AP for one query is the mean over its relevant items, at ranks r, of
    precision at r (relevant-in-top-r divided by r).
    """
    counted = _counted(rows)
    if not counted:
        return 0.0
    aps = []
    for row in counted:
        rel = row.relevant.astype(np.float64)
        cum = np.cumsum(rel)
        ranks = np.arange(1, rel.size + 1)
        precisions = cum[rel > 0] / ranks[rel > 0]
        aps.append(float(precisions.mean()))
    return float(np.mean(aps))


def evaluate(queries, gallery, ks=(1, 5, 10)):
    """Full protocol: returns rank accuracies, mAP, and query accounting."""
    rows = rank_all(queries, gallery)
    counted = _counted(rows)
    metrics = {f"rank{k}": v for k, v in cmc(rows, ks).items()}
    metrics["mAP"] = mean_average_precision(rows)
    metrics["num_queries"] = len(counted)
    metrics["num_skipped"] = len(rows) - len(counted)
    return metrics


def nmi(labels_a, labels_b):
    """Normalized mutual information with arithmetic-mean normalization.

    Symmetric in its arguments; 1.0 when the partitions match exactly
    (including the degenerate single-cluster pair), 0.0 when independent.
    """
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise UsageError(f"expected matching non-empty 1-D labels, got {a.shape} and {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    pab = table / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha + hb == 0.0:
        return 1.0  # both partitions are single clusters, identical by definition
    mask = pab > 0
    mi = float(np.sum(pab[mask] * (np.log(pab[mask])
                                   - np.log(np.outer(pa, pb)[mask]))))
    return float(max(0.0, 2.0 * mi / (ha + hb)))


def render_metrics(metrics):
    """Metrics dict as stable ``key = value`` lines."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        text = repr(float(value)) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_metrics(path, metrics):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_metrics(metrics))

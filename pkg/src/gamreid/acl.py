"""Cluster-level discrimination with bottom-up merging.

Clusters start as singletons, one per training instance, and a memory
bank holds one unit-norm centroid per cluster. Training pulls each
embedding toward its assigned centroid through a softmax over all
centroids. Between training stages, pairs of clusters merge greedily
under a distance that penalizes already-large clusters, which keeps
cluster sizes balanced while the count shrinks.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, IntegrityError, UsageError


@dataclass(frozen=True)
class MergeSchedule:
    """How many merges happen between stages and how they are scored.

    merge_fraction sets the per-round merge count N_C = ceil(fraction * n)
    against the original instance count n; lam is the size-balance weight;
    min_cluster_fraction floors the cluster count at ceil(fraction * n).
    """

    merge_fraction: float = 0.04
    lam: float = 0.0005
    min_cluster_fraction: float = 0.1

    def validate(self):
        if not 0.0 < self.merge_fraction <= 1.0:
            raise ConfigError(f"merge_fraction must be in (0, 1], got {self.merge_fraction}")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if not 0.0 <= self.min_cluster_fraction <= 1.0:
            raise ConfigError(
                f"min_cluster_fraction must be in [0, 1], got {self.min_cluster_fraction}")
        return self

    def merges_per_round(self, n):
        return int(math.ceil(self.merge_fraction * n))

    def cluster_floor(self, n):
        return max(1, int(math.ceil(self.min_cluster_fraction * n)))


class MemoryBank:
    """Unit-norm cluster centroids, their sizes, and the instance map."""

    def __init__(self, centroids, sizes, assignment):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.validate()

    @classmethod
    def singletons(cls, features):
        """One cluster per instance, centered on its (normalized) feature."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise UsageError(f"expected a [n, D] feature matrix, got {feats.shape}")
        n = feats.shape[0]
        return cls(_unit_rows(feats), np.ones(n, dtype=np.int64), np.arange(n, dtype=np.int64))

    def validate(self):
        m = self.centroids.shape[0]
        if self.centroids.ndim != 2 or m < 1:
            raise IntegrityError(f"centroids must be [m, D] with m >= 1, got {self.centroids.shape}")
        if self.sizes.shape != (m,) or (self.sizes < 1).any():
            raise IntegrityError("every cluster needs a positive size")
        n = self.assignment.shape[0]
        if self.assignment.ndim != 1 or n < 1:
            raise IntegrityError("assignment must be a non-empty 1-D array")
        if self.assignment.min() < 0 or self.assignment.max() >= m:
            raise IntegrityError("assignment refers to a cluster that does not exist")
        counts = np.bincount(self.assignment, minlength=m)
        if not np.array_equal(counts, self.sizes):
            raise IntegrityError("cluster sizes disagree with the assignment map")
        if int(self.sizes.sum()) != n:
            raise IntegrityError("cluster sizes do not add up to the instance count")
        norms = np.sqrt((self.centroids * self.centroids).sum(axis=1))
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise IntegrityError("centroids must be unit-norm rows")
        return self

    def __len__(self):
        return self.centroids.shape[0]

    @property
    def num_instances(self):
        return self.assignment.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def copy(self):
        return MemoryBank(self.centroids.copy(), self.sizes.copy(), self.assignment.copy())


def _unit_rows(m, eps=1e-12):
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    return m / np.maximum(norms, eps)


def p_cluster(feature, bank, tau):
    """Softmax distribution of one feature over all cluster centroids."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = bank.centroids @ np.asarray(feature, dtype=np.float64) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def acl_loss(embeddings, assignments, bank, tau, reduction="mean"):
    """Negative log-likelihood of each embedding's assigned cluster.

    embeddings: [B, D] tensor (gradients flow); assignments: the cluster
    index of each row, which must be in range for the bank. Centroids are
    constants within the step.
    """
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be sum or mean, got {reduction!r}")
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.ndim != 1 or assignments.size == 0:
        raise UsageError("assignments must be a non-empty 1-D array")
    b = assignments.size
    if embeddings.data.shape != (b, bank.dim):
        raise UsageError(
            f"expected [{b}, {bank.dim}] embeddings, got {embeddings.data.shape}")
    if assignments.min() < 0 or assignments.max() >= len(bank):
        raise IntegrityError(
            f"assignment index outside the bank's {len(bank)} clusters; stale after a merge?")
    centroids = T.Tensor(bank.centroids)
    probs = T.softmax_rows(T.linear(embeddings, centroids), tau)
    picked = T.gather_entries(probs, np.arange(b), assignments)
    total = T.sum_all(T.log(picked))
    scale = -1.0 if reduction == "sum" else -1.0 / b
    return T.scale_shift(total, scale)


def pairwise_d0(a, b):
    """Euclidean distance between two feature vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError(f"expected matching 1-D vectors, got {a.shape} and {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()))


def balanced_distance(d0, size_i, size_j, lam):
    """Merge score: raw distance plus lam times the combined cluster size."""
    return float(d0 + lam * (size_i + size_j))


def _balanced_matrix(centroids, sizes, lam):
    sq = (centroids * centroids).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (centroids @ centroids.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2) + lam * (sizes[:, None] + sizes[None, :])


def merge_step(bank, num_merges, lam=0.0):
    """Greedily merge num_merges cluster pairs; returns (bank, pairs).

    Each iteration recomputes all pairwise balanced distances, merges the
    minimizing pair (ties broken toward the smallest (i, j) in row-major
    order), pools the two centroids by size-weighted mean re-normalized to
    unit length, and redirects the assignment map. The input bank is not
    modified; merged pairs are reported in pre-merge index space of each
    iteration.
    """
    if num_merges < 1:
        raise UsageError(f"num_merges must be positive, got {num_merges}")
    if num_merges >= len(bank):
        raise UsageError(
            f"cannot merge {num_merges} times with only {len(bank)} clusters")
    centroids = bank.centroids.copy()
    sizes = bank.sizes.copy()
    assignment = bank.assignment.copy()
    pairs = []
    for _ in range(num_merges):
        m = centroids.shape[0]
        bal = _balanced_matrix(centroids, sizes, lam)
        iu = np.triu_indices(m, k=1)
        flat = bal[iu]
        best = int(np.argmin(flat))  # first minimum in row-major order
        i = int(iu[0][best])
        j = int(iu[1][best])
        pairs.append((i, j))
        merged = sizes[i] * centroids[i] + sizes[j] * centroids[j]
        norm = np.sqrt((merged * merged).sum())
        centroids[i] = merged / max(norm, 1e-12)
        sizes[i] += sizes[j]
        centroids = np.delete(centroids, j, axis=0)
        sizes = np.delete(sizes, j)
        assignment = np.where(assignment == j, i, assignment)
        assignment = np.where(assignment > j, assignment - 1, assignment)
    return MemoryBank(centroids, sizes, assignment), pairs


def update_bank(bank, embeddings):
    """Recompute every centroid as the normalized mean of member embeddings."""
    feats = np.asarray(embeddings, dtype=np.float64)
    if feats.shape != (bank.num_instances, bank.dim):
        raise UsageError(
            f"expected [{bank.num_instances}, {bank.dim}] embeddings, got {feats.shape}")
    m = len(bank)
    sums = np.zeros((m, bank.dim))
    np.add.at(sums, bank.assignment, feats)
    means = sums / bank.sizes[:, None]
    return MemoryBank(_unit_rows(means), bank.sizes.copy(), bank.assignment.copy())


def save_assignments(path, assignment):
    """Write instance -> cluster rows as tab-separated text."""
    lines = [f"{i}\t{int(c)}" for i, c in enumerate(assignment)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_assignments(path):
    assignment = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise UsageError(f"bad assignment line {lineno}: {line!r}")
            idx, cluster = int(parts[0]), int(parts[1])
            if idx != len(assignment):
                raise IntegrityError(f"assignment rows out of order at line {lineno}")
            assignment.append(cluster)
    return np.asarray(assignment, dtype=np.int64)

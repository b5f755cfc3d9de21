"""Density-based region generation and region feature pooling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import NonFiniteCoordinate, ShapeMismatch

NOISE = -1


@dataclass
class RegionPartition:
    assignment: np.ndarray  # region id per point, NOISE for outliers
    region_count: int
    epsilon: float
    min_samples: int

    @property
    def n_points(self) -> int:
        return len(self.assignment)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment[self.assignment != NOISE], minlength=self.region_count)


def _neighbor_pairs(points: np.ndarray, epsilon: float) -> np.ndarray:
    return cKDTree(points).query_pairs(epsilon, output_type="ndarray")


def dbscan(points, epsilon: float = 0.5, min_samples: int = 2) -> RegionPartition:
    """DBSCAN with Euclidean distance (neighbours within ``<= epsilon``, self included).

    Region ids follow the order of each region's lowest-index core point.  A
    border point reachable from several regions joins the one with the smallest
    id, which is the region that claims it first when points are scanned in
    ascending index order.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if min_samples < 1:
        raise ValueError(f"min_samples must be >= 1, got {min_samples}")
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return RegionPartition(np.empty(0, dtype=np.int64), 0, epsilon, min_samples)
    if points.ndim != 2:
        raise ShapeMismatch(f"expected an (n, d) coordinate array, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteCoordinate("point coordinates contain NaN or Inf")

    n = len(points)
    pairs = _neighbor_pairs(points, epsilon)
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.empty(0, int), np.empty(0, int))
    counts = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = counts >= min_samples

    assignment = np.full(n, NOISE, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return RegionPartition(assignment, 0, epsilon, min_samples)

    # connected components of the core-core neighbour graph
    both = core[i] & core[j]
    local = np.full(n, -1)
    local[core_idx] = np.arange(len(core_idx))
    graph = coo_matrix(
        (np.ones(both.sum()), (local[i[both]], local[j[both]])),
        shape=(len(core_idx), len(core_idx)),
    )
    n_regions, comp = connected_components(graph, directed=False)
    # renumber components by their smallest member index (core_idx is ascending)
    _, first = np.unique(comp, return_index=True)
    rank = np.empty(n_regions, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(n_regions)
    assignment[core_idx] = rank[comp]

    # border points: smallest region id among their core neighbours
    border_i = np.concatenate([i[core[j] & ~core[i]], j[core[i] & ~core[j]]])
    border_r = np.concatenate([assignment[j[core[j] & ~core[i]]], assignment[i[core[i] & ~core[j]]]])
    if len(border_i):
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, border_i, border_r)
        hit = best != np.iinfo(np.int64).max
        assignment[hit] = best[hit]
    return RegionPartition(assignment, int(n_regions), epsilon, min_samples)


def pool_region_features(features, part: RegionPartition):
    """Average the feature rows of each region (noise excluded). Works on numpy arrays and torch tensors."""
    if features.shape[0] != part.n_points:
        raise ShapeMismatch(
            f"{features.shape[0]} feature rows for a partition over {part.n_points} points"
        )
    keep = np.flatnonzero(part.assignment != NOISE)
    ids = part.assignment[keep]
    counts = np.bincount(ids, minlength=part.region_count).astype(np.float64)
    if isinstance(features, np.ndarray):
        out = np.zeros((part.region_count, features.shape[1]), dtype=np.float64)
        np.add.at(out, ids, features[keep])
        return out / counts[:, None]
    import torch

    idx = torch.as_tensor(ids, device=features.device)
    out = features.new_zeros((part.region_count, features.shape[1]))
    out = out.index_add(0, idx, features[torch.as_tensor(keep, device=features.device)])
    return out / torch.as_tensor(counts, dtype=features.dtype, device=features.device)[:, None]


def outlier_fraction(part: RegionPartition) -> float:
    if part.n_points == 0:
        raise ValueError("partition has no points")
    return float(np.mean(part.assignment == NOISE))


def write_partition_csv(part: RegionPartition, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["point_index", "region_id"])
        for idx, rid in enumerate(part.assignment):
            writer.writerow([idx, int(rid)])


def read_partition_csv(path, epsilon: float = float("nan"), min_samples: int = 0) -> RegionPartition:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    assignment = np.full(len(rows), NOISE, dtype=np.int64)
    for row in rows:
        assignment[int(row["point_index"])] = int(row["region_id"])
    count = int(assignment.max()) + 1 if len(rows) and assignment.max() >= 0 else 0
    return RegionPartition(assignment, count, epsilon, min_samples)

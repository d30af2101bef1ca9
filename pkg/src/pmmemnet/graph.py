"""Static weighted road graph built from pairwise distances.

Edge weights come from a Gaussian kernel of the distance, exp(-(d/sigma)^2),
with sigma the standard deviation of the provided distances. Weights below
a sparsity threshold are zeroed. The graph is immutable after construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RoadGraph:
    node_ids: tuple[str, ...]
    distances: np.ndarray  # (N, N), NaN where no edge; diagonal is 0
    sigma: float | None
    kappa: float
    adjacency: np.ndarray  # (N, N), entries in [0, 1], diagonal 1

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)


def build_adjacency(
    node_ids,
    distances: np.ndarray,
    kappa: float = 0.1,
    sigma: float | None = None,
) -> RoadGraph:
    """Gaussian-kernel adjacency from a (possibly asymmetric) distance matrix.

    ``distances`` is (N, N) with NaN marking "no edge" (missing distance
    means no edge, not distance zero). Self-distances are forced to 0, so
    the diagonal weight is always 1. When ``sigma`` is not given it is the
    standard deviation of all finite provided distances; if those are all
    identical that std is 0 and an explicit ``sigma`` is required.
    """
    node_ids = tuple(str(n) for n in node_ids)
    n = len(node_ids)
    if n < 1:
        raise ValueError("graph needs at least one node")
    dist = np.array(distances, dtype=np.float64)
    if dist.shape != (n, n):
        raise ValueError(f"distance matrix shape {dist.shape} != ({n}, {n})")
    finite = np.isfinite(dist)
    if np.any(dist[finite] < 0):
        raise ValueError("distances must be non-negative")

    provided = dist[finite]
    if sigma is None:
        if provided.size == 0:
            sigma = None  # no off-diagonal edges; kernel never evaluated
        else:
            sigma = float(np.std(provided))
            if sigma == 0.0:
                raise ValueError(
                    "all provided distances are identical (std 0); "
                    "pass an explicit sigma override"
                )
    else:
        sigma = float(sigma)
        if sigma <= 0:
            raise ValueError("sigma must be positive")

    np.fill_diagonal(dist, 0.0)
    adj = np.zeros((n, n), dtype=np.float64)
    if sigma is not None:
        mask = np.isfinite(dist)
        adj[mask] = np.exp(-((dist[mask] / sigma) ** 2))
    np.fill_diagonal(adj, 1.0)
    adj[adj < kappa] = 0.0
    return RoadGraph(node_ids=node_ids, distances=dist, sigma=sigma, kappa=float(kappa), adjacency=adj)


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Row-stochastic D^-1 A; all-zero rows stay all-zero."""
    a = np.asarray(adjacency, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("adjacency must be non-negative")
    rowsum = a.sum(axis=1, keepdims=True)
    out = np.divide(a, rowsum, out=np.zeros_like(a), where=rowsum > 0)
    return out


# ---- file formats ---------------------------------------------------------


def load_node_ids(path) -> list[str]:
    """One node id per line; line order defines the node index."""
    with open(path, "r", encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate node ids in node-id file")
    return ids


def load_distance_matrix(path, node_ids) -> np.ndarray:
    """Read a `from,to,dist` CSV into an (N, N) matrix with NaN for no edge."""
    index = {str(n): i for i, n in enumerate(node_ids)}
    n = len(index)
    dist = np.full((n, n), np.nan, dtype=np.float64)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"from", "to", "dist"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError("distance CSV must have header from,to,dist")
        for row in reader:
            src, dst = row["from"].strip(), row["to"].strip()
            if src not in index or dst not in index:
                raise ValueError(f"distance CSV references unknown node {src!r} or {dst!r}")
            dist[index[src], index[dst]] = float(row["dist"])
    return dist


def write_distances_csv(path, node_ids, distances: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("from,to,dist\n")
        n = len(node_ids)
        for i in range(n):
            for j in range(n):
                if i != j and np.isfinite(distances[i, j]):
                    fh.write(f"{node_ids[i]},{node_ids[j]},{float(distances[i, j])!r}\n")


def write_adjacency_csv(graph: RoadGraph, path) -> None:
    """Nonzero weights as `from,to,weight` triplets, for inspection."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("from,to,weight\n")
        n = graph.num_nodes
        for i in range(n):
            for j in range(n):
                w = graph.adjacency[i, j]
                if w != 0.0:
                    fh.write(f"{graph.node_ids[i]},{graph.node_ids[j]},{float(w)!r}\n")

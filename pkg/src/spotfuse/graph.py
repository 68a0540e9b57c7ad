"""Symmetric k-NN graph construction and normalized propagation operators."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GraphStateError

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class SparseAdjacency:
    """COO adjacency with entries sorted by (row, col).

    Raw graphs are binary, symmetric, and hollow; normalized graphs carry
    D^{-1/2} (A + I) D^{-1/2} weights including the diagonal.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        for arr in (self.rows, self.cols, self.weights):
            arr.setflags(write=False)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist()))

    @property
    def nnz(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=np.float64)
        dense[self.rows, self.cols] = self.weights
        return dense


def _pairwise_distances(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        sq = (points**2).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
        return np.sqrt(np.maximum(d2, 0.0))
    if metric == "cosine":
        norms = np.linalg.norm(points, axis=1)
        unit = points / np.maximum(norms, 1e-12)[:, None]
        return 1.0 - unit @ unit.T
    raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")


def knn_graph(points: np.ndarray, k: int, metric: str = "euclidean") -> SparseAdjacency:
    """Mutualized k-nearest-neighbour graph (union symmetrization).

    Each node links to its k nearest others (self excluded); distance ties
    break toward the smaller node index. The directed edge set is unioned
    with its transpose, giving a binary symmetric adjacency with no
    self-loops.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to build a graph")
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")

    dist = _pairwise_distances(points, metric)
    np.fill_diagonal(dist, np.inf)
    idx = np.broadcast_to(np.arange(n), (n, n))
    # lexsort: primary key distance, secondary key node index (stable ties)
    order = np.lexsort((idx, dist), axis=1)[:, :k]

    src = np.repeat(np.arange(n), k)
    dst = order.reshape(-1)
    pairs = np.concatenate([np.stack([src, dst], 1), np.stack([dst, src], 1)])
    pairs = np.unique(pairs, axis=0)
    return SparseAdjacency(
        n=n,
        rows=pairs[:, 0].astype(np.int64),
        cols=pairs[:, 1].astype(np.int64),
        weights=np.ones(len(pairs), dtype=np.float64),
        normalized=False,
    )


def normalize(adj: SparseAdjacency) -> SparseAdjacency:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    if adj.normalized:
        raise GraphStateError("adjacency is already normalized")
    deg = np.bincount(adj.rows, weights=adj.weights, minlength=adj.n) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    diag = np.arange(adj.n, dtype=np.int64)
    rows = np.concatenate([adj.rows, diag])
    cols = np.concatenate([adj.cols, diag])
    weights = np.concatenate([
        adj.weights * inv_sqrt[adj.rows] * inv_sqrt[adj.cols],
        inv_sqrt * inv_sqrt,
    ])
    order = np.lexsort((cols, rows))
    return SparseAdjacency(
        n=adj.n,
        rows=rows[order],
        cols=cols[order],
        weights=weights[order],
        normalized=True,
    )


def spmm(adj: SparseAdjacency, dense: np.ndarray) -> np.ndarray:
    """Sparse-dense product adj @ dense with a deterministic accumulation order."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2 or dense.shape[0] != adj.n:
        raise ValueError(f"dense must have shape ({adj.n}, d), got {dense.shape}")
    out = np.zeros((adj.n, dense.shape[1]), dtype=np.float64)
    np.add.at(out, adj.rows, adj.weights[:, None] * dense[adj.cols])
    return out


@dataclass(frozen=True)
class GraphBundle:
    """Normalized propagation operators: one spatial, one per modality."""

    spatial: SparseAdjacency
    feature: dict[str, SparseAdjacency]


def build_graphs(
    coords: np.ndarray,
    modalities: dict[str, np.ndarray],
    k_spatial: int = 6,
    k_feature: int = 20,
    spatial_metric: str = "euclidean",
    feature_metric: str = "cosine",
) -> GraphBundle:
    """Build and normalize the spatial graph and one feature graph per modality."""
    spatial = normalize(knn_graph(coords, k_spatial, metric=spatial_metric))
    feature = {
        name: normalize(knn_graph(mat, k_feature, metric=feature_metric))
        for name, mat in modalities.items()
    }
    logger.info(
        "graphs built: spatial nnz=%d, feature nnz=%s",
        spatial.nnz, {m: g.nnz for m, g in feature.items()},
    )
    return GraphBundle(spatial=spatial, feature=feature)


def save_edge_list(adj: SparseAdjacency, path: str | Path, manifest_hash: str | None = None):
    """Dump adjacency entries as src,dst,weight rows (sorted by row, col)."""
    with open(path, "w") as fh:
        if manifest_hash:
            fh.write(f"# manifest={manifest_hash}\n")
        fh.write("src,dst,weight\n")
        for r, c, w in zip(adj.rows, adj.cols, adj.weights):
            fh.write(f"{r},{c},{repr(float(w))}\n")

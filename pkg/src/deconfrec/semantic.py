"""Item-item semantic graphs: kNN by cosine similarity, fusion, propagation.

Each modality contributes a directed kNN graph over items (binary edge
weights). The modality graphs are fused by a convex combination, symmetrically
normalized, and used for parameter-free feature smoothing: h = A_hat^L x.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_ROW_BLOCK = 2048  # bounds the dense similarity slab at N x _ROW_BLOCK


@dataclass(frozen=True)
class KnnGraph:
    """Directed kNN graph for one modality: k out-neighbors per item."""

    neighbors: np.ndarray  # (num_items, k) int64, ranked by similarity
    adjacency: sp.csr_matrix  # binary, row i has ones at neighbors[i]

    @property
    def num_items(self) -> int:
        return self.adjacency.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass(frozen=True)
class SemanticItemGraph:
    """Fused, symmetrically normalized item-item adjacency."""

    adjacency: sp.csr_matrix
    neighbors: dict[str, np.ndarray] | None = None

    @property
    def num_items(self) -> int:
        return self.adjacency.shape[0]


def build_knn_graph(features, k: int) -> KnnGraph:
    """Top-k cosine neighbors per item, self excluded, ties to lower index."""
    matrix = np.asarray(getattr(features, "matrix", features), dtype=np.float64)
    n = matrix.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < num_items, got k={k}, num_items={n}")
    if not np.isfinite(matrix).all():
        raise ValueError("features contain non-finite values")

    norms = np.linalg.norm(matrix, axis=1)
    zero_rows = norms == 0
    if zero_rows.any():
        warnings.warn(
            f"{int(zero_rows.sum())} zero-norm feature rows; their similarities are 0",
            stacklevel=2,
        )
    unit = np.divide(matrix, norms[:, None], out=np.zeros_like(matrix), where=norms[:, None] > 0)

    neighbors = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, n)
        sims = unit[start:stop] @ unit.T
        sims[np.arange(start, stop) - start, np.arange(start, stop)] = -np.inf
        # stable sort on -sims keeps lower indices first among ties
        order = np.argsort(-sims, axis=1, kind="stable")
        neighbors[start:stop] = order[:, :k]

    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    adjacency = sp.csr_matrix(
        (np.ones(n * k, dtype=np.float64), (rows, neighbors.reshape(-1))), shape=(n, n)
    )
    return KnnGraph(neighbors=neighbors, adjacency=adjacency)


def fuse_adjacency(visual: sp.spmatrix, textual: sp.spmatrix, weight_v: float) -> sp.csr_matrix:
    if visual.shape != textual.shape:
        raise ValueError(f"shape mismatch: {visual.shape} vs {textual.shape}")
    if not 0.0 <= weight_v <= 1.0:
        raise ValueError(f"weight_v must lie in [0, 1], got {weight_v}")
    return (weight_v * visual + (1.0 - weight_v) * textual).tocsr()


def normalize_symmetric(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2} with D the diagonal of row sums; zero rows stay zero."""
    a = adjacency.tocsr().astype(np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    d = sp.diags(inv_sqrt)
    return (d @ a @ d).tocsr()


def fuse_and_normalize(
    visual: KnnGraph, textual: KnnGraph, weight_v: float = 0.1
) -> SemanticItemGraph:
    fused = fuse_adjacency(visual.adjacency, textual.adjacency, weight_v)
    return SemanticItemGraph(
        adjacency=normalize_symmetric(fused),
        neighbors={"visual": visual.neighbors, "textual": textual.neighbors},
    )


def propagate_features(features, graph, layers: int = 1) -> np.ndarray:
    """h = A_hat^layers x, densified once at the end."""
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    adjacency = graph.adjacency if isinstance(graph, SemanticItemGraph) else graph
    h = np.asarray(getattr(features, "matrix", features), dtype=np.float64)
    for _ in range(layers):
        h = adjacency @ h
    if not np.isfinite(h).all():
        raise RuntimeError("semantic propagation produced non-finite values")
    return h


def save_graph_cache(graph: SemanticItemGraph, path: str | Path) -> None:
    """COO triple dump (int32 rows, int32 cols, float32 vals) + JSON header."""
    path = Path(path)
    coo = graph.adjacency.tocoo()
    with open(path, "wb") as fh:
        fh.write(coo.row.astype("<i4").tobytes())
        fh.write(coo.col.astype("<i4").tobytes())
        fh.write(coo.data.astype("<f4").tobytes())
    header = {"num_items": int(graph.num_items), "nnz": int(coo.nnz)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header))


def load_graph_cache(path: str | Path) -> SemanticItemGraph:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    n, nnz = int(header["num_items"]), int(header["nnz"])
    buf = path.read_bytes()
    expected = nnz * (4 + 4 + 4)
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for nnz={nnz}, got {len(buf)}")
    rows = np.frombuffer(buf, dtype="<i4", count=nnz, offset=0)
    cols = np.frombuffer(buf, dtype="<i4", count=nnz, offset=4 * nnz)
    vals = np.frombuffer(buf, dtype="<f4", count=nnz, offset=8 * nnz)
    adjacency = sp.csr_matrix((vals.astype(np.float64), (rows, cols)), shape=(n, n))
    return SemanticItemGraph(adjacency=adjacency)

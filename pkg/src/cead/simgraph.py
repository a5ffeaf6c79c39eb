"""Spatially constrained similarity graph over masked voxels.

Edges join 26-adjacent voxels only, weighted by the positive part of the
Pearson correlation of their time series.  Zero-weight pairs are not stored.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import ValidationError
from .volume import VolumeSeries, write_tsv

log = logging.getLogger(__name__)

# The 13 "forward" offsets of the 26-neighbourhood; each undirected pair once.
FORWARD_OFFSETS = np.array(
    [o for o in itertools.product((-1, 0, 1), repeat=3) if o > (0, 0, 0)], dtype=np.int64
)


@dataclass(frozen=True)
class SimilarityGraph:
    """Sparse symmetric weighted graph.

    Attributes
    ----------
    coords : (n, 3) int array
        Voxel coordinates of the nodes.
    weights : scipy.sparse.csr_matrix
        Symmetric (n, n) matrix, zero diagonal, entries in (0, 1].
    degree : (n,) array
        Row sums of ``weights``.
    isolated : (n,) bool array
        Nodes whose series had zero variance (no incident edges by construction).
    """

    coords: np.ndarray
    weights: sp.csr_matrix
    degree: np.ndarray
    isolated: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.weights.nnz // 2

    @classmethod
    def from_weights(cls, weights, coords=None) -> "SimilarityGraph":
        W = sp.csr_matrix(weights, dtype=np.float64)
        W = W.maximum(W.T).tocsr()
        W.setdiag(0)
        W.eliminate_zeros()
        W.sort_indices()
        n = W.shape[0]
        if coords is None:
            coords = np.column_stack([np.arange(n), np.zeros(n, int), np.zeros(n, int)])
        deg = np.asarray(W.sum(axis=1)).ravel()
        return cls(np.asarray(coords, dtype=np.int64), W, deg, deg == 0)

    def weight(self, j: int, k: int) -> float:
        return float(self.weights[j, k])

    def edges(self):
        """Yield (j, k, w) with j < k."""
        U = sp.triu(self.weights, k=1).tocoo()
        order = np.lexsort((U.col, U.row))
        for r, c, w in zip(U.row[order], U.col[order], U.data[order]):
            yield int(r), int(c), float(w)

    def components(self) -> tuple[int, np.ndarray]:
        """Connected components of the positive-weight graph."""
        return csgraph.connected_components(self.weights, directed=False)

    def dump_edges(self, path) -> None:
        write_tsv(path, ["j", "k", "weight"], self.edges())


def _standardize(series: np.ndarray):
    """Columns scaled so that dot products / (T-1) are correlations."""
    x = series - series.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(series).max(axis=0))
    x[:, flat] = 0.0
    x[:, ~flat] /= sd[~flat]
    return x, flat


def build_graph(v: VolumeSeries) -> SimilarityGraph:
    """Build the 26-neighbourhood correlation graph of the masked voxels."""
    if not v.mask.any():
        raise ValidationError("mask is empty")
    if v.nt < 3:
        raise ValidationError("need at least 3 time points to correlate")
    coords = v.masked_coords()
    n = len(coords)
    x, flat = _standardize(v.masked_series())
    if flat.any():
        log.warning("%d zero-variance voxels left isolated in the graph", int(flat.sum()))

    index = -np.ones(v.mask.shape, dtype=np.int64)
    index[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(n)
    shape = np.array(v.mask.shape)
    rows, cols = [], []
    for off in FORWARD_OFFSETS:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        src = np.flatnonzero(ok)
        dst = index[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
        keep = dst >= 0
        rows.append(src[keep])
        cols.append(dst[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    corr = np.einsum("tj,tj->j", x[:, rows], x[:, cols]) / (v.nt - 1)
    w = np.clip(corr, 0.0, 1.0)
    keep = w > 0
    rows, cols, w = rows[keep], cols[keep], w[keep]
    W = sp.coo_matrix((np.r_[w, w], (np.r_[rows, cols], np.r_[cols, rows])), shape=(n, n)).tocsr()
    W.sort_indices()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return SimilarityGraph(coords, W, deg, flat)


def laplacian_apply(g: SimilarityGraph, y) -> np.ndarray:
    """Return ``(D - W) y`` without forming a dense matrix."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != g.n:
        raise ValidationError(f"vector length {y.shape[0]} != graph size {g.n}")
    return (g.degree * y.T).T - g.weights @ y


def subgraph(g: SimilarityGraph, nodes) -> SimilarityGraph:
    """Induced subgraph on ``nodes`` (in the given order); degrees recomputed."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValidationError("empty node set")
    if nodes.min() < 0 or nodes.max() >= g.n:
        raise ValidationError("node index out of range")
    W = g.weights[nodes][:, nodes].tocsr()
    W.sort_indices()
    deg = np.asarray(W.sum(axis=1)).ravel()
    return SimilarityGraph(g.coords[nodes], W, deg, g.isolated[nodes])

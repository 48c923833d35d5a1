#!/usr/bin/env python3
"""
graph_core.py
-------------

Graph container plus the linear algebra behind every graph-aware strategy.

Input:
    - GraphInstance : n nodes, undirected edge list, n x d0 feature matrix,
                      optional node labels / graph label / train-val-test masks

Output:
    - SpectralEmbedding : eigenvectors of the k smallest non-trivial eigenvalues of
                          I - D^-1/2 A D^-1/2 (isolated nodes use D^-1/2 = 0)
    - SvdEmbedding      : U sqrt(S), V sqrt(S) for the top-k singular triplets of A
    - DistanceMatrix    : BFS hop counts, -1 marks unreachable pairs
    - degree vectors, common-neighbour counts, triangle counts
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


UNREACHABLE = -1
SPLIT_NAMES = ("train", "val", "test")


class GraphValidationError(ValueError):
    pass


class EmbeddingSizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphInstance:
    n: int
    edges: np.ndarray
    features: np.ndarray
    node_labels: Optional[np.ndarray] = None
    graph_label: Optional[float] = None
    split_masks: Optional[Dict[str, np.ndarray]] = None

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise GraphValidationError(f"Graph needs at least one node, got n={n}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if (edges[:, 0] == edges[:, 1]).any():
                u = int(edges[edges[:, 0] == edges[:, 1]][0, 0])
                raise GraphValidationError(f"Self-loop on node {u}")
            if edges.min() < 0 or edges.max() >= n:
                raise GraphValidationError(f"Edge endpoint outside [0, {n})")

        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise GraphValidationError(f"Features must be {n} x d0, got shape {features.shape}")

        labels = None
        if self.node_labels is not None:
            labels = np.asarray(self.node_labels, dtype=np.int64)
            if labels.shape != (n,):
                raise GraphValidationError(f"node_labels must have length {n}")

        masks = None
        if self.split_masks is not None:
            masks = {}
            for name, mask in self.split_masks.items():
                mask = np.asarray(mask, dtype=bool)
                if mask.shape != (n,):
                    raise GraphValidationError(f"Mask '{name}' must have length {n}")
                masks[name] = mask
            stacked = np.stack(list(masks.values())) if masks else np.zeros((0, n), bool)
            if (stacked.sum(axis=0) > 1).any():
                raise GraphValidationError("Split masks overlap")

        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "node_labels", labels)
        object.__setattr__(self, "split_masks", masks)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        if len(self.edges):
            A[self.edges[:, 0], self.edges[:, 1]] = 1.0
            A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A

    def permuted(self, perm: np.ndarray) -> "GraphInstance":
        """Relabel node i as perm[i]; features, labels and masks move with their nodes."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return GraphInstance(
            n=self.n,
            edges=perm[self.edges] if len(self.edges) else self.edges,
            features=self.features[inv],
            node_labels=None if self.node_labels is None else self.node_labels[inv],
            graph_label=self.graph_label,
            split_masks=None if self.split_masks is None
            else {k: m[inv] for k, m in self.split_masks.items()},
        )


def graphs_equal(a: GraphInstance, b: GraphInstance) -> bool:
    def _edge_set(g):
        return {tuple(sorted(map(int, e))) for e in g.edges}

    if a.n != b.n or _edge_set(a) != _edge_set(b):
        return False
    if not np.array_equal(a.features, b.features):
        return False
    if (a.node_labels is None) != (b.node_labels is None):
        return False
    if a.node_labels is not None and not np.array_equal(a.node_labels, b.node_labels):
        return False
    if a.graph_label != b.graph_label:
        return False
    masks_a, masks_b = a.split_masks or {}, b.split_masks or {}
    if masks_a.keys() != masks_b.keys():
        return False
    return all(np.array_equal(masks_a[k], masks_b[k]) for k in masks_a)


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    vectors: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True, eq=False)
class SvdEmbedding:
    left: np.ndarray
    right: np.ndarray
    singular_values: np.ndarray


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    dist: np.ndarray

    @property
    def reachable(self) -> np.ndarray:
        return self.dist != UNREACHABLE

    def diameter(self) -> int:
        return int(self.dist[self.reachable].max())

    def buckets(self, max_bucket: int) -> np.ndarray:
        """Clamp hop counts to [0, max_bucket]; unreachable pairs get bucket max_bucket + 1."""
        out = np.minimum(self.dist, max_bucket)
        out[~self.reachable] = max_bucket + 1
        return out


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # first nonzero entry of each column positive
    signs = np.ones(vectors.shape[1])
    for j in range(vectors.shape[1]):
        nonzero = np.flatnonzero(np.abs(vectors[:, j]) > tol)
        if len(nonzero) and vectors[nonzero[0], j] < 0:
            signs[j] = -1.0
    return signs


def degree_vectors(g: GraphInstance) -> Tuple[np.ndarray, np.ndarray]:
    deg = g.adjacency().sum(axis=1).astype(np.int64)
    return deg, deg.copy()


def normalized_laplacian(g: GraphInstance) -> np.ndarray:
    A = g.adjacency()
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return np.eye(g.n) - inv_sqrt[:, None] * A * inv_sqrt[None, :]


def components(g: GraphInstance) -> Tuple[int, np.ndarray]:
    return connected_components(csr_matrix(g.adjacency()), directed=False)


def trivial_eigenvalue_count(g: GraphInstance) -> int:
    """One zero eigenvalue per connected component that has at least one edge."""
    count, labels = components(g)
    sizes = np.bincount(labels, minlength=count)
    return int((sizes > 1).sum())


def normalized_laplacian_eig(g: GraphInstance, k: int) -> SpectralEmbedding:
    if k < 0 or k > g.n - 1:
        raise EmbeddingSizeError(f"k={k} must be in [0, n-1={g.n - 1}]")
    skip = trivial_eigenvalue_count(g)
    if skip + k > g.n:
        raise EmbeddingSizeError(
            f"k={k} exceeds the {g.n - skip} non-trivial eigenpairs of this graph"
        )
    values, vectors = np.linalg.eigh(normalized_laplacian(g))
    values = np.clip(values[skip:skip + k], 0.0, 2.0)
    vectors = vectors[:, skip:skip + k]
    vectors = vectors * _fix_signs(vectors)[None, :]
    return SpectralEmbedding(vectors=vectors, eigenvalues=values)


def adjacency_svd(g: GraphInstance, k: int) -> SvdEmbedding:
    if k < 0 or k > g.n:
        raise EmbeddingSizeError(f"k={k} must be in [0, n={g.n}]")
    U, S, Vt = np.linalg.svd(g.adjacency())
    U, S, V = U[:, :k], S[:k], Vt[:k].T
    signs = _fix_signs(U)
    U, V = U * signs, V * signs
    root = np.sqrt(S)
    return SvdEmbedding(left=U * root, right=V * root, singular_values=S)


def bfs_all_pairs(g: GraphInstance) -> DistanceMatrix:
    hops = shortest_path(csr_matrix(g.adjacency()), method="D", directed=False, unweighted=True)
    dist = np.full((g.n, g.n), UNREACHABLE, dtype=np.int64)
    finite = np.isfinite(hops)
    dist[finite] = hops[finite].astype(np.int64)
    return DistanceMatrix(dist=dist)


def common_neighbor_counts(g: GraphInstance) -> np.ndarray:
    A = g.adjacency()
    return np.rint(A @ A).astype(np.int64)


def triangle_count(g: GraphInstance) -> int:
    A = g.adjacency()
    return int(round(np.trace(A @ A @ A) / 6))

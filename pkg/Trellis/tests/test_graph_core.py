import itertools

import numpy as np
import pytest

from conftest import make_graph, random_connected_graph
from graph_core import (
    UNREACHABLE,
    EmbeddingSizeError,
    GraphInstance,
    GraphValidationError,
    adjacency_svd,
    bfs_all_pairs,
    common_neighbor_counts,
    degree_vectors,
    normalized_laplacian,
    normalized_laplacian_eig,
    trivial_eigenvalue_count,
    triangle_count,
)


def floyd_warshall(g):
    A = g.adjacency()
    dist = np.where(A > 0, 1.0, np.inf)
    np.fill_diagonal(dist, 0.0)
    for k in range(g.n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return dist


# --- Validation -----------------------------------------------------------------------

def test_self_loop_rejected():
    with pytest.raises(GraphValidationError):
        make_graph(3, [(0, 1), (2, 2)])


def test_endpoint_out_of_range_rejected():
    with pytest.raises(GraphValidationError):
        make_graph(3, [(0, 3)])


def test_feature_rows_must_match_n():
    with pytest.raises(GraphValidationError):
        GraphInstance(n=3, edges=np.zeros((0, 2)), features=np.zeros((2, 4)))


def test_overlapping_masks_rejected():
    masks = {"train": np.array([1, 1, 0], bool), "val": np.array([0, 1, 1], bool)}
    with pytest.raises(GraphValidationError):
        make_graph(3, [(0, 1)], masks=masks)


def test_permuted_moves_nodes_with_their_features():
    g = make_graph(4, [(0, 1), (1, 2)])
    perm = np.array([2, 0, 3, 1])
    h = g.permuted(perm)
    A, B = g.adjacency(), h.adjacency()
    for i, j in itertools.product(range(4), repeat=2):
        assert A[i, j] == B[perm[i], perm[j]]
    np.testing.assert_array_equal(h.features[perm], g.features)


# --- Degrees and Laplacian ------------------------------------------------------------

def test_degrees(k3, star4):
    deg_in, deg_out = degree_vectors(star4)
    np.testing.assert_array_equal(deg_in, [3, 1, 1, 1])
    np.testing.assert_array_equal(deg_out, deg_in)
    np.testing.assert_array_equal(degree_vectors(k3)[0], [2, 2, 2])
    isolated = make_graph(3, [(0, 1)])
    assert degree_vectors(isolated)[0][2] == 0


def test_k2_spectrum(k2):
    np.testing.assert_allclose(np.linalg.eigvalsh(normalized_laplacian(k2)), [0.0, 2.0], atol=1e-12)
    emb = normalized_laplacian_eig(k2, 1)
    np.testing.assert_allclose(emb.eigenvalues, [2.0], atol=1e-12)


def test_k3_nontrivial_eigenvalues(k3):
    emb = normalized_laplacian_eig(k3, 2)
    np.testing.assert_allclose(emb.eigenvalues, [1.5, 1.5], atol=1e-12)


def test_isolated_node_has_identity_row():
    g = make_graph(3, [(0, 1)])
    L = normalized_laplacian(g)
    np.testing.assert_array_equal(L[2], [0.0, 0.0, 1.0])
    assert trivial_eigenvalue_count(g) == 1
    emb = normalized_laplacian_eig(g, 2)
    np.testing.assert_allclose(emb.eigenvalues, [1.0, 2.0], atol=1e-12)


def test_disconnected_graph_skips_one_zero_per_component(two_edges):
    assert trivial_eigenvalue_count(two_edges) == 2
    emb = normalized_laplacian_eig(two_edges, 2)
    np.testing.assert_allclose(emb.eigenvalues, [2.0, 2.0], atol=1e-12)


def test_eigenvectors_are_orthonormal_eigenpairs():
    g = random_connected_graph(10, seed=5)
    emb = normalized_laplacian_eig(g, 4)
    V = emb.vectors
    np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-8)
    L = normalized_laplacian(g)
    residual = np.abs(L @ V - V * emb.eigenvalues[None, :]).max()
    assert residual <= 1e-7
    assert np.all(np.diff(emb.eigenvalues) >= -1e-12)
    assert np.all((emb.eigenvalues >= 0) & (emb.eigenvalues <= 2))


def test_eigenvector_sign_convention():
    emb = normalized_laplacian_eig(random_connected_graph(9, seed=2), 3)
    for j in range(3):
        column = emb.vectors[:, j]
        first = column[np.flatnonzero(np.abs(column) > 1e-12)[0]]
        assert first > 0


def test_eigen_k_too_large(k3):
    with pytest.raises(EmbeddingSizeError):
        normalized_laplacian_eig(k3, 3)


# --- SVD ------------------------------------------------------------------------------

def test_svd_of_k2(k2):
    emb = adjacency_svd(k2, 2)
    np.testing.assert_allclose(emb.singular_values, [1.0, 1.0], atol=1e-12)


def test_svd_of_star(star4):
    emb = adjacency_svd(star4, 1)
    np.testing.assert_allclose(emb.singular_values, [np.sqrt(3.0)], atol=1e-12)


def test_svd_of_empty_graph_is_zero():
    g = make_graph(3, [])
    emb = adjacency_svd(g, 2)
    np.testing.assert_allclose(emb.singular_values, 0.0, atol=1e-12)
    np.testing.assert_allclose(emb.left @ emb.right.T, 0.0, atol=1e-12)


def test_full_rank_svd_reconstructs_adjacency():
    g = random_connected_graph(8, seed=4)
    emb = adjacency_svd(g, 8)
    np.testing.assert_allclose(emb.left @ emb.right.T, g.adjacency(), atol=1e-7)


def test_truncated_svd_error_matches_dropped_singular_values():
    g = random_connected_graph(10, seed=6)
    A = g.adjacency()
    full = np.linalg.svd(A, compute_uv=False)
    for k in (1, 3, 5):
        emb = adjacency_svd(g, k)
        error = np.linalg.norm(A - emb.left @ emb.right.T)
        np.testing.assert_allclose(error, np.sqrt(np.sum(full[k:] ** 2)), atol=1e-8)


def test_svd_k_too_large(k3):
    with pytest.raises(EmbeddingSizeError):
        adjacency_svd(k3, 4)


# --- Distances ------------------------------------------------------------------------

def test_path_distances(path3):
    dist = bfs_all_pairs(path3).dist
    assert dist[0, 2] == 2
    assert dist[0, 1] == 1
    np.testing.assert_array_equal(np.diag(dist), 0)


def test_unreachable_pairs(two_edges):
    d = bfs_all_pairs(two_edges)
    assert d.dist[0, 2] == UNREACHABLE
    assert d.dist[1, 3] == UNREACHABLE
    assert d.diameter() == 1
    np.testing.assert_array_equal(d.buckets(4)[0], [0, 1, 5, 5])


def test_bfs_matches_floyd_warshall():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        edges = [(i, j) for i in range(9) for j in range(i + 1, 9) if rng.random() < 0.2]
        g = make_graph(9, edges)
        dist = bfs_all_pairs(g).dist
        oracle = floyd_warshall(g)
        np.testing.assert_array_equal(dist, np.where(np.isinf(oracle), UNREACHABLE, oracle))
        np.testing.assert_array_equal(dist, dist.T)


def test_buckets_clamp_long_distances():
    g = make_graph(6, [(i, i + 1) for i in range(5)])
    np.testing.assert_array_equal(bfs_all_pairs(g).buckets(3)[0], [0, 1, 2, 3, 3, 3])


# --- Counting -------------------------------------------------------------------------

def test_common_neighbors(star4):
    common = common_neighbor_counts(star4)
    assert common[1, 2] == 1
    assert common[0, 1] == 0
    assert common[0, 0] == 3


def test_triangle_counts(k3, star4):
    k4 = make_graph(4, list(itertools.combinations(range(4), 2)))
    assert triangle_count(k4) == 4
    assert triangle_count(k3) == 1
    assert triangle_count(star4) == 0

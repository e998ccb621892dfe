import numpy as np
import pytest
import scipy.sparse as sp

from deconfrec.semantic import (
    KnnGraph,
    SemanticItemGraph,
    build_knn_graph,
    fuse_adjacency,
    fuse_and_normalize,
    load_graph_cache,
    normalize_symmetric,
    propagate_features,
    save_graph_cache,
)


def brute_knn(matrix, k):
    """O(n^2) cosine top-k with (-sim, index) ordering."""
    n = matrix.shape[0]
    norms = np.linalg.norm(matrix, axis=1)
    out = []
    for i in range(n):
        sims = []
        for j in range(n):
            if j == i:
                continue
            denom = norms[i] * norms[j]
            s = float(matrix[i] @ matrix[j] / denom) if denom > 0 else 0.0
            sims.append((-s, j))
        sims.sort()
        out.append([j for _, j in sims[:k]])
    return np.asarray(out)


class TestBuildKnn:
    def test_identical_rows_tie_break(self):
        g = build_knn_graph(np.ones((3, 4)), k=1)
        assert g.neighbors.ravel().tolist() == [1, 0, 0]

    def test_orthogonal_rows_tie_break(self):
        g = build_knn_graph(np.eye(3), k=1)
        assert g.neighbors.ravel().tolist() == [1, 0, 0]

    def test_against_brute_force(self):
        rng = np.random.default_rng(99)
        feats = rng.normal(size=(10, 6))
        g = build_knn_graph(feats, k=3)
        np.testing.assert_array_equal(g.neighbors, brute_knn(feats, 3))

    def test_exactly_k_out_neighbors(self):
        rng = np.random.default_rng(3)
        g = build_knn_graph(rng.normal(size=(20, 5)), k=4)
        row_sums = np.asarray(g.adjacency.sum(axis=1)).ravel()
        np.testing.assert_array_equal(row_sums, 4.0)
        diag = g.adjacency.diagonal()
        np.testing.assert_array_equal(diag, 0.0)

    def test_zero_norm_row_warns_and_gets_zero_similarity(self):
        feats = np.array([[1.0, 0.0], [0.0, 0.0], [0.9, 0.1], [-1.0, 0.0]])
        with pytest.warns(UserWarning, match="zero-norm"):
            g = build_knn_graph(feats, k=2)
        # for item 0: sims are [_, 0 (zero row), ~.99, -1]; top-2 = items 2 then 1
        assert g.neighbors[0].tolist() == [2, 1]

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            build_knn_graph(np.eye(3), k=3)
        with pytest.raises(ValueError):
            build_knn_graph(np.eye(3), k=0)


class TestFuseAndNormalize:
    def ring(self, n, shift):
        rows = np.arange(n)
        cols = (rows + shift) % n
        return sp.csr_matrix((np.ones(n), (rows, cols)), shape=(n, n))

    def test_endpoint_visual(self):
        gv = KnnGraph(np.zeros((4, 1), dtype=np.int64), self.ring(4, 1))
        gt = KnnGraph(np.zeros((4, 1), dtype=np.int64), self.ring(4, 2))
        fused = fuse_and_normalize(gv, gt, weight_v=1.0)
        expected = normalize_symmetric(gv.adjacency)
        np.testing.assert_allclose(fused.adjacency.toarray(), expected.toarray())

    def test_endpoint_textual(self):
        gv = KnnGraph(np.zeros((4, 1), dtype=np.int64), self.ring(4, 1))
        gt = KnnGraph(np.zeros((4, 1), dtype=np.int64), self.ring(4, 2))
        fused = fuse_and_normalize(gv, gt, weight_v=0.0)
        expected = normalize_symmetric(gt.adjacency)
        np.testing.assert_allclose(fused.adjacency.toarray(), expected.toarray())

    def test_disjoint_one_regular_half_weights(self):
        # shift-1 and shift-2 rings on 5 nodes share no edges; every nonzero
        # entry of the convex combination is 0.5 before normalization
        a = fuse_adjacency(self.ring(5, 1), self.ring(5, 2), 0.5)
        vals = a.data
        assert np.all(vals == 0.5)
        assert a.nnz == 10

    def test_normalization_formula(self):
        a = sp.csr_matrix(np.array([[0.0, 2.0], [1.0, 0.0]]))
        norm = normalize_symmetric(a).toarray()
        # degrees (row sums): [2, 1]
        np.testing.assert_allclose(norm, [[0.0, 2.0 / np.sqrt(2)], [1.0 / np.sqrt(2), 0.0]])

    def test_weight_out_of_range(self):
        g = self.ring(3, 1)
        with pytest.raises(ValueError):
            fuse_adjacency(g, g, 1.5)


class TestPropagate:
    def test_identity_fixed_point(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        ident = SemanticItemGraph(sp.identity(4, format="csr"))
        for layers in (1, 2, 5):
            np.testing.assert_allclose(propagate_features(x, ident, layers), x)

    def test_swap_graph(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        swap = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        h = propagate_features(x, SemanticItemGraph(swap), layers=1)
        np.testing.assert_allclose(h, x[::-1])

    def test_two_layers_dense_oracle(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(5, 4))
        g = build_knn_graph(rng.normal(size=(5, 3)), k=2)
        a_hat = fuse_and_normalize(g, g, 0.5).adjacency
        h = propagate_features(x, SemanticItemGraph(a_hat), layers=2)
        dense = a_hat.toarray()
        np.testing.assert_allclose(h, dense @ (dense @ x), atol=1e-12)

    def test_norm_growth_bounded(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(30, 8))
        gv = build_knn_graph(rng.normal(size=(30, 6)), k=5)
        gt = build_knn_graph(rng.normal(size=(30, 7)), k=5)
        graph = fuse_and_normalize(gv, gt, 0.3)
        prev = x
        for _ in range(4):
            nxt = propagate_features(prev, graph, layers=1)
            assert np.isfinite(nxt).all()
            assert np.abs(nxt).max() <= 2.0 * max(np.abs(prev).max(), 1e-12)
            prev = nxt

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(31)
        feats = rng.normal(size=(12, 5))  # generic: no cosine ties
        x = rng.normal(size=(12, 4))
        perm = rng.permutation(12)

        g = build_knn_graph(feats, k=3)
        h = propagate_features(x, fuse_and_normalize(g, g, 0.5), layers=2)

        g_p = build_knn_graph(feats[perm], k=3)
        h_p = propagate_features(x[perm], fuse_and_normalize(g_p, g_p, 0.5), layers=2)
        np.testing.assert_allclose(h_p, h[perm], atol=1e-10)

    def test_layers_must_be_positive(self):
        with pytest.raises(ValueError):
            propagate_features(np.eye(2), SemanticItemGraph(sp.identity(2, format="csr")), 0)


def test_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    g = build_knn_graph(rng.normal(size=(9, 4)), k=3)
    graph = fuse_and_normalize(g, g, 0.25)
    save_graph_cache(graph, tmp_path / "isg.coo")
    back = load_graph_cache(tmp_path / "isg.coo")
    np.testing.assert_allclose(
        back.adjacency.toarray(), graph.adjacency.toarray(), atol=1e-7
    )

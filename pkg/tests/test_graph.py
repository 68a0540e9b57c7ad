import numpy as np
import pytest

from spotfuse.errors import GraphStateError
from spotfuse.graph import (
    GraphBundle,
    SparseAdjacency,
    build_graphs,
    knn_graph,
    normalize,
    save_edge_list,
    spmm,
)


def brute_knn_edges(points, k, metric):
    """Independent O(n^2) neighbour selection with (distance, index) sorting."""
    n = len(points)
    edges = set()
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            if metric == "euclidean":
                d = float(np.linalg.norm(points[i] - points[j]))
            else:
                ni = np.linalg.norm(points[i]) or 1e-12
                nj = np.linalg.norm(points[j]) or 1e-12
                d = 1.0 - float(points[i] @ points[j]) / (ni * nj)
            cand.append((d, j))
        cand.sort()
        for _, j in cand[:k]:
            edges.add((i, j))
            edges.add((j, i))
    return edges


class TestKnnGraph:
    def test_three_point_chain(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        adj = knn_graph(pts, 1)
        assert set(zip(adj.rows.tolist(), adj.cols.tolist())) == {
            (0, 1), (1, 0), (1, 2), (2, 1)
        }
        assert np.all(adj.weights == 1.0)
        assert not adj.normalized

    def test_tie_breaks_to_smaller_index(self):
        # node 0 is exactly equidistant from nodes 1 and 2; the others pair off,
        # so edge (0, 2) appears only if the tie broke the wrong way
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.1, 0.0], [-1.1, 0.0]])
        adj = knn_graph(pts, 1)
        edges = set(zip(adj.rows.tolist(), adj.cols.tolist()))
        assert (0, 1) in edges
        assert (0, 2) not in edges

    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_matches_brute_force(self, metric):
        rng = np.random.default_rng(42)
        for trial in range(5):
            pts = rng.normal(size=(30, 4))
            adj = knn_graph(pts, 4, metric=metric)
            assert set(zip(adj.rows.tolist(), adj.cols.tolist())) == brute_knn_edges(pts, 4, metric)

    def test_symmetric_and_hollow(self):
        rng = np.random.default_rng(0)
        adj = knn_graph(rng.normal(size=(25, 3)), 5)
        dense = adj.to_dense()
        assert np.array_equal(dense, dense.T)
        assert np.all(np.diag(dense) == 0.0)

    def test_entries_sorted(self):
        rng = np.random.default_rng(1)
        adj = knn_graph(rng.normal(size=(20, 2)), 3)
        keys = list(zip(adj.rows.tolist(), adj.cols.tolist()))
        assert keys == sorted(keys)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        base = knn_graph(pts, 4)
        mapped = {(perm[r], perm[c]) for r, c in zip(base.rows, base.cols)}
        permuted = knn_graph(pts[np.argsort(perm)], 4)
        # relabeling: point at new index perm[i] is the old point i
        inv = np.argsort(perm)
        expected = {(int(np.where(inv == r)[0][0]), int(np.where(inv == c)[0][0]))
                    for r, c in zip(base.rows, base.cols)}
        got = set(zip(permuted.rows.tolist(), permuted.cols.tolist()))
        assert got == expected

    def test_k_bounds(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValueError):
            knn_graph(pts, 0)
        with pytest.raises(ValueError):
            knn_graph(pts, 3)
        with pytest.raises(ValueError):
            knn_graph(pts[:1], 1)

    def test_unknown_metric(self):
        with pytest.raises(ValueError, match="metric"):
            knn_graph(np.zeros((3, 2)), 1, metric="manhattan")


class TestNormalize:
    def test_matches_dense_formula(self):
        rng = np.random.default_rng(3)
        adj = knn_graph(rng.normal(size=(15, 2)), 3)
        a_tilde = adj.to_dense() + np.eye(15)
        d = a_tilde.sum(axis=1)
        expected = a_tilde / np.sqrt(np.outer(d, d))
        norm = normalize(adj)
        assert norm.normalized
        assert np.abs(norm.to_dense() - expected).max() < 1e-12

    def test_diagonal_present(self):
        rng = np.random.default_rng(4)
        norm = normalize(knn_graph(rng.normal(size=(10, 2)), 2))
        dense = norm.to_dense()
        assert np.all(np.diag(dense) > 0)

    def test_double_normalize_rejected(self):
        norm = normalize(knn_graph(np.random.default_rng(5).normal(size=(8, 2)), 2))
        with pytest.raises(GraphStateError):
            normalize(norm)

    def test_single_node_identity(self):
        lonely = SparseAdjacency(
            n=1,
            rows=np.array([], dtype=np.int64),
            cols=np.array([], dtype=np.int64),
            weights=np.array([], dtype=np.float64),
        )
        norm = normalize(lonely)
        assert np.array_equal(norm.to_dense(), np.array([[1.0]]))
        x = np.array([[2.5, -1.0]])
        assert np.array_equal(spmm(norm, x), x)


class TestSpmm:
    def test_matches_dense_product(self):
        rng = np.random.default_rng(6)
        adj = normalize(knn_graph(rng.normal(size=(18, 2)), 4))
        x = rng.normal(size=(18, 7))
        assert np.abs(spmm(adj, x) - adj.to_dense() @ x).max() < 1e-12

    def test_shape_check(self):
        adj = normalize(knn_graph(np.random.default_rng(7).normal(size=(6, 2)), 2))
        with pytest.raises(ValueError):
            spmm(adj, np.zeros((5, 3)))


class TestBuildGraphs:
    def test_bundle_contents(self):
        rng = np.random.default_rng(8)
        coords = rng.normal(size=(30, 2))
        mods = {"rna": rng.normal(size=(30, 6)), "adt": rng.normal(size=(30, 5))}
        bundle = build_graphs(coords, mods, k_spatial=4, k_feature=6)
        assert isinstance(bundle, GraphBundle)
        assert bundle.spatial.normalized
        assert set(bundle.feature) == {"rna", "adt"}
        assert all(g.normalized for g in bundle.feature.values())

    def test_spatial_uses_euclidean_feature_uses_cosine(self):
        rng = np.random.default_rng(10)
        coords = rng.normal(size=(20, 2))
        mods = {"rna": rng.normal(size=(20, 4))}
        bundle = build_graphs(coords, mods, k_spatial=3, k_feature=3)
        spatial_expect = brute_knn_edges(coords, 3, "euclidean")
        feature_expect = brute_knn_edges(mods["rna"], 3, "cosine")
        raw_spatial = knn_graph(coords, 3)
        raw_feature = knn_graph(mods["rna"], 3, metric="cosine")
        assert set(zip(raw_spatial.rows.tolist(), raw_spatial.cols.tolist())) == spatial_expect
        assert set(zip(raw_feature.rows.tolist(), raw_feature.cols.tolist())) == feature_expect
        # normalized bundles keep the same sparsity pattern plus the diagonal
        got = {(r, c) for r, c in zip(bundle.spatial.rows, bundle.spatial.cols) if r != c}
        assert got == spatial_expect


class TestEdgeList:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        adj = normalize(knn_graph(rng.normal(size=(12, 2)), 3))
        path = tmp_path / "edges.csv"
        save_edge_list(adj, path, manifest_hash="cafe")
        lines = path.read_text().splitlines()
        assert lines[0] == "# manifest=cafe"
        assert lines[1] == "src,dst,weight"
        parsed = [line.split(",") for line in lines[2:]]
        assert len(parsed) == adj.nnz
        got = np.array([[float(v) for v in row] for row in parsed])
        assert np.array_equal(got[:, 0].astype(int), adj.rows)
        assert np.array_equal(got[:, 1].astype(int), adj.cols)
        assert np.array_equal(got[:, 2], adj.weights)

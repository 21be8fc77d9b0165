import numpy as np
import pytest

from refined.distances import (
    DistanceMatrix,
    PrecisionWeights,
    embedding_distances,
    estimate_precisions,
    fuse_distances,
    geodesic_distances,
    load_distance_binary,
    load_distance_csv,
    pairwise_euclidean,
    save_distance_binary,
    save_distance_csv,
)
from refined.errors import DataError, DisconnectedGraphError, NumericalError
from refined.projections import Embedding

from conftest import (
    labels,
    random_symmetric_distances,
    realizable_distances,
    table_from_values,
)


def weighted_mean_oracle(ds, sigma2, mode):
    """Closed-form fusion, written independently with explicit loops."""
    p = ds[0].d.shape[0]
    w = [1.0 / s for s in sigma2]
    out = np.zeros((p, p))
    for j in range(p):
        for k in range(p):
            if j == k:
                continue
            if mode == "arithmetic":
                out[j, k] = sum(wa * m.d[j, k] for wa, m in zip(w, ds)) / sum(w)
            else:
                out[j, k] = np.exp(
                    sum(wa * np.log(m.d[j, k]) for wa, m in zip(w, ds)) / sum(w)
                )
    return out


class TestPairwiseEuclidean:
    def test_identical_columns_zero(self):
        values = np.column_stack([[1.0, 2, 3], [1.0, 2, 3], [0, 1, 0], [5, 5, 4]])
        d = pairwise_euclidean(table_from_values(values))
        assert d.d[0, 1] == 0.0

    def test_three_four_five(self):
        values = np.column_stack([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [1, 1, 1], [2, 2, 2]])
        d = pairwise_euclidean(table_from_values(values))
        assert d.d[0, 1] == pytest.approx(5.0, abs=1e-12)

    def test_against_double_loop_oracle(self):
        rng = np.random.default_rng(12)
        values = rng.normal(size=(6, 4))
        d = pairwise_euclidean(table_from_values(values))
        for j in range(4):
            for k in range(4):
                expected = np.sqrt(((values[:, j] - values[:, k]) ** 2).sum())
                assert abs(d.d[j, k] - expected) < 1e-12


class TestGeodesic:
    def chain(self):
        pts = np.array([0.0, 1.0, 2.0])
        d = np.abs(pts[:, None] - pts[None, :])
        return DistanceMatrix(labels(3), d)

    def test_chain_path(self):
        geo = geodesic_distances(self.chain(), k=1)
        assert geo.d[0, 2] == pytest.approx(2.0)

    def test_complete_graph_equals_input(self):
        d, _ = realizable_distances(8, seed=3)
        geo = geodesic_distances(d, k=7)
        np.testing.assert_allclose(geo.d, d.d, atol=1e-12)

    def test_circle_arc_against_shortest_path_oracle(self):
        angles = np.linspace(0.0, np.pi / 2, 10)
        pts = np.column_stack([np.cos(angles), np.sin(angles)])
        from scipy.spatial.distance import pdist, squareform

        d = DistanceMatrix(labels(10), squareform(pdist(pts)))
        geo = geodesic_distances(d, k=2)

        # independent oracle: build the union 2-NN edge set by explicit
        # sorting, then Bellman-Ford relaxation with plain loops
        edges = set()
        for i in range(10):
            nearest = sorted(range(10), key=lambda j: (d.d[i, j], j))
            for j in [j for j in nearest if j != i][:2]:
                edges.add((i, j))
                edges.add((j, i))
        INF = float("inf")
        best = [INF] * 10
        best[0] = 0.0
        for _ in range(10):
            for i, j in edges:
                if best[i] + d.d[i, j] < best[j]:
                    best[j] = best[i] + d.d[i, j]
        assert geo.d[0, 9] == pytest.approx(best[9], rel=1e-12)
        # the k=2 geodesic approximates the arc length (polyline reference)
        polyline = sum(np.sqrt(((pts[i + 1] - pts[i]) ** 2).sum()) for i in range(9))
        assert geo.d[0, 9] == pytest.approx(polyline, rel=0.01)

    def test_disconnected_reports_component_sizes(self):
        pts = np.array([0.0, 0.1, 0.2, 10.0, 10.1, 10.2])
        d = DistanceMatrix(labels(6), np.abs(pts[:, None] - pts[None, :]))
        with pytest.raises(DisconnectedGraphError) as err:
            geodesic_distances(d, k=1)
        assert err.value.component_sizes == [3, 3]

    def test_bad_k(self):
        d, _ = realizable_distances(5, seed=0)
        with pytest.raises(DataError):
            geodesic_distances(d, k=0)
        with pytest.raises(DataError):
            geodesic_distances(d, k=5)


class TestEmbeddingDistances:
    def test_unit_and_diagonal(self):
        e = Embedding(labels(2), np.array([[0.0, 0.0], [1.0, 0.0]]), "t")
        assert embedding_distances(e).d[0, 1] == pytest.approx(1.0)

    def test_sqrt2(self):
        e = Embedding(labels(2), np.array([[0.0, 0.0], [1.0, 1.0]]), "t")
        assert embedding_distances(e).d[0, 1] == pytest.approx(np.sqrt(2.0))

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        coords = rng.normal(size=(5, 2))
        d = embedding_distances(Embedding(labels(5), coords, "t"))
        for j in range(5):
            for k in range(5):
                expected = np.sqrt(((coords[j] - coords[k]) ** 2).sum())
                assert abs(d.d[j, k] - expected) < 1e-12


class TestFuse:
    def two_constant(self, a, b, p=4):
        da = np.full((p, p), float(a))
        db = np.full((p, p), float(b))
        np.fill_diagonal(da, 0.0)
        np.fill_diagonal(db, 0.0)
        return [DistanceMatrix(labels(p), da), DistanceMatrix(labels(p), db)]

    def test_equal_weights(self):
        ds = self.two_constant(1.0, 4.0)
        w = PrecisionWeights(np.array([1.0, 1.0]))
        arith = fuse_distances(ds, w, "arithmetic")
        geom = fuse_distances(ds, w, "geometric")
        assert arith.d_bar.d[0, 1] == pytest.approx(2.5)
        assert geom.d_bar.d[0, 1] == pytest.approx(2.0)

    def test_sigma_weights_formula(self):
        ds = self.two_constant(2.0, 4.0)
        w = PrecisionWeights(np.array([1.0, 4.0]))  # weights 1 and 0.25
        arith = fuse_distances(ds, w, "arithmetic")
        assert arith.d_bar.d[0, 1] == pytest.approx(2.4, abs=1e-12)

    def test_geometric_log_linearity(self):
        # log(fused) must equal the arithmetic fusion of the log distances
        rng = np.random.default_rng(8)
        for trial in range(5):
            ds = [random_symmetric_distances(6, seed=100 + trial * 3 + i) for i in range(3)]
            sigma2 = rng.uniform(0.5, 2.0, size=3)
            w = PrecisionWeights(sigma2)
            geom = fuse_distances(ds, w, "geometric").d_bar.d
            expected = weighted_mean_oracle(ds, sigma2, "geometric")
            off = ~np.eye(6, dtype=bool)
            assert np.abs(geom[off] - expected[off]).max() < 1e-12
            wts = 1.0 / sigma2
            log_arith = sum(
                wa * np.log(m.d[off]) for wa, m in zip(wts, ds)
            ) / wts.sum()
            assert np.abs(np.log(geom[off]) - log_arith).max() < 1e-12

    def test_identical_inputs_returned_exactly(self):
        d = random_symmetric_distances(7, seed=2)
        w = PrecisionWeights(np.array([1.0, 2.0, 3.0]))
        for mode in ("arithmetic", "geometric"):
            fused = fuse_distances([d, d, d], w, mode)
            assert np.array_equal(fused.d_bar.d, d.d)

    def test_bounds_hold_entrywise(self):
        rng = np.random.default_rng(77)
        for trial in range(30):
            A = int(rng.integers(2, 5))
            p = int(rng.integers(4, 13))
            ds = [random_symmetric_distances(p, seed=1000 + 10 * trial + i) for i in range(A)]
            w = PrecisionWeights(rng.uniform(0.2, 3.0, size=A))
            stack = np.array([m.d for m in ds])
            for mode in ("arithmetic", "geometric"):
                fused = fuse_distances(ds, w, mode).d_bar.d
                assert (fused >= stack.min(axis=0)).all()
                assert (fused <= stack.max(axis=0)).all()

    def test_label_mismatch(self):
        d1 = random_symmetric_distances(4, seed=1)
        d2 = DistanceMatrix([f"g{i}" for i in range(4)], d1.d)
        with pytest.raises(DataError):
            fuse_distances([d1, d2], PrecisionWeights(np.ones(2)), "arithmetic")

    def test_geometric_zero_rejected(self):
        d1 = random_symmetric_distances(4, seed=1)
        bad = d1.d.copy()
        bad[0, 1] = bad[1, 0] = 0.0
        ds = [d1, DistanceMatrix(labels(4), bad)]
        with pytest.raises(NumericalError):
            fuse_distances(ds, PrecisionWeights(np.ones(2)), "geometric")


class TestEstimatePrecisions:
    def test_identical_matrices(self):
        d = random_symmetric_distances(5, seed=6)
        with pytest.warns(UserWarning, match="clamped"):
            fit = estimate_precisions([d, d], "arithmetic")
        assert np.array_equal(fit.fused.d_bar.d, d.d)
        assert fit.weights.sigma2[0] == fit.weights.sigma2[1]

    def test_symmetric_fixed_point(self):
        da = np.full((4, 4), 2.0)
        db = np.full((4, 4), 4.0)
        np.fill_diagonal(da, 0.0)
        np.fill_diagonal(db, 0.0)
        ds = [DistanceMatrix(labels(4), da), DistanceMatrix(labels(4), db)]
        with pytest.warns(UserWarning):
            # constant matrices rescale to identical unit-mean inputs
            arith = estimate_precisions(ds, "arithmetic")
            geom = estimate_precisions(ds, "geometric")
        assert arith.fused.d_bar.d[0, 1] == pytest.approx(3.0, abs=1e-9)
        assert geom.fused.d_bar.d[0, 1] == pytest.approx(np.sqrt(8.0), rel=1e-9)

    def test_symmetric_fixed_point_no_rescale(self):
        da = np.full((4, 4), 2.0)
        db = np.full((4, 4), 4.0)
        np.fill_diagonal(da, 0.0)
        np.fill_diagonal(db, 0.0)
        ds = [DistanceMatrix(labels(4), da), DistanceMatrix(labels(4), db)]
        arith = estimate_precisions(ds, "arithmetic", rescale=False)
        geom = estimate_precisions(ds, "geometric", rescale=False)
        assert arith.fused.d_bar.d[0, 1] == pytest.approx(3.0, abs=1e-12)
        assert geom.fused.d_bar.d[0, 1] == pytest.approx(np.sqrt(8.0), rel=1e-12)
        np.testing.assert_allclose(arith.weights.sigma2[0], arith.weights.sigma2[1])

    def test_fused_matches_closed_form_oracle(self):
        for mode in ("arithmetic", "geometric"):
            ds = [random_symmetric_distances(5, seed=40 + i) for i in range(3)]
            fit = estimate_precisions(ds, mode)
            expected = weighted_mean_oracle(ds, fit.weights.sigma2, mode)
            off = ~np.eye(5, dtype=bool)
            assert np.abs(fit.fused.d_bar.d[off] - expected[off]).max() < 1e-10

    def test_objective_monotone(self):
        for seed in range(8):
            ds = [random_symmetric_distances(6, seed=500 + 3 * seed + i) for i in range(3)]
            fit = estimate_precisions(ds, "arithmetic")
            diffs = np.diff(fit.objective_trace)
            assert (diffs <= 1e-9).all()

    def test_scale_equivariance(self):
        for mode in ("arithmetic", "geometric"):
            ds = [random_symmetric_distances(6, seed=60 + i) for i in range(3)]
            c = 7.3
            scaled = [DistanceMatrix(m.labels, c * m.d) for m in ds]
            base = estimate_precisions(ds, mode).fused.d_bar.d
            scaledf = estimate_precisions(scaled, mode).fused.d_bar.d
            np.testing.assert_allclose(scaledf, c * base, rtol=1e-8, atol=1e-12)

    def test_needs_two_metrics(self):
        d = random_symmetric_distances(4, seed=0)
        with pytest.raises(DataError):
            estimate_precisions([d], "arithmetic")


class TestSerialization:
    def test_csv_round_trip_exact(self, tmp_path):
        d = random_symmetric_distances(6, seed=11)
        path = tmp_path / "d.csv"
        save_distance_csv(d, path)
        back = load_distance_csv(path)
        assert back.labels == d.labels
        assert np.array_equal(back.d, d.d)

    def test_binary_round_trip_exact(self, tmp_path):
        d = random_symmetric_distances(9, seed=13)
        path = tmp_path / "d.bin"
        save_distance_binary(d, path)
        back = load_distance_binary(path)
        assert back.labels == d.labels
        assert np.array_equal(back.d, d.d)


class TestDistanceMatrixInvariants:
    def test_asymmetric_rejected(self):
        m = np.zeros((3, 3))
        m[0, 1] = 1.0
        with pytest.raises(DataError):
            DistanceMatrix(labels(3), m)

    def test_nonzero_diagonal_rejected(self):
        m = np.eye(3)
        with pytest.raises(DataError):
            DistanceMatrix(labels(3), m)

    def test_negative_rejected(self):
        m = np.full((3, 3), -1.0)
        np.fill_diagonal(m, 0.0)
        with pytest.raises(DataError):
            DistanceMatrix(labels(3), m)

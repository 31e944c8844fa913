import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodgate import boundary as bd
from oodgate.errors import DegenerateDataError, UserError


class TestFitBoundaries:
    def test_two_point_family_degenerate(self):
        # mu=(1,0), both distances 1, s=0
        E = np.array([[0.0, 0.0], [2.0, 0.0]])
        with pytest.raises(DegenerateDataError, match="family 0"):
            bd.fit_boundaries(E, [0, 0])

    def test_symmetric_square_degenerate(self):
        E = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        with pytest.raises(DegenerateDataError):
            bd.fit_boundaries(E, [0, 0, 0, 0])

    def test_single_sample_family_rejected(self):
        E = np.array([[0.0], [1.0], [3.0], [9.0]])
        with pytest.raises(UserError, match=">= 2"):
            bd.fit_boundaries(E, [0, 0, 0, 1])

    def test_monte_carlo_recovery(self):
        d, n, sigma = 16, 500, 1.7
        rng = np.random.default_rng(42)
        center = rng.standard_normal(d) * 3
        E = center + sigma * rng.standard_normal((n, d))
        bset = bd.fit_boundaries(E, np.zeros(n, dtype=int))
        b = bset.boundaries[0]
        assert abs(b.sigma_iso / sigma - 1) < 0.05
        # chi-distribution mean approximation
        assert abs(b.dist_mean / (sigma * np.sqrt(d - 0.5)) - 1) < 0.05
        assert np.max(np.abs(b.centroid - center)) < 5 * sigma / np.sqrt(n) * 3

    def test_population_std_convention(self):
        rng = np.random.default_rng(1)
        E = rng.standard_normal((20, 3))
        labels = np.zeros(20, dtype=int)
        bset = bd.fit_boundaries(E, labels)
        mu = E.mean(axis=0)
        dists = np.linalg.norm(E - mu, axis=1)
        assert abs(bset.boundaries[0].dist_std - dists.std(ddof=0)) < 1e-12

    def test_shared_sigma_mode(self):
        rng = np.random.default_rng(2)
        E = np.vstack([rng.standard_normal((10, 4)),
                       5 + 3 * rng.standard_normal((10, 4))])
        labels = np.repeat([0, 1], 10)
        bset = bd.fit_boundaries(E, labels, sigma_mode="shared")
        assert bset.boundaries[0].sigma_iso == bset.boundaries[1].sigma_iso


class TestGaussianDensity:
    def _boundary(self, centroid, sigma):
        return bd.ClassBoundary(class_id=0, centroid=np.asarray(centroid, float),
                                sigma_iso=sigma, dist_mean=1.0, dist_std=0.5,
                                n_samples=2)

    def test_standard_normal_mode(self):
        b = self._boundary([0.0], 1.0)
        assert abs(bd.gaussian_density(np.array([0.0]), b) - 1 / np.sqrt(2 * np.pi)) < 1e-9

    def test_mode_is_maximum(self):
        b = self._boundary([1.0, 2.0, 3.0], 0.7)
        at_mode = bd.gaussian_density(b.centroid, b)
        assert abs(at_mode - (2 * np.pi * 0.49) ** (-1.5)) < 1e-12
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = b.centroid + rng.standard_normal(3)
            assert bd.gaussian_density(x, b) <= at_mode

    def test_2d_quadrature_integrates_to_one(self):
        b = self._boundary([0.5, -0.3], 1.3)
        grid = np.linspace(-8 * 1.3, 8 * 1.3, 401)
        h = grid[1] - grid[0]
        xs = b.centroid[0] + grid
        ys = b.centroid[1] + grid
        vals = np.array([[bd.gaussian_density(np.array([x, y]), b) for y in ys]
                         for x in xs])
        integral = vals.sum() * h * h
        assert 0.98 <= integral <= 1.02

    def test_log_density_identity(self):
        b = self._boundary([1.0, 0.0, -2.0, 4.0], 0.9)
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.standard_normal(4) * 3
            lhs = bd.log_gaussian_density(x, b) - bd.log_gaussian_density(b.centroid, b)
            rhs = -float(((x - b.centroid) ** 2).sum()) / (2 * 0.9 ** 2)
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_dimension_mismatch(self):
        b = self._boundary([0.0, 0.0], 1.0)
        with pytest.raises(UserError):
            bd.gaussian_density(np.zeros(3), b)


class TestZScore:
    def test_centering(self):
        assert bd.z_score(3.0, 3.0, 2.0) == 0.0

    def test_unit_deviation(self):
        assert bd.z_score(5.0, 4.0, 1.0) == 1.0

    def test_highly_suspicious_threshold(self):
        assert bd.z_score(5.0, 3.0, 1.0) == 2.0

    def test_nonpositive_std_rejected(self):
        with pytest.raises(UserError):
            bd.z_score(1.0, 0.0, 0.0)

    @given(st.floats(-100, 100), st.floats(-100, 100),
           st.floats(0.01, 100), st.floats(0.01, 50), st.floats(-100, 100))
    def test_affine_equivariance(self, v, m, s, a, b):
        z1 = bd.z_score(v, m, s)
        z2 = bd.z_score(a * v + b, a * m + b, a * s)
        assert z2 == pytest.approx(z1, rel=1e-6, abs=1e-6)


class TestCoefficientOfVariation:
    def test_basic(self):
        assert bd.coefficient_of_variation(10.0, 1.0) == 0.1

    def test_equal_mean_std(self):
        assert bd.coefficient_of_variation(2.5, 2.5) == 1.0

    def test_zero_mean_rejected(self):
        with pytest.raises(UserError):
            bd.coefficient_of_variation(0.0, 1.0)

    def test_matches_distance_statistics(self):
        rng = np.random.default_rng(7)
        E = rng.standard_normal((50, 5)) * 2 + 1
        bset = bd.fit_boundaries(E, np.zeros(50, dtype=int))
        b = bset.boundaries[0]
        dists = np.linalg.norm(E - E.mean(axis=0), axis=1)
        expected = dists.std() / dists.mean()
        assert bd.coefficient_of_variation(b.dist_mean, b.dist_std) == \
            pytest.approx(expected, abs=1e-12)


def _boundaries_with_z(z_targets, embedding_dim=2):
    """Boundary set where the origin embedding yields the given z-scores."""
    boundaries = []
    for k, z in enumerate(z_targets):
        dist = 5.0 + k  # distance from origin to this centroid
        centroid = np.zeros(embedding_dim)
        centroid[0] = dist
        boundaries.append(bd.ClassBoundary(
            class_id=k, centroid=centroid, sigma_iso=1.0,
            dist_mean=dist - z, dist_std=1.0, n_samples=10))
    return bd.BoundarySet(boundaries=boundaries, embedding_dim=embedding_dim)


def direct_band_rule(z_scores, band=1.0):
    """Literal restatement of the gate rule, kept independent of classify_sample."""
    return "in_distribution" if any(-band <= z <= band for z in z_scores) \
        else "out_of_distribution"


class TestClassifySample:
    def test_one_inside_band_is_id(self):
        bset = _boundaries_with_z([0.5, 2.3, 4.1])
        verdict = bd.classify_sample(np.zeros(2), bset)
        assert verdict.decision == "in_distribution"
        assert verdict.nearest_class == 0
        assert np.allclose(verdict.z_scores, [0.5, 2.3, 4.1])

    def test_all_outside_band_is_ood(self):
        bset = _boundaries_with_z([1.7, -1.4, 3.0])
        verdict = bd.classify_sample(np.zeros(2), bset)
        assert verdict.decision == "out_of_distribution"
        assert verdict.nearest_class == 1

    def test_at_centroid_can_be_ood_under_literal_rule(self):
        b = bd.ClassBoundary(class_id=0, centroid=np.array([3.0, 4.0]),
                             sigma_iso=1.0, dist_mean=5.0, dist_std=1.0,
                             n_samples=10)
        bset = bd.BoundarySet(boundaries=[b], embedding_dim=2)
        verdict = bd.classify_sample(b.centroid, bset, band=1.0)
        assert verdict.z_scores[0] == pytest.approx(-5.0)
        assert verdict.decision == "out_of_distribution"
        # one-sided mode accepts samples unusually close to the centroid
        verdict = bd.classify_sample(b.centroid, bset, band=1.0, one_sided=True)
        assert verdict.decision == "in_distribution"

    def test_agrees_with_direct_rule_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            z = rng.uniform(-4, 4, size=rng.integers(1, 6))
            bset = _boundaries_with_z(z)
            verdict = bd.classify_sample(np.zeros(2), bset)
            assert np.allclose(verdict.z_scores, z, atol=1e-9)
            assert verdict.decision == direct_band_rule(verdict.z_scores)

    def test_scale_invariance_of_decision(self):
        rng = np.random.default_rng(8)
        z = rng.uniform(-3, 3, 4)
        base = _boundaries_with_z(z)
        v1 = bd.classify_sample(np.zeros(2), base)
        factor = 7.5
        scaled = bd.BoundarySet(boundaries=[
            bd.ClassBoundary(class_id=b.class_id, centroid=b.centroid * factor,
                             sigma_iso=b.sigma_iso, dist_mean=b.dist_mean * factor,
                             dist_std=b.dist_std * factor, n_samples=b.n_samples)
            for b in base.boundaries], embedding_dim=2)
        v2 = bd.classify_sample(np.zeros(2), scaled)
        assert np.allclose(v1.z_scores, v2.z_scores, atol=1e-9)
        assert v1.decision == v2.decision
        assert v1.nearest_class == v2.nearest_class

    def test_nearest_tie_breaks_to_lowest_index(self):
        bset = _boundaries_with_z([2.0, -2.0, 2.0])
        verdict = bd.classify_sample(np.zeros(2), bset)
        assert verdict.nearest_class == 0

    def test_confidence_is_softmax_at_nearest(self):
        bset = _boundaries_with_z([0.5, 2.0])
        verdict = bd.classify_sample(np.zeros(2), bset)
        expected = np.exp(-0.5) / (np.exp(-0.5) + np.exp(-2.0))
        assert verdict.confidence == pytest.approx(expected, abs=1e-12)

    def test_suspicion_tiers(self):
        assert bd.classify_sample(np.zeros(2), _boundaries_with_z([0.5])).suspicion == "normal"
        assert bd.classify_sample(np.zeros(2), _boundaries_with_z([1.5])).suspicion == "possible_outlier"
        assert bd.classify_sample(np.zeros(2), _boundaries_with_z([2.5])).suspicion == "highly_suspicious"

    def test_dimension_mismatch(self):
        bset = _boundaries_with_z([0.5])
        with pytest.raises(UserError):
            bd.classify_sample(np.zeros(3), bset)


def _all_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for bits in itertools.product([0, 1], repeat=len(pairs)):
        A = np.zeros((n, n))
        for (u, v), bit in zip(pairs, bits):
            A[u, v] = A[v, u] = bit
        yield A


class TestNormalizedLaplacian:
    def test_single_edge(self):
        L = bd.normalized_laplacian(np.array([[0, 1], [1, 0]]))
        assert np.array_equal(L, np.array([[1.0, -1.0], [-1.0, 1.0]]))

    def test_isolated_node(self):
        A = np.zeros((3, 3))
        A[0, 1] = A[1, 0] = 1
        L = bd.normalized_laplacian(A)
        assert np.all(L[2, :] == 0) and np.all(L[:, 2] == 0)

    def test_asymmetric_rejected(self):
        A = np.zeros((2, 2))
        A[0, 1] = 1
        with pytest.raises(UserError, match="symmetric"):
            bd.normalized_laplacian(A)

    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(UserError, match="diagonal"):
            bd.normalized_laplacian(np.eye(2))

    def test_eigenvalues_in_unit_range_random_graphs(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = rng.integers(2, 20)
            A = (rng.random((n, n)) < 0.3).astype(float)
            A = np.triu(A, 1)
            A = A + A.T
            L = bd.normalized_laplacian(A)
            assert np.array_equal(L, L.T)
            eig = np.linalg.eigvalsh(L)
            assert eig.min() >= -1e-9 and eig.max() <= 2 + 1e-9

    def test_quadratic_form_nonnegative(self):
        rng = np.random.default_rng(1)
        for n in (3, 7, 12):
            A = (rng.random((n, n)) < 0.4).astype(float)
            A = np.triu(A, 1)
            A = A + A.T
            L = bd.normalized_laplacian(A)
            for _ in range(10):
                x = rng.standard_normal(n)
                assert x @ L @ x >= -1e-9

    def test_all_small_graphs(self):
        for n in range(1, 6):
            for A in _all_graphs(n):
                L = bd.normalized_laplacian(A)
                assert np.array_equal(L, L.T)
                eig = np.linalg.eigvalsh(L)
                assert eig.min() >= -1e-9 and eig.max() <= 2 + 1e-9


class TestSpectralDiagnostics:
    def test_two_clusters_detected(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((15, 3))
        b = rng.standard_normal((15, 3)) + 100.0
        E = np.vstack([a, b])
        labels = np.repeat([0, 1], 15)
        report = bd.spectral_diagnostics(E, labels, k_neighbors=3)
        assert report.approx_cluster_count >= 2
        assert report.per_family_conductance[0] == 0.0

    def test_connected_graph_one_zero_eigenvalue(self):
        # colinear points: mutual 2-NN chain stays connected
        E = np.arange(6, dtype=float)[:, None]
        report = bd.spectral_diagnostics(E, np.zeros(6, dtype=int), k_neighbors=2)
        eig = np.sort(report.eigenvalues)
        assert abs(eig[0]) < 1e-9
        assert eig[1] > 1e-9

    def test_k_too_large_rejected(self):
        with pytest.raises(UserError, match="k_neighbors"):
            bd.spectral_diagnostics(np.zeros((4, 2)), np.zeros(4, dtype=int), 4)

    def test_empty_edge_set_is_error_not_crash(self):
        # the globally closest pair is always mutual, so empty pruning can
        # only reach the adjacency-level entry point
        with pytest.raises(UserError, match="empty edge set"):
            bd.spectral_diagnostics_from_adjacency(np.zeros((3, 3), dtype=bool),
                                                   np.zeros(3, dtype=int))


class TestBoundaryFile:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        E = np.vstack([rng.standard_normal((20, 6)),
                       rng.standard_normal((20, 6)) + 8])
        bset = bd.fit_boundaries(E, np.repeat([0, 1], 20))
        bset.band = 1.5
        path = str(tmp_path / "b.txt")
        bd.save_boundaries(bset, path)
        loaded = bd.load_boundaries(path)
        assert loaded.band == 1.5
        assert loaded.embedding_dim == 6
        for a, b in zip(bset.boundaries, loaded.boundaries):
            assert np.array_equal(a.centroid, b.centroid)
            assert a.sigma_iso == b.sigma_iso
            assert a.dist_mean == b.dist_mean
            assert a.dist_std == b.dist_std
            assert a.n_samples == b.n_samples

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("garbage header\n")
        with pytest.raises(UserError, match="header"):
            bd.load_boundaries(str(path))

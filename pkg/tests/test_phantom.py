import numpy as np
import pytest

from voxmix.phantom import (
    PhantomSpec,
    generate_phantom,
    neighborhood_priors,
    parameter_fields,
    procedural_labels,
    sample_volume,
)
from voxmix.volume import LabelVolume, ParameterField


class TestProceduralLabels:
    def test_labels_in_range(self):
        lv = procedural_labels((64, 64, 64), seed=0)
        assert set(np.unique(lv.labels)) == {1, 2, 3}

    def test_grid_center_is_lung(self):
        for seed in range(5):
            lv = procedural_labels((64, 64, 64), seed=seed)
            assert lv.labels[32, 32, 32] == 2

    def test_class_fractions_within_bounds(self):
        for seed in (0, 3, 11):
            lv = procedural_labels((64, 64, 64), seed=seed)
            total = lv.labels.size
            for cls in (2, 3):
                frac = (lv.labels == cls).sum() / total
                assert 0.05 <= frac <= 0.40

    def test_seed_changes_geometry(self):
        a = procedural_labels((32, 32, 32), seed=0)
        b = procedural_labels((32, 32, 32), seed=1)
        assert (a.labels != b.labels).any()

    def test_deterministic(self):
        a = procedural_labels((32, 32, 32), seed=7)
        b = procedural_labels((32, 32, 32), seed=7)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestNeighborhoodPriors:
    def test_uniform_background_interior(self):
        dims = (12, 12, 12)
        lv = LabelVolume(dims, np.ones((12, 12, 12), dtype=np.uint8), 3)
        pi = neighborhood_priors(lv)
        np.testing.assert_allclose(pi[0], 1.6 / 2.8, atol=1e-13)
        np.testing.assert_allclose(pi[1], 0.6 / 2.8, atol=1e-13)
        np.testing.assert_allclose(pi[2], 0.6 / 2.8, atol=1e-13)
        assert pi[0, 6, 6, 6] == pytest.approx(0.5714285714285714, abs=1e-12)

    def test_simplex_per_voxel(self):
        rng = np.random.default_rng(1)
        dims = (10, 9, 8)
        lv = LabelVolume(dims, rng.integers(1, 4, size=(8, 9, 10)).astype(np.uint8), 3)
        pi = neighborhood_priors(lv)
        np.testing.assert_allclose(pi.sum(axis=0), 1.0, atol=1e-12)
        assert pi.min() > 0 and pi.max() < 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        dims = (7, 7, 7)
        labels = rng.integers(1, 4, size=(7, 7, 7)).astype(np.uint8)
        lv = LabelVolume(dims, labels, 3)
        pi = neighborhood_priors(lv)
        for k, j, i in [(0, 0, 0), (3, 3, 3), (6, 2, 5), (1, 6, 0)]:
            ks = slice(max(k - 2, 0), min(k + 2, 6) + 1)
            js = slice(max(j - 2, 0), min(j + 2, 6) + 1)
            is_ = slice(max(i - 2, 0), min(i + 2, 6) + 1)
            window = labels[ks, js, is_]
            for m in range(3):
                frac = (window == m + 1).sum() / window.size
                want = (frac + 0.6) / 2.8
                assert pi[m, k, j, i] == pytest.approx(want, abs=1e-13)

    def test_rejects_simplex_breaking_m(self):
        dims = (6, 6, 6)
        lv = LabelVolume(dims, np.ones((6, 6, 6), dtype=np.uint8), 2)
        with pytest.raises(ValueError, match="simplex"):
            neighborhood_priors(lv)


class TestParameterFields:
    def _spec(self, dims=(16, 16, 16)):
        return PhantomSpec(dims=dims)

    def test_base_values_where_sinusoid_vanishes(self):
        spec = self._spec()
        pi = np.full((3, 16, 16, 16), 1 / 3)
        theta = parameter_fields(spec, pi)
        # x3 = 0.5 -> sin(8*pi*0.5) = sin(4*pi) = 0 at k = 7 (position 8/16)
        np.testing.assert_allclose(theta.mu[0][7], 1.0, atol=1e-12)
        np.testing.assert_allclose(theta.mu[1][7], 0.30, atol=1e-12)
        np.testing.assert_allclose(theta.sigma[2][7], 0.05, atol=1e-12)

    def test_extremes_attained(self):
        # dims chosen so some position hits sin product = +/-1 exactly:
        # x = 1/32 -> 8*pi*x = pi/4 ... use dims 16: positions j/16, products hit +-1?
        spec = self._spec(dims=(32, 32, 32))
        pi = np.full((3, 32, 32, 32), 1 / 3)
        theta = parameter_fields(spec, pi)
        # x = 2/32 = 1/16 -> 8*pi/16 = pi/2 -> sin = 1 at index i=1
        assert theta.mu[1, 1, 1, 1] == pytest.approx(0.30 + 0.25, abs=1e-12)
        # sin = 1,1,-1 at (i=1, j=1, k=5): x3 = 6/32 -> 8*pi*6/32 = 3*pi/2
        assert theta.mu[1, 5, 1, 1] == pytest.approx(0.30 - 0.25, abs=1e-12)

    def test_sigma_range_and_floor(self):
        spec = self._spec(dims=(32, 32, 32))
        pi = np.full((3, 32, 32, 32), 1 / 3)
        theta = parameter_fields(spec, pi)
        assert theta.sigma.min() >= spec.sigma_floor
        assert theta.sigma.max() <= 2 * 0.05 + 1e-12
        # where the sinusoid is -1 the raw value 0 gets floored
        assert theta.sigma[0, 5, 1, 1] == spec.sigma_floor

    def test_shape_mismatch_rejected(self):
        spec = self._spec()
        with pytest.raises(ValueError, match="priors shape"):
            parameter_fields(spec, np.full((3, 4, 4, 4), 1 / 3))


class TestSampleVolume:
    def _theta(self, dims, pis, mus, sigmas):
        dx, dy, dz = dims
        M = len(pis)
        shape = (M, dz, dy, dx)
        pi = np.stack([np.full((dz, dy, dx), p) for p in pis])
        mu = np.stack([np.full((dz, dy, dx), m) for m in mus])
        sg = np.stack([np.full((dz, dy, dx), s) for s in sigmas])
        return ParameterField(dims, M, pi, mu, sg)

    def test_degenerate_prior_labels(self):
        theta = self._theta((8, 8, 8), [1.0, 0.0, 0.0], [0.2, 0.5, 0.8], [0.01] * 3)
        _, labels = sample_volume(theta, seed=0)
        assert (labels.labels == 1).all()

    def test_class_means_recovered(self):
        theta = self._theta((24, 24, 24), [0.5, 0.5], [0.2, 0.8], [1e-3, 1e-3])
        vol, labels = sample_volume(theta, seed=1)
        for m, mu in ((1, 0.2), (2, 0.8)):
            sel = labels.labels == m
            n = sel.sum()
            assert abs(vol.data[sel].mean() - mu) < 3e-3 / np.sqrt(n) + 1e-4

    def test_reproducible(self):
        theta = self._theta((8, 8, 8), [0.3, 0.7], [0.2, 0.8], [0.05, 0.05])
        v1, l1 = sample_volume(theta, seed=9)
        v2, l2 = sample_volume(theta, seed=9)
        np.testing.assert_array_equal(v1.data, v2.data)
        np.testing.assert_array_equal(l1.labels, l2.labels)
        v3, _ = sample_volume(theta, seed=10)
        assert (v1.data != v3.data).any()

    def test_label_frequencies_match_priors(self):
        # one voxel replicated: chi-square vs pi at the 1% level (2 dof -> 9.21)
        pis = (0.5, 0.2, 0.3)
        theta = self._theta((100, 100, 1), pis, [0.2, 0.5, 0.8], [0.05] * 3)
        _, labels = sample_volume(theta, seed=3)
        n = labels.labels.size
        chi2 = 0.0
        for m, p in enumerate(pis):
            observed = (labels.labels == m + 1).sum()
            expected = n * p
            chi2 += (observed - expected) ** 2 / expected
        assert chi2 < 9.21


class TestGeneratePhantom:
    def test_full_pipeline(self):
        spec = PhantomSpec(dims=(32, 32, 32), seed=4)
        data = generate_phantom(spec)
        assert data.volume.dims == (32, 32, 32)
        assert data.theta.n_components == 3
        np.testing.assert_allclose(data.theta.pi.sum(axis=0), 1.0, atol=1e-12)
        assert data.theta.sigma.min() >= spec.sigma_floor
        assert set(np.unique(data.geometry.labels)) == {1, 2, 3}
        assert set(np.unique(data.labels.labels)) <= {1, 2, 3}

    def test_deterministic(self):
        spec = PhantomSpec(dims=(16, 16, 16), seed=5)
        a = generate_phantom(spec)
        b = generate_phantom(spec)
        np.testing.assert_array_equal(a.volume.data, b.volume.data)
        np.testing.assert_array_equal(a.labels.labels, b.labels.labels)

    def test_external_labels(self):
        dims = (16, 16, 16)
        geometry = procedural_labels(dims, seed=6)
        spec = PhantomSpec(dims=dims, label_source="external", external_labels=geometry)
        data = generate_phantom(spec)
        np.testing.assert_array_equal(data.geometry.labels, geometry.labels)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="simplex"):
            PhantomSpec(dims=(8, 8, 8), n_components=2, base_mu=(1.0, 0.3),
                        base_sigma=(0.05, 0.05))
        with pytest.raises(ValueError, match="one entry per class"):
            PhantomSpec(dims=(8, 8, 8), base_mu=(1.0, 0.5))
        with pytest.raises(ValueError, match="external_labels"):
            PhantomSpec(dims=(8, 8, 8), label_source="external")

import math

import numpy as np
import pytest

from wifislam import (
    GridMap,
    PerturbationPrior,
    SingularGeometryError,
    Theta,
    build_transition,
    emission_logdensity,
    emission_logdensity_cells,
    friis_mean,
    sample_perturbation,
)


@pytest.fixture
def grid():
    return GridMap.regular(4, 4, [[0.5, 0.5], [2.5, 2.2]])


class TestFriisMean:
    def test_unit_distance(self):
        assert friis_mean(-26.0, -17.5, (1.0, 0.0), (0.0, 0.0)) == pytest.approx(-26.0, abs=1e-14)

    def test_distance_e(self):
        assert friis_mean(-26.0, -17.5, (math.e, 0.0), (0.0, 0.0)) == pytest.approx(-43.5, abs=1e-12)

    def test_distance_ten(self):
        expected = -26.0 - 17.5 * math.log(10.0)
        assert friis_mean(-26.0, -17.5, (10.0, 0.0), (0.0, 0.0)) == pytest.approx(expected, abs=1e-13)

    def test_zero_distance_raises(self):
        with pytest.raises(SingularGeometryError):
            friis_mean(-26.0, -17.5, (2.0, 3.0), (2.0, 3.0))


class TestPerturbationPrior:
    def test_factorization_is_spd(self, grid):
        prior = PerturbationPrior(grid, v1=10.0, v2=18.0)
        assert np.all(np.isfinite(prior.chol))
        assert np.allclose(prior.chol @ prior.chol.T, prior.cov, atol=1e-10)

    def test_zero_field_is_prior_mode(self, grid):
        prior = PerturbationPrior(grid, v1=5.0, v2=8.0)
        rng = np.random.default_rng(3)
        zero = np.zeros((grid.n_aps, grid.n_cells))
        assert prior.log_density_unnormalized(zero) == 0.0
        for _ in range(20):
            delta = sample_perturbation(prior, rng)
            assert prior.log_density_unnormalized(delta) <= 0.0

    def test_logdensity_two_routes_agree(self, grid):
        prior = PerturbationPrior(grid, v1=3.0, v2=10.0)
        rng = np.random.default_rng(11)
        for _ in range(10):
            delta = sample_perturbation(prior, rng)
            a = prior.log_density_unnormalized(delta)
            b = prior.log_density_unnormalized_chol(delta)
            assert abs(a - b) <= 1e-8 * max(1.0, abs(a))

    def test_vanishing_variance(self, grid):
        prior = PerturbationPrior(grid, v1=1e-12, v2=18.0)
        delta = sample_perturbation(prior, np.random.default_rng(0))
        assert np.abs(delta).max() < 1e-4

    def test_sampling_reproducible(self, grid):
        prior = PerturbationPrior(grid, v1=10.0, v2=18.0)
        d1 = sample_perturbation(prior, np.random.default_rng(42))
        d2 = sample_perturbation(prior, np.random.default_rng(42))
        assert np.array_equal(d1, d2)

    def test_marginal_variance_and_correlation(self):
        grid = GridMap.regular(4, 4, [[0.5, 0.5]])
        v1, v2 = 10.0, 18.0
        prior = PerturbationPrior(grid, v1=v1, v2=v2)
        rng = np.random.default_rng(123)
        n = 10_000
        z = rng.standard_normal((grid.n_cells, n))
        draws = prior.chol @ z  # (C, n)
        var = draws.var(axis=1)
        assert np.all(np.abs(var - v1) < 0.05 * v1)
        i, j = grid.cell_index((1, 1)), grid.cell_index((1, 2))
        emp = np.corrcoef(draws[i], draws[j])[0, 1]
        assert abs(emp - math.exp(-1.0 / v2)) < 0.05


class TestTheta:
    def test_maps_recompute_agreement(self, grid):
        rng = np.random.default_rng(5)
        delta = rng.normal(0, 3, (grid.n_aps, grid.n_cells))
        th = Theta(grid, -26.0, -17.5, delta, 25.0)
        assert np.abs(th.F - th.recompute_maps()).max() < 1e-12

    def test_sigma2_must_be_positive(self, grid):
        with pytest.raises(Exception):
            Theta(grid, -26.0, -17.5, np.zeros((grid.n_aps, grid.n_cells)), 0.0)

    def test_immutable_arrays(self, grid):
        th = Theta(grid, -26.0, -17.5, np.zeros((grid.n_aps, grid.n_cells)), 25.0)
        with pytest.raises(ValueError):
            th.F[0, 0] = 1.0


class TestEmission:
    def test_zero_residual_full_mask(self):
        grid = GridMap.regular(5, 4, [[0.5 + 0.1 * j, 0.7] for j in range(17)])
        th = Theta(grid, -26.0, -17.5, np.zeros((17, grid.n_cells)), 25.0)
        x = 7
        val = emission_logdensity(th, x, th.F[:, x])
        assert val == pytest.approx(-(17 / 2) * math.log(2 * math.pi * 25.0), abs=1e-12)

    def test_single_ap_residual(self):
        grid = GridMap.regular(2, 2, [[0.4, 0.4]])
        th = Theta(grid, -26.0, -17.5, np.zeros((1, grid.n_cells)), 25.0)
        y = th.F[:, 1] + 5.0
        expected = -0.5 * math.log(2 * math.pi * 25.0) - 0.5
        assert emission_logdensity(th, 1, y) == pytest.approx(expected, abs=1e-12)

    def test_masked_ap_ignored(self, grid):
        th = Theta(grid, -26.0, -17.5, np.zeros((grid.n_aps, grid.n_cells)), 25.0)
        y = th.F[:, 3] + 1.0
        mask = np.array([True, False])
        base = emission_logdensity(th, 3, y, mask)
        y2 = y.copy()
        y2[1] += 100.0
        assert emission_logdensity(th, 3, y2, mask) == base

    def test_empty_mask_flat_and_warns(self, grid):
        th = Theta(grid, -26.0, -17.5, np.zeros((grid.n_aps, grid.n_cells)), 25.0)
        with pytest.warns(UserWarning, match="empty visibility"):
            assert emission_logdensity(th, 0, np.array([np.nan, np.nan]), np.zeros(2, bool)) == 0.0

    def test_additivity_maps_equal_params(self, grid):
        rng = np.random.default_rng(9)
        delta = rng.normal(0, 2, (grid.n_aps, grid.n_cells))
        th = Theta(grid, -26.0, -17.5, delta, 25.0)
        th_maps = Theta.from_maps(grid, th.F, 25.0)
        y = rng.normal(-50, 10, grid.n_aps)
        for x in range(grid.n_cells):
            assert emission_logdensity(th, x, y) == pytest.approx(
                emission_logdensity(th_maps, x, y), abs=1e-12)

    def test_vectorized_matches_scalar(self, grid):
        rng = np.random.default_rng(2)
        delta = rng.normal(0, 2, (grid.n_aps, grid.n_cells))
        th = Theta(grid, -26.0, -17.5, delta, 9.0)
        y = rng.normal(-50, 10, grid.n_aps)
        mask = np.array([True, False])
        cells = np.arange(grid.n_cells)
        vec = emission_logdensity_cells(th, cells, y, mask)
        scal = [emission_logdensity(th, x, y, mask) for x in cells]
        assert np.allclose(vec, scal, atol=1e-12)

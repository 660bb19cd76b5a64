import numpy as np
import pytest

from wifislam import (
    ExactFilter,
    FilterUnderflowError,
    GridMap,
    ParticleSystem,
    Theta,
    bootstrap_filter_recursion,
    build_transition,
    exact_filter_init,
    exact_filter_step,
    init_particle_system,
    map_position_estimate,
    posterior_mean_position,
)
from wifislam.propagation import emission_logdensity_cells

from oracles import enumerate_smoothed
from wifislam.stats import StatLayout


def make_model(w=2, h=2, a=2.0, sigma2=16.0, seed=0):
    grid = GridMap.regular(w, h, [[0.4, 0.6], [w - 1.3, h - 1.4]])
    kernel = build_transition(grid, a)
    rng = np.random.default_rng(seed)
    theta = Theta(grid, -24.0, -16.0, rng.normal(0, 2, (2, grid.n_cells)), sigma2)
    return grid, kernel, theta


class TestExactFilter:
    def test_point_mass_prior_wins(self):
        grid, kernel, theta = make_model()
        nu = np.array([0.0, 1.0, 0.0, 0.0])
        y = theta.F[:, 3] + 2.0  # likelihood prefers another cell
        phi = exact_filter_init(nu, theta, y)
        assert np.array_equal(phi, nu)

    def test_symmetric_likelihood_keeps_prior(self):
        grid = GridMap(1, 2, [[0, 0], [0, 2]], [[0.0, 1.0]])  # both cells at distance 1
        theta = Theta(grid, -30.0, -10.0, np.zeros((1, 2)), 25.0)
        nu = np.array([0.3, 0.7])
        phi = exact_filter_init(nu, theta, np.array([-35.0]))
        assert np.allclose(phi, nu, atol=1e-14)

    def test_two_cell_bayes_by_hand(self):
        grid = GridMap(1, 2, [[0, 0], [0, 1]], [[0.0, 0.25]])
        theta = Theta(grid, -30.0, -15.0, np.zeros((1, 2)), 25.0)
        nu = np.array([0.4, 0.6])
        y = np.array([-38.0])
        g = np.exp([-0.5 * np.log(2 * np.pi * 25.0) - (y[0] - theta.F[0, x]) ** 2 / 50.0
                    for x in range(2)])
        expected = nu * g / (nu * g).sum()
        phi = exact_filter_init(nu, theta, y)
        assert np.abs(phi - expected).max() < 1e-12

    def test_identity_kernel_flat_likelihood_keeps_phi(self):
        grid, kernel, theta = make_model(a=2.0)
        ident = build_transition(grid, 1e-12)
        phi = np.array([0.1, 0.2, 0.3, 0.4])
        out = exact_filter_step(phi, ident, theta, np.full(2, np.nan), mask=np.zeros(2, bool))
        assert np.abs(out - phi).max() < 1e-14

    def test_matches_path_enumeration(self):
        rng = np.random.default_rng(21)
        grid, kernel, theta = make_model(sigma2=9.0, seed=4)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        n = 6
        nu = rng.dirichlet(np.ones(4))
        ys = theta.F[:, rng.integers(0, 4, n)].T + rng.normal(0, 3.0, (n, 2))
        masks = np.ones((n, 2), dtype=bool)
        phi = exact_filter_init(nu, theta, ys[0])
        for t in range(1, n):
            phi = exact_filter_step(phi, kernel, theta, ys[t])
        phi_ref, _, _ = enumerate_smoothed(kernel, theta, nu, ys, masks, layout)
        assert np.abs(phi - phi_ref).max() < 1e-10

    def test_flat_likelihood_converges_to_stationary(self):
        grid, kernel, theta = make_model(w=3, h=3, a=4.0)
        pi_ref = kernel.stationary()
        phi = np.zeros(grid.n_cells)
        phi[0] = 1.0
        flat_y = np.full(grid.n_aps, np.nan)
        no_mask = np.zeros(grid.n_aps, bool)
        for _ in range(1000):
            phi = exact_filter_step(phi, kernel, theta, flat_y, mask=no_mask)
        assert np.abs(phi - pi_ref).max() < 1e-8

    def test_normalization_invariance(self):
        # an extra AP with a constant map adds the same log-emission term to
        # every cell; the posterior must not move
        grid, kernel, theta = make_model(seed=6)
        grid3 = GridMap(2, 2, grid.cells, np.vstack([grid.ap_positions, [[0.7, 1.3]]]))
        delta3 = np.vstack([theta.delta, np.zeros(4)])
        theta3 = Theta(grid3, np.append(theta.c1, -40.0), np.append(theta.c2, 0.0),
                       delta3, theta.sigma2)
        nu = np.full(4, 0.25)
        y = theta.F[:, 2] + 0.5
        phi1 = exact_filter_init(nu, theta, y)
        phi2 = exact_filter_init(nu, theta3, np.append(y, -35.0))
        assert np.abs(phi1 - phi2).max() < 1e-12

    def test_underflow_raises(self):
        grid, kernel, theta = make_model()
        nu = np.array([1.0, 0.0, 0.0, 0.0])
        tiny = theta.replace(sigma2=1e-300)
        with pytest.raises(FilterUnderflowError):
            exact_filter_init(nu, tiny, theta.F[:, 3] + 1e6)

    def test_argmax_invariant_under_monotone_transform(self):
        grid, kernel, theta = make_model(w=3, h=3, seed=8)
        f = ExactFilter(kernel, theta, np.full(9, 1 / 9))
        rng = np.random.default_rng(0)
        for _ in range(10):
            f.step(theta.F[:, 3] + rng.normal(0, 2, 2))
        before = f.map_position()
        transformed = np.exp(3.0 * f.phi) + 1.0  # strictly increasing
        assert int(np.argmax(transformed)) == before


class TestBootstrapFilter:
    def test_single_particle_random_walk(self):
        grid, kernel, theta = make_model()
        sys = init_particle_system(1, grid.n_cells, np.random.default_rng(0))
        for _ in range(25):
            y = theta.F[:, 0]
            sys = bootstrap_filter_recursion(sys, kernel, y, theta)
            assert sys.weights[0] == 1.0

    def test_seed_reproducibility(self):
        grid, kernel, theta = make_model()
        out = []
        for _ in range(2):
            sys = init_particle_system(50, grid.n_cells, np.random.default_rng(33))
            for t in range(20):
                sys = bootstrap_filter_recursion(sys, kernel, theta.F[:, t % 4], theta)
            out.append((sys.cells.copy(), sys.weights.copy()))
        assert np.array_equal(out[0][0], out[1][0])
        assert np.array_equal(out[0][1], out[1][1])

    def test_filter_mean_tracks_exact(self):
        grid, kernel, theta = make_model(w=3, h=3, a=3.0, sigma2=16.0, seed=5)
        rng = np.random.default_rng(17)
        n, n_particles, n_seeds = 30, 10_000, 6
        truth = rng.integers(0, 9, n)
        ys = theta.F[:, truth].T + rng.normal(0, 4.0, (n, 2))

        nu0 = np.full(9, 1.0 / 9.0)
        phi = exact_filter_init(nu0 @ kernel.q, theta, ys[0])
        exact_means = [phi @ grid.cells]
        for t in range(1, n):
            phi = exact_filter_step(phi, kernel, theta, ys[t])
            exact_means.append(phi @ grid.cells)
        exact_means = np.array(exact_means)

        means = np.zeros((n_seeds, n, 2))
        for s in range(n_seeds):
            sys = init_particle_system(n_particles, 9, np.random.default_rng(100 + s))
            for t in range(n):
                sys = bootstrap_filter_recursion(sys, kernel, ys[t], theta)
                means[s, t] = posterior_mean_position(sys, grid.cells)
        se = means.std(axis=0, ddof=1)
        err = np.abs(means - exact_means[None])
        cover = (err <= 3.0 * se + 1e-9).mean()
        assert cover >= 0.95

    def test_uniform_fallback_on_underflow(self):
        grid, kernel, theta = make_model()
        tiny = theta.replace(sigma2=1e-308)
        sys = init_particle_system(20, grid.n_cells, np.random.default_rng(0))
        out = bootstrap_filter_recursion(sys, kernel, theta.F[:, 0] + 1e8, tiny)
        assert out.flags.get("uniform_fallback")
        assert np.allclose(out.weights, 1 / 20)

    def test_systematic_resampling_option(self):
        grid, kernel, theta = make_model()
        sys = init_particle_system(40, grid.n_cells, np.random.default_rng(1))
        out = bootstrap_filter_recursion(sys, kernel, theta.F[:, 0], theta,
                                         resampling="systematic")
        assert out.n_particles == 40
        with pytest.raises(ValueError):
            bootstrap_filter_recursion(sys, kernel, theta.F[:, 0], theta, resampling="nope")

    def test_tv_distance_decreases_with_n(self):
        grid, kernel, theta = make_model(w=3, h=3, a=3.0, sigma2=16.0, seed=5)
        rng = np.random.default_rng(3)
        n = 15
        truth = rng.integers(0, 9, n)
        ys = theta.F[:, truth].T + rng.normal(0, 4.0, (n, 2))
        nu0 = np.full(9, 1.0 / 9.0)
        phi = exact_filter_init(nu0 @ kernel.q, theta, ys[0])
        for t in range(1, n):
            phi = exact_filter_step(phi, kernel, theta, ys[t])

        def tv(n_particles, seed):
            sys = init_particle_system(n_particles, 9, np.random.default_rng(seed))
            for t in range(n):
                sys = bootstrap_filter_recursion(sys, kernel, ys[t], theta)
            hist = np.bincount(sys.cells, weights=sys.weights, minlength=9)
            return 0.5 * np.abs(hist - phi).sum()

        sizes = (100, 1000, 10_000)
        avg = [np.mean([tv(m, 50 + s) for s in range(20)]) for m in sizes]
        assert avg[0] > avg[1] > avg[2]


class TestPositionEstimate:
    def test_single_particle(self):
        sys = ParticleSystem(cells=np.array([5]), weights=np.array([1.0]),
                             rng=np.random.default_rng(0))
        assert map_position_estimate(sys) == 5

    def test_max_weight_wins(self):
        sys = ParticleSystem(cells=np.array([3, 7, 1]), weights=np.array([0.2, 0.5, 0.3]),
                             rng=np.random.default_rng(0))
        assert map_position_estimate(sys) == 7

    def test_tie_breaks_to_lowest_index(self):
        sys = ParticleSystem(cells=np.array([4, 2, 9]), weights=np.full(3, 1 / 3),
                             rng=np.random.default_rng(0))
        assert map_position_estimate(sys) == 4

    def test_empty_system_rejected(self):
        sys = ParticleSystem(cells=np.array([], dtype=np.int64), weights=np.array([]),
                             rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            map_position_estimate(sys)

    def test_ess_bounds(self):
        sys = ParticleSystem(cells=np.array([1, 2]), weights=np.array([0.5, 0.5]),
                             rng=np.random.default_rng(0))
        assert sys.ess() == pytest.approx(2.0)

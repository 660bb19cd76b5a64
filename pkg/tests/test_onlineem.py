import numpy as np
import pytest

from wifislam import (
    ExactSmoother,
    GridMap,
    ParticleSystem,
    Theta,
    advance_rho,
    bootstrap_filter_recursion,
    build_transition,
    exact_filter_init,
    exact_filter_step,
    finalize_block_statistic,
    init_particle_system,
    rho_update_exact,
    rho_update_particle,
)
from wifislam.stats import StatLayout, SufficientStats

from oracles import enumerate_smoothed, rho_particle_naive


def make_model(w=2, h=2, a=2.0, b=2, sigma2=9.0, seed=0):
    aps = [[0.4 + 0.2 * j, 0.6 + 0.1 * j] for j in range(b)]
    grid = GridMap.regular(w, h, aps)
    kernel = build_transition(grid, a)
    rng = np.random.default_rng(seed)
    theta = Theta(grid, rng.normal(-25, 2, b), rng.normal(-16, 2, b),
                  rng.normal(0, 2, (b, grid.n_cells)), sigma2)
    return grid, kernel, theta


class TestExactRecursion:
    def test_constant_statistic_halves_at_t2(self):
        grid, kernel, theta = make_model()
        layout = StatLayout(grid.n_cells, grid.n_aps)
        sigma0 = 3.7
        increment = np.full((grid.n_cells, layout.dim), sigma0)
        rho1 = np.zeros((grid.n_cells, layout.dim))
        phi1 = np.array([0.4, 0.3, 0.2, 0.1])
        rho2, flagged = rho_update_exact(rho1, phi1, kernel, increment, t=2)
        assert flagged.size == 0
        assert np.abs(rho2 - sigma0 / 2).max() < 1e-14

    def test_zero_mass_cells_flagged(self):
        grid, kernel, theta = make_model()
        degenerate = build_transition(grid, 1e-12)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        phi = np.array([1.0, 0.0, 0.0, 0.0])
        inc = np.ones((grid.n_cells, layout.dim))
        rho, flagged = rho_update_exact(np.ones((4, layout.dim)), phi, degenerate, inc, t=3)
        assert set(flagged) == {1, 2, 3}
        assert np.all(rho[flagged] == 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_enumeration_all_families(self, seed):
        rng = np.random.default_rng(seed)
        grid, kernel, theta = make_model(a=float(rng.uniform(0.5, 5)), seed=seed)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        n = 6
        nu = rng.dirichlet(np.ones(grid.n_cells))
        ys = rng.normal(-40, 8, (n, grid.n_aps))
        masks = np.ones((n, grid.n_aps), dtype=bool)
        sm = ExactSmoother(kernel, theta, nu, layout)
        for t in range(n):
            sm.step(ys[t], masks[t])
        _, rho_ref, smoothed_ref = enumerate_smoothed(kernel, theta, nu, ys, masks, layout)
        assert np.abs(sm.smoothed_statistic() - smoothed_ref).max() < 1e-10
        assert np.abs(sm.rho - rho_ref).max() < 1e-10

    def test_occupancy_partitions_unity_every_step(self):
        grid, kernel, theta = make_model(w=3, h=3, b=2, seed=3)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(5)
        sm = ExactSmoother(kernel, theta, np.full(9, 1 / 9), layout)
        for t in range(12):
            sm.step(rng.normal(-45, 6, 2))
            s = sm.smoothed_statistic()
            for j in range(layout.n_aps):
                assert s[layout.s1_cols(j)].sum() == pytest.approx(1.0, abs=1e-10)

    def test_s3_equals_running_mean(self):
        grid, kernel, theta = make_model(seed=7)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(2)
        ys = rng.normal(-40, 5, (9, 2))
        sm = ExactSmoother(kernel, theta, np.full(4, 0.25), layout)
        for t in range(9):
            sm.step(ys[t])
            s = sm.smoothed_statistic()
            running = (ys[: t + 1] ** 2).mean(axis=0)
            for j in range(2):
                assert s[layout.s3_col(j)] == pytest.approx(running[j], abs=1e-10)


class TestParticleRecursion:
    def test_single_particle_reduction(self):
        grid, kernel, theta = make_model()
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(0)
        prev = ParticleSystem(cells=np.array([2]), weights=np.array([1.0]), rng=rng)
        prev.reset_rho(layout.dim)
        prev.rho_rows = rng.normal(0, 1, (1, layout.dim))
        y = np.array([-40.0, -45.0])
        t = 5
        rho = rho_update_particle(prev, np.array([1]), np.array([0]), kernel, layout, y, t)
        expected = (1 / t) * layout.increment(1, y, np.ones(2, bool)) + (1 - 1 / t) * prev.rho_rows[0]
        assert np.abs(rho[0] - expected).max() < 1e-14

    def test_shared_cell_blend_independent_of_kernel(self):
        grid, kernel, theta = make_model()
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(1)
        row = rng.normal(0, 1, layout.dim)
        prev = ParticleSystem(cells=np.array([3, 3, 3]), weights=np.array([0.2, 0.5, 0.3]),
                              rng=rng)
        prev.rho_rows = row[None, :]
        prev.rho_map = np.zeros(3, dtype=np.int64)
        y = np.array([-41.0, -44.0])
        out_a = rho_update_particle(prev, np.array([0, 2]), np.array([0, 1]),
                                    kernel, layout, y, 4)
        other = build_transition(grid, 0.7)
        out_b = rho_update_particle(prev, np.array([0, 2]), np.array([0, 1]),
                                    other, layout, y, 4)
        assert np.abs(out_a - out_b).max() < 1e-14

    @pytest.mark.parametrize("seed", range(5))
    def test_grouped_matches_naive_loop(self, seed):
        grid, kernel, theta = make_model(w=3, h=3, seed=seed)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(seed + 10)
        n = 14
        cells = rng.integers(0, 9, n)
        w = rng.dirichlet(np.ones(n))
        rows, inv = np.unique(cells, return_inverse=True)
        shared_rows = rng.normal(0, 1, (len(rows), layout.dim))
        prev = ParticleSystem(cells=cells, weights=w, rng=rng)
        prev.rho_rows = shared_rows
        prev.rho_map = inv
        new_cells = rng.integers(0, 9, n)
        anc = rng.integers(0, n, n)
        y = rng.normal(-40, 6, 2)
        mine = rho_update_particle(prev, new_cells, anc, kernel, layout, y, t=6)
        ref = rho_particle_naive(cells, w, shared_rows[inv], new_cells, kernel, layout, y, t=6)
        scale = max(1.0, np.abs(ref).max())
        assert np.abs(mine - ref).max() / scale < 1e-12

    def test_degenerate_kernel_copies_ancestor_blend(self):
        grid, _, theta = make_model()
        degenerate = build_transition(grid, 1e-12)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(4)
        prev = ParticleSystem(cells=np.array([0, 1]), weights=np.array([0.5, 0.5]), rng=rng)
        prev.rho_rows = rng.normal(0, 1, (2, layout.dim))
        prev.rho_map = np.array([0, 1])
        y = np.array([-42.0, -47.0])
        t = 3
        # cell 2 has zero predictive mass under the point-mass kernel
        rho = rho_update_particle(prev, np.array([2, 2]), np.array([0, 1]),
                                  degenerate, layout, y, t)
        for p, anc in enumerate([0, 1]):
            expected = (1 / t) * layout.increment(2, y, np.ones(2, bool)) \
                + (1 - 1 / t) * prev.rho_rows[anc]
            assert np.abs(rho[p] - expected).max() < 1e-14

    def test_particle_smoothed_stat_tracks_exact(self):
        grid, kernel, theta = make_model(w=2, h=2, seed=6)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(8)
        n, n_particles, n_seeds = 6, 10_000, 6
        ys = rng.normal(-40, 6, (n, 2))
        masks = np.ones((n, 2), dtype=bool)
        nu0 = np.full(4, 0.25)
        sm = ExactSmoother(kernel, theta, nu0 @ kernel.q, layout)
        for t in range(n):
            sm.step(ys[t], masks[t])
        exact_val = sm.smoothed_statistic()

        vals = np.zeros((n_seeds, layout.dim))
        m_counts = np.zeros(2, dtype=np.int64)
        for s in range(n_seeds):
            sys = init_particle_system(n_particles, 4, np.random.default_rng(200 + s),
                                       stat_dim=layout.dim)
            m_counts[:] = 0
            for t in range(n):
                new = bootstrap_filter_recursion(sys, kernel, ys[t], theta)
                m_counts += 1
                advance_rho(sys, new, kernel, layout, ys[t], masks[t], m_counts)
                sys = new
            stats = finalize_block_statistic(sys, layout, n)
            vals[s] = stats.to_vector(layout)
        se = vals.std(axis=0, ddof=1)
        err = np.abs(vals.mean(axis=0) - exact_val)
        # mean of seeds vs exact within 3 SE-of-mean, componentwise coverage
        ok = err <= 3.0 * se / np.sqrt(n_seeds) + 1e-12
        assert ok.mean() > 0.9


class TestFinalize:
    def test_uniform_weights_identical_rho(self):
        layout = StatLayout(4, 1)
        rng = np.random.default_rng(0)
        row = rng.normal(0, 1, layout.dim)
        sys = ParticleSystem(cells=np.array([0, 1, 2]), weights=np.full(3, 1 / 3), rng=rng)
        sys.rho_rows = row[None, :]
        sys.rho_map = np.zeros(3, dtype=np.int64)
        stats = finalize_block_statistic(sys, layout, 5.0)
        assert np.abs(stats.to_vector(layout) - row).max() < 1e-15

    def test_two_particle_mixture(self):
        layout = StatLayout(3, 1)
        rng = np.random.default_rng(0)
        rows = rng.normal(0, 1, (2, layout.dim))
        sys = ParticleSystem(cells=np.array([0, 1]), weights=np.array([0.3, 0.7]), rng=rng)
        sys.rho_rows = rows
        sys.rho_map = np.array([0, 1])
        stats = finalize_block_statistic(sys, layout, 2.0)
        assert np.abs(stats.to_vector(layout) - (0.3 * rows[0] + 0.7 * rows[1])).max() < 1e-15

    def test_finalize_resets_rho(self):
        layout = StatLayout(3, 1)
        sys = ParticleSystem(cells=np.array([0, 1]), weights=np.array([0.5, 0.5]),
                             rng=np.random.default_rng(0))
        sys.rho_rows = np.ones((2, layout.dim))
        sys.rho_map = np.array([0, 1])
        finalize_block_statistic(sys, layout, 2.0)
        assert np.all(sys.rho_rows == 0.0)
        assert sys.rho_rows.shape == (1, layout.dim)

    def test_degenerate_chain_block(self):
        # constant observations at a pinned cell: S1 one-hot, S2 = mean y there
        grid, _, theta = make_model(w=3, h=3, b=2, seed=2)
        kernel = build_transition(grid, 1e-12)
        layout = StatLayout(grid.n_cells, grid.n_aps)
        rng = np.random.default_rng(3)
        x0 = 4
        n = 30
        ys = theta.F[:, x0][None, :] + rng.normal(0, 1.0, (n, 2))
        sys = ParticleSystem(cells=np.full(16, x0), weights=np.full(16, 1 / 16),
                             rng=np.random.default_rng(1))
        sys.reset_rho(layout.dim)
        m_counts = np.zeros(2, dtype=np.int64)
        for t in range(n):
            new = bootstrap_filter_recursion(sys, kernel, ys[t], theta)
            m_counts += 1
            advance_rho(sys, new, kernel, layout, ys[t], np.ones(2, bool), m_counts)
            sys = new
        stats = finalize_block_statistic(sys, layout, n)
        for j in range(2):
            expected_s1 = np.zeros(grid.n_cells)
            expected_s1[x0] = 1.0
            assert np.abs(stats.s1[j] - expected_s1).max() < 1e-12
            assert stats.s2[j, x0] == pytest.approx(ys[:, j].mean(), abs=1e-10)
            assert stats.s3[j] == pytest.approx((ys[:, j] ** 2).mean(), abs=1e-10)


class TestSufficientStats:
    def test_vector_round_trip(self):
        layout = StatLayout(5, 3)
        rng = np.random.default_rng(0)
        vec = rng.normal(0, 1, layout.dim)
        stats = SufficientStats.from_vector(vec, layout, 7.0)
        assert np.abs(stats.to_vector(layout) - vec).max() == 0.0

    def test_shared_accessor_guards_partial(self):
        layout = StatLayout(3, 2)
        stats = SufficientStats.from_vector(np.arange(layout.dim, dtype=float), layout, 1.0)
        with pytest.raises(ValueError):
            stats.s1_shared()

    def test_full_visibility_validation(self):
        s1 = np.array([0.25, 0.75, 0.0])
        stats = SufficientStats.from_shared(s1, np.ones((2, 3)), np.ones(2), 4.0)
        stats.validate_full_visibility()
        bad = SufficientStats.from_shared(s1 * 2, np.ones((2, 3)), np.ones(2), 4.0)
        with pytest.raises(ValueError):
            bad.validate_full_visibility()

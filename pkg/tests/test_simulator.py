import numpy as np
import pytest

from conftest import make_params, mirror_params
from lobstefan import _kernels
from lobstefan.model import GridSpec, InitialConditionSpec, ScalingSpec, eval_u0
from lobstefan.simulator import (
    BlowUpError,
    BookState,
    CFLError,
    SimulationConfig,
    boundary_drift,
    diffuse_step,
    initial_state,
    reference_halfline_heat,
    sample_increments,
    simulate,
    solve_deterministic,
    step,
)

# independent oracle: mpmath quadrature at 30 digits gave 0.326420960870396779576706720341
PINNED_REFERENCE = 0.3264209608703968


class TestIncrements:
    def test_unit_moments(self):
        xi = sample_increments(np.random.default_rng(7), 100_000, GridSpec(1.0, 1.0, 2, 3))
        assert abs(xi.mean()) <= 0.02
        assert 0.97 <= xi.var(ddof=1) <= 1.03

    def test_scaled_variance(self):
        xi = sample_increments(np.random.default_rng(8), 100_000, GridSpec(0.01, 0.1, 2, 3))
        assert xi.var(ddof=1) == pytest.approx(1e-3, rel=0.03)

    def test_seeded(self):
        g = GridSpec(0.01, 0.1, 2, 3)
        a = sample_increments(np.random.default_rng(3), 50, g)
        b = sample_increments(np.random.default_rng(3), 50, g)
        np.testing.assert_array_equal(a, b)

    def test_count_positive(self):
        with pytest.raises(ValueError):
            sample_increments(np.random.default_rng(0), 0, GridSpec(1.0, 1.0, 2, 3))


class TestDiffuse:
    g = GridSpec(1.0, 1.0, 2, 6)

    def test_zero_fixed_point(self):
        np.testing.assert_array_equal(diffuse_step(np.zeros(6), 0.25, self.g), np.zeros(6))

    def test_hand_step(self):
        out = diffuse_step([0, 1, 0, 0, 0, 0], 0.25, self.g)
        np.testing.assert_allclose(out, [0.25, 0.5, 0.25, 0, 0, 0], rtol=0, atol=1e-15)

    def test_mass_does_not_grow(self, rng):
        for _ in range(50):
            v = rng.uniform(0, 1, 6)
            assert diffuse_step(v, 0.4, self.g).sum() <= v.sum() + 1e-12

    def test_cfl(self):
        with pytest.raises(CFLError):
            diffuse_step(np.ones(6), 0.6, self.g)


class TestDrift:
    g = GridSpec(1.0, 1.0, 2, 4)

    def test_mirror_book(self):
        v = np.array([1.0, 2.0, 1.0, 0.5])
        assert boundary_drift(BookState(v, v.copy(), 0.0), mirror_params(rho=3.0), self.g) == 0.0

    def test_hand_value(self):
        s = BookState(np.array([2.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]), 0.0)
        assert boundary_drift(s, mirror_params(rho=1.0), self.g) == 1.0

    def test_rho_scaling(self):
        s = BookState(np.array([2.0, 1, 0, 0]), np.array([0.5, 0, 0, 0]), 0.0)
        d1 = boundary_drift(s, mirror_params(rho=1.0), self.g)
        assert boundary_drift(s, mirror_params(rho=2.0), self.g) == d1 / 2


class TestStep:
    grid = GridSpec(0.002, 0.1, 10, 40)

    def test_symmetric_noise_free(self):
        p = mirror_params(alpha=0.5)
        cfg = SimulationConfig(self.grid)
        s = initial_state(p, self.grid, 1.25)
        for _ in range(20):
            s = step(s, p, cfg, None)
        assert s.mid == 1.25
        np.testing.assert_array_equal(s.ask_rel, s.bid_rel)

    def test_ask_only_mass_lifts_mid(self):
        p = make_params(alpha=0.5, q_ask=(2.0,), g_ask=1.0, q_bid=(0.0,), g_bid=1.0, rho=5.0)
        cfg = SimulationConfig(self.grid)
        s = initial_state(p, self.grid, 0.0)
        for _ in range(30):
            assert s.ask_rel[0] > 0
            nxt = step(s, p, cfg, None)
            assert nxt.mid > s.mid
            s = nxt

    def test_seeded_step_is_deterministic(self):
        p = make_params()
        cfg = SimulationConfig(self.grid)
        s0 = initial_state(p, self.grid, 0.0)
        a = step(s0, p, cfg, np.random.default_rng(5))
        b = step(s0, p, cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a.ask_rel, b.ask_rel)
        np.testing.assert_array_equal(a.bid_rel, b.bid_rel)
        assert a.mid == b.mid and a.time == pytest.approx(self.grid.dt)

    def test_blow_up_signal(self):
        p = make_params(rho=1e-3)
        with pytest.raises(BlowUpError):
            step(initial_state(p, self.grid, 0.0), p, SimulationConfig(self.grid, blowup_threshold=1.0), None)


class TestSimulate:
    def test_single_row(self):
        g = GridSpec(0.005, 0.1, 1, 20)
        p = make_params()
        r = simulate(p, SimulationConfig(g, seed=1), initial_mid=0.3)
        assert r.dataset.ask.shape == (1, 20)
        np.testing.assert_array_equal(r.boundary_path, [0.3])
        np.testing.assert_allclose(r.dataset.ask[0], eval_u0(p.u0_ask, g.nodes) * g.dx, rtol=1e-15)
        assert not r.truncated and r.truncation_step is None

    def test_deterministic_given_seed(self, small_grid):
        p = make_params()
        a = simulate(p, SimulationConfig(small_grid, seed=11))
        b = simulate(p, SimulationConfig(small_grid, seed=11))
        c = simulate(p, SimulationConfig(small_grid, seed=12))
        np.testing.assert_array_equal(a.dataset.ask, b.dataset.ask)
        np.testing.assert_array_equal(a.dataset.bid, b.dataset.bid)
        np.testing.assert_array_equal(a.boundary_path, b.boundary_path)
        assert not np.array_equal(a.dataset.ask, c.dataset.ask)

    def test_backends_give_same_result(self, small_grid):
        if _kernels.run_book_nb is None:
            pytest.skip("numba not importable")
        p = make_params()
        a = simulate(p, SimulationConfig(small_grid, seed=2), backend="numpy")
        b = simulate(p, SimulationConfig(small_grid, seed=2), backend="numba")
        np.testing.assert_allclose(a.dataset.ask, b.dataset.ask, rtol=0, atol=1e-13)
        np.testing.assert_allclose(a.boundary_path, b.boundary_path, rtol=0, atol=1e-13)

    def test_volumes_non_negative(self, small_grid):
        r = simulate(make_params(p=(0.0, 0.1)), SimulationConfig(small_grid, seed=4))
        assert (r.dataset.ask >= 0).all() and (r.dataset.bid >= 0).all()

    def test_zero_noise_equals_deterministic(self, small_grid):
        p = make_params()
        a = simulate(p, SimulationConfig(small_grid, seed=9), amplitude=0.0)
        b = solve_deterministic(p, small_grid)
        np.testing.assert_array_equal(a.dataset.ask, b.dataset.ask)
        np.testing.assert_array_equal(a.boundary_path, b.boundary_path)

    def test_mirror_keeps_boundary(self):
        g = GridSpec(0.004, 0.1, 400, 40)
        r = simulate(mirror_params(alpha=1.0), SimulationConfig(g, seed=0), initial_mid=2.0, amplitude=0.0)
        assert np.max(np.abs(r.boundary_path - 2.0)) <= 1e-9

    def test_cfl_checked(self):
        g = GridSpec(0.1, 0.1, 3, 10)
        with pytest.raises(CFLError):
            simulate(make_params(alpha=1.0), SimulationConfig(g))

    def test_noise_variance(self):
        # vanishing diffusion and a stiff boundary leave only the increments
        g = GridSpec(0.01, 0.1, 1001, 100)
        p = make_params(alpha=1e-300, q_ask=(1000.0,), g_ask=0.1, q_bid=(1000.0,), g_bid=0.1, rho=1e300)
        c = 0.7
        r = simulate(p, SimulationConfig(g, seed=21), amplitude=c)
        inc = np.diff(r.dataset.ask, axis=0).ravel()
        assert inc.size == 100_000
        assert inc.var(ddof=1) == pytest.approx(c * c * g.dt * g.dx, rel=0.03)

    def test_truncation_at_first_offending_step(self):
        g = GridSpec(0.002, 0.1, 200, 40)
        p = make_params(rho=0.5)
        free = solve_deterministic(p, g)
        speed = np.abs(free.drift)
        thr = float(np.quantile(speed, 0.3))
        first = int(np.argmax(speed >= thr))
        r = solve_deterministic(p, g, blowup_threshold=thr)
        assert r.truncated and r.truncation_step == first
        assert r.dataset.n_time == first + 1
        np.testing.assert_array_equal(r.dataset.ask, free.dataset.ask[: first + 1])

    def test_stochastic_truncation_flag(self):
        g = GridSpec(0.002, 0.1, 100, 40)
        r = simulate(make_params(rho=0.01), SimulationConfig(g, seed=3, blowup_threshold=5.0))
        assert r.truncated and r.truncation_step is not None
        assert len(r.boundary_path) == r.truncation_step + 1


class TestDeterministic:
    def test_no_rng_consumed(self, small_grid, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("rng used")

        monkeypatch.setattr(np.random, "default_rng", boom)
        solve_deterministic(make_params(), small_grid)

    def test_ask_mass_non_increasing(self):
        g = GridSpec(0.004, 0.1, 300, 60)
        r = solve_deterministic(make_params(alpha=1.0), g)
        mass = r.dataset.ask.sum(axis=1)
        assert np.all(np.diff(mass) <= 1e-12)

    def test_matches_halfline_reference(self):
        dx = 0.1
        alpha = 1.0
        dt = 0.4 * dx * dx / alpha
        steps = int(round(0.1 / dt))
        g = GridSpec(dt, dx, steps + 1, 200)
        u0 = InitialConditionSpec([1.0], 1.0)
        r = solve_deterministic(mirror_params(alpha=alpha), g)
        x = g.nodes
        keep = x < 15
        ref = np.array([reference_halfline_heat(u0, alpha, steps * dt, xi) for xi in x[keep]])
        num = r.dataset.ask[-1][keep] / dx
        assert np.linalg.norm(num - ref) / np.linalg.norm(ref) <= 1e-2


class TestReference:
    u0 = InitialConditionSpec([1.0], 1.0)

    def test_zero_at_boundary(self):
        assert reference_halfline_heat(self.u0, 1.0, 0.3, 0.0) == 0.0

    def test_short_time_limit(self):
        assert reference_halfline_heat(self.u0, 1.0, 1e-4, 1.0) == pytest.approx(eval_u0(self.u0, 1.0), abs=1e-3)

    def test_pinned_value(self):
        assert reference_halfline_heat(self.u0, 1.0, 0.1, 1.0) == pytest.approx(PINNED_REFERENCE, abs=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            reference_halfline_heat(self.u0, 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            reference_halfline_heat(self.u0, 1.0, 0.1, -1.0)

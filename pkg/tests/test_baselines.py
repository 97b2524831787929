import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughopt.baselines import (
    LR_GRID,
    STEP_SCALE_GRID,
    Adam,
    AdamState,
    BasinHopping,
    Fire,
    FireParams,
    FireState,
    GradientDescent,
    ScalarFamily,
    TunedCache,
    adam_step,
    basin_hopping,
    drive,
    family_grid,
    fire_update,
    gd_step,
    group_final_energies,
    run,
    sample_steps,
    stack_optimizers,
    step_budget,
    tune_grid,
    tune_scalar_meta,
    tune_two_stage,
)
from roughopt.systems import Configuration, RngStream
from roughopt.tasks import builtin_task, harmonic_init, harmonic_init_batch, init_streams

CURVATURE = np.array([1.0, 2.0, 5.0])


def quadratic(x):
    return 0.5 * np.sum(CURVATURE * x * x, axis=(1, 2)), -CURVATURE * x


def quad_start(seed=0):
    return np.random.default_rng(seed).normal(size=(2, 4, 3))


@pytest.fixture(scope="module")
def lj13():
    return builtin_task("lj13")


class TestGradientDescent:
    def test_step(self):
        c = Configuration([[0, 0, 0], [1, 1, 1]])
        out = gd_step(c, np.ones((2, 3)), 0.1)
        np.testing.assert_allclose(out.positions, [[0.1] * 3, [1.1] * 3])

    def test_rejects_negative_lr(self):
        with pytest.raises(ValueError):
            gd_step(Configuration([[0, 0, 0]]), np.ones((1, 3)), -0.1)

    def test_recurrence_on_quadratic(self):
        # x_t = (1 - lr h)^t x_0 per coordinate
        lr, t = 0.05, 40
        x0 = quad_start()
        res = drive(GradientDescent(lr), None, x0, t, energy_forces=quadratic)
        np.testing.assert_allclose(res.final_positions, (1 - lr * CURVATURE) ** t * x0, rtol=1e-12)


class TestAdam:
    def test_first_step_is_lr(self):
        """Bias correction makes the first update exactly lr * sign(g) when eps is negligible."""
        g = np.array([[3.0, -0.2, 1e-3]])
        c = Configuration([[0.0, 0.0, 0.0]])
        out, state = adam_step(c, g, AdamState.zeros_like(g, lr=0.01, eps=1e-12))
        np.testing.assert_allclose(out.positions, -0.01 * np.sign(g), rtol=1e-6)
        assert state.t == 1

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(1)
        grads = rng.normal(size=(5, 2, 3))
        x = np.zeros((2, 3))
        m = v = np.zeros_like(x)
        state = AdamState.zeros_like(x, lr=0.02, b1=0.8, b2=0.95, eps=1e-6)
        c = Configuration(x)
        for t, g in enumerate(grads, start=1):
            m = 0.8 * m + 0.2 * g
            v = 0.95 * v + 0.05 * g * g
            x = x - 0.02 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-6)
            c, state = adam_step(c, g, state)
        np.testing.assert_allclose(c.positions, x, rtol=1e-12)


class TestFire:
    def test_uphill_resets(self):
        x = np.zeros((1, 2, 3))
        f = np.ones((1, 2, 3))
        prm = FireParams(dt0=0.1)
        state = FireState(-np.ones_like(x), np.array([0.1]), np.array([0.05]), np.array([7]), prm)
        _, out = fire_update(x, f, state)
        assert out.dt[0] == pytest.approx(0.05)
        assert out.alpha[0] == pytest.approx(prm.alpha_start)
        assert out.n_pos[0] == 0
        # velocity zeroed, then one Euler kick
        np.testing.assert_allclose(out.velocity, 0.05 * f)

    def test_zero_power_counts_as_uphill(self):
        x = np.zeros((1, 1, 3))
        state = FireState.start(x, FireParams(dt0=0.1))
        _, out = fire_update(x, np.ones((1, 1, 3)), state)
        assert out.dt[0] == pytest.approx(0.05)

    def test_grows_after_n_min(self):
        prm = FireParams(dt0=0.1, n_min=5)
        x = np.zeros((1, 1, 3))
        f = np.ones((1, 1, 3))
        v = np.ones((1, 1, 3))
        s = FireState(v, np.array([0.1]), np.array([0.1]), np.array([4]), prm)
        _, s1 = fire_update(x, f, s)
        assert s1.n_pos[0] == 5 and s1.dt[0] == pytest.approx(0.1)
        _, s2 = fire_update(x, f, s1)
        assert s2.dt[0] == pytest.approx(0.11)
        assert s2.alpha[0] == pytest.approx(0.099)

    def test_dt_capped(self):
        prm = FireParams(dt0=0.1, n_min=0, dt_max=0.105)
        s = FireState(np.ones((1, 1, 3)), np.array([0.1]), np.array([0.1]), np.array([3]), prm)
        _, s1 = fire_update(np.zeros((1, 1, 3)), np.ones((1, 1, 3)), s)
        assert s1.dt[0] == pytest.approx(0.105)

    def test_default_dt_max(self):
        assert FireParams(dt0=0.02).dt_limit == pytest.approx(0.2)


class TestConvergence:
    @pytest.mark.parametrize("opt", [GradientDescent(0.1), Adam(0.001), Fire(0.01)])
    def test_quadratic(self, opt):
        res = drive(opt, None, quad_start(), 10_000, energy_forces=quadratic)
        grad = CURVATURE * res.final_positions
        assert np.linalg.norm(grad, axis=(1, 2)).max() < 1e-8

    def test_energy_decreases_on_lj(self, lj13):
        x0 = harmonic_init_batch(lj13, init_streams(RngStream(0), 4))
        res = Adam(0.01).run(lj13, x0, 2000, stride=500)
        assert np.all(res.energies[-1] < res.energies[0])
        np.testing.assert_array_equal(res.steps, [0, 500, 1000, 1500, 2000])


class TestDrive:
    def test_sample_steps(self):
        np.testing.assert_array_equal(sample_steps(10, 4), [0, 4, 8, 10])
        np.testing.assert_array_equal(sample_steps(10, None), [0, 10])

    def test_divergence_freezes_row(self):
        def blowup(x):
            e = np.sum(x * x, axis=(1, 2))
            e[np.abs(x).max(axis=(1, 2)) > 5] = np.inf
            return e, -2 * x

        # negative lr walks uphill: x grows by 1.2 per step
        x0 = np.array([[[0.1, 0, 0]], [[4.9, 0, 0]]])
        res = drive(GradientDescent(-0.1), None, x0, 10, energy_forces=blowup)
        assert res.diverged.tolist() == [False, True]
        assert np.isfinite(res.final_energy).all()
        assert res.n_steps[1] == 0 and res.n_steps[0] == 10

    def test_counts_force_evaluations(self):
        res = drive(GradientDescent(0.1), None, quad_start(), 25, energy_forces=quadratic)
        assert res.n_force_evals == 25

    def test_single_equals_batch(self, lj13):
        streams = init_streams(RngStream(2), 3)
        x0 = harmonic_init_batch(lj13, streams)
        batch = Adam(0.01).run(lj13, x0, 300)
        one = run(lj13, Adam(0.01), lj13.configuration(x0[1]), 300)
        np.testing.assert_array_equal(one.final.positions, batch.final_positions[1])


class TestBasinHopping:
    def test_incumbent_monotone(self, lj13):
        init = harmonic_init(lj13, RngStream(3))
        tr = basin_hopping(lj13, init, 6, 400, 0.4, RngStream(3, 1))
        assert np.all(np.diff(tr.energies) <= 0)
        assert tr.final_energy == tr.energies[-1]

    def test_budget(self, lj13):
        bh = BasinHopping(0.4, 3, 200)
        assert bh.budget == 600 and step_budget(bh, 999) == 600
        x0 = harmonic_init_batch(lj13, [RngStream(0)])
        res = bh.run(lj13, x0, rngs=[RngStream(1)])
        assert res.n_force_evals == 600
        with pytest.raises(ValueError):
            bh.run(lj13, x0, 100, rngs=[RngStream(1)])

    def test_needs_rng(self, lj13):
        with pytest.raises(ValueError):
            BasinHopping(0.4, 2, 10).run(lj13, harmonic_init_batch(lj13, [RngStream(0)]))

    def test_deterministic(self, lj13):
        init = harmonic_init(lj13, RngStream(4))
        a = basin_hopping(lj13, init, 3, 300, 0.6, RngStream(9))
        b = basin_hopping(lj13, init, 3, 300, 0.6, RngStream(9))
        np.testing.assert_array_equal(a.final.positions, b.final.positions)

    def test_no_worse_than_first_descent(self, lj13):
        x0 = harmonic_init_batch(lj13, init_streams(RngStream(5), 4))
        plain = Adam(0.01).run(lj13, x0, 300)
        bh = BasinHopping(0.4, 4, 300).run(lj13, x0, rngs=init_streams(RngStream(6), 4))
        assert np.all(bh.final_energy <= plain.final_energy)


class TestStacking:
    def test_rows_match_separate_runs(self, lj13):
        streams = init_streams(RngStream(7), 3)
        x0 = harmonic_init_batch(lj13, streams)
        opts = [Adam(0.01), Adam(0.005, b1=0.95), Adam(0.001, eps=1e-6)]
        grouped = group_final_energies(lj13, opts, x0, 200, streams)
        for k, o in enumerate(opts):
            np.testing.assert_array_equal(grouped[k], o.run(lj13, x0, 200).final_energy)

    def test_fire_rows(self, lj13):
        x0 = harmonic_init_batch(lj13, init_streams(RngStream(8), 2))
        opts = [Fire(0.01), Fire(0.005, f_dec=0.4)]
        grouped = group_final_energies(lj13, opts, x0, 200, [RngStream(0)] * 2)
        for k, o in enumerate(opts):
            np.testing.assert_array_equal(grouped[k], o.run(lj13, x0, 200).final_energy)

    def test_bh_rows(self, lj13):
        streams = init_streams(RngStream(9), 2)
        x0 = harmonic_init_batch(lj13, streams)
        kicks = [r.spawn(1) for r in streams]
        opts = [BasinHopping(s, 3, 100) for s in (0.2, 0.8)]
        grouped = group_final_energies(lj13, opts, x0, 300, kicks)
        for k, o in enumerate(opts):
            np.testing.assert_array_equal(grouped[k], o.run(lj13, x0, rngs=kicks).final_energy)

    def test_rejects_mixed(self):
        with pytest.raises(TypeError):
            stack_optimizers([Adam(), Fire()], 2)
        with pytest.raises(ValueError):
            stack_optimizers([BasinHopping(0.2, 2, 10), BasinHopping(0.2, 3, 10)], 2)


class TestTuning:
    def test_grids(self):
        assert [o.lr for o in family_grid("adam", 100)] == list(LR_GRID)
        assert [o.lr for o in family_grid("fire", 100)] == list(LR_GRID)
        bh = family_grid("bh", 50000)
        assert [o.step_scale for o in bh] == list(STEP_SCALE_GRID)
        assert {(o.n_basins, o.steps_per_basin) for o in bh} == {(10, 5000)}
        with pytest.raises(ValueError):
            family_grid("lbfgs", 10)

    def test_grid_of_one(self, lj13):
        best, scores = tune_grid(lj13, "adam", RngStream(0), n_inits=2, steps=50, grid=[Adam(0.003)])
        assert best == Adam(0.003) and len(scores) == 1

    def test_grid_winner_in_grid(self, lj13):
        best, scores = tune_grid(lj13, "adam", RngStream(0), n_inits=4, steps=300)
        assert best.lr in LR_GRID
        assert scores[repr(best)] == min(scores.values())

    def test_tie_goes_to_smaller(self, lj13):
        grid = [Adam(0.01), Adam(0.005)]
        best, _ = tune_grid(lj13, "adam", RngStream(0), n_inits=2, steps=0, grid=grid)
        assert best.lr == 0.005

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1e-4, 0.5), st.floats(0.01, 0.99), st.floats(0.5, 0.9999), st.floats(1e-10, 1e-4))
    def test_adam_encoding_round_trip(self, lr, b1, b2, eps):
        fam = ScalarFamily(Adam(lr, b1, b2, eps))
        back = fam.decode(fam.encode())
        np.testing.assert_allclose([back.lr, back.b1, back.b2, back.eps], [lr, b1, b2, eps], rtol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=5, max_size=5))
    def test_decoded_in_range(self, u):
        a = ScalarFamily(Adam()).decode(u[:4])
        assert a.lr > 0 and 0 < a.b1 <= 1 and 0 < a.b2 <= 1 and a.eps > 0
        f = ScalarFamily(Fire()).decode(u)
        assert f.lr > 0 and f.f_inc >= 1 and 0 <= f.f_dec <= 1
        assert ScalarFamily(BasinHopping()).decode(u[:1]).step_scale >= 0

    def test_meta_zero_steps_returns_start(self, lj13):
        start = Adam(0.005)
        tuned, history = tune_scalar_meta(lj13, start, RngStream(0), outer_steps=0, n_eval=2, steps=20)
        assert tuned.lr == pytest.approx(0.005) and tuned.b1 == pytest.approx(0.9)
        assert len(history) == 1

    def test_meta_best_seen(self, lj13):
        start = Adam(0.001)
        _, history = tune_scalar_meta(lj13, start, RngStream(1), outer_steps=3, n_pairs=2, n_inits=2,
                                      n_eval=3, steps=200)
        assert len(history) == 4
        assert min(history) <= history[0]

    def test_two_stage_record(self, lj13):
        winner, record = tune_two_stage(lj13, "adam", RngStream(2), n_inits=2, steps=100, outer_steps=1,
                                        n_pairs=1, n_eval=2)
        assert len(record["meta_runs"]) == len(LR_GRID)
        scores = [r["score"] for r in record["meta_runs"]]
        assert record["meta_runs"][int(np.argmin(scores))]["tuned"]["lr"] == pytest.approx(winner.lr)

    def test_two_stage_grid_only(self, lj13):
        winner, record = tune_two_stage(lj13, "fire", RngStream(2), n_inits=2, steps=100, meta=False)
        assert "meta_runs" not in record and winner.lr in LR_GRID

    def test_cache_round_trip(self, tmp_path):
        c = TunedCache(tmp_path / "t.json")
        c.put("lj13", "adam", Adam(0.005, b1=0.93), seed=0)
        c.put("lj13", "bh", BasinHopping(0.6, 10, 5000))
        again = TunedCache(tmp_path / "t.json")
        assert again.get("lj13", "adam") == Adam(0.005, b1=0.93)
        assert again.get("lj13", "bh") == BasinHopping(0.6, 10, 5000)
        assert again.get("au55", "adam") is None

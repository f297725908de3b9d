import copy
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from wacgrid.coherency import group_machines
from wacgrid.plant import (PlantConfig, Pulse, build_plant, build_two_area, closed_loop_eigen, discretize_zoh,
                           laplacian, mode_table, plant_energy, preset, settling_time, simulate, zoh)


def _ringdown_partition(model, channel=3):
    sim = simulate(model, 0.01, 15.0, disturbances=[Pulse(0.5, channel)])
    return group_machines(sim.window.select(range(1, model.m + 1)).__class__(
        sim.window.ts, sim.window.samples[450:1450], 4.5), 2).partition()


class TestConstruction:
    def test_single_inter_area_mode(self, two_area):
        _, model = two_area
        modes = model.inter_area_modes()
        assert len(modes) == 1
        assert 0.55 <= modes[0]["hz"] <= 0.65
        assert modes[0]["zeta"] < 0.05

    def test_local_modes_above_inter_area(self, two_area):
        _, model = two_area
        osc = [md for md in model.eigen if md["hz"] > 0.05]
        assert sum(1.0 <= md["hz"] <= 1.3 for md in osc) == 2

    def test_stiffer_areas(self, two_area):
        # intra-area stiffness x100 raises the inter-area frequency and keeps the grouping
        _, base = two_area
        _, stiff = build_two_area(k_intra=65.0)
        f0 = base.inter_area_modes()[0]["hz"]
        f1 = min(md["hz"] for md in stiff.eigen if md["hz"] > 0.05)
        assert f1 > f0
        assert _ringdown_partition(stiff) == {frozenset({1, 2}), frozenset({3, 4})}

    def test_zero_coupling_decouples(self):
        cfg = PlantConfig([5.0, 5.0, 5.0], 1.0, np.zeros((3, 3)), np.eye(3), np.eye(3))
        sim = simulate(build_plant(cfg), 0.01, 5.0, disturbances=[Pulse(0.1, 1)])
        assert np.any(sim.window.samples[:, 0] != 0)
        np.testing.assert_array_equal(sim.window.samples[:, 1:], 0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PlantConfig([1.0, -1.0], 1.0, np.zeros((2, 2)), np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            PlantConfig([1.0, 1.0], 1.0, [[1.0, 0.0], [0.0, 1.0]], np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            preset("ieee118")

    def test_config_roundtrip(self, two_area):
        cfg, model = two_area
        back = build_plant(PlantConfig.from_dict(cfg.to_dict()))
        np.testing.assert_array_equal(back.a_cont, model.a_cont)

    def test_laplacian(self):
        ks = laplacian(3, [(1, 2, 2.0), (2, 3, 1.0)])
        np.testing.assert_array_equal(ks, [[2, -2, 0], [-2, 3, -1], [0, -1, 1]])

    def test_mode_table(self):
        rows = mode_table([-0.1 + 2j, -0.1 - 2j, -3.0])
        assert len(rows) == 2
        assert rows[1]["hz"] == pytest.approx(2 / (2 * np.pi))
        assert rows[1]["zeta"] == pytest.approx(0.1 / abs(-0.1 + 2j))


class TestDiscretization:
    def test_scalar(self):
        ad, bd = zoh([[-1.0]], [[1.0]], 0.1)
        assert ad[0, 0] == pytest.approx(np.exp(-0.1), rel=1e-14)
        assert bd[0, 0] == pytest.approx(1 - np.exp(-0.1), rel=1e-12)

    def test_small_step_taylor(self, two_area):
        _, model = two_area
        ts = 1e-6
        dp = discretize_zoh(model, ts)
        a = model.a_cont
        taylor = np.eye(a.shape[0]) + a * ts + a @ a * ts**2 / 2 + a @ a @ a * ts**3 / 6
        np.testing.assert_allclose(dp.a, taylor, atol=1e-15)
        np.testing.assert_allclose(dp.b, model.b_cont * ts + a @ model.b_cont * ts**2 / 2 + a @ a @ model.b_cont * ts**3 / 6,
                                   rtol=1e-9, atol=1e-20)

    def test_eigenvalues_map(self, two_area):
        _, model = two_area
        dp = discretize_zoh(model, 0.01)
        expected = np.sort_complex(np.exp(np.linalg.eigvals(model.a_cont) * 0.01))
        np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(dp.a)), expected, atol=1e-10)

    def test_oversampled_composition(self, two_area):
        _, model = two_area
        coarse = discretize_zoh(model, 0.1)
        fine = discretize_zoh(model, 0.001)
        np.testing.assert_allclose(np.linalg.matrix_power(fine.a, 100), coarse.a, atol=1e-6)
        np.testing.assert_allclose(coarse.a, expm(model.a_cont * 0.1), atol=1e-12)

    def test_invalid_ts(self, two_area):
        with pytest.raises(ValueError):
            discretize_zoh(two_area[1], 0.0)


class TestSimulation:
    def test_zero_input_zero_output(self, two_area):
        sim = simulate(two_area[1], 0.01, 3.0)
        np.testing.assert_array_equal(sim.window.samples, 0.0)

    def test_fft_peak_at_inter_area_mode(self, two_area):
        _, model = two_area
        sim = simulate(model, 0.01, 100.0, disturbances=[Pulse(0.5, 1)])
        y = sim.relative_speed(1, 3)
        spec = np.abs(np.fft.rfft(y))
        freqs = np.fft.rfftfreq(y.size, 0.01)
        f_ia = model.inter_area_modes()[0]["hz"]
        assert abs(freqs[np.argmax(spec[1:]) + 1] - f_ia) <= freqs[1]

    def test_same_seed_bit_identical(self, two_area):
        kw = dict(disturbances=[Pulse(0.2, 2)], noise_std=1e-4, noise_seed=7)
        a = simulate(two_area[1], 0.01, 5.0, **kw)
        b = simulate(two_area[1], 0.01, 5.0, **kw)
        assert a.window.samples.tobytes() == b.window.samples.tobytes()

    def test_chunked_equals_single_run(self, two_area):
        _, model = two_area
        pulse = [Pulse(1.0, 2)]
        full = simulate(model, 0.01, 6.0, disturbances=pulse)
        first = simulate(model, 0.01, 3.0, disturbances=pulse)
        second = simulate(model, 0.01, 3.0, disturbances=pulse, x0=first.x_final, t0=3.0)
        np.testing.assert_allclose(np.vstack([first.window.samples, second.window.samples]), full.window.samples,
                                   atol=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(shift=st.floats(-3.0, 3.0), seed=st.integers(0, 1000))
    def test_angle_reference_invariance(self, two_area, shift, seed):
        _, model = two_area
        x0 = np.random.default_rng(seed).normal(scale=0.01, size=model.n_states)
        moved = x0.copy()
        moved[:model.m] += shift
        a = simulate(model, 0.01, 2.0, x0=x0).window.samples
        b = simulate(model, 0.01, 2.0, x0=moved).window.samples
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_energy_nonincreasing(self, two_area, seed):
        _, model = two_area
        x0 = np.zeros(model.n_states)
        x0[:2 * model.m] = np.random.default_rng(seed).normal(scale=0.01, size=2 * model.m)
        sim = simulate(model, 0.01, 10.0, x0=x0, keep_states=True)
        e = plant_energy(model, sim.states)
        assert np.all(np.diff(e) <= 1e-12 * e[0])
        assert e[-1] < e[0]

    def test_settling_time(self):
        t = np.arange(0, 10, 0.01)
        y = np.exp(-t)
        assert settling_time(t, y) == pytest.approx(-np.log(0.05), abs=0.011)
        assert settling_time(t, np.zeros_like(t)) == 0.0

    def test_bad_control_period(self, commissioned, two_area):
        c = copy.deepcopy(commissioned["controllers"][0])
        with pytest.raises(ValueError):
            simulate(two_area[1], 0.01, 1.0, controllers=[c], control_ts=0.015)


class TestClosedLoop:
    def _with_gain(self, controllers, factor):
        out = copy.deepcopy(controllers)
        for c in out:
            c.lqr.gain = factor * c.lqr.gain
        return out

    def test_zero_gain_leaves_plant_modes(self, commissioned, two_area):
        _, model = two_area
        rep = closed_loop_eigen(model, self._with_gain(commissioned["controllers"], 0.0))
        ia = rep["inter_area"]
        assert ia["closed_tracked"]["zeta"] == pytest.approx(ia["open"]["zeta"], abs=1e-9)
        assert ia["closed_tracked"]["hz"] == pytest.approx(ia["open"]["hz"], abs=1e-9)

    def test_designed_controllers_add_damping(self, commissioned, two_area):
        _, model = two_area
        rep = closed_loop_eigen(model, commissioned["controllers"])
        ia = rep["inter_area"]
        assert ia["closed_tracked"]["zeta"] > ia["open"]["zeta"]
        # z = 1 is the angle-reference mode, undamped in any loop
        assert rep["spectral_radius"]["closed"] <= 1 + 1e-9

    def test_flipped_sign_removes_damping(self, commissioned, two_area):
        _, model = two_area
        rep = closed_loop_eigen(model, self._with_gain(commissioned["controllers"], -1.0))
        ia = rep["inter_area"]
        assert ia["closed_tracked"]["zeta"] < ia["open"]["zeta"]

    def test_unknown_machine_rejected(self, commissioned, two_area):
        c = copy.deepcopy(commissioned["controllers"][0])
        c.loop = replace(c.loop, input=9)
        with pytest.raises(ValueError):
            closed_loop_eigen(two_area[1], [c])

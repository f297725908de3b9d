import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wacgrid.modal import (ControlLoopSelection, ModalDecomposition, ModeDescriptor, ResidueMatrix, decompose,
                           dominant_mode, eval_expansion, partial_fractions, rational_partial_fractions,
                           reduce_order, reduced_model, residue_matrix_at_mode, select_loops, to_continuous,
                           z_partial_fractions)
from wacgrid.sysid import ArxCommonDen, identify


def _model(poles, nums, ts=0.1):
    den = np.real(np.poly(poles))[1:]
    return ArxCommonDen(len(poles), den, nums, ts, list(nums))


def _decomp_with_modes(modes, ts=0.1):
    """Single-pair decomposition with unit residues at the given (hz, zeta) pairs."""
    poles = []
    for hz, zeta in modes:
        wn = 2 * np.pi * hz / np.sqrt(1 - zeta**2)
        s = complex(-zeta * wn, 2 * np.pi * hz)
        poles += [np.exp(s * ts), np.exp(np.conj(s) * ts)]
    res = np.ones((1, 1, len(poles)), dtype=complex)
    return ModalDecomposition(np.array(poles), res, {(1, 1): np.zeros(1)}, ts, [1], [1])


def _random_pair_model(rng, order, pairs=((1, 1), (1, 2), (2, 1), (2, 2))):
    while True:
        poles = []
        while len(poles) < order:
            if order - len(poles) >= 2 and rng.random() < 0.6:
                z = rng.uniform(0.2, 0.95) * np.exp(1j * rng.uniform(0.1, 3.0))
                poles += [z, np.conj(z)]
            else:
                poles.append(rng.uniform(-0.9, 0.9))
        p = np.array(poles)
        if (np.abs(p[:, None] - p[None, :]) + np.eye(order)).min() >= 0.05:
            break
    return _model(p, {q: rng.normal(size=order + 1) for q in pairs})


class TestPartialFractions:
    def test_single_pole(self):
        pf = z_partial_fractions([1.0], [1.0, -0.5])
        np.testing.assert_allclose(pf.poles, [0.5])
        assert eval_expansion(pf, np.array([2.0]))[0] == pytest.approx(4 / 3, rel=1e-14)

    def test_s_domain_cover_up(self):
        pf = rational_partial_fractions([2.0, 5.0], [1.0, 3.0, 2.0])
        got = dict(zip(np.round(pf.poles.real).astype(int), pf.residues))
        assert got[-1] == pytest.approx(3.0, abs=1e-12)
        assert got[-2] == pytest.approx(-1.0, abs=1e-12)

    def test_improper_s_function(self):
        # (s^2 + 1) / (s + 2) = s - 2 + 5 / (s + 2)
        pf = rational_partial_fractions([1.0, 0.0, 1.0], [1.0, 2.0])
        np.testing.assert_allclose(pf.direct, [1.0, -2.0], atol=1e-14)
        assert pf.residues[0] == pytest.approx(5.0)

    def test_order6_reconstruction(self):
        rng = np.random.default_rng(0)
        m = _random_pair_model(rng, 6, ((1, 1),))
        pf = partial_fractions(m, (1, 1))
        z = rng.uniform(1.05, 4.0, 100) * np.exp(1j * rng.uniform(-np.pi, np.pi, 100))
        direct = m.freqresp((1, 1), z)
        assert np.max(np.abs(eval_expansion(pf, z) - direct) / np.abs(direct)) <= 1e-8

    def test_near_repeated_poles_merged(self, caplog):
        a = np.real(np.poly([0.5, 0.5 + 1e-9]))
        pf = z_partial_fractions([1.0, 0.2], a)
        assert list(pf.multiplicity) == [2]
        # G = (z^2 + 0.2 z) / (z - 0.5)^2: summed residue d/dz(z^2 + 0.2 z) at 0.5
        assert pf.residues[0] == pytest.approx(1.2, rel=1e-7)
        assert "near-repeated" in caplog.text


class TestMapping:
    def test_real_pole(self):
        s, _ = to_continuous([np.exp(-0.1)], [1.0], 0.1)
        assert s[0] == pytest.approx(-1.0, abs=1e-14)

    def test_oscillatory_fixture(self):
        s, _ = to_continuous([0.95 * np.exp(1j * 0.3807)], [1.0], 0.1)
        assert s[0].real == pytest.approx(-0.5129, abs=1e-4)
        assert s[0].imag == pytest.approx(3.807, abs=1e-12)

    def test_frequency_fixture(self):
        d = _decomp_with_modes([(0.6038, 0.05)])
        m = dominant_mode(d)
        assert m.frequency == pytest.approx(0.6038, rel=1e-12)
        assert m.damping_ratio == pytest.approx(0.05, rel=1e-10)

    def test_conjugate_pair(self):
        z = 0.9 * np.exp(1j * 0.4)
        s, r = to_continuous([z, np.conj(z)], [1 + 2j, 1 - 2j], 0.1)
        assert s[1] == pytest.approx(np.conj(s[0]))
        assert abs(r[0]) == abs(r[1])

    def test_zero_pole_rejected(self):
        with pytest.raises(ValueError):
            to_continuous([0.0], [1.0], 0.1)


class TestReduction:
    def test_equal_residues_keep_all(self):
        d = _decomp_with_modes([(0.3, 0.1), (0.6, 0.05), (1.2, 0.1)])
        assert len(reduce_order(d, 0.999).z_poles) == 6

    def test_tiny_residue_dropped(self):
        d = _decomp_with_modes([(0.3, 0.1), (0.6, 0.05)])
        d.residues[0, 0, :2] = 1e-9
        red = reduce_order(d, 1e-3)
        assert len(red.z_poles) == 2
        assert dominant_mode(red).frequency == pytest.approx(0.6)

    def test_overparameterized_model_reduces_to_true_order(self, order4_system):
        den, nums, outs, probes = order4_system
        model = identify(outs, probes, order_k=10)
        red = reduce_order(decompose(model), 1e-3)
        assert len(red.z_poles) == 4
        true = _model(np.roots(np.concatenate([[1.0], den])), nums)
        z = np.exp(2j * np.pi * np.linspace(0.01, 0.49, 60))
        for pair in nums:
            g = true.freqresp(pair, z)
            err = np.sum(np.abs(red.freqresp(pair, z) - g) ** 2) / np.sum(np.abs(g) ** 2)
            assert err < 0.01

    def test_reduction_safety_on_plant_model(self, commissioned):
        arx, red = commissioned["arx"], commissioned["red"]
        full = decompose(arx)
        dropped = np.setdiff1d(np.arange(len(full.z_poles)),
                               [int(np.argmin(np.abs(full.z_poles - p))) for p in red.z_poles])
        strength = full.pole_strength()
        assert np.all(strength[dropped] < 1e-3 * strength.max())
        f = np.linspace(0.05, 2.0, 200)
        z = np.exp(2j * np.pi * f * arx.ts)
        for pair in arx.pairs:
            g = full.freqresp(pair, z)
            assert np.max(np.abs(red.freqresp(pair, z) - g) / np.abs(g)) <= 0.01

    def test_reduced_model_matches_decomposition(self, commissioned):
        red = commissioned["red"]
        rm = reduced_model(red)
        z = np.exp(2j * np.pi * np.linspace(0.05, 2.0, 50) * red.ts)
        for pair in red.pairs:
            np.testing.assert_allclose(rm.freqresp(pair, z), red.freqresp(pair, z), rtol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), order=st.integers(2, 6), thr=st.floats(1e-4, 0.5))
    def test_conjugate_closure(self, seed, order, thr):
        model = _random_pair_model(np.random.default_rng(seed), order)
        for d in (decompose(model), reduce_order(decompose(model), thr)):
            for i, p in enumerate(d.z_poles):
                if p.imag != 0:
                    j = int(np.argmin(np.abs(d.z_poles - np.conj(p))))
                    assert d.z_poles[j] == np.conj(p)
                    np.testing.assert_array_equal(d.residues[:, :, j], np.conj(d.residues[:, :, i]))


class TestDominantMode:
    def test_out_of_band_ignored(self):
        assert dominant_mode(_decomp_with_modes([(0.6, 0.03), (1.1, 0.02)])).frequency == pytest.approx(0.6)

    def test_min_damping(self):
        assert dominant_mode(_decomp_with_modes([(0.3, 0.08), (0.6, 0.02)])).frequency == pytest.approx(0.6)

    def test_none_in_band(self):
        with pytest.raises(ValueError, match="no inter-area mode"):
            dominant_mode(_decomp_with_modes([(1.5, 0.1)]))

    def test_two_area_mode(self, commissioned):
        plant_mode = commissioned["model"].inter_area_modes()[0]
        m = dominant_mode(commissioned["red"])
        assert m.frequency == pytest.approx(plant_mode["hz"], rel=0.02)


class TestSelection:
    def test_single_pair(self):
        d = _decomp_with_modes([(0.6, 0.05)])
        rm = residue_matrix_at_mode(d, dominant_mode(d))
        np.testing.assert_array_equal(rm.values, [[1.0]])

    def test_tie_keeps_one_maximum(self):
        d = _decomp_with_modes([(0.6, 0.05)])
        d = ModalDecomposition(d.z_poles, np.ones((2, 2, 2), dtype=complex), {(i, j): np.zeros(1) for i in (1, 2)
                               for j in (1, 2)}, d.ts, [1, 2], [1, 2])
        rm = residue_matrix_at_mode(d, dominant_mode(d))
        assert rm.values[0, 0] == 1.0
        assert np.all(rm.values.ravel()[1:] < 1.0)
        assert rm.argmax == (1, 1)

    def test_scaled_inputs_leave_matrix_unchanged(self, commissioned):
        arx = commissioned["arx"]
        a = reduce_order(decompose(arx))
        b = reduce_order(decompose(arx.scaled_inputs(5.0)))
        ra = residue_matrix_at_mode(a, dominant_mode(a))
        rb = residue_matrix_at_mode(b, dominant_mode(b))
        np.testing.assert_allclose(ra.values, rb.values, rtol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(c=st.floats(1e-3, 1e3))
    def test_measurement_scaling_invariance(self, commissioned, c):
        arx, grouping = commissioned["arx"], commissioned["grouping"]
        scaled = ArxCommonDen(arx.order_k, arx.den, {p: c * b for p, b in arx.num.items()}, arx.ts, arx.pairs)
        sa = select_loops(*(lambda d: (residue_matrix_at_mode(d, dominant_mode(d)), grouping))(
            reduce_order(decompose(arx))))
        sb = select_loops(*(lambda d: (residue_matrix_at_mode(d, dominant_mode(d)), grouping))(
            reduce_order(decompose(scaled))))
        assert [(x.output, x.input) for x in sa.loops] == [(x.output, x.input) for x in sb.loops]

    def test_single_group_takes_global_argmax(self):
        vals = np.array([[0.2, 0.5], [1.0, 0.3]])
        rm = ResidueMatrix(vals, ModeDescriptor(0.6, 0.05, 0), [1, 2], [1, 2])
        sel = select_loops(rm, {1: [1, 2]})
        assert [(c.output, c.input) for c in sel.loops] == [rm.argmax] == [(2, 1)]

    def test_group_without_candidates_rejected(self):
        rm = ResidueMatrix(np.array([[1.0]]), ModeDescriptor(0.6, 0.05, 0), [1], [1])
        sel = select_loops(rm, {1: [1], 2: [2]})
        assert [c.group for c in sel.rejected] == [2]

    def test_uncovered_machine_is_error(self):
        rm = ResidueMatrix(np.ones((2, 2)), ModeDescriptor(0.6, 0.05, 0), [1, 2], [1, 2])
        with pytest.raises(ValueError):
            select_loops(rm, {1: [1]})

    def test_json_roundtrip(self, commissioned):
        sel = commissioned["sel"]
        back = ControlLoopSelection.from_dict(json.loads(sel.to_json()))
        assert back.loops == sel.loops
        np.testing.assert_array_equal(back.matrix.values, sel.matrix.values)
        assert back.matrix.mode.pole_index == sel.matrix.mode.pole_index

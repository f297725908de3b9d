import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wacgrid.measurements import (MeasurementWindow, ProbeSignal, StreamBuffer, append_samples, detect_disturbance,
                                  extract_window, prbs, probe_signal, read_probe_csv, read_window_csv,
                                  windowed_rms, write_probe_csv, write_window_csv)

rows = st.integers(1, 40).flatmap(
    lambda n: st.lists(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3), min_size=n, max_size=n))


class TestStreamBuffer:
    def test_empty_plus_one_row(self):
        s = append_samples(StreamBuffer(3), [1.0, 2.0, 3.0])
        w = extract_window(s, 1)
        assert w.n == 1
        np.testing.assert_array_equal(w.samples, [[1.0, 2.0, 3.0]])

    def test_eviction_keeps_last_rows(self):
        s = StreamBuffer(1, capacity=10)
        s.append(np.arange(12.0)[:, None])
        assert len(s) == 10 and s.total == 12
        np.testing.assert_array_equal(extract_window(s, 10).samples[:, 0], np.arange(2.0, 12.0))
        assert s.start_time == pytest.approx(0.02)

    def test_two_appends_equal_one(self):
        data = np.random.default_rng(0).normal(size=(10, 2))
        a = StreamBuffer(2, capacity=7).append(data[:5]).append(data[5:])
        b = StreamBuffer(2, capacity=7).append(data)
        np.testing.assert_array_equal(a.window().samples, b.window().samples)
        assert a.window().start_time == b.window().start_time

    def test_full_and_single_row(self):
        s = StreamBuffer(2, capacity=5).append(np.ones((4, 2)))
        assert extract_window(s, len(s)).n == 4
        np.testing.assert_array_equal(extract_window(s, 1).samples, [[1.0, 1.0]])

    def test_window_is_snapshot(self):
        s = StreamBuffer(1, ts=0.01, capacity=600).append(np.zeros((500, 1)))
        w = extract_window(s, 500)
        before = w.samples.copy()
        s.append(np.ones((300, 1)))
        assert w.n * w.ts == pytest.approx(5.0)
        np.testing.assert_array_equal(w.samples, before)
        with pytest.raises(ValueError):
            w.samples[0, 0] = 1.0

    def test_errors(self):
        s = StreamBuffer(2, capacity=4)
        with pytest.raises(ValueError):
            extract_window(s, 1)
        with pytest.raises(ValueError):
            s.append(np.ones((2, 3)))
        with pytest.raises(ValueError):
            s.append([[np.nan, 0.0]])

    @settings(max_examples=60, deadline=None)
    @given(chunks=st.lists(rows, min_size=1, max_size=5), cap=st.integers(1, 30))
    def test_last_rows_equal_window(self, chunks, cap):
        s = StreamBuffer(3, capacity=cap)
        history = []
        for c in chunks:
            s.append(c)
            history += c
            n = min(len(s), len(history))
            np.testing.assert_array_equal(extract_window(s, n).samples, np.array(history[-n:]))

    @settings(max_examples=40, deadline=None)
    @given(first=rows, second=rows)
    def test_snapshot_immutable_after_mutation(self, first, second):
        s = StreamBuffer(3, capacity=16).append(first)
        w = extract_window(s, min(len(s), 5))
        copy = np.array(w.samples)
        s.append(second)
        np.testing.assert_array_equal(w.samples, copy)


class TestWindow:
    def test_invariants(self):
        with pytest.raises(ValueError):
            MeasurementWindow(0.0, np.ones((3, 2)))
        with pytest.raises(ValueError):
            MeasurementWindow(0.01, np.ones((3, 2)), machines=(1, 1))
        w = MeasurementWindow(0.1, np.arange(6.0).reshape(3, 2), 1.0, (4, 7))
        np.testing.assert_allclose(w.times, [1.0, 1.1, 1.2])
        np.testing.assert_array_equal(w.column(7), [1.0, 3.0, 5.0])
        assert w.select([7]).machines == (7,)
        assert w.decimate(2).n == 2 and w.decimate(2).ts == pytest.approx(0.2)


class TestDetect:
    def test_all_zero(self):
        assert detect_disturbance(MeasurementWindow(0.01, np.zeros((100, 4))), 1e-4) is None

    def test_constant_column(self):
        x = np.zeros((50, 3))
        x[:, 1] = 0.01
        ev = detect_disturbance(MeasurementWindow(0.01, x), 0.005)
        assert ev.magnitude == pytest.approx(0.01)
        assert ev.machine == 2

    def test_decaying_sinusoid(self):
        t = np.arange(1000) * 0.01
        y = np.exp(-0.2 * t) * np.sin(2 * np.pi * 0.6 * t)
        rms = np.sqrt(np.mean(y**2))
        ev = detect_disturbance(MeasurementWindow(0.01, y), rms / 2)
        assert ev is not None
        assert ev.magnitude == pytest.approx(rms, rel=1e-12)
        assert windowed_rms(MeasurementWindow(0.01, y))[0] == pytest.approx(rms, rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(data=rows, t=st.floats(1e-6, 2.0), frac=st.floats(0.01, 1.0))
    def test_monotone_in_threshold(self, data, t, frac):
        w = MeasurementWindow(0.01, np.array(data))
        if detect_disturbance(w, t) is not None:
            assert detect_disturbance(w, t * frac) is not None


class TestProbe:
    def test_prbs_levels_and_chips(self):
        u = prbs(1000, 0.01, 0.02, 0.1, seed=4)
        assert set(np.unique(u)) == {-0.02, 0.02}
        assert np.all(u.reshape(-1, 10) == u.reshape(-1, 10)[:, :1])

    def test_probe_limit(self):
        with pytest.raises(ValueError):
            probe_signal(1, 10, amplitude=0.06)
        with pytest.raises(ValueError):
            ProbeSignal(1, [0.1])

    def test_distinct_machines_distinct_sequences(self):
        a, b = probe_signal(1, 500), probe_signal(2, 500)
        assert not np.array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.values, probe_signal(1, 500).values)


class TestCsv:
    def test_window_roundtrip(self, tmp_path):
        w = MeasurementWindow(0.01, np.random.default_rng(1).normal(size=(20, 3)), 2.5)
        write_window_csv(tmp_path / "w.csv", w)
        header = (tmp_path / "w.csv").read_text().splitlines()[0]
        assert header == "time,gen1,gen2,gen3"
        r = read_window_csv(tmp_path / "w.csv")
        np.testing.assert_array_equal(r.samples, w.samples)
        assert r.ts == pytest.approx(0.01) and r.start_time == pytest.approx(2.5)

    def test_probe_roundtrip(self, tmp_path):
        probes = [probe_signal(2, 30), probe_signal(4, 30)]
        write_probe_csv(tmp_path / "p.csv", probes)
        assert (tmp_path / "p.csv").read_text().startswith("time,u2,u4")
        back = read_probe_csv(tmp_path / "p.csv")
        assert [p.machine for p in back] == [2, 4]
        np.testing.assert_array_equal(back[0].values, probes[0].values)

    def test_irregular_time_rejected(self, tmp_path):
        (tmp_path / "bad.csv").write_text("time,gen1\n0,0\n0.01,0\n0.03,0\n")
        with pytest.raises(ValueError):
            read_window_csv(tmp_path / "bad.csv")

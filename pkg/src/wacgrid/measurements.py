"""Measurement data model: speed-deviation windows, a ring-buffer stream,
probing signals, the disturbance trigger and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import max_len_seq

DEFAULT_TS = 0.01
DEFAULT_CAPACITY = 6000
DEFAULT_PROBE_LIMIT = 0.05


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeasurementWindow:
    """Fixed-rate block of per-machine speed deviations.

    ``samples`` is (n_time, n_machines), in pu of rated speed. The array is
    copied on construction and marked read-only.
    """

    ts: float
    samples: np.ndarray
    start_time: float = 0.0
    machines: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.ts > 0:
            raise ValueError(f"sample period must be positive, got {self.ts}")
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"samples must be a non-empty 2-D matrix, got shape {s.shape}")
        object.__setattr__(self, "samples", _readonly(s))
        machines = tuple(int(i) for i in self.machines) or tuple(range(1, s.shape[1] + 1))
        if len(machines) != s.shape[1]:
            raise ValueError("one machine id per column required")
        if len(set(machines)) != len(machines) or min(machines) < 1:
            raise ValueError(f"machine ids must be unique and >= 1, got {machines}")
        object.__setattr__(self, "machines", machines)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def m(self) -> int:
        return self.samples.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.ts * np.arange(self.n)

    @property
    def end_time(self) -> float:
        return self.start_time + self.ts * (self.n - 1)

    def column(self, machine: int) -> np.ndarray:
        return self.samples[:, self.machines.index(machine)]

    def select(self, machines: Sequence[int]) -> "MeasurementWindow":
        idx = [self.machines.index(i) for i in machines]
        return MeasurementWindow(self.ts, self.samples[:, idx], self.start_time, tuple(machines))

    def decimate(self, factor: int) -> "MeasurementWindow":
        """Keep every ``factor``-th sample (no anti-alias filter)."""
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        return MeasurementWindow(self.ts * factor, self.samples[::factor], self.start_time, self.machines)

    def scaled(self, c: float) -> "MeasurementWindow":
        return MeasurementWindow(self.ts, c * self.samples, self.start_time, self.machines)


@dataclass(frozen=True, eq=False)
class ProbeSignal:
    """Control-input samples injected on one machine's exciter reference."""

    machine: int
    values: np.ndarray
    ts: float = DEFAULT_TS
    limit: float = DEFAULT_PROBE_LIMIT

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("probe values must be finite")
        if np.any(np.abs(v) > self.limit + 1e-12):
            raise ValueError(f"probe amplitude exceeds limit {self.limit} pu")
        if int(self.machine) < 1:
            raise ValueError("machine ids start at 1")
        object.__setattr__(self, "machine", int(self.machine))
        object.__setattr__(self, "values", _readonly(v))

    def __len__(self):
        return len(self.values)

    def decimate(self, factor: int) -> "ProbeSignal":
        return ProbeSignal(self.machine, self.values[::factor], self.ts * factor, self.limit)


@dataclass(frozen=True)
class DisturbanceEvent:
    time: float
    magnitude: float
    kind: str = "fault"
    machine: int | None = None


@dataclass
class StreamBuffer:
    """Single-writer ring buffer of speed-deviation rows.

    Rows beyond ``capacity`` evict the oldest ones. ``t0`` is the time of the
    first row ever appended; ``start_time`` tracks the oldest retained row.
    """

    m: int
    ts: float = DEFAULT_TS
    capacity: int = DEFAULT_CAPACITY
    t0: float = 0.0
    machines: tuple[int, ...] = ()
    _buf: np.ndarray = field(init=False, repr=False)
    _count: int = field(init=False, default=0)  # rows currently held
    _head: int = field(init=False, default=0)  # next write slot
    _total: int = field(init=False, default=0)  # rows ever appended

    def __post_init__(self):
        if self.m < 1 or self.capacity < 1 or not self.ts > 0:
            raise ValueError("stream needs m >= 1, capacity >= 1 and ts > 0")
        self.machines = tuple(self.machines) or tuple(range(1, self.m + 1))
        self._buf = np.zeros((self.capacity, self.m))

    def __len__(self):
        return self._count

    @property
    def total(self) -> int:
        return self._total

    @property
    def start_time(self) -> float:
        return self.t0 + self.ts * (self._total - self._count)

    @property
    def last_time(self) -> float:
        return self.t0 + self.ts * (self._total - 1)

    def append(self, rows) -> "StreamBuffer":
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != self.m:
            raise ValueError(f"expected rows with {self.m} columns, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("non-finite sample in appended rows")
        n_new = rows.shape[0]
        self._total += n_new
        if n_new >= self.capacity:
            self._buf[:] = rows[-self.capacity:]
            self._head = 0
            self._count = self.capacity
            return self
        end = self._head + n_new
        if end <= self.capacity:
            self._buf[self._head:end] = rows
        else:
            split = self.capacity - self._head
            self._buf[self._head:] = rows[:split]
            self._buf[: end - self.capacity] = rows[split:]
        self._head = end % self.capacity
        self._count = min(self.capacity, self._count + n_new)
        return self

    def last(self, n: int) -> np.ndarray:
        if n < 1 or n > self._count:
            raise ValueError(f"insufficient history: requested {n} rows, buffer holds {self._count}")
        idx = (self._head - n + np.arange(n)) % self.capacity
        return self._buf[idx].copy()

    def window(self, n: int | None = None) -> MeasurementWindow:
        n = self._count if n is None else n
        rows = self.last(n)
        start = self.t0 + self.ts * (self._total - n)
        return MeasurementWindow(self.ts, rows, start, self.machines)


def append_samples(state: StreamBuffer, new_rows) -> StreamBuffer:
    return state.append(new_rows)


def extract_window(state: StreamBuffer, n: int) -> MeasurementWindow:
    """Most recent ``n`` rows of the stream as an immutable snapshot."""
    return state.window(n)


def windowed_rms(window: MeasurementWindow) -> np.ndarray:
    return np.sqrt(np.mean(window.samples**2, axis=0))


def detect_disturbance(window: MeasurementWindow, threshold: float, kind: str = "fault"):
    """Return a DisturbanceEvent when the largest per-machine RMS of the
    window exceeds ``threshold``, else None.

    The event time is the first sample of the worst machine whose magnitude
    exceeds the threshold (the window start if none does individually).
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    rms = windowed_rms(window)
    worst = int(np.argmax(rms))
    if not rms[worst] > threshold:
        return None
    above = np.flatnonzero(np.abs(window.samples[:, worst]) > threshold)
    i0 = int(above[0]) if above.size else 0
    return DisturbanceEvent(
        time=float(window.start_time + i0 * window.ts),
        magnitude=float(rms[worst]),
        kind=kind,
        machine=window.machines[worst],
    )


def prbs(n_samples: int, ts: float = DEFAULT_TS, amplitude: float = 0.02, chip: float = 0.1,
         seed: int = 0, nbits: int = 10) -> np.ndarray:
    """Maximum-length binary sequence of +/- amplitude, held for ``chip`` s per bit.

    The seed picks the nonzero initial LFSR state, so different seeds give
    shifted copies of the same m-sequence.
    """
    hold = max(1, int(round(chip / ts)))
    n_chips = -(-n_samples // hold)
    period = 2**nbits - 1
    state = np.array([int(b) for b in np.binary_repr(seed % period + 1, width=nbits)], dtype=np.int8)
    bits, _ = max_len_seq(nbits, state=state, length=n_chips)
    seq = np.repeat(2.0 * bits - 1.0, hold)[:n_samples]
    return amplitude * seq


def probe_signal(machine: int, n_samples: int, ts: float = DEFAULT_TS, amplitude: float = 0.02,
                 chip: float = 0.1, seed: int = 0, limit: float = DEFAULT_PROBE_LIMIT) -> ProbeSignal:
    if amplitude > limit:
        raise ValueError(f"probe amplitude {amplitude} exceeds limit {limit}")
    return ProbeSignal(machine, prbs(n_samples, ts, amplitude, chip, seed=seed + 7919 * machine), ts, limit)


# -- CSV ---------------------------------------------------------------------

def _read_table(path, prefix: str):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(x) for x in r] for r in reader if r]
    if not header or header[0] != "time":
        raise ValueError(f"{path}: first column must be 'time'")
    ids = []
    for h in header[1:]:
        if not h.startswith(prefix) or not h[len(prefix):].isdigit():
            raise ValueError(f"{path}: bad column name {h!r}, expected {prefix}<id>")
        ids.append(int(h[len(prefix):]))
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    if data.shape[0] < 1:
        raise ValueError(f"{path}: no samples")
    return data[:, 0], data[:, 1:], ids


def _sample_period(t, path) -> float:
    if len(t) < 2:
        return DEFAULT_TS
    dt = np.diff(t)
    ts = float(np.mean(dt))
    if not ts > 0 or np.max(np.abs(dt - ts)) > 1e-6 * max(ts, 1.0):
        raise ValueError(f"{path}: time column is not uniformly sampled")
    return ts


def _write_table(path, t, cols, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *names])
        for ti, row in zip(t, cols):
            w.writerow([repr(float(ti)), *(repr(float(v)) for v in row)])


def read_window_csv(path) -> MeasurementWindow:
    t, data, ids = _read_table(path, "gen")
    return MeasurementWindow(_sample_period(t, path), data, float(t[0]), tuple(ids))


def write_window_csv(path, window: MeasurementWindow) -> Path:
    _write_table(path, window.times, window.samples, [f"gen{i}" for i in window.machines])
    return Path(path)


def read_probe_csv(path, limit: float = DEFAULT_PROBE_LIMIT) -> list[ProbeSignal]:
    t, data, ids = _read_table(path, "u")
    ts = _sample_period(t, path)
    return [ProbeSignal(p, data[:, i], ts, limit) for i, p in enumerate(ids)]


def write_probe_csv(path, probes: Sequence[ProbeSignal], start_time: float = 0.0) -> Path:
    n = len(probes[0])
    if any(len(p) != n for p in probes):
        raise ValueError("probe signals must share a length")
    t = start_time + probes[0].ts * np.arange(n)
    _write_table(path, t, np.column_stack([p.values for p in probes]), [f"u{p.machine}" for p in probes])
    return Path(path)

"""Linearized multi-machine swing-dynamics plant.

State ordering is ``[delta (m), dw (m), actuator torque (q)]``:

    d(delta_i)/dt = w_base * dw_i
    2 H_i d(dw_i)/dt = -sum_j Ks_ij delta_j - D_i dw_i - sum_j Dc_ij dw_j
                       + sum_c act_ic T_c + sum_r dist_ir w_r
    d(T_c)/dt = (u_c - T_c) / tau

Control inputs ``u`` are the supplementary exciter-reference channels; the
first-order lag stands in for the exciter path. Disturbances enter directly
as torque on the swing equation. ``Dc`` is a Laplacian damping on relative
speed between electrically close machines (local stabilizer and damper
action); it damps local modes while leaving group-against-group motion to the
per-machine ``D``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import eig, expm
from scipy.signal import lfilter

from .measurements import DisturbanceEvent, MeasurementWindow

INTER_AREA_BAND = (0.1, 0.8)


def laplacian(m: int, edges) -> np.ndarray:
    """Synchronizing-torque matrix from weighted edges ``(i, j, k)`` (1-based ids)."""
    ks = np.zeros((m, m))
    for i, j, w in edges:
        i, j = i - 1, j - 1
        ks[i, j] -= w
        ks[j, i] -= w
        ks[i, i] += w
        ks[j, j] += w
    return ks


@dataclass(eq=False)
class PlantConfig:
    inertia: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    actuator: np.ndarray
    disturbance: np.ndarray
    base_freq: float = 60.0
    actuator_tau: float = 0.05
    damping_coupling: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).ravel()
        m = self.inertia.size
        self.damping = np.broadcast_to(np.asarray(self.damping, dtype=float), (m,)).copy()
        self.stiffness = np.asarray(self.stiffness, dtype=float)
        self.actuator = np.asarray(self.actuator, dtype=float).reshape(m, -1)
        self.disturbance = np.asarray(self.disturbance, dtype=float).reshape(m, -1)
        if np.any(self.inertia <= 0):
            raise ValueError("inertia constants must be positive")
        if self.stiffness.shape != (m, m):
            raise ValueError(f"stiffness must be {m}x{m}")
        if not np.allclose(self.stiffness, self.stiffness.T, atol=1e-12):
            raise ValueError("stiffness matrix must be symmetric")
        if not np.allclose(self.stiffness.sum(axis=1), 0.0, atol=1e-9):
            raise ValueError("stiffness rows must sum to zero")
        if self.actuator_tau <= 0:
            raise ValueError("actuator time constant must be positive")
        dc = np.zeros((m, m)) if self.damping_coupling is None else np.asarray(self.damping_coupling, dtype=float)
        if dc.shape != (m, m) or not np.allclose(dc, dc.T) or not np.allclose(dc.sum(axis=1), 0.0, atol=1e-9):
            raise ValueError("damping coupling must be a symmetric zero-row-sum matrix")
        self.damping_coupling = dc

    @property
    def m(self) -> int:
        return self.inertia.size

    @property
    def q(self) -> int:
        return self.actuator.shape[1]

    @property
    def r(self) -> int:
        return self.disturbance.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "machines": [{"id": i + 1, "H": float(h), "D": float(d)}
                         for i, (h, d) in enumerate(zip(self.inertia, self.damping))],
            "stiffness": self.stiffness.tolist(),
            "actuator": self.actuator.tolist(),
            "disturbance": self.disturbance.tolist(),
            "base_freq": self.base_freq,
            "actuator_tau": self.actuator_tau,
            "damping_coupling": self.damping_coupling.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        ms = sorted(d["machines"], key=lambda r: r["id"])
        return cls(
            inertia=[r["H"] for r in ms],
            damping=[r["D"] for r in ms],
            stiffness=d["stiffness"],
            actuator=d["actuator"],
            disturbance=d["disturbance"],
            base_freq=d.get("base_freq", 60.0),
            actuator_tau=d.get("actuator_tau", 0.05),
            damping_coupling=d.get("damping_coupling"),
            name=d.get("name", "custom"),
        )


@dataclass(eq=False)
class PlantModel:
    config: PlantConfig
    a_cont: np.ndarray
    b_cont: np.ndarray
    e_cont: np.ndarray
    c_out: np.ndarray
    eigen: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def n_states(self) -> int:
        return self.a_cont.shape[0]

    def inter_area_modes(self, band=INTER_AREA_BAND):
        return [md for md in self.eigen if md["hz"] > 0 and band[0] <= md["hz"] <= band[1]]


def mode_table(eigvals) -> list[dict]:
    """Frequency/damping rows for the non-negative-frequency members of a
    continuous spectrum, sorted by frequency then real part."""
    rows = []
    for s in np.asarray(eigvals, dtype=complex):
        if s.imag < -1e-9:
            continue
        mag = abs(s)
        zeta = -s.real / mag if mag > 0 else 1.0
        rows.append({"hz": float(max(s.imag, 0.0) / (2 * np.pi)), "zeta": float(zeta),
                     "real": float(s.real), "imag": float(max(s.imag, 0.0))})
    rows.sort(key=lambda r: (round(r["hz"], 9), r["real"]))
    return rows


def build_plant(config: PlantConfig) -> PlantModel:
    m, q, r = config.m, config.q, config.r
    wb = 2 * np.pi * config.base_freq
    M = 2 * config.inertia
    n = 2 * m + q
    a = np.zeros((n, n))
    a[:m, m:2 * m] = wb * np.eye(m)
    a[m:2 * m, :m] = -config.stiffness / M[:, None]
    a[m:2 * m, m:2 * m] = -(np.diag(config.damping) + config.damping_coupling) / M[:, None]
    a[m:2 * m, 2 * m:] = config.actuator / M[:, None]
    a[2 * m:, 2 * m:] = -np.eye(q) / config.actuator_tau
    b = np.zeros((n, q))
    b[2 * m:, :] = np.eye(q) / config.actuator_tau
    e = np.zeros((n, r))
    e[m:2 * m, :] = config.disturbance / M[:, None]
    c = np.zeros((m, n))
    c[:, m:2 * m] = np.eye(m)
    return PlantModel(config, a, b, e, c, mode_table(np.linalg.eigvals(a)))


TWO_AREA_DEFAULTS = dict(
    inertia=(6.5, 6.5, 6.2, 6.2),
    damping=1.0,
    k_intra=0.65,
    k_tie=0.5,
    local_damping=15.0,
    actuator_gain=10.0,
    actuator_tau=0.05,
    base_freq=60.0,
)


def build_two_area(**overrides):
    """Four-machine, two-area analogue; returns ``(config, model)``.

    Area 1 holds machines 1-2, area 2 machines 3-4. Each area has one internal
    synchronizing link of stiffness ``k_intra`` and relative damping
    ``local_damping``; the tie of total stiffness
    ``k_tie`` is spread over the cross-area machine pairs, weighted toward
    the 2-3 path. Passing ``stiffness`` replaces the generated matrix.
    """
    p = {**TWO_AREA_DEFAULTS, **overrides}
    kt, ki = p["k_tie"], p["k_intra"]
    ks = p.get("stiffness")
    if ks is None:
        ks = laplacian(4, [(1, 2, ki), (3, 4, ki), (1, 3, 0.2 * kt), (1, 4, 0.2 * kt),
                           (2, 3, 0.4 * kt), (2, 4, 0.2 * kt)])
    cfg = PlantConfig(
        inertia=p["inertia"],
        damping=p["damping"],
        stiffness=ks,
        actuator=p["actuator_gain"] * np.eye(4),
        disturbance=np.eye(4),
        base_freq=p["base_freq"],
        actuator_tau=p["actuator_tau"],
        damping_coupling=laplacian(4, [(1, 2, p["local_damping"]), (3, 4, p["local_damping"])]),
        name="twoarea",
    )
    return cfg, build_plant(cfg)


# Block layout follows the bus-14 grouping reported for the 39-bus system.
TEN_MACHINE_BLOCKS = ((4, 5, 6, 7, 9), (1, 8), (2, 3), (10,))
TEN_MACHINE_INERTIA = (4.2, 3.0, 3.6, 2.9, 2.6, 3.5, 2.6, 2.4, 3.5, 50.0)


def build_ten_machine(blocks=TEN_MACHINE_BLOCKS, inertia=TEN_MACHINE_INERTIA, damping=1.0,
                      k_intra=4.0, k_inter=0.15, local_damping=10.0, actuator_gain=10.0,
                      actuator_tau=0.05):
    """Ten-machine structural analogue with designed coherent blocks.

    Machines in a block are fully meshed with stiffness ``k_intra`` and
    relative damping ``local_damping``; blocks are
    chained (block b to block b+1) through their first members with
    ``k_inter``. Returns ``(config, model)``.
    """
    m = sum(len(b) for b in blocks)
    edges, dedges = [], []
    for b in blocks:
        edges += [(i, j, k_intra) for ii, i in enumerate(b) for j in b[ii + 1:]]
        dedges += [(i, j, local_damping) for ii, i in enumerate(b) for j in b[ii + 1:]]
    for b0, b1 in zip(blocks[:-1], blocks[1:]):
        edges.append((b0[0], b1[0], k_inter))
    cfg = PlantConfig(
        inertia=inertia,
        damping=damping,
        stiffness=laplacian(m, edges),
        actuator=actuator_gain * np.eye(m),
        disturbance=np.eye(m),
        actuator_tau=actuator_tau,
        damping_coupling=laplacian(m, dedges),
        name="tenmachine",
    )
    return cfg, build_plant(cfg)


def preset(name: str, **overrides):
    if name == "twoarea":
        return build_two_area(**overrides)
    if name == "tenmachine":
        return build_ten_machine(**overrides)
    raise ValueError(f"unknown plant preset {name!r}")


@dataclass(eq=False)
class DiscretePlant:
    """Exact zero-order-hold discretization; ``b`` acts on control, ``e`` on disturbances."""

    a: np.ndarray
    b: np.ndarray
    e: np.ndarray
    c: np.ndarray
    ts: float


def zoh(a, b, ts):
    """ZOH pair ``(Ad, Bd)`` via the exponential of the augmented matrix."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    n, k = b.shape
    big = np.zeros((n + k, n + k))
    big[:n, :n] = a
    big[:n, n:] = b
    phi = expm(big * ts)
    return phi[:n, :n], phi[:n, n:]


def discretize_zoh(model: PlantModel, ts: float) -> DiscretePlant:
    if not ts > 0:
        raise ValueError("sample period must be positive")
    q = model.b_cont.shape[1]
    ad, bd = zoh(model.a_cont, np.hstack([model.b_cont, model.e_cont]), ts)
    return DiscretePlant(ad, bd[:, :q], bd[:, q:], model.c_out.copy(), ts)


# -- simulation --------------------------------------------------------------

@dataclass
class Pulse:
    """Rectangular torque injection on one disturbance channel.

    A non-None ``stiffness`` (and optionally ``damping_coupling``) switches
    the network coupling from ``time`` on (post-fault topology);
    ``magnitude = 0`` makes a pure topology change.
    """

    time: float
    channel: int
    magnitude: float = 0.5
    duration: float = 0.1
    kind: str = "fault"
    stiffness: np.ndarray | None = None
    damping_coupling: np.ndarray | None = None

    @property
    def switches_topology(self) -> bool:
        return self.stiffness is not None or self.damping_coupling is not None

    def apply(self, config: PlantConfig) -> PlantConfig:
        """Post-event plant configuration."""
        kw = {}
        if self.stiffness is not None:
            kw["stiffness"] = np.asarray(self.stiffness, dtype=float)
        if self.damping_coupling is not None:
            kw["damping_coupling"] = np.asarray(self.damping_coupling, dtype=float)
        return replace(config, **kw) if kw else config

    def to_dict(self):
        d = {"time": self.time, "channel": self.channel, "magnitude": self.magnitude,
             "duration": self.duration, "kind": self.kind}
        if self.stiffness is not None:
            d["stiffness"] = np.asarray(self.stiffness).tolist()
        if self.damping_coupling is not None:
            d["damping_coupling"] = np.asarray(self.damping_coupling).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        arr = lambda key: None if d.get(key) is None else np.asarray(d[key], dtype=float)
        return cls(float(d["time"]), int(d["channel"]), float(d.get("magnitude", 0.5)),
                   float(d.get("duration", 0.1)), d.get("kind", "fault"), arr("stiffness"),
                   arr("damping_coupling"))


@dataclass(eq=False)
class SimulationResult:
    window: MeasurementWindow
    inputs: list
    events: list
    relative_speeds: dict
    controls: dict = field(default_factory=dict)
    states: np.ndarray | None = None
    x_final: np.ndarray | None = None

    def relative_speed(self, i: int, j: int) -> np.ndarray:
        return self.window.column(i) - self.window.column(j)


def wind_injection(n: int, ts: float, std: float = 0.05, corner_hz: float = 0.2, seed: int = 0):
    """Band-limited random power injection: white noise through a first-order
    low-pass with the given corner, rescaled to ``std``."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n + 2000)
    a = np.exp(-2 * np.pi * corner_hz * ts)
    y = lfilter([1 - a], [1, -a], w)[2000:]
    sd = np.std(y)
    return y * (std / sd) if sd > 0 else y


def _input_matrix(model, inputs, n_steps):
    q = model.b_cont.shape[1]
    u = np.zeros((n_steps, q))
    probes = []
    if inputs is None:
        return u, probes
    if isinstance(inputs, np.ndarray):
        k = min(n_steps, inputs.shape[0])
        u[:k] = inputs[:k].reshape(k, q)
        return u, probes
    for p in inputs:
        k = min(n_steps, len(p))
        u[:k, p.machine - 1] += p.values[:k]
        probes.append(p)
    return u, probes


def simulate(model: PlantModel, ts: float, duration: float, inputs=None, disturbances: Sequence[Pulse] = (),
             noise_std: float = 0.0, noise_seed: int | None = None, x0=None, wind=None,
             controllers: Sequence = (), control_ts: float | None = None, pairs=None,
             keep_states: bool = False, t0: float = 0.0) -> SimulationResult:
    """Step the ZOH-discretized plant.

    ``inputs`` is a list of ProbeSignal (one per machine channel) or an
    (n_steps, q) array. ``wind`` is ``(channel, values)`` added on a
    disturbance channel. ``controllers`` are objects exposing ``input``,
    ``output``, ``step(z) -> u`` and ``ts``; each is sampled every
    ``control_ts`` seconds (an integer multiple of ``ts``) and its output is
    held in between. Measurement noise is added to the recorded window and to
    what the controllers see.

    ``t0`` is the absolute time of the first sample. Disturbance times are
    absolute, so a long run can be stepped in chunks by passing the previous
    chunk's ``x_final`` as ``x0``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    n_steps = int(round(duration / ts))
    m = model.m
    rng = np.random.default_rng(noise_seed)
    u_ext, probes = _input_matrix(model, inputs, n_steps)
    w = np.zeros((n_steps, model.e_cont.shape[1]))
    for d in disturbances:
        k0 = int(round((d.time - t0) / ts))
        k1 = k0 + max(int(round(d.duration / ts)), 0)
        lo, hi = max(k0, 0), min(k1, n_steps)
        if d.magnitude and hi > lo:
            w[lo:hi, d.channel - 1] += d.magnitude
    if wind is not None:
        ch, vals = wind
        k = min(n_steps, len(vals))
        w[:k, ch - 1] += np.asarray(vals[:k])

    switches = sorted(((int(round((d.time - t0) / ts)), i) for i, d in enumerate(disturbances) if d.switches_topology))
    dp = discretize_zoh(model, ts)
    x = np.zeros(model.n_states) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros((n_steps, m))
    states = np.zeros((n_steps, model.n_states)) if keep_states else None

    hold = 1
    if controllers:
        control_ts = control_ts or controllers[0].ts
        hold = int(round(control_ts / ts))
        if hold < 1 or abs(hold * ts - control_ts) > 1e-9:
            raise ValueError("control period must be an integer multiple of the plant sample period")
    u_ctl = np.zeros(model.b_cont.shape[1])
    ctl_trace = {i: np.zeros(n_steps) for i in range(len(controllers))}
    noise = rng.standard_normal((n_steps, m)) * noise_std if noise_std > 0 else np.zeros((n_steps, m))

    sw = 0
    cfg = model.config
    for k in range(n_steps):
        while sw < len(switches) and switches[sw][0] <= k:
            cfg = disturbances[switches[sw][1]].apply(cfg)
            dp = discretize_zoh(build_plant(cfg), ts)
            sw += 1
        meas = dp.c @ x + noise[k]
        y[k] = meas
        if controllers and k % hold == 0:
            u_ctl[:] = 0.0
            for i, c in enumerate(controllers):
                uc = c.step(meas[c.output - 1])
                u_ctl[c.input - 1] += uc
                ctl_trace[i][k:k + hold] = uc
        if keep_states:
            states[k] = x
        x = dp.a @ x + dp.b @ (u_ext[k] + u_ctl) + dp.e @ w[k]

    window = MeasurementWindow(ts, y, t0)
    events = [DisturbanceEvent(d.time, float(abs(d.magnitude)), d.kind, d.channel) for d in disturbances]
    if pairs is None:
        pairs = [(i, j) for i in range(1, m + 1) for j in range(i + 1, m + 1)]
    rel = {f"{i}-{j}": y[:, i - 1] - y[:, j - 1] for i, j in pairs}
    controls = {f"{c.group}:u{c.input}": ctl_trace[i] for i, c in enumerate(controllers)}
    return SimulationResult(window, probes, events, rel, controls, states, x)


def plant_energy(model: PlantModel, x) -> np.ndarray:
    """Kinetic plus synchronizing potential energy for state rows ``x``;
    nonincreasing along unforced trajectories when all D_i >= 0."""
    x = np.atleast_2d(x)
    cfg = model.config
    m = cfg.m
    wb = 2 * np.pi * cfg.base_freq
    delta, dw = x[:, :m], x[:, m:2 * m]
    kin = 0.5 * np.sum(2 * cfg.inertia * dw**2, axis=1)
    pot = 0.5 * np.einsum("ti,ij,tj->t", delta, cfg.stiffness, delta) / wb
    return kin + pot


def settling_time(t, y, frac: float = 0.05, start: float = 0.0) -> float:
    """Time after ``start`` at which |y| last exceeds ``frac`` of its peak
    (measured over t >= start)."""
    t = np.asarray(t)
    y = np.abs(np.asarray(y))
    sel = t >= start
    tt, yy = t[sel], y[sel]
    peak = yy.max() if yy.size else 0.0
    if peak == 0:
        return 0.0
    above = np.flatnonzero(yy > frac * peak)
    return float(tt[above[-1]] - start)


# -- eigen reporting ---------------------------------------------------------

def discrete_to_modes(z, ts) -> list[dict]:
    z = np.asarray(z, dtype=complex)
    z = z[np.abs(z) > 1e-300]
    return mode_table(np.log(z) / ts)


def closed_loop_matrix(model: PlantModel, controllers, ts: float) -> np.ndarray:
    """Linear closed loop of plant + Kalman/LQR controllers sampled at ``ts``.

    Augmented state is ``(x_k, xhat_{k-1} for each controller)``; each
    controller uses its steady-state Kalman gain, saturation is ignored.
    """
    dp = discretize_zoh(model, ts)
    n = dp.a.shape[0]
    blocks = []
    for c in controllers:
        a, b, h = c.ss.a_mat, c.ss.b_mat, c.kf.h_mat
        g = c.steady_gain()
        k = c.lqr.gain
        p = a.shape[0]
        f = (np.eye(p) - g @ h) @ (a - b @ k)
        blocks.append((c, g, k, f, p))
    nc = sum(bl[4] for bl in blocks)
    big = np.zeros((n + nc, n + nc))
    big[:n, :n] = dp.a
    off = n
    for c, g, k, f, p in blocks:
        sl = slice(off, off + p)
        cm = dp.c[[c.output - 1]]
        bu = dp.b[:, [c.input - 1]]
        # xhat_k = G C x_k + F xhat_{k-1};  u_k = -K xhat_k
        big[sl, :n] = g @ cm
        big[sl, sl] = f
        big[:n, :n] -= bu @ k @ g @ cm
        big[:n, sl] -= bu @ k @ f
        off += p
    return big


def _band_min(modes, band):
    inb = [md for md in modes if band[0] <= md["hz"] <= band[1] and md["imag"] > 0]
    return min(inb, key=lambda md: md["zeta"]) if inb else None


def closed_loop_eigen(model: PlantModel, controllers, ts: float | None = None, band=INTER_AREA_BAND) -> dict:
    """Open- versus closed-loop modal damping.

    The closed-loop inter-area mode is reported two ways: ``tracked`` is the
    closed-loop mode in which the open-loop inter-area mode participates most
    (``|w_o^H r_j| |l_j^H v_o|`` over plant states, with ``l_j^H r_j = 1``);
    ``band_min`` is the least-damped closed-loop mode anywhere in
    ``band`` (controller modes included), the conservative figure.
    """
    if ts is None:
        ts = controllers[0].ts if controllers else 0.1
    for c in controllers:
        if not (1 <= c.output <= model.m and 1 <= c.input <= model.b_cont.shape[1]):
            raise ValueError(f"controller loop {c.output}->{c.input} references an unknown machine")
    dp = discretize_zoh(model, ts)
    n = dp.a.shape[0]
    zo, wo, vo = eig(dp.a, left=True, right=True)
    open_modes = discrete_to_modes(zo, ts)
    big = closed_loop_matrix(model, controllers, ts) if controllers else dp.a
    zc, lc, rc = eig(big, left=True, right=True)
    closed_modes = discrete_to_modes(zc, ts)

    ia_open = _band_min(open_modes, band)
    tracked = None
    if ia_open is not None:
        s_target = complex(ia_open["real"], ia_open["imag"])
        i_open = int(np.argmin(np.abs(np.log(zo.astype(complex)) / ts - s_target)))
        w, v = wo[:, i_open], vo[:, i_open]
        w = w / np.conj(w.conj() @ v)
        scale = np.einsum("ij,ij->j", lc.conj(), rc)
        part = np.abs(w.conj() @ rc[:n, :]) * np.abs(lc[:n, :].conj().T @ v) / np.abs(scale)
        part[np.imag(zc) <= 0] = 0.0
        j = int(np.argmax(part))
        s = np.log(complex(zc[j])) / ts
        tracked = {"hz": float(abs(s.imag) / (2 * np.pi)), "zeta": float(-s.real / abs(s)),
                   "real": float(s.real), "imag": float(abs(s.imag))}
    return {
        "ts": ts,
        "open": open_modes,
        "closed": closed_modes,
        "inter_area": {
            "open": ia_open,
            "closed_tracked": tracked,
            "closed_band_min": _band_min(closed_modes, band),
        },
        "spectral_radius": {"open": float(np.max(np.abs(zo))), "closed": float(np.max(np.abs(zc)))},
    }


def eigen_report_json(model: PlantModel) -> str:
    return json.dumps({"modes": [{"hz": md["hz"], "zeta": md["zeta"]} for md in model.eigen]}, indent=2)

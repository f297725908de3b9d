"""Online orchestration: commissioning (group, probe, identify, select,
synthesize) followed by a closed-loop run that regroups and reselects
whenever the disturbance trigger fires.

``report.json`` holds everything that is a deterministic function of the
configuration and seed; wall-clock stage timings go to ``timings.json``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .coherency import CoherencyGrouping, group_machines
from .measurements import (MeasurementWindow, ProbeSignal, StreamBuffer, detect_disturbance, extract_window,
                           probe_signal, write_probe_csv, write_window_csv)
from .modal import ControlLoopSelection, analyze, decompose, reduce_order
from .plant import (PlantModel, Pulse, build_plant, closed_loop_eigen, laplacian, preset, simulate,
                    wind_injection)
from .sysid import ArxCommonDen, identify
from .wac import WacController, controllers_to_json, synthesize

log = logging.getLogger(__name__)

DEFAULT_K = {"twoarea": 2, "tenmachine": 4}


class PipelineError(RuntimeError):
    """A stage failure, tagged with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline, with its default.

    ``k = None`` takes the preset's designed group count; ``sigma = None``
    and ``nystrom_l = None`` use the median-distance and automatic landmark
    rules of the coherency module.
    """

    plant: str = "twoarea"
    ts: float = 0.01
    control_ts: float = 0.1
    # coherency
    k: int | None = None
    window_n: int = 1000
    cluster_skip: float = 4.0
    nystrom_l: int | None = None
    sigma: float | None = None
    squared_kernel: bool = False
    # identification
    arx_order: int = 10
    id_N: int | None = None
    id_tol: float = 1e-4
    id_max_iter: int = 100
    probe_amplitude: float = 0.02
    probe_chip: float = 0.1
    probe_duration: float = 60.0
    # modal analysis and selection
    band: tuple = (0.1, 0.8)
    reduce_threshold: float = 1e-3
    reject_below: float = 0.05
    # controller
    rho: float = 1.0
    q_noise: float = 1e-5
    r_noise: float = 1e-3
    u_limit: float = 0.05
    # online loop
    trigger_threshold: float = 5e-4
    trigger_window: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.band = tuple(float(b) for b in self.band)
        if self.k is None:
            self.k = DEFAULT_K.get(self.plant, 2)
        hold = self.control_ts / self.ts
        if abs(hold - round(hold)) > 1e-9 or round(hold) < 1:
            raise ValueError("control_ts must be an integer multiple of ts")
        chunk = self.trigger_window / self.control_ts
        if abs(chunk - round(chunk)) > 1e-9 or round(chunk) < 1:
            raise ValueError("trigger_window must be an integer multiple of control_ts")
        if not self.trigger_threshold > 0:
            raise ValueError("trigger_threshold must be positive")

    @property
    def decimation(self) -> int:
        return int(round(self.control_ts / self.ts))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["band"] = list(self.band)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Scenario:
    """Disturbance script for one online run.

    ``commission_channel`` receives the pulse of the commissioning ringdown
    used for the first grouping. ``wind`` is an optional dict with keys
    ``channel``, ``std``, ``corner_hz``.
    """

    duration: float = 60.0
    disturbances: list = field(default_factory=list)
    commission_channel: int = 1
    commission_magnitude: float = 0.5
    plant_overrides: dict = field(default_factory=dict)
    wind: dict | None = None
    name: str = "custom"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "duration": self.duration,
            "disturbances": [d.to_dict() for d in self.disturbances],
            "commission_channel": self.commission_channel,
            "commission_magnitude": self.commission_magnitude,
            "plant_overrides": dict(self.plant_overrides),
            "wind": self.wind,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(float(d.get("duration", 60.0)), [Pulse.from_dict(x) for x in d.get("disturbances", [])],
                   int(d.get("commission_channel", 1)), float(d.get("commission_magnitude", 0.5)),
                   dict(d.get("plant_overrides", {})), d.get("wind"), d.get("name", "custom"))


def quiet_scenario(duration: float = 30.0) -> Scenario:
    return Scenario(duration=duration, name="quiet")


def default_scenario(plant: str = "twoarea") -> Scenario:
    """One fault pulse at 13 s on machine 3 (machine 4 for the ten-machine
    preset)."""
    ch = 3 if plant == "twoarea" else 4
    return Scenario(duration=60.0, disturbances=[Pulse(13.0, ch, 0.5, 0.1)], name=f"{plant}-fault")


def post_fault_topology() -> tuple[np.ndarray, np.ndarray]:
    """Two-area stiffness and relative damping after machine 1 is almost
    islanded: machine 1 hangs on weak links while 2-3-4 stay stiffly
    coupled."""
    ks = laplacian(4, [(1, 2, 0.03), (2, 3, 0.65), (3, 4, 0.65), (1, 3, 0.03)])
    dc = laplacian(4, [(2, 3, 15.0), (3, 4, 15.0)])
    return ks, dc


def coherency_shift_scenario() -> Scenario:
    """Two disturbances: a plain fault, then a fault that also changes the
    topology so that coherency moves from {1,2},{3,4} to {1},{2,3,4}."""
    ks, dc = post_fault_topology()
    return Scenario(
        duration=130.0,
        disturbances=[Pulse(10.0, 3, 0.5, 0.1), Pulse(70.0, 1, 0.5, 0.1, "line trip", ks, dc)],
        name="coherency-shift",
    )


# -- stages --------------------------------------------------------------------

def commission_record(model: PlantModel, cfg: PipelineConfig, scenario: Scenario) -> MeasurementWindow:
    """Ringdown of a pulse at t = 0.5 s, long enough for one clustering window."""
    duration = 0.5 + cfg.cluster_skip + cfg.window_n * cfg.ts
    res = simulate(model, cfg.ts, duration, disturbances=[Pulse(0.5, scenario.commission_channel,
                                                                 scenario.commission_magnitude, 0.1)],
                   noise_std=cfg.noise_std, noise_seed=cfg.seed)
    return res.window


def window_from(record: MeasurementWindow, start: float, n: int) -> MeasurementWindow:
    """``n`` samples of ``record`` starting at absolute time ``start``."""
    i0 = int(round((start - record.start_time) / record.ts))
    if i0 < 0 or i0 + n > record.n:
        raise ValueError(f"record does not cover [{start}, {start + n * record.ts}) s")
    return MeasurementWindow(record.ts, record.samples[i0:i0 + n], record.start_time + i0 * record.ts,
                             record.machines)


def stage_cluster(window: MeasurementWindow, cfg: PipelineConfig) -> CoherencyGrouping:
    return group_machines(window, cfg.k, sigma=cfg.sigma, l=cfg.nystrom_l, seed=cfg.seed,
                          squared=cfg.squared_kernel)


def probe_campaign(model: PlantModel, cfg: PipelineConfig, seed: int | None = None):
    """Sequential PRBS experiments, one input machine at a time.

    Returns ``({input: response window}, [probe, ...])`` at the plant rate.
    """
    seed = cfg.seed if seed is None else seed
    n = int(round(cfg.probe_duration / cfg.ts))
    outs, probes = {}, []
    for p in range(1, model.m + 1):
        pr = probe_signal(p, n, cfg.ts, cfg.probe_amplitude, cfg.probe_chip, seed=seed, limit=cfg.u_limit)
        res = simulate(model, cfg.ts, cfg.probe_duration, inputs=[pr], noise_std=cfg.noise_std,
                       noise_seed=seed + 1000 + p)
        outs[p] = res.window
        probes.append(pr)
    return outs, probes


def stage_identify(outputs, probes, cfg: PipelineConfig) -> ArxCommonDen:
    """Decimate to the control period when needed, then identify."""
    def dec(x):
        f = int(round(cfg.control_ts / x.ts))
        return x.decimate(f) if f > 1 else x

    if isinstance(outputs, MeasurementWindow):
        outputs = dec(outputs)
    else:
        outputs = {p: dec(w) for p, w in outputs.items()}
    probes = [dec(p) for p in probes]
    return identify(outputs, probes, order_k=cfg.arx_order, N=cfg.id_N, tol=cfg.id_tol,
                    max_iter=cfg.id_max_iter)


def stage_select(model: ArxCommonDen, grouping, cfg: PipelineConfig):
    return analyze(model, grouping, cfg.band, cfg.reduce_threshold, cfg.reject_below)


def stage_synthesize(model: ArxCommonDen, selection: ControlLoopSelection, cfg: PipelineConfig):
    red = reduce_order(decompose(model), cfg.reduce_threshold)
    return [synthesize(red, loop, cfg.rho, cfg.q_noise, cfg.r_noise, cfg.u_limit) for loop in selection.loops]


def damping_summary(model: PlantModel, controllers, cfg: PipelineConfig) -> dict:
    rep = closed_loop_eigen(model, controllers, cfg.control_ts, cfg.band)
    ia = rep["inter_area"]
    pick = lambda m: None if m is None else {"hz": m["hz"], "zeta": m["zeta"]}
    return {
        "open": pick(ia["open"]),
        "closed_tracked": pick(ia["closed_tracked"]),
        "closed_band_min": pick(ia["closed_band_min"]),
        "spectral_radius": rep["spectral_radius"],
    }


def stage_closedloop(model: PlantModel, controllers, cfg: PipelineConfig) -> dict:
    return closed_loop_eigen(model, controllers, cfg.control_ts, cfg.band)


def _loop_key(selection: ControlLoopSelection):
    return tuple(sorted((c.output, c.input) for c in selection.loops))


# -- report --------------------------------------------------------------------

@dataclass(eq=False)
class RunReport:
    config: PipelineConfig
    scenario: Scenario
    groupings: list
    designs: list
    detections: list
    controllers: list
    damping: dict
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    record: dict = field(default_factory=dict, repr=False)

    @property
    def regroupings(self) -> int:
        return len(self.groupings) - 1

    @property
    def resyntheses(self) -> int:
        return sum(1 for d in self.designs[1:] if d["resynthesized"])

    def final_grouping(self) -> dict:
        return self.groupings[-1]["grouping"]["groups"]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "scenario": self.scenario.to_dict(),
            "groupings": self.groupings,
            "regroupings": self.regroupings,
            "designs": self.designs,
            "resyntheses": self.resyntheses,
            "detections": self.detections,
            "controllers": [c.to_dict() for c in self.controllers],
            "damping": self.damping,
            "artifacts": self.artifacts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Timer:
    def __init__(self):
        self.t = {}

    def add(self, stage: str, dt: float):
        self.t.setdefault(stage, []).append(max(float(dt), 0.0))


def _run_stage(stage: str, timer: _Timer, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except PipelineError:
        raise
    except Exception as exc:  # surfaced with the failing stage's name
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
    timer.add(stage, time.perf_counter() - t0)
    return out


def _design(model: PlantModel, grouping: CoherencyGrouping, cfg: PipelineConfig, timer: _Timer, seed: int):
    outs, probes = _run_stage("probe", timer, probe_campaign, model, cfg, seed)
    arx = _run_stage("identify", timer, stage_identify, outs, probes, cfg)
    red, sel = _run_stage("select", timer, stage_select, arx, grouping, cfg)
    return arx, red, sel


def _model_summary(arx: ArxCommonDen) -> dict:
    return {"order": arx.order_k, "fit": arx.fit, "iterations": arx.iterations,
            "converged": arx.converged, "stable": arx.stable}


def run_pipeline(config: PipelineConfig | None = None, scenario: Scenario | None = None,
                 out_dir=None) -> RunReport:
    """Commission the controllers, then run the scenario online.

    Every trigger (RMS above ``trigger_threshold``, re-armed once the RMS
    falls below half of it) schedules a regrouping on the post-event window
    ``[t_event + cluster_skip, + window_n samples)``, followed by
    re-identification on the current plant and reselection. Controllers are
    resynthesized only when the selected loops change; otherwise their
    Kalman states carry on.
    """
    cfg = config or PipelineConfig()
    scenario = scenario or default_scenario(cfg.plant)
    timer = _Timer()
    _, plant0 = _run_stage("plant", timer, preset, cfg.plant, **scenario.plant_overrides)

    # commissioning
    record0 = _run_stage("simulate", timer, commission_record, plant0, cfg, scenario)
    win0 = window_from(record0, 0.5 + cfg.cluster_skip, cfg.window_n)
    grouping = _run_stage("cluster", timer, stage_cluster, win0, cfg)
    arx, red, sel = _design(plant0, grouping, cfg, timer, cfg.seed)
    controllers = _run_stage("synthesize", timer, stage_synthesize, arx, sel, cfg)
    groupings = [{"time": None, "trigger": None, "grouping": grouping.to_dict(timing=False)}]
    designs = [{"time": None, "model": _model_summary(arx), "selection": sel.to_dict(), "resynthesized": True,
                "damping": _run_stage("closedloop", timer, damping_summary, plant0, controllers, cfg)}]

    # online run
    m = plant0.m
    chunk_n = int(round(cfg.trigger_window / cfg.ts))
    n_total = int(round(scenario.duration / cfg.ts))
    stream = StreamBuffer(m, cfg.ts, capacity=max(n_total, chunk_n), t0=0.0)
    wind = None
    if scenario.wind:
        w = scenario.wind
        wind = (int(w["channel"]), wind_injection(n_total, cfg.ts, float(w.get("std", 0.05)),
                                                  float(w.get("corner_hz", 0.2)), cfg.seed))
    events = sorted(scenario.disturbances, key=lambda d: d.time)
    cfg_now, model_now = plant0.config, plant0
    x = np.zeros(plant0.n_states)
    rel_parts, ctl_parts = [], []
    detections, pending = [], []
    armed = True
    k = 0
    t_sim = 0.0
    while k < n_total:
        n = min(chunk_n, n_total - k)
        t0 = k * cfg.ts
        applied = plant0.config
        for d in events:
            if d.switches_topology and d.time <= t0 + 1e-12:
                applied = d.apply(applied)
        if applied is not cfg_now:
            cfg_now, model_now = applied, build_plant(applied)
        wchunk = None if wind is None else (wind[0], wind[1][k:k + n])
        c0 = time.perf_counter()
        res = simulate(model_now, cfg.ts, n * cfg.ts, disturbances=events, noise_std=cfg.noise_std,
                       noise_seed=cfg.seed * 1_000_003 + k, x0=x, wind=wchunk, controllers=controllers,
                       control_ts=cfg.control_ts, t0=t0)
        t_sim += time.perf_counter() - c0
        x = res.x_final
        stream.append(res.window.samples)
        rel_parts.append(res.relative_speeds)
        ctl_parts.append({(c.group, c.input): res.controls[f"{c.group}:u{c.input}"] for c in controllers})
        k += n
        # trigger with hysteresis
        recent = extract_window(stream, n)
        ev = detect_disturbance(recent, cfg.trigger_threshold)
        if armed and ev is not None:
            armed = False
            detections.append({"time": ev.time, "machine": ev.machine, "magnitude": ev.magnitude})
            pending.append(ev)
        elif not armed and ev is None and np.max(np.sqrt(np.mean(recent.samples**2, 0))) < 0.5 * cfg.trigger_threshold:
            armed = True
        # regroup once the post-event window is complete
        while pending and stream.last_time + cfg.ts >= pending[0].time + cfg.cluster_skip + cfg.window_n * cfg.ts - 1e-9:
            ev = pending.pop(0)
            full = stream.window(len(stream))
            win = window_from(full, _align(ev.time + cfg.cluster_skip, cfg.ts), cfg.window_n)
            grouping = _run_stage("cluster", timer, stage_cluster, win, cfg)
            groupings.append({"time": win.start_time, "trigger": detections[len(groupings) - 1],
                              "grouping": grouping.to_dict(timing=False)})
            arx, red, new_sel = _design(model_now, grouping, cfg, timer, cfg.seed + len(groupings))
            changed = _loop_key(new_sel) != _loop_key(sel)
            if changed:
                controllers = _run_stage("synthesize", timer, stage_synthesize, arx, new_sel, cfg)
            sel = new_sel
            designs.append({"time": win.start_time, "model": _model_summary(arx), "selection": sel.to_dict(),
                            "resynthesized": changed,
                            "damping": _run_stage("closedloop", timer, damping_summary, model_now, controllers,
                                                  cfg)})
    timer.add("online_simulation", t_sim)

    record = _assemble(stream, rel_parts, ctl_parts, cfg)
    report = RunReport(cfg, scenario, groupings, designs, detections, controllers, designs[-1]["damping"],
                       timings=timer.t, record=record)
    if out_dir is not None:
        write_artifacts(report, out_dir)
    return report


def _align(t: float, ts: float) -> float:
    return round(t / ts) * ts


def _assemble(stream: StreamBuffer, rel_parts, ctl_parts, cfg) -> dict:
    window = stream.window(len(stream))
    keys = list(rel_parts[0]) if rel_parts else []
    rel = {key: np.concatenate([p[key] for p in rel_parts]) for key in keys}
    names = sorted({key for p in ctl_parts for key in p})
    ctl = {}
    for g, u in names:
        ctl[f"{g}:u{u}"] = np.concatenate([p.get((g, u), np.zeros(len(rel_parts[i][keys[0]])))
                                           for i, p in enumerate(ctl_parts)])
    return {"window": window, "relative_speeds": rel, "controls": ctl}


def _write_series(path: Path, t, series: dict):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *series])
        cols = [series[k] for k in series]
        for i, ti in enumerate(t):
            w.writerow([repr(float(ti)), *(repr(float(c[i])) for c in cols)])


def write_artifacts(report: RunReport, out_dir) -> dict:
    """Write report.json, timings.json and the tidy CSV series."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = report.record
    arts = {}
    if rec:
        window = rec["window"]
        write_window_csv(out / "window.csv", window)
        _write_series(out / "relative_speeds.csv", window.times, rec["relative_speeds"])
        _write_series(out / "controls.csv", window.times, rec["controls"])
        arts.update({"window": "window.csv", "relative_speeds": "relative_speeds.csv", "controls": "controls.csv"})
    (out / "controllers.json").write_text(controllers_to_json(report.controllers))
    (out / "config.json").write_text(report.config.to_json())
    arts.update({"controllers": "controllers.json", "config": "config.json", "timings": "timings.json",
                 "report": "report.json"})
    report.artifacts = arts
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True))
    (out / "report.json").write_text(report.to_json())
    return arts


__all__ = [
    "PipelineError", "PipelineConfig", "Scenario", "quiet_scenario", "default_scenario", "post_fault_topology",
    "coherency_shift_scenario", "commission_record", "window_from", "stage_cluster", "probe_campaign",
    "stage_identify", "stage_select", "stage_synthesize", "stage_closedloop", "damping_summary", "RunReport",
    "run_pipeline", "write_artifacts", "write_probe_csv", "ProbeSignal", "WacController",
]

"""Command-line front end: one subcommand per pipeline stage plus ``run``.

Every command reads and writes the JSON/CSV formats of the owning modules.
On failure a JSON object ``{"error", "stage", "message"}`` is printed to
stderr and the exit code is nonzero (2 for usage errors, 1 otherwise).
Set ``WACGRID_LOG`` (e.g. ``INFO``) for log output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .coherency import CoherencyGrouping
from .measurements import (read_probe_csv, read_window_csv, write_probe_csv, write_window_csv)
from .modal import ControlLoopSelection
from .pipeline import (PipelineConfig, PipelineError, Scenario, default_scenario, probe_campaign, run_pipeline,
                       stage_closedloop, stage_cluster, stage_identify, stage_select, stage_synthesize,
                       window_from)
from .plant import Pulse, eigen_report_json, preset, settling_time, simulate
from .sysid import ArxCommonDen
from .wac import controllers_from_dict, controllers_to_json


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> PipelineConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    if getattr(args, "plant", None):
        d["plant"] = args.plant
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return PipelineConfig.from_dict(d)


def _emit(text: str, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + ("" if text.endswith("\n") else "\n"))
    else:
        sys.stdout.write(text + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def _parse_pulse(text: str) -> Pulse:
    parts = [p for p in text.split(",") if p]
    if not 2 <= len(parts) <= 4:
        raise UsageError(f"--pulse expects time,channel[,magnitude[,duration]], got {text!r}")
    vals = [float(parts[0]), int(parts[1])] + [float(x) for x in parts[2:]]
    return Pulse(*vals)


# -- commands ----------------------------------------------------------------

def cmd_simulate(args):
    cfg = _load_config(args)
    _, model = preset(cfg.plant)
    if args.probe:
        out = Path(args.out or "probe")
        out.mkdir(parents=True, exist_ok=True)
        outs, probes = probe_campaign(model, cfg)
        for pr in probes:
            write_window_csv(out / f"response_u{pr.machine}.csv", outs[pr.machine])
            write_probe_csv(out / f"probe_u{pr.machine}.csv", [pr])
        return {"written": sorted(p.name for p in out.iterdir())}
    pulses = [_parse_pulse(p) for p in args.pulse] if args.pulse else []
    res = simulate(model, cfg.ts, args.duration, disturbances=pulses, noise_std=cfg.noise_std,
                   noise_seed=cfg.seed)
    out = args.out or "window.csv"
    write_window_csv(out, res.window)
    return {"written": [str(out)], "samples": res.window.n}


def cmd_cluster(args):
    cfg = _load_config(args)
    if args.k is not None:
        cfg.k = args.k
    if args.l is not None:
        cfg.nystrom_l = args.l
    if args.sigma is not None:
        cfg.sigma = args.sigma
    window = read_window_csv(args.in_)
    if args.start is not None or args.n is not None:
        start = window.start_time if args.start is None else args.start
        n = args.n if args.n is not None else window.n - int(round((start - window.start_time) / window.ts))
        window = window_from(window, start, n)
    grouping = stage_cluster(window, cfg)
    _emit(grouping.to_json(timing=not args.no_timing), args.out)


def _load_identification_inputs(args):
    src = Path(args.in_)
    if src.is_dir():
        outs, probes = {}, []
        for f in sorted(src.glob("probe_u*.csv")):
            (pr,) = read_probe_csv(f)
            resp = src / f"response_u{pr.machine}.csv"
            if not resp.exists():
                raise FileNotFoundError(f"missing {resp}")
            outs[pr.machine] = read_window_csv(resp)
            probes.append(pr)
        if not probes:
            raise FileNotFoundError(f"{src}: no probe_u*.csv files")
        return outs, probes
    if not args.probe:
        raise UsageError("identify --in FILE needs --probe PROBE_CSV (simultaneous experiment)")
    return read_window_csv(src), read_probe_csv(args.probe)


def cmd_identify(args):
    cfg = _load_config(args)
    for name, attr in (("order", "arx_order"), ("N", "id_N"), ("tol", "id_tol"), ("max_iter", "id_max_iter")):
        if getattr(args, name) is not None:
            setattr(cfg, attr, getattr(args, name))
    outs, probes = _load_identification_inputs(args)
    model = stage_identify(outs, probes, cfg)
    _emit(model.to_json(), args.out)


def cmd_select(args):
    cfg = _load_config(args)
    if args.reject_below is not None:
        cfg.reject_below = args.reject_below
    model = ArxCommonDen.from_dict(_read_json(args.model))
    grouping = CoherencyGrouping.from_dict(_read_json(args.grouping))
    _, sel = stage_select(model, grouping, cfg)
    _emit(sel.to_json(), args.out)


def cmd_synthesize(args):
    cfg = _load_config(args)
    if args.rho is not None:
        cfg.rho = args.rho
    model = ArxCommonDen.from_dict(_read_json(args.model))
    sel = ControlLoopSelection.from_dict(_read_json(args.selection))
    ctls = stage_synthesize(model, sel, cfg)
    _emit(controllers_to_json(ctls), args.out)


def cmd_closedloop(args):
    cfg = _load_config(args)
    _, model = preset(cfg.plant)
    ctls = controllers_from_dict(_read_json(args.controllers))
    rep = stage_closedloop(model, ctls, cfg)
    out = {"inter_area": rep["inter_area"], "spectral_radius": rep["spectral_radius"], "ts": rep["ts"],
           "open": [{"hz": m["hz"], "zeta": m["zeta"]} for m in rep["open"]],
           "closed": [{"hz": m["hz"], "zeta": m["zeta"]} for m in rep["closed"]]}
    if args.pulse:
        pulses = [_parse_pulse(p) for p in args.pulse]
        t_start = min(p.time for p in pulses)
        res_o = simulate(model, cfg.ts, args.duration, disturbances=pulses)
        res_c = simulate(model, cfg.ts, args.duration, disturbances=pulses, controllers=ctls,
                         control_ts=cfg.control_ts)
        t = res_o.window.times
        out["settling_s"] = {k: {"open": settling_time(t, res_o.relative_speeds[k], start=t_start),
                                 "closed": settling_time(t, res_c.relative_speeds[k], start=t_start)}
                             for k in res_o.relative_speeds}
        out["u_max"] = max((float(abs(v).max()) for v in res_c.controls.values()), default=0.0)
    _emit(json.dumps(out, indent=2), args.out)


def cmd_run(args):
    cfg = _load_config(args)
    scenario = Scenario.from_dict(_read_json(args.scenario)) if args.scenario else default_scenario(cfg.plant)
    report = run_pipeline(cfg, scenario, args.out)
    summary = {
        "out": str(args.out) if args.out else None,
        "regroupings": report.regroupings,
        "groups": report.final_grouping(),
        "loops": report.designs[-1]["selection"]["loops"],
        "damping": report.damping,
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")


def cmd_modes(args):
    cfg = _load_config(args)
    _, model = preset(cfg.plant)
    _emit(eigen_report_json(model), args.out)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wacgrid", description="Coherency grouping, identification and wide-area control stages.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, plant=True):
        sp.add_argument("--config", help="pipeline configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file (or directory)")
        if plant:
            sp.add_argument("--plant", choices=["twoarea", "tenmachine"])
        return sp

    sp = common(sub.add_parser("simulate", help="simulate a plant ringdown or a probing campaign"))
    sp.add_argument("--duration", type=float, default=30.0)
    sp.add_argument("--pulse", action="append", help="time,channel[,magnitude[,duration]] (repeatable)")
    sp.add_argument("--probe", action="store_true", help="write a sequential PRBS campaign to the --out directory")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("cluster", help="coherency grouping of a window CSV"), plant=False)
    sp.add_argument("--in", dest="in_", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--l", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--start", type=float, help="window start time (s)")
    sp.add_argument("--n", type=int, help="window length (samples)")
    sp.add_argument("--no-timing", action="store_true", help="omit elapsed_s for reproducible output")
    sp.set_defaults(func=cmd_cluster)

    sp = common(sub.add_parser("identify", help="common-denominator ARX identification"), plant=False)
    sp.add_argument("--in", dest="in_", required=True, help="probe directory or response CSV")
    sp.add_argument("--probe", help="probe CSV for a simultaneous experiment")
    sp.add_argument("--order", type=int)
    sp.add_argument("--N", type=int)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", dest="max_iter", type=int)
    sp.set_defaults(func=cmd_identify)

    sp = common(sub.add_parser("select", help="dominant mode, residues and loop selection"), plant=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--grouping", required=True)
    sp.add_argument("--reject-below", dest="reject_below", type=float)
    sp.set_defaults(func=cmd_select)

    sp = common(sub.add_parser("synthesize", help="LQR + Kalman controllers for selected loops"), plant=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--selection", required=True)
    sp.add_argument("--rho", type=float)
    sp.set_defaults(func=cmd_synthesize)

    sp = common(sub.add_parser("closedloop", help="open- vs closed-loop damping report"))
    sp.add_argument("--controllers", required=True)
    sp.add_argument("--pulse", action="append", help="also simulate this pulse and report settling times")
    sp.add_argument("--duration", type=float, default=100.0)
    sp.set_defaults(func=cmd_closedloop)

    sp = common(sub.add_parser("run", help="full online pipeline"))
    sp.add_argument("--scenario", help="scenario JSON (default: one fault pulse)")
    sp.set_defaults(func=cmd_run)

    sp = common(sub.add_parser("modes", help="eigen report of a plant preset"))
    sp.set_defaults(func=cmd_modes)
    return p


def main(argv=None) -> int:
    level = os.environ.get("WACGRID_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    stage = "cli"
    try:
        args = build_parser().parse_args(argv)
        stage = args.command
        result = args.func(args)
        if result is not None:
            sys.stdout.write(json.dumps(result) + "\n")
        return 0
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage", "stage": stage, "message": str(exc)}) + "\n")
        return 2
    except PipelineError as exc:
        sys.stderr.write(json.dumps({"error": "stage_failed", "stage": exc.stage, "message": exc.message}) + "\n")
        return 1
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "stage": stage, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

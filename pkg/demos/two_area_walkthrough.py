"""Commission wide-area damping controllers on the two-area analogue, stage by stage.

Run: python3 demos/two_area_walkthrough.py
"""

import numpy as np

from wacgrid.pipeline import (PipelineConfig, commission_record, default_scenario, probe_campaign, stage_cluster,
                              stage_identify, stage_select, stage_synthesize, window_from)
from wacgrid.plant import Pulse, closed_loop_eigen, preset, settling_time, simulate


def main():
    cfg = PipelineConfig()
    _, model = preset("twoarea")
    ia = model.inter_area_modes()[0]
    print(f"open-loop inter-area mode: {ia['hz']:.4f} Hz, zeta {ia['zeta']:.4f}")

    # coherency grouping from a ringdown
    record = commission_record(model, cfg, default_scenario("twoarea"))
    window = window_from(record, 0.5 + cfg.cluster_skip, cfg.window_n)
    grouping = stage_cluster(window, cfg)
    print(f"groups: {grouping.groups}  ({grouping.elapsed * 1e3:.2f} ms)")

    # probing, identification, modal analysis and loop selection
    outs, probes = probe_campaign(model, cfg)
    arx = stage_identify(outs, probes, cfg)
    print(f"ARX order {arx.order_k}: fit {arx.fit:.2e} after {arx.iterations} iterations")
    red, sel = stage_select(arx, grouping, cfg)
    print(f"reduced to {len(red.z_poles)} poles; dominant mode {sel.matrix.mode.frequency:.4f} Hz")
    for c in sel.loops:
        print(f"  group {c.group}: measure machine {c.output}, actuate machine {c.input} (residue {c.residue:.3f})")

    # controllers and closed loop
    controllers = stage_synthesize(arx, sel, cfg)
    rep = closed_loop_eigen(model, controllers, cfg.control_ts)
    print(f"closed-loop least-damped inter-area mode: zeta {rep['inter_area']['closed_band_min']['zeta']:.4f}")

    pulse = [Pulse(1.0, 3, 0.5, 0.1)]
    open_run = simulate(model, cfg.ts, 60.0, disturbances=pulse)
    closed_run = simulate(model, cfg.ts, 60.0, disturbances=pulse, controllers=controllers, control_ts=cfg.control_ts)
    t = open_run.window.times
    for key in ("1-3", "2-4"):
        to = settling_time(t, open_run.relative_speeds[key], start=1.0)
        tc = settling_time(t, closed_run.relative_speeds[key], start=1.0)
        print(f"settling of speed {key}: {to:.1f} s open, {tc:.1f} s closed")
    peak = max(float(np.max(np.abs(u))) for u in closed_run.controls.values())
    print(f"peak control effort {peak:.2e} pu")


if __name__ == "__main__":
    main()

"""Online run where a line trip moves the coherent groups; the pipeline regroups
and redesigns the loops.

Run: python3 demos/coherency_shift_online.py [OUT_DIR]
"""

import sys

from wacgrid.pipeline import PipelineConfig, coherency_shift_scenario, run_pipeline


def main(out_dir=None):
    report = run_pipeline(PipelineConfig(), coherency_shift_scenario(), out_dir)
    for det in report.detections:
        print(f"disturbance detected at {det['time']:.2f} s on machine {det['machine']}")
    for g, d in zip(report.groupings, report.designs):
        when = "commissioning" if g["time"] is None else f"t = {g['time']:.2f} s"
        loops = [(lp["output"], lp["input"]) for lp in d["selection"]["loops"]]
        print(f"{when}: groups {g['grouping']['groups']}, loops {loops}, "
              f"resynthesized {d['resynthesized']}")
    print(f"regroupings: {report.regroupings}")
    dmp = report.damping
    print(f"final inter-area zeta: open {dmp['open']['zeta']:.4f}, closed {dmp['closed_band_min']['zeta']:.4f}")
    if out_dir:
        print(f"artifacts written to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)

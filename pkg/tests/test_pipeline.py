import json

import numpy as np
import pytest

from wacgrid.pipeline import (PipelineConfig, PipelineError, Scenario, default_scenario, quiet_scenario, run_pipeline,
                              window_from)
from wacgrid.plant import Pulse


@pytest.fixture(scope="module")
def default_run():
    return run_pipeline(PipelineConfig(), default_scenario("twoarea"))


class TestDefaultRun:
    def test_grouping(self, default_run):
        assert default_run.config.k == 2
        parts = {frozenset(v) for v in default_run.final_grouping().values()}
        assert parts == {frozenset({1, 2}), frozenset({3, 4})}

    def test_one_loop_per_group(self, default_run):
        loops = default_run.designs[-1]["selection"]["loops"]
        assert sorted(lp["group"] for lp in loops) == [1, 2]
        groups = default_run.final_grouping()
        for lp in loops:
            assert lp["output"] in groups[str(lp["group"])]

    def test_damping_improves(self, default_run):
        d = default_run.damping
        assert d["closed_band_min"]["zeta"] > d["open"]["zeta"]
        assert d["closed_tracked"]["zeta"] > d["open"]["zeta"]

    def test_fault_detected_and_regrouped(self, default_run):
        assert len(default_run.detections) == 1
        assert default_run.detections[0]["time"] >= 13.0
        assert default_run.regroupings == 1
        assert default_run.resyntheses == 0

    def test_controls_saturated(self, default_run):
        ctl = default_run.record["controls"]
        assert ctl and all(np.max(np.abs(v)) <= default_run.config.u_limit for v in ctl.values())

    def test_report_is_json(self, default_run):
        d = json.loads(default_run.to_json())
        assert d["regroupings"] == default_run.regroupings
        assert "timings" not in d


def test_quiet_scenario_single_grouping():
    rep = run_pipeline(PipelineConfig(), quiet_scenario(20.0))
    assert rep.regroupings == 0 and rep.detections == []
    assert len(rep.designs) == 1


def test_stage_failure_names_stage():
    with pytest.raises(PipelineError) as exc:
        run_pipeline(PipelineConfig(k=5), quiet_scenario(5.0))
    assert exc.value.stage == "cluster"


def test_artifacts_written(tmp_path):
    run_pipeline(PipelineConfig(), quiet_scenario(5.0), tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"report.json", "timings.json", "window.csv", "relative_speeds.csv", "controls.csv", "controllers.json",
            "config.json"} <= names
    header = (tmp_path / "relative_speeds.csv").read_text().splitlines()[0]
    assert header.startswith("time,1-2,")


class TestConfig:
    def test_roundtrip(self):
        cfg = PipelineConfig(plant="tenmachine", rho=3.0, band=(0.2, 0.7))
        back = PipelineConfig.from_dict(json.loads(cfg.to_json()))
        assert back.to_dict() == cfg.to_dict()
        assert back.k == 4

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            PipelineConfig.from_dict({"rho": 1.0, "gamma": 2.0})

    def test_invalid_periods(self):
        with pytest.raises(ValueError):
            PipelineConfig(control_ts=0.015)
        with pytest.raises(ValueError):
            PipelineConfig(trigger_window=0.25)

    def test_scenario_roundtrip(self):
        sc = Scenario(40.0, [Pulse(5.0, 2, 0.3, 0.2, "fault", np.eye(2) - 0.5)], 2, name="x")
        back = Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
        assert back.to_dict() == sc.to_dict()

    def test_window_from_bounds(self, commissioned):
        w = commissioned["window"]
        assert window_from(w, w.start_time, w.n).n == w.n
        with pytest.raises(ValueError):
            window_from(w, w.start_time, w.n + 1)

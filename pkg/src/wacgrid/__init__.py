"""Measurement-based coherency grouping, common-denominator ARX
identification, residue-based loop selection and LQR/Kalman wide-area
damping control, with a linearized multi-machine plant for experiments."""

from .coherency import CoherencyGrouping, group_machines
from .measurements import MeasurementWindow, ProbeSignal, StreamBuffer, detect_disturbance, probe_signal
from .modal import (ControlLoopSelection, ModalDecomposition, decompose, dominant_mode, partial_fractions,
                    reduce_order, residue_matrix_at_mode, select_loops)
from .pipeline import PipelineConfig, RunReport, Scenario, run_pipeline
from .plant import build_ten_machine, build_two_area, closed_loop_eigen, simulate
from .sysid import ArxCommonDen, identify
from .wac import WacController, dlqr, realize, synthesize

__version__ = "0.1.0"

__all__ = [
    "CoherencyGrouping", "group_machines", "MeasurementWindow", "ProbeSignal", "StreamBuffer",
    "detect_disturbance", "probe_signal", "ControlLoopSelection", "ModalDecomposition", "decompose",
    "dominant_mode", "partial_fractions", "reduce_order", "residue_matrix_at_mode", "select_loops",
    "PipelineConfig", "RunReport", "Scenario", "run_pipeline", "build_ten_machine", "build_two_area",
    "closed_loop_eigen", "simulate", "ArxCommonDen", "identify", "WacController", "dlqr", "realize",
    "synthesize",
]
